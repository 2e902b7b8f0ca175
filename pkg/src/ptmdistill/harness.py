"""Train-on-synthetic evaluation, cross-architecture reports and feature export."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import augment
from . import autodiff as ad
from .augment import AugmentConfig
from .data import LabeledDataset, SyntheticDataset
from .models import (ArchitectureSpec, ModelCheckpoint, PretrainSchedule, TrainingDiverged,
                     accuracy, build, extract_features, pretrain, train_step)
from .optim import SGD

MAX_FAILED = 1


@dataclass(frozen=True)
class EvalConfig:
    epochs: int = 200
    batch_size: int = 64
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    decay_epoch: int = 100
    decay_factor: float = 0.1
    augment: AugmentConfig | None = field(default_factory=AugmentConfig)
    seed: int = 0

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["augment"] = self.augment.to_dict() if self.augment else None
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "EvalConfig":
        d = dict(d)
        if d.get("augment") is not None:
            d["augment"] = AugmentConfig.from_dict(d["augment"])
        return cls(**d)


def pixel_hash(images: np.ndarray) -> str:
    a = np.ascontiguousarray(images, dtype="<f8")
    return hashlib.sha256(repr(a.shape).encode() + a.tobytes()).hexdigest()


def fingerprint(config: EvalConfig, arch: ArchitectureSpec, images: np.ndarray) -> str:
    record = json.dumps({"config": config.to_dict(), "arch": arch.to_dict(),
                         "pixels": pixel_hash(images)}, sort_keys=True)
    return hashlib.sha256(record.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class EvalReport:
    accuracies: tuple[float, ...]
    mean: float
    std: float
    arch: str
    fingerprint: str
    failed: tuple[int, ...] = ()

    @classmethod
    def from_accuracies(cls, accuracies: Sequence[float], arch: str, fingerprint: str,
                        failed: Sequence[int] = ()) -> "EvalReport":
        acc = tuple(float(a) for a in accuracies)
        mean, std = _aggregate(acc)
        return cls(acc, mean, std, arch, fingerprint, tuple(failed))

    @property
    def valid(self) -> bool:
        return len(self.failed) <= MAX_FAILED and len(self.accuracies) > 0

    def to_dict(self) -> dict:
        return {"accuracies": list(self.accuracies), "mean": self.mean, "std": self.std,
                "arch": self.arch, "fingerprint": self.fingerprint,
                "failed": list(self.failed), "valid": self.valid}

    @classmethod
    def from_dict(cls, d: Mapping) -> "EvalReport":
        return cls(tuple(d["accuracies"]), d["mean"], d["std"], d["arch"], d["fingerprint"],
                   tuple(d.get("failed", ())))


def _aggregate(acc: Sequence[float]) -> tuple[float, float]:
    if not acc:
        return float("nan"), float("nan")
    a = np.asarray(acc, dtype=np.float64)
    return float(a.mean()), float(a.std())


def _repeat_seed(seed: int, repeat: int) -> int:
    return int(np.random.SeedSequence([seed, repeat, 7]).generate_state(1)[0])


def train_on(images: np.ndarray, labels: np.ndarray, arch: ArchitectureSpec, seed: int,
             config: EvalConfig = EvalConfig()) -> ModelCheckpoint:
    """Fresh model trained on (images, labels) with per-batch DSA-family augmentation."""
    model = build(arch, seed)
    params = {k: v.copy() for k, v in model.params.items()}
    opt = SGD(config.lr, config.momentum, config.weight_decay)
    rng = np.random.default_rng([seed, 3])
    n = len(labels)
    for epoch in range(config.epochs):
        opt.lr = config.lr * (config.decay_factor if epoch >= config.decay_epoch else 1.0)
        order = rng.permutation(n)
        for i in range(0, n, config.batch_size):
            idx = order[i:i + config.batch_size]
            x = images[idx]
            if config.augment is not None:
                p = augment.sample_params(config.augment, rng, x.shape[2:])
                with ad.no_grad():
                    x = augment.apply(x, p).data
            loss = train_step(arch, params, opt, x, labels[idx])
            if not np.isfinite(loss):
                raise TrainingDiverged(epoch + 1, loss)
    return model.replace(params=params)


def _check_geometry(images_shape, num_classes, test: LabeledDataset, arch: ArchitectureSpec):
    if tuple(images_shape) != test.image_shape or num_classes != test.num_classes:
        raise ValueError(f"training data {tuple(images_shape)}/{num_classes} classes does not "
                         f"match test set {test.image_shape}/{test.num_classes}")
    if arch.input_shape != test.image_shape or arch.num_classes != test.num_classes:
        raise ValueError(f"architecture {arch.arch_id} does not fit the test set")


def evaluate(S: SyntheticDataset | LabeledDataset, test: LabeledDataset, arch: ArchitectureSpec,
             repeats: int = 5, config: EvalConfig = EvalConfig()) -> EvalReport:
    """Train ``repeats`` fresh models on ``S`` and report their test accuracies.

    A repeat whose training loss turns non-finite is recorded in ``failed``
    and left out of the aggregates; the report is invalid if more than one
    repeat fails.
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    _check_geometry(S.image_shape, S.num_classes, test, arch)
    images = np.array(S.images)  # private copy: evaluation never touches S
    labels = np.array(S.labels)
    acc, failed = [], []
    for r in range(repeats):
        try:
            model = train_on(images, labels, arch, _repeat_seed(config.seed, r), config)
        except TrainingDiverged:
            failed.append(r)
            continue
        acc.append(accuracy(model, test.images, test.labels))
    return EvalReport.from_accuracies(acc, arch.arch_id, fingerprint(config, arch, S.images),
                                      failed)


def direct_training(train: LabeledDataset, test: LabeledDataset, arch: ArchitectureSpec,
                    seed: int = 0, schedule: PretrainSchedule | None = None) -> float:
    """Test accuracy of a model trained conventionally on the full training set."""
    schedule = schedule or PretrainSchedule(snapshots=(PretrainSchedule().epochs,))
    (model,) = pretrain(arch, seed, train, schedule)[-1:]
    return accuracy(model, test.images, test.labels)


@dataclass(frozen=True)
class CrossArchReport:
    reports: dict[str, EvalReport]
    baselines: dict[str, float]

    @property
    def gains(self) -> dict[str, float]:
        return {a: self.reports[a].mean - self.baselines[a] for a in sorted(self.reports)}

    @property
    def avg_gain(self) -> float:
        g = list(self.gains.values())
        return float(np.mean(g))

    def to_dict(self) -> dict:
        return {"reports": {a: r.to_dict() for a, r in sorted(self.reports.items())},
                "baselines": dict(sorted(self.baselines.items())),
                "gains": self.gains, "avg_gain": self.avg_gain}

    @classmethod
    def from_dict(cls, d: Mapping) -> "CrossArchReport":
        return cls({a: EvalReport.from_dict(r) for a, r in d["reports"].items()},
                   dict(d["baselines"]))


def _baseline_mean(b) -> float:
    if isinstance(b, EvalReport):
        return b.mean
    if isinstance(b, Mapping):
        return float(b["mean"])
    return float(b)


def cross_arch_eval(S, test: LabeledDataset, archs: Sequence[ArchitectureSpec],
                    baselines: Mapping[str, EvalReport | float], repeats: int = 5,
                    config: EvalConfig = EvalConfig()) -> CrossArchReport:
    """Evaluate ``S`` on every architecture and compare with baseline means."""
    if not archs:
        raise ValueError("architecture list is empty")
    missing = [a.arch_id for a in archs if a.arch_id not in baselines]
    if missing:
        raise KeyError(f"no baseline report for {missing}")
    reports = {a.arch_id: evaluate(S, test, a, repeats, config) for a in archs}
    return CrossArchReport(reports, {a.arch_id: _baseline_mean(baselines[a.arch_id])
                                     for a in archs})


def save_report(path, report: EvalReport | CrossArchReport) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    kind = "cross_arch" if isinstance(report, CrossArchReport) else "eval"
    path.write_text(json.dumps({"type": kind, **report.to_dict()}, indent=2, sort_keys=True))
    return path


def load_report(path) -> EvalReport | CrossArchReport:
    d = json.loads(Path(path).read_text())
    if d.get("type") == "cross_arch":
        return CrossArchReport.from_dict(d)
    return EvalReport.from_dict(d)


def export_features(model: ModelCheckpoint, data: LabeledDataset | SyntheticDataset,
                    path) -> Path:
    """CSV with header ``label,f0,...`` and one row per image."""
    if model.spec.input_shape != data.image_shape:
        raise ValueError(f"model expects {model.spec.input_shape}, data is {data.image_shape}")
    feats = extract_features(model, data.images)
    path = Path(path)
    lines = [",".join(["label"] + [f"f{i}" for i in range(feats.shape[1])])]
    for y, row in zip(data.labels, feats):
        lines.append(",".join([str(int(y))] + [repr(float(v)) for v in row]))
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write features to {path}: {exc}") from exc
    return path
