"""Pre-trained model pools and the CLoM / CCLoM supervision losses."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .models import (ArchitectureSpec, ModelCheckpoint, PretrainSchedule, forward,
                     load_checkpoint, pretrain, save_checkpoint)

LOSS_KINDS = ("none", "clom", "cclom")
DENOMINATOR_FLOOR = 1e-8


class DegenerateFeatureWarning(UserWarning):
    """CCLoM skipped: the feature distance matrix sums to (almost) zero."""


@dataclass(frozen=True)
class SupervisionConfig:
    kind: str = "none"
    alpha: float = 0.5
    real_batch: int = 64
    ensemble: bool = False
    epochs: tuple[int, ...] | None = None  # active epoch slice of the pool

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"unknown supervision loss {self.kind!r}")
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if self.epochs is not None:
            object.__setattr__(self, "epochs", tuple(int(e) for e in self.epochs))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "alpha": self.alpha, "real_batch": self.real_batch,
                "ensemble": self.ensemble,
                "epochs": list(self.epochs) if self.epochs is not None else None}


@dataclass(frozen=True)
class PretrainedPool:
    """Checkpoints over seeds x architectures x snapshot epochs from one source."""

    checkpoints: tuple[ModelCheckpoint, ...]
    source: str = ""
    active_epochs: tuple[int, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "checkpoints", tuple(self.checkpoints))
        if self.checkpoints:
            ref = self.checkpoints[0].spec
            for ck in self.checkpoints[1:]:
                if ck.spec.input_shape != ref.input_shape:
                    raise ValueError("pool checkpoints must share an input shape")
                if ck.spec.num_classes != ref.num_classes:
                    raise ValueError("pool checkpoints from one source must share class count")

    def __len__(self) -> int:
        return len(self.checkpoints)

    @property
    def seeds(self) -> list[int]:
        return sorted({c.provenance.seed for c in self.checkpoints})

    @property
    def archs(self) -> list[str]:
        return sorted({c.spec.arch_id for c in self.checkpoints})

    @property
    def epochs(self) -> list[int]:
        return sorted({c.provenance.epoch for c in self.checkpoints})

    @property
    def n_seeds(self) -> int:
        return len(self.seeds)

    @property
    def n_archs(self) -> int:
        return len(self.archs)

    @property
    def num_classes(self) -> int:
        return self.checkpoints[0].spec.num_classes

    @property
    def fully_populated(self) -> bool:
        return len(self) == self.n_seeds * self.n_archs * len(self.epochs)

    def active(self) -> list[ModelCheckpoint]:
        if self.active_epochs is None:
            return list(self.checkpoints)
        keep = set(self.active_epochs)
        return [c for c in self.checkpoints if c.provenance.epoch in keep]

    def select(self, seeds: Sequence[int] | None = None, archs: Sequence[str] | None = None,
               epochs: Sequence[int] | None = None) -> "PretrainedPool":
        """Sub-pool restricted to the given seeds, architecture ids and epochs."""
        out = [c for c in self.checkpoints
               if (seeds is None or c.provenance.seed in seeds)
               and (archs is None or c.spec.arch_id in archs)
               and (epochs is None or c.provenance.epoch in epochs)]
        return PretrainedPool(tuple(out), self.source)

    def with_active(self, epochs: Sequence[int] | None) -> "PretrainedPool":
        return PretrainedPool(self.checkpoints, self.source,
                              tuple(epochs) if epochs is not None else None)


def build_pool(specs: Sequence[ArchitectureSpec], seeds: Sequence[int], dataset,
               schedule: PretrainSchedule | None = None) -> PretrainedPool:
    checkpoints = []
    for spec in specs:
        for seed in seeds:
            checkpoints.extend(pretrain(spec, seed, dataset, schedule))
    return PretrainedPool(tuple(checkpoints), dataset.domain)


def sample_model(pool: PretrainedPool, rng: np.random.Generator) -> ModelCheckpoint:
    """Uniform draw over the pool's active checkpoints."""
    active = pool.active()
    if not active:
        raise ValueError("cannot sample from an empty pool")
    return active[int(rng.integers(len(active)))]


def clom(model: ModelCheckpoint, syn, labels) -> Tensor:
    """Mean cross-entropy of a frozen model on the synthetic images."""
    labels = np.asarray(labels)
    if labels.size and labels.max() >= model.spec.num_classes:
        raise ValueError(f"model has {model.spec.num_classes} classes but synthetic labels reach "
                         f"{labels.max()}; use cclom for mismatched label spaces")
    logits, _ = forward(model, syn)
    return ad.cross_entropy(logits, labels)


def correspondence_matrix(real_labels, syn_labels) -> np.ndarray:
    """``M[i, j] = 1`` iff synthetic label ``i`` equals real label ``j`` (|S| x |B|)."""
    real = np.asarray(real_labels)
    syn = np.asarray(syn_labels)
    return (syn[:, None] == real[None, :]).astype(np.float64)


def cosine_distance_matrix(feat_syn, feat_real) -> Tensor:
    """``1 - cos`` between every synthetic row and every real row."""
    s = ad.normalize_rows(feat_syn)
    r = ad.normalize_rows(feat_real)
    return 1.0 - ad.matmul(s, ad.transpose(r))


def contrastive_ratio(feat_syn, syn_labels, feat_real, real_labels) -> Tensor | None:
    """Same-class share of the total synthetic-to-real cosine distance."""
    d = cosine_distance_matrix(feat_syn, feat_real)
    total = ad.tsum(d)
    if float(total.data) < DENOMINATOR_FLOOR:
        warnings.warn("CCLoM skipped: feature distance matrix sums to ~0",
                      DegenerateFeatureWarning, stacklevel=2)
        return None
    m = Tensor(correspondence_matrix(real_labels, syn_labels))
    return ad.tsum(d * m) / total


def cclom(model: ModelCheckpoint, real_images, real_labels, syn, syn_labels) -> Tensor | None:
    """Contrastive supervision from a frozen model with any label space.

    Returns ``None`` (with a :class:`DegenerateFeatureWarning`) when the
    features carry no distance signal.
    """
    with ad.no_grad():
        _, f_real = forward(model, real_images)
    _, f_syn = forward(model, syn)
    return contrastive_ratio(f_syn, syn_labels, f_real.data, real_labels)


# ------------------------------------------------------------ persistence


def save_pool(directory, pool: PretrainedPool) -> Path:
    """Write every checkpoint plus ``pool.json`` listing paths and provenance tags."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for ck in pool.checkpoints:
        p = ck.provenance
        name = f"{ck.spec.arch_id}_s{p.seed}_e{p.epoch}.ckpt"
        save_checkpoint(directory / name, ck)
        entries.append({"path": name, "seed": p.seed, "arch": ck.spec.arch_id,
                        "epoch": p.epoch, "source": p.source})
    manifest = directory / "pool.json"
    manifest.write_text(json.dumps({"source": pool.source, "checkpoints": entries}, indent=2))
    return manifest


def load_pool(manifest) -> PretrainedPool:
    """Load a pool manifest, checking every tag against the checkpoint's provenance."""
    manifest = Path(manifest)
    if manifest.is_dir():
        manifest = manifest / "pool.json"
    record = json.loads(manifest.read_text())
    checkpoints = []
    for entry in record["checkpoints"]:
        ck = load_checkpoint(manifest.parent / entry["path"])
        p = ck.provenance
        found = {"seed": p.seed, "arch": ck.spec.arch_id, "epoch": p.epoch, "source": p.source}
        wanted = {k: entry[k] for k in found}
        if found != wanted:
            raise ValueError(f"{entry['path']}: manifest tags {wanted} != checkpoint {found}")
        checkpoints.append(ck)
    return PretrainedPool(tuple(checkpoints), record.get("source", ""))


def merge_pools(pools: Sequence[PretrainedPool]) -> PretrainedPool:
    cks = [c for p in pools for c in p.checkpoints]
    return PretrainedPool(tuple(cks), pools[0].source if pools else "")
