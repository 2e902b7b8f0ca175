"""Outer optimisation of synthetic pixels: base matching loss plus an
alpha-weighted pre-trained-model supervision term."""

from __future__ import annotations

import csv
import dataclasses
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import __version__
from . import autodiff as ad
from .augment import AugmentConfig
from .data import (LabeledDataset, SyntheticDataset, init_synthetic, sample_batch,
                   sample_class_batch, save_synthetic)
from .matchers import MatcherConfig, dc_loss, dm_loss, dsa_loss, inner_update
from .models import ArchitectureSpec, build, desk_arch
from .optim import SGD
from .supervision import PretrainedPool, SupervisionConfig, cclom, clom, sample_model

DEFAULT_ALPHA = 0.5
DEFAULT_PIXEL_LR = {"dc": 0.1, "dsa": 0.1, "dm": 1.0}


class DistillDiverged(FloatingPointError):
    def __init__(self, iteration: int, components: dict):
        super().__init__(f"non-finite total loss at iteration {iteration}: {components}")
        self.iteration = iteration
        self.components = components


@dataclass(frozen=True)
class Seeds:
    data: int = 0
    model: int = 0
    augment: int = 0
    pool: int = 0
    init: int = 0


@dataclass(frozen=True)
class DistillJob:
    matcher: MatcherConfig = field(default_factory=MatcherConfig)
    supervision: SupervisionConfig = field(default_factory=SupervisionConfig)
    ipc: int = 10
    init: str = "real-sample"
    arch: ArchitectureSpec | None = None  # distillation backbone; None -> desk conv-net
    pixel_lr: float | None = None
    pixel_momentum: float = 0.5
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    seeds: Seeds = field(default_factory=Seeds)
    data_path: str | None = None
    pool_path: str | None = None

    @property
    def lr(self) -> float:
        return self.pixel_lr if self.pixel_lr is not None else DEFAULT_PIXEL_LR[self.matcher.kind]

    def replace(self, **changes) -> "DistillJob":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return {
            "matcher": self.matcher.to_dict(),
            "supervision": self.supervision.to_dict(),
            "ipc": self.ipc,
            "init": self.init,
            "arch": self.arch.to_dict() if self.arch else None,
            "pixel_lr": self.pixel_lr,
            "pixel_momentum": self.pixel_momentum,
            "augment": self.augment.to_dict(),
            "seeds": dataclasses.asdict(self.seeds),
            "data_path": self.data_path,
            "pool_path": self.pool_path,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DistillJob":
        sup = dict(d.get("supervision", {}))
        return cls(
            matcher=MatcherConfig(**d.get("matcher", {})),
            supervision=SupervisionConfig(**sup),
            ipc=d.get("ipc", 10),
            init=d.get("init", "real-sample"),
            arch=ArchitectureSpec.from_dict(d["arch"]) if d.get("arch") else None,
            pixel_lr=d.get("pixel_lr"),
            pixel_momentum=d.get("pixel_momentum", 0.5),
            augment=AugmentConfig.from_dict(d.get("augment", {})),
            seeds=Seeds(**d.get("seeds", {})),
            data_path=d.get("data_path"),
            pool_path=d.get("pool_path"),
        )


@dataclass(frozen=True)
class LogRow:
    iteration: int
    base_loss: float
    supervision_loss: float
    total_loss: float


@dataclass
class DistillResult:
    synthetic: SyntheticDataset
    log: list[LogRow]
    supervision: SupervisionConfig
    snapshots: list[np.ndarray] = field(default_factory=list)


def resolve_alpha(config: SupervisionConfig | None = None, grid: Sequence[float] | None = None):
    """Configured alpha, or one supervision config per grid value for a sweep."""
    if grid is not None:
        if not len(grid):
            raise ValueError("ablation grid is empty")
        if any(a < 0 for a in grid):
            raise ValueError(f"negative alpha in grid {list(grid)}")
        base = config or SupervisionConfig(kind="clom")
        return [dataclasses.replace(base, alpha=float(a)) for a in grid]
    if config is None:
        return DEFAULT_ALPHA
    if config.alpha < 0:
        raise ValueError(f"alpha must be >= 0, got {config.alpha}")
    return config.alpha


def resolve_supervision(job: DistillJob, train: LabeledDataset,
                        pool: PretrainedPool | None) -> SupervisionConfig:
    """Validate pool presence; CLoM with a cross-domain pool becomes CCLoM."""
    sup = job.supervision
    if sup.kind == "none":
        if pool is not None:
            raise ValueError("a pool was given but supervision kind is 'none'")
        return sup
    if pool is None or not len(pool):
        raise ValueError(f"supervision {sup.kind!r} needs a nonempty pool")
    if pool.checkpoints[0].spec.input_shape != train.image_shape:
        raise ValueError(f"pool input {pool.checkpoints[0].spec.input_shape} does not match "
                         f"data {train.image_shape}")
    cross = pool.source != train.domain or pool.num_classes != train.num_classes
    if sup.kind == "clom" and cross:
        warnings.warn(f"pool source {pool.source!r} differs from target {train.domain!r}; "
                      "using cclom", stacklevel=2)
        sup = dataclasses.replace(sup, kind="cclom")
    return sup


def _model_seed(job: DistillJob, counter: int) -> int:
    return int(np.random.SeedSequence([job.seeds.model, counter]).generate_state(1)[0])


def run(job: DistillJob, train: LabeledDataset, pool: PretrainedPool | None = None,
        on_step: Callable[[LogRow], None] | None = None,
        snapshot_every: int = 0) -> DistillResult:
    """Distil ``train`` into ``job.ipc`` images per class."""
    cfg = job.matcher
    sup = resolve_supervision(job, train, pool)
    if sup.epochs is not None and pool is not None:
        pool = pool.with_active(sup.epochs)
    arch = job.arch or desk_arch("conv-net", train.image_shape, train.num_classes)
    if not (arch.input_shape == train.image_shape and arch.num_classes == train.num_classes):
        raise ValueError(f"backbone {arch.arch_id} does not fit the dataset")

    syn = init_synthetic(train, job.ipc, job.init, job.seeds.init)
    labels = syn.labels
    pixels = syn.images.copy()
    momentum_buf = np.zeros_like(pixels)
    data_rng = np.random.default_rng([job.seeds.data, 11])
    aug_rng = np.random.default_rng([job.seeds.augment, 13])
    pool_rng = np.random.default_rng([job.seeds.pool, 17])
    log: list[LogRow] = []
    snapshots: list[np.ndarray] = []

    net = None
    net_opt = None
    for it in range(cfg.iterations):
        if cfg.kind == "dm":
            net = build(arch, _model_seed(job, it))
        elif it % cfg.reinit_every == 0:
            net = build(arch, _model_seed(job, it))
            net_opt = SGD(cfg.inner_lr, cfg.inner_momentum)

        S = ad.Tensor(pixels, requires_grad=True)
        real = [sample_class_batch(train, c, cfg.real_batch, data_rng)
                for c in range(train.num_classes)]
        if cfg.kind == "dm":
            base = dm_loss(net, S, labels, real, cfg.whole_set)
        elif cfg.kind == "dc":
            base = dc_loss((arch, net.tensors(trainable=True)), S, labels, real,
                           whole_set=cfg.whole_set)
        else:
            base = dsa_loss((arch, net.tensors(trainable=True)), S, labels, real, job.augment,
                            aug_rng, whole_set=cfg.whole_set)

        sup_term = None
        if sup.kind != "none":
            with ad.no_grad() if sup.alpha == 0 else _nullcontext():
                sup_term = _supervision_term(sup, pool, pool_rng, train, S, labels)
        base_val = float(base.data)
        sup_val = float(sup_term.data) if sup_term is not None else 0.0
        if sup_term is not None and sup.alpha != 0:
            total = base + sup_term * sup.alpha
        else:
            total = base
        total_val = float(total.data)
        if not np.isfinite(total_val):
            raise DistillDiverged(it, {"base": base_val, "supervision": sup_val})

        (g,) = ad.grad(total, [S])
        momentum_buf = job.pixel_momentum * momentum_buf + g.data
        pixels = np.clip(pixels - job.lr * momentum_buf, 0.0, 1.0)

        row = LogRow(it, base_val, sup_val, total_val)
        log.append(row)
        if on_step is not None:
            on_step(row)
        if snapshot_every and (it + 1) % snapshot_every == 0:
            snapshots.append(pixels.copy())

        if cfg.kind != "dm" and cfg.inner_steps:
            net = inner_update(net, pixels, labels, cfg.inner_steps, optimizer=net_opt)

    return DistillResult(SyntheticDataset(pixels, job.ipc, train.num_classes), log, sup, snapshots)


class _nullcontext:
    def __enter__(self):
        return None

    def __exit__(self, *exc):
        return False


def _supervision_term(sup: SupervisionConfig, pool: PretrainedPool, rng, train, S, labels):
    models = pool.active() if sup.ensemble else [sample_model(pool, rng)]
    if sup.kind == "clom":
        terms = [clom(m, S, labels) for m in models]
    else:
        xb, yb = sample_batch(train, sup.real_batch, rng)
        terms = [t for t in (cclom(m, xb, yb, S, labels) for m in models) if t is not None]
    if not terms:
        return None
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    return out * (1.0 / len(terms)) if len(terms) > 1 else out


# ------------------------------------------------------------ persistence


def write_log(path, log: Sequence[LogRow]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "base_loss", "supervision_loss", "total_loss"])
        for r in log:
            w.writerow([r.iteration, repr(r.base_loss), repr(r.supervision_loss),
                        repr(r.total_loss)])
    return path


def read_log(path) -> list[LogRow]:
    with Path(path).open() as fh:
        rows = list(csv.DictReader(fh))
    return [LogRow(int(r["iteration"]), float(r["base_loss"]), float(r["supervision_loss"]),
                   float(r["total_loss"])) for r in rows]


def write_run(out, job: DistillJob, result: DistillResult) -> Path:
    """Write synthetic.bin, log.csv and a replayable manifest.json under ``out``."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    save_synthetic(out / "synthetic.bin", result.synthetic)
    write_log(out / "log.csv", result.log)
    manifest = {
        "job": job.to_dict(),
        "resolved_supervision": result.supervision.to_dict(),
        "pixel_lr": job.lr,
        "code_version": __version__,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return out


def load_job(path) -> DistillJob:
    """Read a job config, or the ``job`` record of a run manifest."""
    record = json.loads(Path(path).read_text())
    return DistillJob.from_dict(record.get("job", record))
