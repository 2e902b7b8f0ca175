"""Compact architecture zoo, checkpoints and pre-training.

Four families stand in for the usual distillation architectures at 16x16:

* ``conv-net``: ``depth`` x [conv3x3 -> instance norm -> relu -> avgpool2]
* ``wide-conv``: VGG-style, two conv3x3 per block, max pooling
* ``strided-conv``: stem conv, then stride-2 conv blocks and global average pooling
* ``mlp``: ``depth`` hidden fully-connected layers

``forward`` returns ``(logits, features)`` where features are the flattened
input of the final linear layer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from . import io
from .autodiff import Tensor
from .optim import SGD, step_decay

FAMILIES = ("conv-net", "wide-conv", "strided-conv", "mlp")

# family -> (depth, width) defaults at desk scale
DESK_DEFAULTS = {
    "conv-net": (3, 16),
    "wide-conv": (3, 24),
    "strided-conv": (3, 16),
    "mlp": (2, 128),
}


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"training diverged at epoch {epoch} (loss={loss})")
        self.epoch = epoch
        self.loss = loss


@dataclass(frozen=True)
class ArchitectureSpec:
    family: str
    depth: int
    width: int
    input_shape: tuple[int, int, int]
    num_classes: int

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        if self.family not in FAMILIES:
            raise ValueError(f"unknown architecture family {self.family!r}")
        if self.depth < 1 or self.width < 1 or self.num_classes < 2:
            raise ValueError(f"invalid spec: depth={self.depth} width={self.width} "
                             f"classes={self.num_classes}")
        if len(self.input_shape) != 3:
            raise ValueError(f"input_shape must be (C, H, W), got {self.input_shape}")
        _, h, w = self.input_shape
        if self.family != "mlp" and (h % 2**self.depth or w % 2**self.depth):
            raise ValueError(f"{self.family} depth {self.depth} needs H, W divisible "
                             f"by {2**self.depth}; got {(h, w)}")

    @property
    def arch_id(self) -> str:
        return f"{self.family}-d{self.depth}-w{self.width}"

    def compatible(self, other: "ArchitectureSpec") -> bool:
        return self.input_shape == other.input_shape and self.num_classes == other.num_classes

    def to_dict(self) -> dict:
        return {"family": self.family, "depth": self.depth, "width": self.width,
                "input_shape": list(self.input_shape), "num_classes": self.num_classes}

    @classmethod
    def from_dict(cls, d: Mapping) -> "ArchitectureSpec":
        return cls(d["family"], int(d["depth"]), int(d["width"]),
                   tuple(d["input_shape"]), int(d["num_classes"]))


def desk_arch(family: str, input_shape, num_classes: int, depth: int | None = None,
              width: int | None = None) -> ArchitectureSpec:
    """Spec for ``family`` with desk-scale default depth and width."""
    if family not in DESK_DEFAULTS:
        raise ValueError(f"unknown architecture {family!r}; choose from {FAMILIES}")
    d, w = DESK_DEFAULTS[family]
    return ArchitectureSpec(family, depth or d, width or w, tuple(input_shape), num_classes)


def parse_arch_id(arch_id: str, input_shape, num_classes: int) -> ArchitectureSpec:
    """Accept ``conv-net`` or ``conv-net-d3-w16`` style identifiers."""
    for family in FAMILIES:
        if arch_id == family:
            return desk_arch(family, input_shape, num_classes)
        if arch_id.startswith(family + "-d"):
            depth, _, width = arch_id[len(family) + 2:].partition("-w")
            return ArchitectureSpec(family, int(depth), int(width), tuple(input_shape), num_classes)
    raise ValueError(f"unknown architecture id {arch_id!r}")


def _conv_plan(spec: ArchitectureSpec) -> list[tuple[str, int, int, int]]:
    """(layer name, in channels, out channels, stride) for every conv layer."""
    c_in = spec.input_shape[0]
    w = spec.width
    plan = []
    if spec.family == "conv-net":
        for i in range(spec.depth):
            plan.append((f"conv{i}", c_in if i == 0 else w, w, 1))
    elif spec.family == "wide-conv":
        for i in range(spec.depth):
            plan.append((f"conv{i}a", c_in if i == 0 else w, w, 1))
            plan.append((f"conv{i}b", w, w, 1))
    elif spec.family == "strided-conv":
        plan.append(("stem", c_in, w, 1))
        for i in range(spec.depth):
            plan.append((f"conv{i}", w, w, 2))
    return plan


def feature_dim(spec: ArchitectureSpec) -> int:
    c, h, w = spec.input_shape
    if spec.family == "mlp":
        return spec.width
    if spec.family == "strided-conv":
        return spec.width
    return spec.width * (h // 2**spec.depth) * (w // 2**spec.depth)


def param_shapes(spec: ArchitectureSpec) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    if spec.family == "mlp":
        prev = int(np.prod(spec.input_shape))
        for i in range(spec.depth):
            shapes[f"fc{i}.weight"] = (spec.width, prev)
            shapes[f"fc{i}.bias"] = (spec.width,)
            prev = spec.width
    else:
        for name, c_in, c_out, _ in _conv_plan(spec):
            # no conv bias: the instance norm that follows removes it exactly
            shapes[f"{name}.weight"] = (c_out, c_in, 3, 3)
            shapes[f"{name}.norm.weight"] = (c_out,)
            shapes[f"{name}.norm.bias"] = (c_out,)
    shapes["head.weight"] = (spec.num_classes, feature_dim(spec))
    shapes["head.bias"] = (spec.num_classes,)
    return shapes


def param_count(spec: ArchitectureSpec) -> int:
    return sum(int(np.prod(s)) for s in param_shapes(spec).values())


@dataclass(frozen=True)
class Provenance:
    seed: int
    epoch: int = 0
    source: str = ""

    def to_dict(self) -> dict:
        return {"seed": self.seed, "epoch": self.epoch, "source": self.source}


@dataclass(frozen=True)
class ModelCheckpoint:
    """Immutable parameter set for one architecture."""

    spec: ArchitectureSpec
    params: Mapping[str, np.ndarray]
    provenance: Provenance = field(default_factory=lambda: Provenance(0))

    def __post_init__(self):
        expected = param_shapes(self.spec)
        if list(self.params) != list(expected):
            raise ValueError(f"parameter names {list(self.params)} do not match spec "
                             f"{self.spec.arch_id}")
        frozen = {}
        for name, arr in self.params.items():
            arr = np.array(arr, dtype=np.float64)
            if arr.shape != expected[name]:
                raise ValueError(f"{name}: shape {arr.shape} != expected {expected[name]}")
            arr.flags.writeable = False
            frozen[name] = arr
        object.__setattr__(self, "params", frozen)

    def tensors(self, trainable: bool = False) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=trainable) for k, v in self.params.items()}

    def replace(self, params: Mapping[str, np.ndarray] | None = None,
                provenance: Provenance | None = None) -> "ModelCheckpoint":
        return ModelCheckpoint(self.spec, params if params is not None else self.params,
                               provenance or self.provenance)


def build(spec: ArchitectureSpec, seed: int, source: str = "") -> ModelCheckpoint:
    """Seeded uniform fan-in initialisation; norm scales start at 1, shifts at 0."""
    rng = np.random.default_rng(seed)
    params = {}
    shapes = param_shapes(spec)
    for name, shape in shapes.items():
        if name.endswith("norm.weight"):
            params[name] = np.ones(shape)
        elif name.endswith("norm.bias"):
            params[name] = np.zeros(shape)
        else:
            weight = shapes[name.rsplit(".", 1)[0] + ".weight"]
            fan_in = int(np.prod(weight[1:]))
            bound = 1.0 / math.sqrt(fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape)
    return ModelCheckpoint(spec, params, Provenance(seed, 0, source))


def zero_model(spec: ArchitectureSpec) -> ModelCheckpoint:
    return ModelCheckpoint(spec, {k: np.zeros(s) for k, s in param_shapes(spec).items()})


def _conv_block(h: Tensor, p: Mapping[str, Tensor], name: str, stride: int) -> Tensor:
    h = ad.conv2d(h, p[f"{name}.weight"], stride=stride, padding=1)
    h = ad.instance_norm(h, p[f"{name}.norm.weight"], p[f"{name}.norm.bias"])
    return ad.relu(h)


def apply(spec: ArchitectureSpec, params: Mapping[str, Tensor], batch) -> tuple[Tensor, Tensor]:
    x = ad.constant(batch)
    if x.ndim != 4 or x.shape[1:] != spec.input_shape:
        raise ad.ShapeError(f"batch shape {x.shape} does not match input {spec.input_shape}")
    if spec.family == "mlp":
        h = ad.flatten(x)
        for i in range(spec.depth):
            h = ad.relu(ad.linear(h, params[f"fc{i}.weight"], params[f"fc{i}.bias"]))
        feats = h
    elif spec.family == "conv-net":
        h = x
        for i in range(spec.depth):
            h = ad.avg_pool2d(_conv_block(h, params, f"conv{i}", 1))
        feats = ad.flatten(h)
    elif spec.family == "wide-conv":
        h = x
        for i in range(spec.depth):
            h = _conv_block(h, params, f"conv{i}a", 1)
            h = ad.max_pool2d(_conv_block(h, params, f"conv{i}b", 1))
        feats = ad.flatten(h)
    else:
        h = _conv_block(x, params, "stem", 1)
        for i in range(spec.depth):
            h = _conv_block(h, params, f"conv{i}", 2)
        feats = ad.global_avg_pool(h)
    logits = ad.linear(feats, params["head.weight"], params["head.bias"])
    return logits, feats


def forward(model: ModelCheckpoint, batch, params: Mapping[str, Tensor] | None = None):
    """Return ``(logits, features)``; parameters are constants unless ``params`` given."""
    return apply(model.spec, params if params is not None else model.tensors(), batch)


def predict(model: ModelCheckpoint, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = []
    with ad.no_grad():
        for i in range(0, len(images), batch_size):
            logits, _ = forward(model, images[i:i + batch_size])
            out.append(np.argmax(logits.data, axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=int)


def accuracy(model: ModelCheckpoint, images: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(predict(model, images) == np.asarray(labels)))


def extract_features(model: ModelCheckpoint, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = []
    with ad.no_grad():
        for i in range(0, len(images), batch_size):
            out.append(forward(model, images[i:i + batch_size])[1].data)
    return np.concatenate(out)


# ------------------------------------------------------------------ training


def train_step(spec, params: dict[str, np.ndarray], opt: SGD, x, y, loss_scale: float = 1.0) -> float:
    leaves = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
    logits, _ = apply(spec, leaves, x)
    loss = ad.cross_entropy(logits, y)
    if loss_scale != 1.0:
        loss = loss * loss_scale
    grads = ad.grad(loss, list(leaves.values()))
    opt.step(params, {k: g.data for k, g in zip(leaves, grads)})
    return float(loss.data)


@dataclass(frozen=True)
class PretrainSchedule:
    """SGD schedule for pool models; ``snapshots`` are 1-based epochs to keep."""

    epochs: int = 30
    snapshots: tuple[int, ...] = (1, 2, 3, 5, 8, 12, 20, 25, 30)
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-3
    decay_every: int = 10
    decay_factor: float = 0.1
    batch_size: int = 64

    def __post_init__(self):
        snaps = tuple(int(e) for e in self.snapshots)
        object.__setattr__(self, "snapshots", snaps)
        if not snaps:
            raise ValueError("snapshot list is empty")
        bad = [e for e in snaps if e < 1 or e > self.epochs]
        if bad:
            raise ValueError(f"snapshot epochs {bad} outside [1, {self.epochs}]")
        if list(snaps) != sorted(set(snaps)):
            raise ValueError(f"snapshot epochs must be strictly increasing: {snaps}")


def pretrain(spec: ArchitectureSpec, seed: int, dataset, schedule: PretrainSchedule | None = None,
             ) -> list[ModelCheckpoint]:
    """Train from ``build(spec, seed)``; return one checkpoint per snapshot epoch."""
    schedule = schedule or PretrainSchedule()
    if dataset.num_classes != spec.num_classes:
        raise ValueError(f"dataset has {dataset.num_classes} classes, spec expects "
                         f"{spec.num_classes}")
    model = build(spec, seed)
    params = {k: v.copy() for k, v in model.params.items()}
    opt = SGD(schedule.lr, schedule.momentum, schedule.weight_decay)
    rng = np.random.default_rng([seed, 1])
    images, labels = dataset.images, dataset.labels
    wanted = set(schedule.snapshots)
    out = []
    for epoch in range(1, schedule.epochs + 1):
        opt.lr = step_decay(schedule.lr, epoch - 1, schedule.decay_every, schedule.decay_factor)
        order = rng.permutation(len(labels))
        for i in range(0, len(order), schedule.batch_size):
            idx = order[i:i + schedule.batch_size]
            loss = train_step(spec, params, opt, images[idx], labels[idx])
            if not np.isfinite(loss):
                raise TrainingDiverged(epoch, loss)
        if epoch in wanted:
            out.append(ModelCheckpoint(spec, params, Provenance(seed, epoch, dataset.domain)))
    return out


# ------------------------------------------------------------ persistence


def save_checkpoint(path, ckpt: ModelCheckpoint):
    header = {"spec": ckpt.spec.to_dict(), "provenance": ckpt.provenance.to_dict()}
    return io.write(path, "checkpoint", header, ckpt.params)


def load_checkpoint(path) -> ModelCheckpoint:
    _, header, arrays = io.read(path, expect_kind="checkpoint")
    spec = ArchitectureSpec.from_dict(header["spec"])
    prov = Provenance(**header["provenance"])
    return ModelCheckpoint(spec, arrays, prov)


def stack_specs(specs: Sequence[ArchitectureSpec]) -> None:
    """Raise unless every spec shares input shape and class count."""
    for s in specs[1:]:
        if not s.compatible(specs[0]):
            raise ValueError(f"{s.arch_id} is not interchangeable with {specs[0].arch_id}")
