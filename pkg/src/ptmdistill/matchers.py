"""Baseline matching losses: gradient matching (DC), siamese-augmented
gradient matching (DSA) and distribution matching (DM)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from . import augment
from . import autodiff as ad
from .autodiff import Tensor
from .models import ModelCheckpoint, apply as apply_model, train_step
from .optim import SGD

KINDS = ("dc", "dsa", "dm")


class NonFiniteLoss(FloatingPointError):
    pass


@dataclass(frozen=True)
class MatcherConfig:
    kind: str = "dc"
    iterations: int = 500
    reinit_every: int = 50
    inner_steps: int = 10
    real_batch: int = 64
    inner_lr: float = 0.01
    inner_momentum: float = 0.5
    whole_set: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown matcher {self.kind!r}")
        if self.iterations < 0 or self.reinit_every < 1 or self.inner_steps < 0:
            raise ValueError("iterations >= 0, reinit_every >= 1, inner_steps >= 0 required")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _rows(t: Tensor) -> Tensor:
    return ad.reshape(t, (1, -1)) if t.ndim == 1 else ad.reshape(t, (t.shape[0], -1))


def layerwise_cosine_distance(grad_a: Mapping[str, Tensor], grad_b: Mapping[str, Tensor]) -> Tensor:
    """Sum over layers and output rows of ``1 - cos``; a zero row counts as distance 1."""
    if set(grad_a) != set(grad_b):
        raise ValueError(f"gradient maps differ: {sorted(set(grad_a) ^ set(grad_b))}")
    total = None
    for name in grad_a:
        a, b = ad.constant(grad_a[name]), ad.constant(grad_b[name])
        if a.shape != b.shape:
            raise ad.ShapeError(f"{name}: shape mismatch {a.shape} vs {b.shape}")
        ra, rb = _rows(a), _rows(b)
        na, _ = ad.safe_norm(ra, 1)
        nb, _ = ad.safe_norm(rb, 1)
        cos = ad.tsum(ra * rb, 1) / (na * nb)  # zero rows: dot is 0 so cos is 0
        term = ad.tsum(1.0 - cos)
        total = term if total is None else total + term
    return total if total is not None else ad.Tensor(0.0)


def _param_grads(spec, params: Mapping[str, Tensor], x, y, loss_fn, create_graph: bool):
    logits, _ = apply_model(spec, params, x)
    loss = loss_fn(logits, y)
    if not np.isfinite(loss.data).all():
        raise NonFiniteLoss(f"inner loss is not finite: {loss.data}")
    grads = ad.grad(loss, list(params.values()), create_graph=create_graph)
    return dict(zip(params, grads))


def _groups(syn: Tensor, syn_labels: np.ndarray, real_batches: Sequence, whole_set: bool):
    """Yield (syn_x, syn_y, real_x, real_y) per class, or once for the whole set."""
    syn_labels = np.asarray(syn_labels)
    groups = []
    for c, real in enumerate(real_batches):
        idx = np.flatnonzero(syn_labels == c)
        if len(idx) == 0:
            continue
        sl = slice(idx[0], idx[-1] + 1)
        if idx[-1] - idx[0] + 1 != len(idx):
            sl = idx
        real = np.asarray(real.data if isinstance(real, Tensor) else real)
        groups.append((ad.index(syn, sl), syn_labels[idx], real, np.full(len(real), c)))
    if whole_set and groups:
        return [(ad.concat([g[0] for g in groups]), np.concatenate([g[1] for g in groups]),
                 np.concatenate([g[2] for g in groups]), np.concatenate([g[3] for g in groups]))]
    return groups


def _model_parts(model):
    if isinstance(model, ModelCheckpoint):
        return model.spec, model.tensors(trainable=True)
    spec, params = model
    return spec, params


def dc_loss(model, syn: Tensor, syn_labels, real_batches: Sequence,
            loss_fn: Callable = ad.cross_entropy, whole_set: bool = False,
            transform: Callable | None = None) -> Tensor:
    """Gradient-matching loss, summed over classes.

    ``model`` is a checkpoint or a ``(spec, params)`` pair of trainable
    tensors. ``real_batches[c]`` holds real images of class ``c``.
    ``transform(c, syn_x, real_x)`` optionally maps both branches first.
    """
    spec, params = _model_parts(model)
    total = None
    for c, (sx, sy, rx, ry) in enumerate(_groups(syn, syn_labels, real_batches, whole_set)):
        rx = ad.Tensor(rx)
        if transform is not None:
            sx, rx = transform(c, sx, rx)
        g_real = _param_grads(spec, params, rx.detach(), ry, loss_fn, create_graph=False)
        g_syn = _param_grads(spec, params, sx, sy, loss_fn, create_graph=True)
        term = layerwise_cosine_distance(g_syn, g_real)
        total = term if total is None else total + term
    return total


def dsa_loss(model, syn: Tensor, syn_labels, real_batches: Sequence,
             config: augment.AugmentConfig, rng: np.random.Generator,
             loss_fn: Callable = ad.cross_entropy, whole_set: bool = False,
             on_params: Callable | None = None) -> Tensor:
    """DC loss on siamese-augmented batches: one shared draw per class per step.

    ``on_params(c, params_syn, params_real)`` is an instrumentation hook.
    """
    def transform(c, sx, rx):
        params = augment.sample_params(config, rng, sx.shape[2:])
        p_syn = p_real = params
        if on_params is not None:
            on_params(c, p_syn, p_real)
        return augment.apply(sx, p_syn), augment.apply(rx, p_real)

    return dc_loss(model, syn, syn_labels, real_batches, loss_fn, whole_set, transform)


def mean_embedding_distance(feat_syn: Tensor, feat_real) -> Tensor:
    """Squared Euclidean distance between mean embeddings (linear-kernel MMD)."""
    feat_syn, feat_real = ad.constant(feat_syn), ad.constant(feat_real)
    if feat_syn.ndim != 2 or feat_real.ndim != 2 or feat_syn.shape[1] != feat_real.shape[1]:
        raise ad.ShapeError(f"feature shape mismatch {feat_syn.shape} vs {feat_real.shape}")
    diff = ad.mean(feat_syn, axis=0) - ad.mean(feat_real, axis=0)
    return ad.tsum(diff * diff)


def dm_loss(embedder, syn: Tensor, syn_labels, real_batches: Sequence,
            whole_set: bool = False) -> Tensor:
    """Distribution-matching loss with the embedder's penultimate features."""
    spec, params = (embedder.spec, embedder.tensors()) if isinstance(embedder, ModelCheckpoint) \
        else embedder
    total = None
    for sx, _, rx, _ in _groups(syn, syn_labels, real_batches, whole_set):
        with ad.no_grad():
            _, f_real = apply_model(spec, params, rx)
        _, f_syn = apply_model(spec, params, sx)
        term = mean_embedding_distance(f_syn, f_real.data)
        total = term if total is None else total + term
    return total


def inner_update(model: ModelCheckpoint, images: np.ndarray, labels: np.ndarray, steps: int,
                 lr: float = 0.01, momentum: float = 0.5, optimizer: SGD | None = None,
                 ) -> ModelCheckpoint:
    """Advance ``model`` by ``steps`` SGD steps on cross-entropy over (detached) images."""
    if steps < 0:
        raise ValueError("steps must be >= 0")
    if steps == 0:
        return model
    opt = optimizer or SGD(lr, momentum)
    params = dict(model.params)
    images = np.asarray(images.data if isinstance(images, Tensor) else images)
    for _ in range(steps):
        loss = train_step(model.spec, params, opt, images, labels)
        if not np.isfinite(loss):
            raise NonFiniteLoss(f"inner update loss is not finite: {loss}")
    return model.replace(params=params)
