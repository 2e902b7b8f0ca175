"""Dataset containers, toy corpora, class batching and persistence."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np
from scipy.ndimage import uniform_filter

from . import io
from .autodiff import Tensor


@dataclass(frozen=True)
class LabeledDataset:
    """Real images (N, C, H, W) in [0, 1] with integer labels in [0, num_classes)."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    domain: str = ""
    meta: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        images = np.array(self.images, dtype=np.float64)
        labels = np.array(self.labels, dtype=np.int64)
        if images.ndim != 4 or len(images) == 0:
            raise ValueError(f"images must be a nonempty (N, C, H, W) array, got {images.shape}")
        if labels.shape != (len(images),):
            raise ValueError(f"labels shape {labels.shape} does not match {len(images)} images")
        if labels.min() < 0 or labels.max() >= self.num_classes:
            raise ValueError(f"labels outside [0, {self.num_classes})")
        if images.min() < 0.0 or images.max() > 1.0:
            raise ValueError("image values outside [0, 1]")
        images.flags.writeable = False
        labels.flags.writeable = False
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def class_indices(self, c: int) -> np.ndarray:
        return np.flatnonzero(self.labels == c)

    def subset(self, idx) -> "LabeledDataset":
        return LabeledDataset(self.images[idx], self.labels[idx], self.num_classes, self.domain,
                              dict(self.meta))


@dataclass
class SyntheticDataset:
    """Optimisable images with fixed, class-major balanced labels."""

    images: np.ndarray
    ipc: int
    num_classes: int
    labels: np.ndarray = field(init=False)

    def __post_init__(self):
        self.images = np.array(self.images, dtype=np.float64)
        n = self.ipc * self.num_classes
        if self.images.ndim != 4 or len(self.images) != n:
            raise ValueError(f"expected {n} images (ipc={self.ipc} x {self.num_classes} classes), "
                             f"got shape {self.images.shape}")
        labels = np.repeat(np.arange(self.num_classes, dtype=np.int64), self.ipc)
        labels.flags.writeable = False
        self.labels = labels

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def class_slice(self, c: int) -> slice:
        return slice(c * self.ipc, (c + 1) * self.ipc)

    def tensor(self, requires_grad: bool = True) -> Tensor:
        return Tensor(self.images, requires_grad=requires_grad)

    def copy(self) -> "SyntheticDataset":
        return SyntheticDataset(self.images.copy(), self.ipc, self.num_classes)

    def as_labeled(self, domain: str = "synthetic") -> LabeledDataset:
        return LabeledDataset(np.clip(self.images, 0.0, 1.0), self.labels, self.num_classes, domain)


# ------------------------------------------------------------------ corpora


def _gaussian_bump(size: int, cy: np.ndarray, cx: np.ndarray, sigma: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    d2 = (yy[None] - cy[:, None, None]) ** 2 + (xx[None] - cx[:, None, None]) ** 2
    return np.exp(-d2 / (2.0 * sigma**2))


def generate_blobs(classes: int, per_class: int, image_size: int = 16, separation: float = 2.0,
                   seed: int = 0, noise: float = 0.12, jitter: float = 1.5,
                   distractor: float = 0.3, domain: str = "blobs-a") -> LabeledDataset:
    """Anchored Gaussian texture patches, one anchor per class on a ring.

    Each image carries a textured bump at its class anchor (jittered), a
    weaker distractor bump at a random other anchor, and pixel noise.
    ``separation`` scales the class bump amplitude relative to the noise.
    """
    if classes < 2:
        raise ValueError("need at least 2 classes")
    if separation <= 0:
        raise ValueError("separation must be positive")
    rng = np.random.default_rng(seed)
    n = classes * per_class
    labels = np.repeat(np.arange(classes), per_class)
    centre = (image_size - 1) / 2.0
    radius = 0.3 * image_size
    angles = 2 * np.pi * np.arange(classes) / classes
    ay, ax = centre + radius * np.sin(angles), centre + radius * np.cos(angles)
    amp = 0.1 * separation

    jy = rng.normal(0.0, jitter, n)
    jx = rng.normal(0.0, jitter, n)
    bump = _gaussian_bump(image_size, ay[labels] + jy, ax[labels] + jx, 0.12 * image_size)
    texture = uniform_filter(rng.normal(0.0, 1.0, (n, image_size, image_size)), size=(1, 3, 3))
    other = (labels + rng.integers(1, classes, n)) % classes
    dist = _gaussian_bump(image_size, ay[other] + rng.normal(0, jitter, n),
                          ax[other] + rng.normal(0, jitter, n), 0.12 * image_size)
    img = (0.5 + amp * bump * (1.0 + 1.5 * texture) + distractor * amp * dist
           + rng.normal(0.0, noise, (n, image_size, image_size)))
    img = np.clip(img, 0.0, 1.0)[:, None]
    order = rng.permutation(n)
    meta = dict(recipe="blobs", classes=classes, per_class=per_class, image_size=image_size,
                separation=separation, seed=seed, noise=noise, jitter=jitter,
                distractor=distractor)
    return LabeledDataset(img[order], labels[order], classes, domain, meta)


def generate_stripes(classes: int, per_class: int, image_size: int = 16, separation: float = 2.0,
                     seed: int = 0, noise: float = 0.15, domain: str = "stripes-b") -> LabeledDataset:
    """Oriented sinusoidal gratings; class sets the orientation."""
    if classes < 2:
        raise ValueError("need at least 2 classes")
    if separation <= 0:
        raise ValueError("separation must be positive")
    rng = np.random.default_rng(seed)
    n = classes * per_class
    labels = np.repeat(np.arange(classes), per_class)
    theta = np.pi * labels / classes + rng.normal(0.0, 0.08, n)
    freq = rng.uniform(0.12, 0.22, n)
    phase = rng.uniform(0, 2 * np.pi, n)
    yy, xx = np.mgrid[0:image_size, 0:image_size].astype(np.float64)
    proj = np.cos(theta)[:, None, None] * xx + np.sin(theta)[:, None, None] * yy
    grating = np.sin(2 * np.pi * freq[:, None, None] * proj + phase[:, None, None])
    img = 0.5 + 0.1 * separation * grating + rng.normal(0.0, noise, (n, image_size, image_size))
    img = np.clip(img, 0.0, 1.0)[:, None]
    order = rng.permutation(n)
    meta = dict(recipe="stripes", classes=classes, per_class=per_class, image_size=image_size,
                separation=separation, seed=seed, noise=noise)
    return LabeledDataset(img[order], labels[order], classes, domain, meta)


# recipe -> (generator, keyword arguments); train and test share the law, not the seed
RECIPES: dict[str, tuple] = {
    "blobs-a": (generate_blobs, dict(classes=4, separation=2.0, domain="blobs-a")),
    "stripes-b": (generate_stripes, dict(classes=4, separation=2.0, domain="stripes-b")),
}


def make_recipe(recipe: str, seed: int, train_per_class: int = 150,
                test_per_class: int = 100, **overrides) -> tuple[LabeledDataset, LabeledDataset]:
    """Return ``(train, test)`` drawn from the same law with independent seeds."""
    if recipe not in RECIPES:
        raise ValueError(f"unknown recipe {recipe!r}; choose from {sorted(RECIPES)}")
    fn, kwargs = RECIPES[recipe]
    kwargs = {**kwargs, **overrides}
    train = fn(per_class=train_per_class, seed=seed, **kwargs)
    test = fn(per_class=test_per_class, seed=seed + 100_003, **kwargs)
    return train, test


# ------------------------------------------------------------------ sampling


def init_synthetic(source: LabeledDataset, ipc: int, mode: str = "real-sample",
                   seed: int = 0) -> SyntheticDataset:
    """Balanced synthetic set from seeded per-class real picks or Gaussian noise."""
    if ipc < 1:
        raise ValueError("ipc must be >= 1")
    rng = np.random.default_rng(seed)
    c = source.num_classes
    if mode == "real-sample":
        picks = []
        for k in range(c):
            idx = source.class_indices(k)
            if len(idx) < ipc:
                raise ValueError(f"class {k} has {len(idx)} images, need {ipc}")
            picks.append(rng.choice(idx, ipc, replace=False))
        images = source.images[np.concatenate(picks)].copy()
    elif mode == "gaussian-noise":
        shape = (c * ipc,) + source.image_shape
        images = np.clip(rng.normal(0.5, 0.2, shape), 0.0, 1.0)
    else:
        raise ValueError(f"unknown init mode {mode!r}")
    return SyntheticDataset(images, ipc, c)


def sample_class_batch(dataset: LabeledDataset, c: int, batch_size: int,
                       rng: np.random.Generator) -> np.ndarray:
    """Images of class ``c`` drawn without replacement (capped at the class size)."""
    idx = dataset.class_indices(c)
    if len(idx) == 0:
        raise ValueError(f"class {c} is empty")
    return dataset.images[rng.permutation(idx)[:batch_size]]


def sample_batch(dataset: LabeledDataset, batch_size: int, rng: np.random.Generator):
    idx = rng.permutation(len(dataset))[:batch_size]
    return dataset.images[idx], dataset.labels[idx]


# ------------------------------------------------------------------ persistence


def save_dataset(path, ds: LabeledDataset) -> Path:
    header = {"type": "labeled", "num_classes": ds.num_classes, "domain": ds.domain,
              "meta": dict(ds.meta)}
    return io.write(path, "dataset", header, {"images": ds.images, "labels": ds.labels})


def save_synthetic(path, syn: SyntheticDataset) -> Path:
    header = {"type": "synthetic", "num_classes": syn.num_classes, "ipc": syn.ipc}
    return io.write(path, "dataset", header, {"images": syn.images, "labels": syn.labels})


def load_dataset(path):
    """Load either dataset type; out-of-range pixels are rejected."""
    _, header, arrays = io.read(path, expect_kind="dataset")
    images = arrays["images"]
    if images.size and (images.min() < 0.0 or images.max() > 1.0):
        raise ValueError(f"{path}: pixel values outside [0, 1]")
    if header["type"] == "synthetic":
        syn = SyntheticDataset(images, header["ipc"], header["num_classes"])
        if not np.array_equal(syn.labels, arrays["labels"]):
            raise ValueError(f"{path}: synthetic labels are not class-major balanced")
        return syn
    return LabeledDataset(images, arrays["labels"], header["num_classes"], header["domain"],
                          header.get("meta", {}))


def write_data_dir(out, recipe: str, seed: int, **kwargs) -> Path:
    """Generate a recipe into ``out``: train.bin, test.bin and manifest.txt."""
    out = Path(out)
    train, test = make_recipe(recipe, seed, **kwargs)
    save_dataset(out / "train.bin", train)
    save_dataset(out / "test.bin", test)
    io.write_manifest(out / "manifest.txt", {"recipe": recipe, "seed": seed,
                                             "train": dict(train.meta), "test": dict(test.meta),
                                             "train_size": len(train), "test_size": len(test)})
    return out


def read_data_dir(path) -> tuple[LabeledDataset, LabeledDataset]:
    path = Path(path)
    return load_dataset(path / "train.bin"), load_dataset(path / "test.bin")
