"""Differentiable siamese augmentation.

One transform is drawn per matching step; the same parameter object is then
applied to the synthetic batch and the real batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

TRANSFORMS = ("flip", "shift", "scale", "brightness", "cutout", "identity")


@dataclass(frozen=True)
class AugmentConfig:
    transforms: tuple[str, ...] = ("flip", "shift", "scale", "brightness", "cutout")
    flip_prob: float = 0.5
    max_shift: int = 2
    scale_range: tuple[float, float] = (0.8, 1.2)
    brightness_range: tuple[float, float] = (-0.2, 0.2)
    cutout_frac: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "transforms", tuple(self.transforms))
        unknown = set(self.transforms) - set(TRANSFORMS)
        if unknown:
            raise ValueError(f"unsupported transforms {sorted(unknown)}")

    def to_dict(self) -> dict:
        return {"transforms": list(self.transforms), "flip_prob": self.flip_prob,
                "max_shift": self.max_shift, "scale_range": list(self.scale_range),
                "brightness_range": list(self.brightness_range),
                "cutout_frac": self.cutout_frac}

    @classmethod
    def from_dict(cls, d) -> "AugmentConfig":
        d = dict(d)
        for key in ("scale_range", "brightness_range"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


NEUTRAL = AugmentConfig(transforms=("scale",), scale_range=(1.0, 1.0))


@dataclass(frozen=True)
class AugmentationParams:
    transform: str
    flip: bool = False
    shift: tuple[int, int] = (0, 0)
    scale: float = 1.0
    brightness: float = 0.0
    cutout: tuple[int, int, int, int] = field(default=(0, 0, 0, 0))  # y0, x0, h, w


def sample_params(config: AugmentConfig, rng: np.random.Generator,
                  image_size: tuple[int, int] = (16, 16)) -> AugmentationParams:
    """Pick one enabled transform uniformly and draw its scalars."""
    if not config.transforms:
        raise ValueError("augmentation family is empty")
    name = config.transforms[int(rng.integers(len(config.transforms)))]
    if name == "flip":
        return AugmentationParams(name, flip=bool(rng.random() < config.flip_prob))
    if name == "shift":
        s = config.max_shift
        dy, dx = (int(v) for v in rng.integers(-s, s + 1, size=2))
        return AugmentationParams(name, shift=(dy, dx))
    if name == "scale":
        return AugmentationParams(name, scale=float(rng.uniform(*config.scale_range)))
    if name == "brightness":
        return AugmentationParams(name, brightness=float(rng.uniform(*config.brightness_range)))
    if name == "cutout":
        h, w = image_size
        ch, cw = max(1, int(round(h * config.cutout_frac))), max(1, int(round(w * config.cutout_frac)))
        cy, cx = int(rng.integers(h)), int(rng.integers(w))
        y0, x0 = max(0, cy - ch // 2), max(0, cx - cw // 2)
        return AugmentationParams(name, cutout=(y0, x0, min(ch, h - y0), min(cw, w - x0)))
    return AugmentationParams("identity")


def _shift(x: Tensor, dy: int, dx: int) -> Tensor:
    """Translate by (dy, dx) pixels with zero fill."""
    if dy == 0 and dx == 0:
        return x
    h, w = x.shape[2], x.shape[3]
    if abs(dy) >= h or abs(dx) >= w:
        return ad.mul(x, 0.0)
    src = (slice(None), slice(None), slice(max(0, -dy), h - max(0, dy)),
           slice(max(0, -dx), w - max(0, dx)))
    dst = (slice(None), slice(None), slice(max(0, dy), h - max(0, -dy)),
           slice(max(0, dx), w - max(0, -dx)))
    return ad.index_add(ad.index(x, src), dst, x.shape)


def apply(batch, params: AugmentationParams) -> Tensor:
    """Apply ``params`` to an image batch (B, C, H, W); differentiable in the pixels."""
    x = ad.constant(batch)
    if x.ndim != 4:
        raise ad.ShapeError(f"augmentation expects (B, C, H, W), got {x.shape}")
    t = params.transform
    if t == "flip":
        return ad.index(x, (Ellipsis, slice(None, None, -1))) if params.flip else x
    if t == "shift":
        return _shift(x, *params.shift)
    if t == "scale":
        return ad.mul(x, params.scale)
    if t == "brightness":
        return ad.add(x, params.brightness)
    if t == "cutout":
        y0, x0, h, w = params.cutout
        mask = np.ones(x.shape[2:])
        mask[y0:y0 + h, x0:x0 + w] = 0.0
        return ad.mul(x, ad.Tensor(np.broadcast_to(mask, x.shape).copy()))
    if t == "identity":
        return x
    raise ValueError(f"unsupported transform {t!r}")
