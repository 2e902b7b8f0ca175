"""Plain SGD with momentum and L2 weight decay."""

from __future__ import annotations

from typing import MutableMapping

import numpy as np


class SGD:
    """In-place SGD over a name -> array mapping.

    Matches the common framework convention: ``g += wd * p``,
    ``buf = momentum * buf + g``, ``p -= lr * buf``.
    """

    def __init__(self, lr: float, momentum: float = 0.0, weight_decay: float = 0.0):
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers: dict[str, np.ndarray] = {}

    def step(self, params: MutableMapping[str, np.ndarray], grads) -> None:
        for name, g in grads.items():
            p = params[name]
            if self.weight_decay:
                g = g + self.weight_decay * p
            if self.momentum:
                buf = self.buffers.get(name)
                buf = g.copy() if buf is None else self.momentum * buf + g
                self.buffers[name] = buf
                g = buf
            params[name] = p - self.lr * g


def step_decay(base_lr: float, epoch: int, every: int, factor: float) -> float:
    """Learning rate for 0-based ``epoch`` under a step schedule."""
    return base_lr * factor ** (epoch // every) if every else base_lr
