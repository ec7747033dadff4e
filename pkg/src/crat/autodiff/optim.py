from __future__ import annotations

from typing import Mapping

import numpy as np

from ..errors import ArgumentError, NonFiniteError
from .tensor import DTYPE, Tensor


class SGD:
    """SGD with heavy-ball momentum and coupled L2 weight decay.

    ``v <- momentum * v + grad + weight_decay * param``; ``param <- param - lr * v``.
    Velocity buffers are keyed by parameter name so they can be checkpointed.
    """

    def __init__(self, params: Mapping[str, Tensor], lr: float, momentum: float = 0.0, weight_decay: float = 0.0):
        if not lr > 0:
            raise ArgumentError(f"learning rate must be positive, got {lr}")
        self.params = dict(params)
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self.velocity: dict[str, np.ndarray] = {}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
            d = g + np.float32(self.weight_decay) * p.data if self.weight_decay else g
            v = self.velocity.get(name)
            v = d if v is None or self.momentum == 0.0 else np.float32(self.momentum) * v + d
            self.velocity[name] = np.asarray(v, dtype=DTYPE)
            p.set_data(p.data - np.float32(self.lr) * v)


def sgd_step(params: Mapping[str, Tensor], lr: float, momentum: float, weight_decay: float, velocity: dict) -> None:
    """Functional single step sharing velocity state through ``velocity``."""
    opt = SGD(params, lr, momentum, weight_decay)
    opt.velocity = velocity
    opt.step()
