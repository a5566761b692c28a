"""First-order optimisers over lists of leaf tensors."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from . import diffgraph as dg


def clip_grad_norm(params: Sequence[dg.Tensor], max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params))
    if total > max_norm:
        f = max_norm / (total + 1e-12)
        for p in params:
            p.grad = p.grad * f
    return total


def cosine_lr(base: float, epoch: int, total: int) -> float:
    """Cosine-annealed rate for 0-based ``epoch`` out of ``total``."""
    if total <= 0:
        return base
    return 0.5 * base * (1.0 + math.cos(math.pi * epoch / total))


class SGD:
    """SGD with heavy-ball momentum; weight decay is added to the gradient."""

    def __init__(self, params: Sequence[dg.Tensor], lr: float, momentum: float = 0.0, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers = [np.zeros_like(p.value) for p in self.params]

    def step(self) -> None:
        for p, buf in zip(self.params, self.buffers):
            g = p.grad + self.weight_decay * p.value
            buf *= self.momentum
            buf += g
            p.value = p.value - self.lr * buf

    def state(self) -> list[np.ndarray]:
        return [b.copy() for b in self.buffers]

    def load(self, buffers: Sequence[np.ndarray]) -> None:
        self.buffers = [np.array(b, dtype=np.float64) for b in buffers]


class Adam:
    """Adam with L2 weight decay folded into the gradient."""

    def __init__(self, params: Sequence[dg.Tensor], lr: float, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.betas = tuple(betas)
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad + self.weight_decay * p.value
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.value = p.value - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self) -> tuple[int, list[np.ndarray], list[np.ndarray]]:
        return self.t, [a.copy() for a in self.m], [a.copy() for a in self.v]

    def load(self, t: int, m: Sequence[np.ndarray], v: Sequence[np.ndarray]) -> None:
        self.t = int(t)
        self.m = [np.array(a, dtype=np.float64) for a in m]
        self.v = [np.array(a, dtype=np.float64) for a in v]
