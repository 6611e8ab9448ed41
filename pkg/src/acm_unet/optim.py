"""AdamW with decoupled decay and the cosine learning-rate schedule.

Weight decay applies only to parameters named '*.weight' (convolution and
linear kernels); biases, norm affines, and scan-specific parameters are
exempt.
"""

from __future__ import annotations

import math

import numpy as np

from .engine import Parameter, ShapeMismatch


def decays(name: str) -> bool:
    return name.endswith(".weight")


class AdamW:
    def __init__(self, params, lr: float = 5e-4, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params: list[Parameter] = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad.data[...] = 0

    def step(self, lr: float | None = None, grads: dict | None = None):
        """One update; gradients come from p.grad unless given by name."""
        lr = self.lr if lr is None else lr
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for i, p in enumerate(self.params):
            g = grads[p.name].data if grads is not None else p.grad.data
            if g.shape != p.shape:
                raise ShapeMismatch(f"grad {g.shape} vs param {p.shape} ({p.name})")
            m, v = self.m[i], self.v[i]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data -= (lr * update).astype(p.dtype, copy=False)
            if self.weight_decay and decays(p.name):
                p.data -= (lr * self.weight_decay) * p.data

    def state_records(self):
        for i, p in enumerate(self.params):
            yield p.name, self.m[i], self.v[i]

    def load_state(self, records: dict):
        by_name = {p.name: i for i, p in enumerate(self.params)}
        for name, (m, v) in records.items():
            i = by_name.get(name)
            if i is None or m.shape != self.params[i].shape:
                raise ShapeMismatch(f"optimizer state mismatch for {name}")
            self.m[i] = m.astype(self.params[i].dtype)
            self.v[i] = v.astype(self.params[i].dtype)


def adamw_step(optimizer: AdamW, grads: dict, lr: float):
    """Functional form: apply one update from a {name: grad Tensor} map."""
    optimizer.step(lr=lr, grads=grads)


def cosine_lr(t: int, total: int, base_lr: float, min_lr: float = 0.0) -> float:
    """min + (base - min) * (1 + cos(pi * t / total)) / 2 for t in [0, total]."""
    if total <= 0:
        return base_lr
    t = min(max(t, 0), total)
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * t / total))
