"""Segmentation training loss: weighted soft-Dice plus cross-entropy.

total = alpha * dice + (1 - alpha) * ce. The Dice term uses softmax
probabilities with a smoothing constant shared between numerator and
denominator; cross-entropy is log-sum-exp stabilized.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine as eg
from .engine import EngineError, Tensor


class LabelOutOfRange(EngineError):
    pass


@dataclass
class LossConfig:
    alpha: float = 0.5
    dice_smooth: float = 1.0

    def validate(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise EngineError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.dice_smooth <= 0:
            raise EngineError("dice_smooth must be > 0")
        return self


def _target_array(target, num_classes: int) -> np.ndarray:
    arr = target.data if isinstance(target, Tensor) else np.asarray(target)
    labels = np.rint(arr).astype(np.int64)
    if labels.min() < 0 or labels.max() >= num_classes:
        raise LabelOutOfRange(
            f"labels span [{labels.min()}, {labels.max()}] but K={num_classes}")
    return labels


def one_hot(target, num_classes: int, dtype=eg.F32) -> Tensor:
    """[n, h, w] integer labels -> [n, K, h, w] one-hot planes."""
    labels = _target_array(target, num_classes)
    eye = np.eye(num_classes, dtype=np.dtype(dtype))
    return Tensor(np.moveaxis(eye[labels], -1, 1))


def _softmax_parts(logits: Tensor):
    m = eg.detach(eg.reduce_max(logits, axes=[1], keepdims=True))
    e = eg.exp(eg.sub(logits, m))
    s = eg.reduce_sum(e, axes=[1], keepdims=True)
    return e, s


def softmax_channels(logits: Tensor) -> Tensor:
    e, s = _softmax_parts(logits)
    return eg.div(e, s)


def dice_loss(logits: Tensor, target, smooth: float = 1.0) -> Tensor:
    """1 - mean over classes of the smoothed soft overlap ratio."""
    n, k, h, w = logits.shape
    g = one_hot(target, k, logits.dtype)
    p = softmax_channels(logits)
    axes = [0, 2, 3]
    inter = eg.reduce_sum(eg.mul(p, g), axes=axes)
    psum = eg.reduce_sum(p, axes=axes)
    gsum = eg.reduce_sum(g, axes=axes)
    eps = Tensor(np.asarray(smooth, logits.dtype))
    two = Tensor(np.asarray(2.0, logits.dtype))
    ratio = eg.div(eg.add(eg.mul(two, inter), eps),
                   eg.add(eg.add(psum, gsum), eps))
    return eg.sub(Tensor(np.asarray(1.0, logits.dtype)),
                  eg.reduce_mean(ratio, axes=[0]))


def ce_loss(logits: Tensor, target) -> Tensor:
    """Mean over pixels of -log softmax at the target class."""
    n, k, h, w = logits.shape
    g = one_hot(target, k, logits.dtype)
    m = eg.detach(eg.reduce_max(logits, axes=[1], keepdims=True))
    shifted = eg.sub(logits, m)
    lse = eg.log(eg.reduce_sum(eg.exp(shifted), axes=[1], keepdims=True))
    log_p = eg.sub(shifted, lse)
    picked = eg.reduce_sum(eg.mul(log_p, g), axes=[1])
    return eg.neg(eg.reduce_mean(picked, axes=[0, 1, 2]))


def total_loss(logits: Tensor, target, cfg: LossConfig) -> Tensor:
    """alpha * dice + (1 - alpha) * ce; exact at the alpha boundaries."""
    cfg.validate()
    dt = logits.dtype
    a = Tensor(np.asarray(cfg.alpha, dt))
    b = Tensor(np.asarray(1.0 - cfg.alpha, dt))
    return eg.add(eg.mul(a, dice_loss(logits, target, cfg.dice_smooth)),
                  eg.mul(b, ce_loss(logits, target)))
