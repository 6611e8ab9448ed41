"""Orthonormal 2D Haar transform and wavelet-domain convolution blocks.

One decomposition level maps each 2x2 block [[a, b], [c, d]] to
ll=(a+b+c+d)/2, lh=(a+b-c-d)/2, hl=(a-b+c-d)/2, hh=(a-b-c+d)/2. The factor
1/2 makes the transform orthonormal, so energy is conserved and the inverse
is the transpose.
"""

from __future__ import annotations

import numpy as np

from . import engine as eg
from .engine import (
    EngineError,
    ShapeMismatch,
    Tensor,
    apply_op,
    apply_op_multi,
)
from .layers import BatchNorm2d, Conv2d, Module, ModuleList


class OddSpatialDim(EngineError):
    pass


class WaveletBands:
    """The four sub-band maps of one 2D decomposition level."""

    def __init__(self, ll: Tensor, lh: Tensor, hl: Tensor, hh: Tensor):
        shapes = {ll.shape, lh.shape, hl.shape, hh.shape}
        if len(shapes) != 1:
            raise ShapeMismatch(f"band shapes differ: {shapes}")
        self.ll = ll
        self.lh = lh
        self.hl = hl
        self.hh = hh

    def __iter__(self):
        return iter((self.ll, self.lh, self.hl, self.hh))


def _dwt_arrays(x: np.ndarray):
    a = x[:, :, 0::2, 0::2]
    b = x[:, :, 0::2, 1::2]
    c = x[:, :, 1::2, 0::2]
    d = x[:, :, 1::2, 1::2]
    ab, cd = a + b, c + d
    amb, cmd = a - b, c - d
    return ((ab + cd) * 0.5, (ab - cd) * 0.5,
            (amb + cmd) * 0.5, (amb - cmd) * 0.5)


def _idwt_arrays(ll, lh, hl, hh):
    n, c, h2, w2 = ll.shape
    s1, s2 = ll + lh, ll - lh
    d1, d2 = hl + hh, hl - hh
    out = np.empty((n, c, 2 * h2, 2 * w2), ll.dtype)
    out[:, :, 0::2, 0::2] = (s1 + d1) * 0.5
    out[:, :, 0::2, 1::2] = (s1 - d1) * 0.5
    out[:, :, 1::2, 0::2] = (s2 + d2) * 0.5
    out[:, :, 1::2, 1::2] = (s2 - d2) * 0.5
    return out


def dwt2_haar(x: Tensor) -> WaveletBands:
    """One-level orthonormal Haar decomposition of [n, c, h, w] (h, w even).

    The transform is orthogonal, so its adjoint (used in backward) is the
    inverse transform applied to band gradients, and vice versa.
    """
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise OddSpatialDim(f"spatial dims must be even, got {h}x{w}")

    def back(gll, glh, ghl, ghh):
        return (_idwt_arrays(gll, glh, ghl, ghh),)

    outs = apply_op_multi("dwt2_haar", (x,), _dwt_arrays(x.data), back)
    return WaveletBands(*outs)


def idwt2_haar(bands: WaveletBands) -> Tensor:
    """Exact inverse (transpose) of dwt2_haar."""
    ll, lh, hl, hh = bands

    def back(g):
        return _dwt_arrays(g)

    return apply_op("idwt2_haar", (ll, lh, hl, hh),
                    _idwt_arrays(ll.data, lh.data, hl.data, hh.data), back)


def _stack_bands(bands: WaveletBands) -> Tensor:
    return eg.concat(list(bands), axis=1)


def _unstack_bands(stacked: Tensor) -> WaveletBands:
    return WaveletBands(*eg.chunk(stacked, 4, axis=1))


class WTConvBranch(Module):
    """Depthwise conv applied jointly in the spatial and wavelet domains.

    One spatial kernel plus, per decomposition level, four per-band kernels
    of the same size (stored stacked as one grouped conv over 4c channels);
    band outputs are recombined through the inverse transform and added to
    the spatial path. Deeper levels refine the low-frequency band
    recursively.
    """

    def __init__(self, rng, ch: int, kernel: int, levels: int = 1,
                 dtype=eg.F32):
        super().__init__()
        self.kernel = kernel
        self.levels = levels
        pad = kernel // 2
        self.spatial = Conv2d(rng, ch, ch, kernel, padding=pad, groups=ch,
                              bias=False, dtype=dtype)
        self.band_convs = ModuleList(
            [Conv2d(rng, 4 * ch, 4 * ch, kernel, padding=pad, groups=4 * ch,
                    bias=False, dtype=dtype) for _ in range(levels)])

    def _wavelet_path(self, x: Tensor, level: int) -> Tensor:
        bands = dwt2_haar(x)
        out = _unstack_bands(self.band_convs[level](_stack_bands(bands)))
        pll = out.ll
        if level + 1 < self.levels:
            pll = eg.add(pll, self._wavelet_path(bands.ll, level + 1))
        return idwt2_haar(WaveletBands(pll, out.lh, out.hl, out.hh))

    def forward(self, x: Tensor) -> Tensor:
        h, w = x.shape[2], x.shape[3]
        if (h % (2 ** self.levels)) or (w % (2 ** self.levels)):
            raise OddSpatialDim(
                f"{h}x{w} not divisible by 2^{self.levels}")
        return eg.add(self.spatial(x), self._wavelet_path(x, 0))


def wtconv(x: Tensor, branch: WTConvBranch) -> Tensor:
    return branch(x)


class MSWT(Module):
    """Three parallel wavelet-conv branches (kernels 1/3/5) with a residual.

    z_out = z_in + relu(bn(x_0 + x_1 + x_2)) where x_i is branch i applied
    to z_in. The batch norm is shared, applied once after the sum. The
    forward pass shares one decomposition across the branches and merges
    their band outputs through a single inverse transform (the transform is
    linear, so this equals summing the branches).
    """

    KERNELS = (1, 3, 5)

    def __init__(self, rng, ch: int, levels: int = 1, dtype=eg.F32):
        super().__init__()
        self.levels = levels
        self.branches = ModuleList(
            [WTConvBranch(rng, ch, k, levels, dtype) for k in self.KERNELS])
        self.bn = BatchNorm2d(ch, dtype=dtype)

    def _fused_wavelet(self, x: Tensor, level: int) -> Tensor:
        bands = dwt2_haar(x)
        stacked = _stack_bands(bands)
        total = self.branches[0].band_convs[level](stacked)
        for br in list(self.branches)[1:]:
            total = eg.add(total, br.band_convs[level](stacked))
        out = _unstack_bands(total)
        pll = out.ll
        if level + 1 < self.levels:
            pll = eg.add(pll, self._fused_wavelet(bands.ll, level + 1))
        return idwt2_haar(WaveletBands(pll, out.lh, out.hl, out.hh))

    def forward(self, z: Tensor) -> Tensor:
        h, w = z.shape[2], z.shape[3]
        if (h % (2 ** self.levels)) or (w % (2 ** self.levels)):
            raise OddSpatialDim(f"{h}x{w} not divisible by 2^{self.levels}")
        s = self.branches[0].spatial(z)
        for br in list(self.branches)[1:]:
            s = eg.add(s, br.spatial(z))
        s = eg.add(s, self._fused_wavelet(z, 0))
        return eg.add(z, eg.relu(self.bn(s)))


def mswt(z_in: Tensor, module: MSWT, mode: str = "train") -> Tensor:
    """Functional entry point with an explicit batch-norm mode."""
    was = module.training
    module.train(mode == "train")
    try:
        return module(z_in)
    finally:
        module.train(was)
