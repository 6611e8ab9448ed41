"""Selective state-space scan and the four-direction 2D scanning block.

The recurrence follows the standard selective-SSM discretization: with
per-position dt = softplus(delta_proj(x)), the state transition is
exp(dt * A) (A = -exp(A_log), diagonal) and the input injection is the
Euler term dt * B_t * x_t. Images are unfolded along four scan orders
(row-major, column-major, and their reverses), scanned independently, and
folded back with a four-way sum.
"""

from __future__ import annotations

import math

import numpy as np

from . import engine as eg
from .engine import Parameter, ShapeMismatch, Tensor
from .layers import Conv2d, LayerNorm, Linear, Module, ModuleList, silu


def _inv_softplus(y: np.ndarray) -> np.ndarray:
    return np.log(np.expm1(y))


class DeltaProj(Module):
    """Low-rank linear map producing the per-position step size logits."""

    def __init__(self, rng, d_inner: int, rank: int, dtype=eg.F32):
        super().__init__()
        self.down = Linear(rng, d_inner, rank, bias=False, dtype=dtype)
        self.up = Linear(rng, rank, d_inner, bias=True, dtype=dtype)
        # Bias chosen so softplus(bias) lands log-uniformly in [1e-3, 1e-1].
        dt = np.exp(rng.uniform(math.log(1e-3), math.log(1e-1), d_inner))
        self.up.bias.data[:] = _inv_softplus(dt).astype(self.up.bias.dtype)

    def forward(self, x):
        return self.up(self.down(x))


def _a_log_init(d_inner: int, d_state: int, dtype) -> np.ndarray:
    row = np.log(np.arange(1, d_state + 1, dtype=np.float64))
    return np.tile(row, (d_inner, 1)).astype(np.dtype(dtype))


def default_dt_rank(d_model: int) -> int:
    return max(1, math.ceil(d_model / 16))


class S6Params(Module):
    """Parameters of a single-direction selective scan."""

    def __init__(self, rng, d_inner: int, d_state: int = 16,
                 dt_rank: int | None = None, dtype=eg.F32):
        super().__init__()
        self.d_inner = d_inner
        self.d_state = d_state
        rank = dt_rank if dt_rank is not None else default_dt_rank(d_inner)
        self.A_log = Parameter(_a_log_init(d_inner, d_state, dtype), "A_log")
        self.D_skip = Parameter(np.ones(d_inner, np.dtype(dtype)), "D_skip")
        self.delta_proj = DeltaProj(rng, d_inner, rank, dtype)
        self.b_proj = Linear(rng, d_inner, d_state, bias=False, dtype=dtype)
        self.c_proj = Linear(rng, d_inner, d_state, bias=False, dtype=dtype)


def s6_scan(u: Tensor, delta: Tensor, A: Tensor, B: Tensor, C: Tensor,
            D: Tensor) -> Tensor:
    """Run the discretized recurrence along the length axis.

    u, delta: [..., L, d_inner]; B, C: [..., L, d_state];
    A: [..., d_inner, d_state] and D: [..., d_inner], broadcast over
    leading/length axes.  h_t = exp(dt*A) * h_{t-1} + (dt*x_t) * B_t;
    y_t = <C_t, h_t> + D * x_t with h_0 = 0.

    Fused primitive: the adjoint runs the reverse-time recurrence
    gh_t = gy_t * C_t + exp(dt*A)_{t+1} * gh_{t+1}.
    """
    ud, dd, Ad, Bd, Cd, Dd = u.data, delta.data, A.data, B.data, C.data, D.data
    L = ud.shape[-2]

    dA = np.exp(dd[..., :, :, None] * Ad[..., None, :, :])   # [.., L, d, s]
    dBu = (dd * ud)[..., None] * Bd[..., None, :]
    H = np.empty_like(dA)
    h = np.zeros(np.broadcast_shapes(dA.shape, dBu.shape)[:-3] + dA.shape[-2:],
                 dA.dtype)
    for t in range(L):
        h = dA[..., t, :, :] * h + dBu[..., t, :, :]
        H[..., t, :, :] = h
    d_bc = Dd[..., None, :]
    y = np.einsum("...lds,...ls->...ld", H, Cd) + d_bc * ud

    def back(gy):
        GH = np.empty_like(H)
        gh = gy[..., L - 1, :, None] * Cd[..., L - 1, None, :]
        GH[..., L - 1, :, :] = gh
        for t in range(L - 2, -1, -1):
            gh = gy[..., t, :, None] * Cd[..., t, None, :] + \
                dA[..., t + 1, :, :] * gh
            GH[..., t, :, :] = gh
        h_prev = np.concatenate(
            [np.zeros_like(H[..., :1, :, :]), H[..., :-1, :, :]], axis=-3)
        g_exparg = GH * h_prev * dA                           # d/d(dt*A)
        k_b = np.einsum("...lds,...ls->...ld", GH, Bd)        # <gh, B>
        g_delta = np.einsum("...lds,...ds->...ld", g_exparg, Ad) + k_b * ud
        gA = eg._unbroadcast(
            np.einsum("...lds,...ld->...ds", g_exparg, dd), Ad.shape)
        gB = eg._unbroadcast(
            np.einsum("...lds,...ld->...ls", GH, dd * ud), Bd.shape)
        gC = eg._unbroadcast(
            np.einsum("...lds,...ld->...ls", H, gy), Cd.shape)
        gu = gy * d_bc + k_b * dd
        gD = eg._unbroadcast((gy * ud).sum(axis=-2, keepdims=True)[..., 0, :],
                             Dd.shape)
        return (eg._unbroadcast(gu, ud.shape),
                eg._unbroadcast(g_delta, dd.shape), gA, gB, gC, gD)

    return eg.apply_op("s6_scan", (u, delta, A, B, C, D), y, back)


def selective_scan(x_seq: Tensor, p: S6Params) -> Tensor:
    """Content-aware scan of a [L, d_inner] sequence."""
    delta = eg.softplus(p.delta_proj(x_seq))
    B = p.b_proj(x_seq)
    C = p.c_proj(x_seq)
    A = eg.neg(eg.exp(p.A_log))
    return s6_scan(x_seq, delta, A, B, C, p.D_skip)


# ---------------------------------------------------------------------------
# Four-direction unfold/fold


def _expand_batched(x: Tensor) -> Tensor:
    """[n, c, h, w] -> [n, 4, h*w, c] sequences in the four scan orders."""
    n, c, h, w = x.shape
    L = h * w
    d0 = eg.transpose(eg.reshape(x, (n, c, L)), (0, 2, 1))
    xt = eg.transpose(x, (0, 1, 3, 2))
    d1 = eg.transpose(eg.reshape(xt, (n, c, L)), (0, 2, 1))
    d2 = eg.flip(d0, (1,))
    d3 = eg.flip(d1, (1,))
    parts = [eg.reshape(t, (n, 1, L, c)) for t in (d0, d1, d2, d3)]
    return eg.concat(parts, axis=1)


def _merge_batched(seqs: Tensor, h: int, w: int) -> Tensor:
    """Inverse-fold each direction of [n, 4, h*w, c] and sum the four maps."""
    n, k, L, c = seqs.shape
    if k != 4 or L != h * w:
        raise ShapeMismatch(f"expected [n, 4, {h * w}, c], got {seqs.shape}")

    def seq(i):
        return eg.reshape(seqs[:, i:i + 1], (n, L, c))

    def fold_row(s):
        return eg.reshape(eg.transpose(s, (0, 2, 1)), (n, c, h, w))

    def fold_col(s):
        return eg.transpose(
            eg.reshape(eg.transpose(s, (0, 2, 1)), (n, c, w, h)), (0, 1, 3, 2))

    f0 = fold_row(seq(0))
    f1 = fold_col(seq(1))
    f2 = fold_row(eg.flip(seq(2), (1,)))
    f3 = fold_col(eg.flip(seq(3), (1,)))
    # Pairwise sum keeps merge(expand(x)) == 4x bit-exact.
    return eg.add(eg.add(f0, f2), eg.add(f1, f3))


def scan_expand(x: Tensor) -> Tensor:
    """Unfold [c, h, w] into four [c, h*w] sequences.

    Direction 0 scans rows from the top-left, direction 1 scans columns from
    the top-left, directions 2 and 3 are their reverses.
    """
    c, h, w = x.shape
    e = _expand_batched(eg.reshape(x, (1, c, h, w)))      # [1, 4, L, c]
    return eg.reshape(eg.transpose(e, (0, 1, 3, 2)), (4, c, h * w))


def scan_merge(seqs: Tensor, h: int, w: int) -> Tensor:
    """Fold four [c, h*w] sequences back and sum them into one [c, h, w]."""
    k, c, L = seqs.shape
    s = eg.transpose(eg.reshape(seqs, (1, k, c, L)), (0, 1, 3, 2))
    return eg.reshape(_merge_batched(s, h, w), (c, h, w))


# ---------------------------------------------------------------------------
# SS2D and the VSS block


class Ss2dParams(Module):
    """Per-direction scan parameters: A_log and D per direction, while the
    delta/B/C projections are shared by default (configurable)."""

    def __init__(self, rng, d_inner: int, d_state: int = 16,
                 dt_rank: int | None = None, shared_projections: bool = True,
                 dtype=eg.F32):
        super().__init__()
        self.d_inner = d_inner
        self.d_state = d_state
        self.shared_projections = shared_projections
        rank = dt_rank if dt_rank is not None else default_dt_rank(d_inner)
        a0 = _a_log_init(d_inner, d_state, dtype)
        self.A_log = Parameter(np.stack([a0] * 4), "A_log")
        self.D_skip = Parameter(np.ones((4, d_inner), np.dtype(dtype)),
                                "D_skip")
        if shared_projections:
            self.delta_proj = DeltaProj(rng, d_inner, rank, dtype)
            self.b_proj = Linear(rng, d_inner, d_state, bias=False, dtype=dtype)
            self.c_proj = Linear(rng, d_inner, d_state, bias=False, dtype=dtype)
        else:
            self.delta_projs = ModuleList(
                [DeltaProj(rng, d_inner, rank, dtype) for _ in range(4)])
            self.b_projs = ModuleList(
                [Linear(rng, d_inner, d_state, bias=False, dtype=dtype)
                 for _ in range(4)])
            self.c_projs = ModuleList(
                [Linear(rng, d_inner, d_state, bias=False, dtype=dtype)
                 for _ in range(4)])

    def _project(self, seqs: Tensor):
        """delta/B/C for [n, 4, L, d_inner] sequences."""
        n, k, L, c = seqs.shape
        if self.shared_projections:
            delta = eg.softplus(self.delta_proj(seqs))
            B = self.b_proj(seqs)
            C = self.c_proj(seqs)
            return delta, B, C
        ds, bs, cs = [], [], []
        for i in range(4):
            s = seqs[:, i:i + 1]
            ds.append(eg.softplus(self.delta_projs[i](s)))
            bs.append(self.b_projs[i](s))
            cs.append(self.c_projs[i](s))
        return (eg.concat(ds, axis=1), eg.concat(bs, axis=1),
                eg.concat(cs, axis=1))


def ss2d(x: Tensor, params: Ss2dParams) -> Tensor:
    """Scan-expand, per-direction selective scan, scan-merge.

    Accepts [c, h, w] or [n, c, h, w]; output matches the input layout.
    """
    squeeze = x.ndim == 3
    if squeeze:
        x = eg.reshape(x, (1,) + x.shape)
    n, c, h, w = x.shape
    seqs = _expand_batched(x)                              # [n, 4, L, c]
    delta, B, C = params._project(seqs)
    A = eg.neg(eg.exp(params.A_log))                       # [4, d, s]
    y = s6_scan(seqs, delta, A, B, C, params.D_skip)
    out = _merge_batched(y, h, w)
    if squeeze:
        out = eg.reshape(out, (c, h, w))
    return out


class VSSBlock(Module):
    """Gated residual block around SS2D on channel-last token maps."""

    def __init__(self, rng, d_model: int, d_state: int = 16,
                 expansion_factor: float = 1.0, dt_rank: int | None = None,
                 shared_projections: bool = True, dtype=eg.F32):
        super().__init__()
        d_inner = max(1, int(round(expansion_factor * d_model)))
        self.d_inner = d_inner
        rank = dt_rank if dt_rank is not None else default_dt_rank(d_model)
        self.norm = LayerNorm(d_model, dtype=dtype)
        self.in_proj = Linear(rng, d_model, 2 * d_inner, dtype=dtype)
        self.dwconv = Conv2d(rng, d_inner, d_inner, 3, padding=1,
                             groups=d_inner, bias=True, dtype=dtype)
        self.scan = Ss2dParams(rng, d_inner, d_state, rank,
                               shared_projections, dtype)
        self.out_norm = LayerNorm(d_inner, dtype=dtype)
        self.out_proj = Linear(rng, d_inner, d_model, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        n, h, w, d = x.shape
        z = self.in_proj(self.norm(x))                    # [n, h, w, 2*di]
        sig = z[..., 0:self.d_inner]
        gate = z[..., self.d_inner:2 * self.d_inner]
        s = eg.transpose(sig, (0, 3, 1, 2))               # channel-first
        s = silu(self.dwconv(s))
        s = ss2d(s, self.scan)
        s = eg.transpose(s, (0, 2, 3, 1))                 # channel-last
        s = self.out_norm(s)
        s = eg.mul(s, silu(gate))
        return eg.add(x, self.out_proj(s))
