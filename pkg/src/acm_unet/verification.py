"""Gradient verification battery: every layer family, the scan and wavelet
blocks, the adapters, the decoder stages, the losses, and a tiny end-to-end
model, each checked against f64 central differences.

Module-level checks run at tolerance 1e-4 and the end-to-end check at 1e-3;
plain engine ops run at 1e-6. Inputs are drawn away from non-smooth points
(relu kinks, pooling ties) by construction of the random draws.
"""

from __future__ import annotations

import numpy as np

from . import engine as eg
from . import layers as ly
from . import ssm
from . import wavelet as wv
from .engine import F64, Tensor, grad_check
from .losses import LossConfig, total_loss
from .model import (
    AdapterToMap,
    AdapterToTokens,
    ModelConfig,
    SegHead,
    UpBlock,
    build_model,
)


def _t(rng, shape, lo=-2.0, hi=2.0):
    return Tensor(rng.uniform(lo, hi, shape))


def _sq_mean(y):
    return eg.reduce_mean(eg.mul(y, y))


def gradient_suite(seed: int = 0):
    """Run every gradient check; returns [(name, GradCheckReport)]."""
    rng = np.random.default_rng(seed)
    out = []

    def check(name, fn, inputs, tol, eps=1e-5):
        out.append((name, grad_check(fn, inputs, eps=eps, tol=tol)))

    # Engine elementwise/reduction ops (tol 1e-6).
    x = _t(rng, (3, 4))
    check("engine.exp", lambda v: eg.reduce_mean(eg.exp(v)), [x], 1e-6)
    check("engine.log", lambda v: eg.reduce_mean(eg.log(v)),
          [_t(rng, (3, 4), 0.2, 2.0)], 1e-6)
    check("engine.softplus", lambda v: eg.reduce_mean(eg.softplus(v)), [x], 1e-6)
    check("engine.sigmoid", lambda v: eg.reduce_mean(eg.sigmoid(v)), [x], 1e-6)
    check("engine.sqrt", lambda v: eg.reduce_mean(eg.sqrt(v)),
          [_t(rng, (3, 4), 0.5, 2.0)], 1e-6)
    check("engine.relu", lambda v: eg.reduce_mean(eg.relu(v)),
          [_t(rng, (3, 4), 0.2, 2.0)], 1e-6)
    check("engine.div", lambda a, b: eg.reduce_mean(eg.div(a, b)),
          [x, _t(rng, (3, 4), 0.5, 2.0)], 1e-6)
    check("engine.reduce_max",
          lambda v: eg.reduce_mean(eg.mul(eg.reduce_max(v, axes=[1]),
                                          eg.reduce_max(v, axes=[1]))),
          [x], 1e-6)
    check("engine.matmul",
          lambda a, b: _sq_mean(eg.matmul(a, b)),
          [_t(rng, (3, 4)), _t(rng, (4, 2))], 1e-6)

    # Convolutions.
    xc = _t(rng, (2, 4, 8, 8), -1.0, 1.0)
    wc = _t(rng, (6, 2, 3, 3), -0.7, 0.7)
    bc = _t(rng, (6,), -0.5, 0.5)
    check("layers.conv2d_grouped_strided",
          lambda a, w, b: _sq_mean(
              ly.conv2d(a, w, b, (2, 2), ((1, 0), (1, 0)), 2)),
          [xc, wc, bc], 1e-4)
    wd = _t(rng, (4, 1, 3, 3), -0.7, 0.7)
    check("layers.conv2d_depthwise",
          lambda a, w: _sq_mean(ly.conv2d(a, w, None, (1, 1), (1, 1), 4)),
          [xc, wd], 1e-4)
    w1 = _t(rng, (5, 4, 1, 1), -0.7, 0.7)
    check("layers.conv2d_1x1",
          lambda a, w: _sq_mean(ly.conv2d(a, w, None)), [xc, w1], 1e-4)

    # Norms, pooling, resampling, linear.
    gam = Tensor(rng.uniform(0.5, 1.5, 4))
    bet = Tensor(rng.uniform(-0.5, 0.5, 4))
    rm, rv = np.zeros(4), np.ones(4)
    check("layers.batch_norm_train",
          lambda a, g, b: _sq_mean(
              ly.batch_norm(a, g, b, rm.copy(), rv.copy(), mode="train")),
          [xc, gam, bet], 1e-4)
    check("layers.batch_norm_eval",
          lambda a, g, b: _sq_mean(
              ly.batch_norm(a, g, b, rm + 0.2, rv + 0.5, mode="eval")),
          [xc, gam, bet], 1e-4)
    gl = Tensor(rng.uniform(0.5, 1.5, 6))
    bl = Tensor(rng.uniform(-0.5, 0.5, 6))
    check("layers.layer_norm",
          lambda a, g, b: _sq_mean(ly.layer_norm(a, g, b)),
          [_t(rng, (2, 5, 6)), gl, bl], 1e-4)
    check("layers.max_pool2d",
          lambda a: _sq_mean(ly.max_pool2d(a, (2, 2))),
          [_t(rng, (2, 3, 6, 6))], 1e-4)
    check("layers.bilinear_upsample2x",
          lambda a: _sq_mean(ly.bilinear_upsample2x(a)),
          [_t(rng, (2, 3, 5, 5))], 1e-4)
    wl = _t(rng, (3, 6), -0.7, 0.7)
    bl2 = _t(rng, (3,), -0.5, 0.5)
    check("layers.linear",
          lambda a, w, b: _sq_mean(ly.linear(a, w, b)),
          [_t(rng, (2, 4, 6)), wl, bl2], 1e-4)
    check("layers.silu", lambda a: eg.reduce_mean(ly.silu(a)), [x], 1e-6)

    # Scan stack.
    u = _t(rng, (2, 4, 5, 3), -1.0, 1.0)
    dl = _t(rng, (2, 4, 5, 3), 0.05, 0.8)
    A = _t(rng, (4, 3, 2), -1.5, -0.2)
    B = _t(rng, (2, 4, 5, 2), -1.0, 1.0)
    C = _t(rng, (2, 4, 5, 2), -1.0, 1.0)
    Dk = _t(rng, (4, 3), -1.0, 1.0)
    check("ssm.s6_scan",
          lambda *a: _sq_mean(ssm.s6_scan(*a)), [u, dl, A, B, C, Dk], 1e-4)
    p6 = ssm.S6Params(rng, 3, 4, dtype=F64)
    check("ssm.selective_scan",
          lambda v: _sq_mean(ssm.selective_scan(v, p6)),
          [_t(rng, (6, 3), -1.0, 1.0)], 1e-4)
    sp = ssm.Ss2dParams(rng, 3, d_state=2, dtype=F64)
    check("ssm.ss2d",
          lambda v: _sq_mean(ssm.ss2d(v, sp)),
          [_t(rng, (1, 3, 4, 4), -1.0, 1.0)], 1e-4)
    vb = ssm.VSSBlock(rng, 8, d_state=4, dtype=F64)
    check("ssm.vss_block",
          lambda v: _sq_mean(vb(v)), [_t(rng, (1, 4, 4, 8), -1.0, 1.0)], 1e-4)

    # Wavelet stack.
    xw = _t(rng, (1, 3, 8, 8), -1.0, 1.0)
    check("wavelet.dwt_idwt",
          lambda v: _sq_mean(wv.idwt2_haar(wv.dwt2_haar(v))), [xw], 1e-4)
    br = wv.WTConvBranch(rng, 3, 3, dtype=F64)
    check("wavelet.wtconv", lambda v: _sq_mean(wv.wtconv(v, br)), [xw], 1e-4)
    ms = wv.MSWT(rng, 3, dtype=F64)
    check("wavelet.mswt",
          lambda v: _sq_mean(wv.mswt(v, ms, "train")),
          [_t(rng, (1, 3, 8, 8), 0.1, 1.2)], 1e-4, eps=1e-6)

    # Adapters, decoder stage, head.
    at = AdapterToTokens(rng, 8, 8, dtype=F64)
    am = AdapterToMap(rng, 8, 8, dtype=F64)
    check("model.adapters",
          lambda v: _sq_mean(am(at(v))), [_t(rng, (1, 8, 3, 3), -1.0, 1.0)],
          1e-4)
    ub = UpBlock(rng, 8, 4, use_mswt=True, dtype=F64)
    check("model.upsample_block",
          lambda p, s: _sq_mean(ub(p, s)),
          [_t(rng, (1, 8, 4, 4), -1.0, 1.0), _t(rng, (1, 4, 8, 8), -1.0, 1.0)],
          1e-4, eps=1e-6)
    sh = SegHead(rng, 4, 3, dtype=F64)
    check("model.seg_head",
          lambda v: _sq_mean(sh(v)), [_t(rng, (1, 4, 4, 4), -1.0, 1.0)], 1e-4)

    # Losses with respect to the logits.
    logits = _t(rng, (1, 3, 4, 4), -1.5, 1.5)
    labels = rng.integers(0, 3, (1, 4, 4)).astype(np.float64)
    check("losses.total_loss",
          lambda lg: total_loss(lg, labels, LossConfig(0.5)), [logits], 1e-5)

    # End-to-end tiny model: gradient w.r.t. the input image and a few
    # parameters spread across the encoder, scan, and decoder.
    cfg = ModelConfig(base_width=4, n_vss=1, num_classes=2, input_size=16,
                      depths=(1, 1, 1), d_state=4)
    model = build_model(cfg, seed=seed, dtype=F64)
    img = Tensor(rng.uniform(0.05, 0.95, (1, 3, 16, 16)))
    lbl = rng.integers(0, 2, (1, 16, 16)).astype(np.float64)
    picks = dict(model.named_parameters())
    chosen = [
        img,
        picks["encoder.stem_conv.weight"],
        picks["vss.0.scan.A_log"],
        picks["up3.fuse.pointwise.weight"],
        picks["head.classify.weight"],
    ]
    check("model.end_to_end",
          lambda *a: total_loss(model(chosen[0]), lbl, LossConfig(0.5)),
          chosen, 1e-3, eps=1e-6)
    return out
