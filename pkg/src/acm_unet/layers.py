"""Neural-network layers on the tensor engine.

Convolution uses cross-correlation semantics (no kernel flip). The heavy ops
(conv, pooling, upsampling) are tape primitives with hand-written adjoints;
norms and activations are compositions of engine ops. A small Module system
provides parameter registration, dotted name paths, and train/eval state.
"""

from __future__ import annotations

import numpy as np

from . import engine as eg
from .engine import (
    EngineError,
    Parameter,
    ShapeMismatch,
    Tensor,
    apply_op,
)


class NonIntegralOutputSize(EngineError):
    pass


# ---------------------------------------------------------------------------
# Module system


class Module:
    """Base class with automatic Parameter/submodule registration."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, key, value):
        if isinstance(value, Parameter):
            self._params[key] = value
        elif isinstance(value, Module):
            self._modules[key] = value
        elif isinstance(value, np.ndarray):
            # Non-trainable state (e.g. batch-norm running statistics).
            self._buffers[key] = value
        object.__setattr__(self, key, value)

    def named_parameters(self, prefix: str = ""):
        for k, p in self._params.items():
            yield (f"{prefix}{k}", p)
        for k, m in self._modules.items():
            yield from m.named_parameters(f"{prefix}{k}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = ""):
        for k, b in self._buffers.items():
            yield (f"{prefix}{k}", b)
        for k, m in self._modules.items():
            yield from m.named_buffers(f"{prefix}{k}.")

    def assign_names(self, prefix: str = ""):
        """Stamp dotted path names onto parameters; names must be unique."""
        seen = set()
        for name, p in self.named_parameters(prefix):
            if name in seen:
                raise EngineError(f"duplicate parameter name {name}")
            seen.add(name)
            p.name = name

    def train(self, flag: bool = True):
        object.__setattr__(self, "training", flag)
        for m in self._modules.values():
            m.train(flag)
        return self

    def eval(self):
        return self.train(False)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        self._items = []
        for m in modules:
            self.append(m)

    def append(self, m: Module):
        setattr(self, str(len(self._items)), m)
        self._items.append(m)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


# ---------------------------------------------------------------------------
# Initialization


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int,
                    dtype=eg.F32) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.dtype(dtype))


# ---------------------------------------------------------------------------
# Convolution


def _out_size(size, k, s, pad):
    span = size + pad[0] + pad[1] - k
    if span < 0 or span % s != 0:
        raise NonIntegralOutputSize(
            f"size {size} with kernel {k}, stride {s}, pad {pad}")
    return span // s + 1


def _norm_pad(p):
    """Padding as ((top, bottom), (left, right)); ints mean symmetric."""
    ph, pw = p
    if isinstance(ph, int):
        ph = (ph, ph)
    if isinstance(pw, int):
        pw = (pw, pw)
    return tuple(ph), tuple(pw)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride=(1, 1), padding=(0, 0), groups: int = 1) -> Tensor:
    """2-D cross-correlation over [n, c, h, w] with grouped kernels.

    Output sizes must come out integral: (h + pads - kh) divisible by the
    stride. Strided layers therefore use asymmetric padding where needed.
    """
    n, c, h, w = x.shape
    oc, cg, kh, kw = weight.shape
    if c != cg * groups or oc % groups != 0:
        raise ShapeMismatch(
            f"conv2d: input {c} ch, weight {weight.shape}, groups {groups}")
    if x.dtype != weight.dtype:
        raise eg.DtypeMismatch("conv2d input/weight dtype mismatch")
    sh, sw = stride
    ph, pw = _norm_pad(padding)
    oh = _out_size(h, kh, sh, ph)
    ow = _out_size(w, kw, sw, pw)
    ocg = oc // groups

    if groups == c and cg == 1 and ocg == 1:
        return _depthwise_conv2d(x, weight, bias, (sh, sw), (ph, pw), (oh, ow))
    if (groups == 1 and kh == kw == 1 and (sh, sw) == (1, 1)
            and ph == pw == (0, 0)):
        return _conv1x1(x, weight, bias)

    padded = any(p != (0, 0) for p in (ph, pw))
    xp = np.pad(x.data, ((0, 0), (0, 0), ph, pw)) if padded else x.data
    ns, cs, hs, ws = xp.strides
    win = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, oh, ow, groups, cg, kh, kw),
        strides=(ns, sh * hs, sw * ws, cg * cs, cs, hs, ws),
        writeable=False,
    )
    # [n, g, oh*ow, cg*kh*kw] columns; one matmul per batch via broadcasting
    cols = np.ascontiguousarray(win.transpose(0, 3, 1, 2, 4, 5, 6)).reshape(
        n, groups, oh * ow, cg * kh * kw)
    wmat = weight.data.reshape(groups, ocg, cg * kh * kw)
    out = np.matmul(cols, wmat.transpose(0, 2, 1))  # [n, g, ohw, ocg]
    out = out.transpose(0, 1, 3, 2).reshape(n, oc, oh, ow)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    has_bias = bias is not None
    inputs = (x, weight, bias) if has_bias else (x, weight)

    def back(g):
        gr = g.reshape(n, groups, ocg, oh * ow)
        gw = np.matmul(gr, cols).sum(axis=0).reshape(weight.shape)
        gcols = np.matmul(gr.transpose(0, 1, 3, 2), wmat)  # [n, g, ohw, K]
        gwin = gcols.reshape(n, groups, oh, ow, cg, kh, kw)
        gxp = np.zeros_like(xp)
        hp, wp = xp.shape[2], xp.shape[3]
        gxv = gxp.reshape(n, groups, cg, hp, wp)
        for i in range(kh):
            for j in range(kw):
                gxv[:, :, :, i:i + sh * oh:sh, j:j + sw * ow:sw] += \
                    gwin[:, :, :, :, :, i, j].transpose(0, 1, 4, 2, 3)
        gx = gxp[:, :, ph[0]:ph[0] + h, pw[0]:pw[0] + w] if padded else gxp
        if has_bias:
            return gx, gw, g.sum(axis=(0, 2, 3))
        return gx, gw

    return apply_op("conv2d", inputs, out, back)


def _depthwise_conv2d(x, weight, bias, stride, pad, out_hw):
    """Per-channel conv via a (kh, kw) accumulation loop; avoids im2col."""
    n, c, h, w = x.shape
    _, _, kh, kw = weight.shape
    sh, sw = stride
    ph, pw = pad
    oh, ow = out_hw
    if kh == kw == 1 and stride == (1, 1) and ph == pw == (0, 0):
        return _depthwise_1x1(x, weight, bias)
    padded = ph != (0, 0) or pw != (0, 0)
    xp = np.pad(x.data, ((0, 0), (0, 0), ph, pw)) if padded else x.data
    wk = weight.data.reshape(c, kh, kw)
    out = np.zeros((n, c, oh, ow), x.dtype)
    for a in range(kh):
        for b in range(kw):
            out += xp[:, :, a:a + sh * oh:sh, b:b + sw * ow:sw] * \
                wk[None, :, a, b, None, None]
    if bias is not None:
        out += bias.data[None, :, None, None]

    has_bias = bias is not None
    inputs = (x, weight, bias) if has_bias else (x, weight)

    def back(g):
        gxp = np.zeros_like(xp)
        gw = np.empty_like(wk)
        for a in range(kh):
            for b in range(kw):
                view = xp[:, :, a:a + sh * oh:sh, b:b + sw * ow:sw]
                gxp[:, :, a:a + sh * oh:sh, b:b + sw * ow:sw] += \
                    g * wk[None, :, a, b, None, None]
                gw[:, a, b] = np.einsum("nchw,nchw->c", view, g)
        gx = gxp[:, :, ph[0]:ph[0] + h, pw[0]:pw[0] + w] if padded else gxp
        if has_bias:
            return gx, gw.reshape(weight.shape), g.sum(axis=(0, 2, 3))
        return gx, gw.reshape(weight.shape)

    return apply_op("conv2d", inputs, out, back)


def _conv1x1(x, weight, bias):
    """Stride-1 unpadded 1x1 convolution as one batched matmul."""
    n, c, h, w = x.shape
    oc = weight.shape[0]
    w2 = weight.data.reshape(oc, c)
    xr = x.data.reshape(n, c, h * w)
    out = np.matmul(w2, xr).reshape(n, oc, h, w)
    if bias is not None:
        out += bias.data[None, :, None, None]
    has_bias = bias is not None
    inputs = (x, weight, bias) if has_bias else (x, weight)

    def back(g):
        gr = g.reshape(n, oc, h * w)
        gw = np.einsum("nol,ncl->oc", gr, xr).reshape(weight.shape)
        gx = np.matmul(w2.T, gr).reshape(x.shape)
        if has_bias:
            return gx, gw, g.sum(axis=(0, 2, 3))
        return gx, gw

    return apply_op("conv2d", inputs, out, back)


def _depthwise_1x1(x, weight, bias):
    """Depthwise 1x1 is a per-channel scale (plus optional shift)."""
    wk = weight.data.reshape(-1)
    out = x.data * wk[None, :, None, None]
    if bias is not None:
        out += bias.data[None, :, None, None]
    has_bias = bias is not None
    inputs = (x, weight, bias) if has_bias else (x, weight)

    def back(g):
        gx = g * wk[None, :, None, None]
        gw = np.einsum("nchw,nchw->c", x.data, g).reshape(weight.shape)
        if has_bias:
            return gx, gw, g.sum(axis=(0, 2, 3))
        return gx, gw

    return apply_op("conv2d", inputs, out, back)


class Conv2d(Module):
    def __init__(self, rng, in_ch, out_ch, kernel, stride=1, padding=0,
                 groups=1, bias=True, dtype=eg.F32):
        super().__init__()
        if isinstance(kernel, int):
            kernel = (kernel, kernel)
        self.stride = (stride, stride) if isinstance(stride, int) else stride
        self.padding = (padding, padding) if isinstance(padding, int) else padding
        self.groups = groups
        fan_in = (in_ch // groups) * kernel[0] * kernel[1]
        self.weight = Parameter(
            kaiming_uniform(rng, (out_ch, in_ch // groups, *kernel), fan_in,
                            dtype), "weight")
        self.bias = Parameter(np.zeros(out_ch, np.dtype(dtype)), "bias") if bias else None

    def forward(self, x):
        return conv2d(x, self.weight, self.bias, self.stride, self.padding,
                      self.groups)


def depthwise_separable_conv(x: Tensor, depthwise: "Conv2d",
                             pointwise: "Conv2d") -> Tensor:
    """Per-channel spatial conv followed by 1x1 channel mixing.

    Weight accounting (c in, m out, k kernel, no biases): depthwise c*k*k plus
    pointwise c*m, versus c*m*k*k for the full convolution — e.g. 400 vs 2304
    weights at c=m=16, k=3 (2320 counting the full conv's bias).
    """
    if depthwise.groups != x.shape[1]:
        raise ShapeMismatch("depthwise stage must have groups == channels")
    if pointwise.weight.shape[2:] != (1, 1):
        raise ShapeMismatch("pointwise stage must be 1x1")
    return pointwise(depthwise(x))


class DWConv(Module):
    """Depthwise separable convolution block."""

    def __init__(self, rng, in_ch, out_ch, kernel=3, dtype=eg.F32):
        super().__init__()
        pad = kernel // 2
        self.depthwise = Conv2d(rng, in_ch, in_ch, kernel, padding=pad,
                                groups=in_ch, bias=False, dtype=dtype)
        self.pointwise = Conv2d(rng, in_ch, out_ch, 1, bias=True, dtype=dtype)

    def forward(self, x):
        return depthwise_separable_conv(x, self.depthwise, self.pointwise)


# ---------------------------------------------------------------------------
# Pooling and resampling


def max_pool2d(x: Tensor, kernel=(2, 2), stride=None) -> Tensor:
    """Window max; backward routes to the first maximum in row-major order."""
    if isinstance(kernel, int):
        kernel = (kernel, kernel)
    if stride is None:
        stride = kernel
    if isinstance(stride, int):
        stride = (stride, stride)
    n, c, h, w = x.shape
    kh, kw = kernel
    sh, sw = stride
    oh = _out_size(h, kh, sh, (0, 0))
    ow = _out_size(w, kw, sw, (0, 0))
    ns, cs, hs, ws = x.data.strides
    win = np.lib.stride_tricks.as_strided(
        x.data, shape=(n, c, oh, ow, kh, kw),
        strides=(ns, cs, sh * hs, sw * ws, hs, ws), writeable=False)
    flat = np.ascontiguousarray(win).reshape(n, c, oh, ow, kh * kw)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def back(g):
        gx = np.zeros_like(x.data)
        ni, ci, oi, oj = np.indices(idx.shape)
        rows = oi * sh + idx // kw
        cols = oj * sw + idx % kw
        np.add.at(gx, (ni, ci, rows, cols), g)
        return (gx,)

    return apply_op("max_pool2d", (x,), out, back)


def avg_pool2x(x: Tensor) -> Tensor:
    """2x2 stride-2 average pooling (even spatial dims)."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise NonIntegralOutputSize(f"avg_pool2x needs even dims, got {h}x{w}")
    s = eg.add(eg.add(x[:, :, 0::2, 0::2], x[:, :, 0::2, 1::2]),
               eg.add(x[:, :, 1::2, 0::2], x[:, :, 1::2, 1::2]))
    return eg.mul(s, _const(0.25, x.dtype))


def _upsample2x_mix(size: int, dtype) -> tuple:
    """Indices/weights for 2x resize, half-pixel centers, edges clamped."""
    d = np.arange(2 * size)
    s = np.clip((d + 0.5) / 2.0 - 0.5, 0.0, size - 1.0)
    i0 = np.floor(s).astype(np.int64)
    i1 = np.minimum(i0 + 1, size - 1)
    w1 = (s - i0).astype(np.dtype(dtype))
    return i0, i1, w1


def _upsample2x_matrix(size: int, dtype) -> np.ndarray:
    i0, i1, w1 = _upsample2x_mix(size, dtype)
    m = np.zeros((2 * size, size), np.dtype(dtype))
    m[np.arange(2 * size), i0] += 1 - w1
    m[np.arange(2 * size), i1] += w1
    return m


def bilinear_upsample2x(x: Tensor) -> Tensor:
    """Bilinear 2x upsampling (half-pixel alignment, clamped borders)."""
    n, c, h, w = x.shape
    r0, r1, wr = _upsample2x_mix(h, x.dtype)
    c0, c1, wc = _upsample2x_mix(w, x.dtype)
    # Lerp form a + w*(b - a) keeps constant inputs bit-exact.
    a = x.data[:, :, r0, :]
    b = x.data[:, :, r1, :]
    rows = a + wr[None, None, :, None] * (b - a)
    a = rows[:, :, :, c0]
    b = rows[:, :, :, c1]
    out = a + wc[None, None, None, :] * (b - a)

    ur = _upsample2x_matrix(h, x.dtype)
    uc = _upsample2x_matrix(w, x.dtype)

    def back(g):
        t = np.matmul(g, uc)          # [n, c, 2h, w]
        gx = np.matmul(ur.T, t)       # [n, c, h, w]
        return (gx,)

    return apply_op("bilinear_upsample2x", (x,), out, back)


# ---------------------------------------------------------------------------
# Normalization


def _const(v, dtype) -> Tensor:
    return Tensor(np.asarray(v, dtype=np.dtype(dtype)))


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor,
               running_mean: np.ndarray, running_var: np.ndarray,
               momentum: float = 0.1, eps: float = 1e-5,
               mode: str = "train") -> Tensor:
    """Per-channel normalization over (n, h, w); biased batch variance.

    Train mode normalizes by batch statistics and folds them into the
    running estimates with the given momentum; eval mode normalizes by the
    running estimates. Fused primitive with a hand-written adjoint.
    """
    dt = np.dtype(x.dtype)
    cnt = x.shape[0] * x.shape[2] * x.shape[3]
    if mode == "train":
        mu = x.data.mean(axis=(0, 2, 3))
        xc = x.data - mu[None, :, None, None]
        var = np.einsum("nchw,nchw->c", xc, xc) / cnt
        inv = 1.0 / np.sqrt(var + dt.type(eps))
        xhat = xc * inv[None, :, None, None]
        out = gamma.data[None, :, None, None] * xhat + \
            beta.data[None, :, None, None]
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.astype(running_mean.dtype)
        running_var *= 1.0 - momentum
        running_var += momentum * var.astype(running_var.dtype)

        def back(g):
            gbeta = g.sum(axis=(0, 2, 3))
            ggamma = np.einsum("nchw,nchw->c", g, xhat)
            gxh = g * gamma.data[None, :, None, None]
            mean_gxh = gxh.mean(axis=(0, 2, 3))
            mean_gxh_xhat = np.einsum("nchw,nchw->c", gxh, xhat) / cnt
            gx = inv[None, :, None, None] * (
                gxh - mean_gxh[None, :, None, None]
                - xhat * mean_gxh_xhat[None, :, None, None])
            return gx.astype(dt, copy=False), ggamma, gbeta

        return apply_op("batch_norm", (x, gamma, beta), out.astype(dt, copy=False),
                        back)

    inv = (1.0 / np.sqrt(running_var + eps)).astype(dt)
    rm = running_mean.astype(dt)
    xhat = (x.data - rm[None, :, None, None]) * inv[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def back_eval(g):
        gbeta = g.sum(axis=(0, 2, 3))
        ggamma = np.einsum("nchw,nchw->c", g, xhat)
        gx = g * (gamma.data * inv)[None, :, None, None]
        return gx, ggamma, gbeta

    return apply_op("batch_norm", (x, gamma, beta), out, back_eval)


class BatchNorm2d(Module):
    def __init__(self, ch, momentum=0.1, eps=1e-5, dtype=eg.F32):
        super().__init__()
        self.gamma = Parameter(np.ones(ch, np.dtype(dtype)), "gamma")
        self.beta = Parameter(np.zeros(ch, np.dtype(dtype)), "beta")
        self.running_mean = np.zeros(ch, np.dtype(dtype))
        self.running_var = np.ones(ch, np.dtype(dtype))
        self.momentum = momentum
        self.eps = eps

    def forward(self, x):
        return batch_norm(x, self.gamma, self.beta, self.running_mean,
                          self.running_var, self.momentum, self.eps,
                          "train" if self.training else "eval")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor,
               eps: float = 1e-6) -> Tensor:
    """Normalize over the trailing channel axis (population variance)."""
    dt = x.dtype
    mu = eg.reduce_mean(x, axes=[x.ndim - 1], keepdims=True)
    xc = eg.sub(x, mu)
    var = eg.reduce_mean(eg.mul(xc, xc), axes=[x.ndim - 1], keepdims=True)
    inv = eg.div(_const(1.0, dt), eg.sqrt(eg.add(var, _const(eps, dt))))
    return eg.add(eg.mul(gamma, eg.mul(xc, inv)), beta)


class LayerNorm(Module):
    def __init__(self, ch, eps=1e-6, dtype=eg.F32):
        super().__init__()
        self.gamma = Parameter(np.ones(ch, np.dtype(dtype)), "gamma")
        self.beta = Parameter(np.zeros(ch, np.dtype(dtype)), "beta")
        self.eps = eps

    def forward(self, x):
        return layer_norm(x, self.gamma, self.beta, self.eps)


# ---------------------------------------------------------------------------
# Activations and linear


def silu(x: Tensor) -> Tensor:
    return eg.mul(x, eg.sigmoid(x))


def activation(kind: str, x: Tensor) -> Tensor:
    if kind == "relu":
        return eg.relu(x)
    if kind == "silu":
        return silu(x)
    raise EngineError(f"unknown activation '{kind}'")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map over the trailing axis: y = x @ w.T + b, w is [out, in]."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeMismatch(f"linear: {x.shape} with weight {weight.shape}")
    lead = x.shape[:-1]
    flat = eg.reshape(x, (-1, x.shape[-1])) if x.ndim != 2 else x
    y = eg.matmul(flat, eg.transpose(weight, (1, 0)))
    if bias is not None:
        y = eg.add(y, bias)
    if x.ndim != 2:
        y = eg.reshape(y, lead + (weight.shape[0],))
    return y


class Linear(Module):
    def __init__(self, rng, in_f, out_f, bias=True, dtype=eg.F32):
        super().__init__()
        self.weight = Parameter(
            kaiming_uniform(rng, (out_f, in_f), in_f, dtype), "weight")
        self.bias = Parameter(np.zeros(out_f, np.dtype(dtype)), "bias") if bias else None

    def forward(self, x):
        return linear(x, self.weight, self.bias)
