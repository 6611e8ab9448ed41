"""Dense tensor storage and reverse-mode differentiation.

Tensors wrap contiguous row-major numpy buffers in f32 (compute) or f64
(verification). Operations executed while a GradTape is active are recorded
as nodes; ``backward`` replays the tape in reverse to accumulate gradients
into every Parameter that participated in the forward pass. Ops never mutate
recorded buffers; each op allocates a fresh output.
"""

from __future__ import annotations

import numpy as np

F32 = np.dtype(np.float32)
F64 = np.dtype(np.float64)


class EngineError(Exception):
    pass


class ShapeMismatch(EngineError):
    pass


class DtypeMismatch(EngineError):
    pass


class InvalidAxis(EngineError):
    pass


class NotScalar(EngineError):
    pass


class TapeConsumed(EngineError):
    pass


class NonFiniteOutput(EngineError):
    pass


class DivideByZero(EngineError):
    pass


# ---------------------------------------------------------------------------
# Tensor and Parameter


class Tensor:
    """Contiguous row-major N-d array of f32 or f64 scalars."""

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, dtype=None, requires_grad: bool = False):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(np.dtype(dtype), copy=False)
        elif not (arr.dtype == F64 and isinstance(data, (np.ndarray, np.generic))):
            # Python lists/scalars default to the f32 compute dtype; numpy
            # f64 data keeps its precision for verification work.
            arr = arr.astype(F32, copy=False)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def strides(self) -> tuple:
        """Element (not byte) strides of the row-major layout."""
        item = self.data.itemsize
        return tuple(s // item for s in self.data.strides)

    def flat_index(self, idx) -> int:
        """Row-major flat offset of a multi-index: sum_j idx[j] * stride[j]."""
        if len(idx) != self.ndim:
            raise ShapeMismatch(f"index rank {len(idx)} vs tensor rank {self.ndim}")
        return int(sum(i * s for i, s in zip(idx, self.strides)))

    def item(self) -> float:
        if self.size != 1:
            raise NotScalar(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(np.dtype(dtype)))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name})"

    # Arithmetic sugar: delegates to the engine ops so tracing still works.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, key):
        return getitem(self, key)


class Parameter(Tensor):
    """Trainable leaf tensor with a name path and a gradient slot."""

    __slots__ = ("name", "grad")

    def __init__(self, data, name: str = "", dtype=None):
        super().__init__(data, dtype=dtype, requires_grad=True)
        self.name = name
        self.grad = Tensor(np.zeros_like(self.data))


def tensor(data, dtype=None, requires_grad=False) -> Tensor:
    return Tensor(data, dtype=dtype, requires_grad=requires_grad)


def zeros(shape, dtype=F32) -> Tensor:
    return Tensor(np.zeros(shape, dtype=np.dtype(dtype)))


def ones(shape, dtype=F32) -> Tensor:
    return Tensor(np.ones(shape, dtype=np.dtype(dtype)))


def zeros_like(t: Tensor) -> Tensor:
    return Tensor(np.zeros_like(t.data))


def ones_like(t: Tensor) -> Tensor:
    return Tensor(np.ones_like(t.data))


# ---------------------------------------------------------------------------
# Gradient tape


class _Node:
    __slots__ = ("name", "inputs", "outputs", "back")

    def __init__(self, name, inputs, outputs, back):
        self.name = name
        self.inputs = inputs
        self.outputs = outputs
        self.back = back


_TAPE_STACK: list = []


class GradTape:
    """Ordered record of executed ops. Single use: one backward per tape."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False
        self._leaf_grads: dict[int, np.ndarray] = {}

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _TAPE_STACK.pop()
        return False

    def record(self, name, inputs, outputs, back):
        self.nodes.append(_Node(name, inputs, outputs, back))

    def grad(self, t: Tensor) -> Tensor:
        """Gradient of the last backward() w.r.t. a leaf tensor (zeros if unused)."""
        if not self.consumed:
            raise EngineError("grad() is only available after backward()")
        g = self._leaf_grads.get(id(t))
        if g is None:
            return Tensor(np.zeros_like(t.data))
        return Tensor(g)


def _active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def apply_op(name, inputs, out_data, back) -> Tensor:
    """Wrap an op result, recording it on the active tape when tracing.

    ``back`` maps the output gradient array to per-input gradient arrays
    (None for non-differentiable inputs). Used by layer primitives as well.
    """
    out = Tensor(out_data)
    req = any(t.requires_grad for t in inputs)
    out.requires_grad = req
    tape = _active_tape()
    if tape is not None and req and not tape.consumed:
        tape.record(name, tuple(inputs), (out,), back)
    return out


def apply_op_multi(name, inputs, out_arrays, back) -> tuple:
    """Multi-output variant; ``back`` receives one gradient per output
    (zeros where an output does not reach the loss)."""
    req = any(t.requires_grad for t in inputs)
    outs = tuple(Tensor(a) for a in out_arrays)
    for o in outs:
        o.requires_grad = req
    tape = _active_tape()
    if tape is not None and req and not tape.consumed:
        tape.record(name, tuple(inputs), outs, back)
    return outs


def backward(tape: GradTape, loss: Tensor) -> dict:
    """Reverse pass over a tape; returns {parameter name: gradient Tensor}.

    Every Parameter that appeared as an op input receives a gradient (zeros
    when it does not reach the loss); the same values are stored on
    ``Parameter.grad``.
    """
    if tape.consumed:
        raise TapeConsumed("backward() was already called on this tape")
    if loss.size != 1:
        raise NotScalar(f"loss must be scalar, got shape {loss.shape}")
    tape.consumed = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    produced = set()
    for n in tape.nodes:
        for o in n.outputs:
            produced.add(id(o))
    leaves: dict[int, Tensor] = {}
    for n in tape.nodes:
        for t in n.inputs:
            if t.requires_grad and id(t) not in produced:
                leaves[id(t)] = t

    for node in reversed(tape.nodes):
        gs = [grads.pop(id(o), None) for o in node.outputs]
        if all(g is None for g in gs):
            continue
        gs = [np.zeros_like(o.data) if g is None else g
              for o, g in zip(node.outputs, gs)]
        in_grads = node.back(*gs)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            acc = grads.get(id(t))
            grads[id(t)] = gi if acc is None else acc + gi

    result: dict[str, Tensor] = {}
    for tid, leaf in leaves.items():
        g = grads.get(tid)
        if g is None:
            g = np.zeros_like(leaf.data)
        tape._leaf_grads[tid] = g
        if isinstance(leaf, Parameter):
            leaf.grad = Tensor(g.copy())
            result[leaf.name] = Tensor(g)
    return result


# ---------------------------------------------------------------------------
# Op helpers


def _wrap(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _check_pair(a: Tensor, b: Tensor):
    if a.dtype != b.dtype:
        raise DtypeMismatch(f"{a.dtype.name} vs {b.dtype.name}")
    sa, sb = a.shape, b.shape
    for da, db in zip(reversed(sa), reversed(sb)):
        if da != db and da != 1 and db != 1:
            raise ShapeMismatch(f"cannot broadcast {sa} with {sb}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum out dimensions that were broadcast so g matches ``shape``."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, (gd, sd) in enumerate(zip(g.shape, shape)):
        if sd == 1 and gd != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _binary(name, a, b, fwd, back_a, back_b) -> Tensor:
    if isinstance(a, Tensor):
        b = _wrap(b, a)
    else:
        a = _wrap(a, b)
    _check_pair(a, b)
    out = fwd(a.data, b.data)

    def back(g):
        return (
            _unbroadcast(back_a(g, a.data, b.data, out), a.shape),
            _unbroadcast(back_b(g, a.data, b.data, out), b.shape),
        )

    return apply_op(name, (a, b), out, back)


def _unary(name, x, fwd, bwd) -> Tensor:
    out = fwd(x.data)

    def back(g):
        return (bwd(g, x.data, out),)

    return apply_op(name, (x,), out, back)


# ---------------------------------------------------------------------------
# Elementwise ops


def add(a, b) -> Tensor:
    return _binary("add", a, b, lambda x, y: x + y,
                   lambda g, x, y, o: g, lambda g, x, y, o: g)


def sub(a, b) -> Tensor:
    return _binary("sub", a, b, lambda x, y: x - y,
                   lambda g, x, y, o: g, lambda g, x, y, o: -g)


def mul(a, b) -> Tensor:
    return _binary("mul", a, b, lambda x, y: x * y,
                   lambda g, x, y, o: g * y, lambda g, x, y, o: g * x)


def div(a, b) -> Tensor:
    if isinstance(a, Tensor):
        bb = _wrap(b, a)
    else:
        bb = b
    if isinstance(bb, Tensor) and bb.dtype == F64 and np.any(bb.data == 0.0):
        raise DivideByZero("exact-zero denominator in f64 verification mode")
    return _binary("div", a, b, lambda x, y: x / y,
                   lambda g, x, y, o: g / y,
                   lambda g, x, y, o: -g * x / (y * y))


def neg(x: Tensor) -> Tensor:
    return _unary("neg", x, lambda v: -v, lambda g, v, o: -g)


def exp(x: Tensor) -> Tensor:
    return _unary("exp", x, np.exp, lambda g, v, o: g * o)


def log(x: Tensor) -> Tensor:
    return _unary("log", x, np.log, lambda g, v, o: g / v)


def sqrt(x: Tensor) -> Tensor:
    return _unary("sqrt", x, np.sqrt, lambda g, v, o: g * (0.5 / o))


def softplus(x: Tensor) -> Tensor:
    return _unary("softplus", x, lambda v: np.logaddexp(v.dtype.type(0), v),
                  lambda g, v, o: g * _sigmoid_arr(v))


def sigmoid(x: Tensor) -> Tensor:
    return _unary("sigmoid", x, _sigmoid_arr, lambda g, v, o: g * o * (1 - o))


def relu(x: Tensor) -> Tensor:
    # Subgradient at 0 is 0 (left branch).
    return _unary("relu", x, lambda v: np.maximum(v, 0),
                  lambda g, v, o: g * (v > 0))


def _sigmoid_arr(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


_ELEMENTWISE = {
    "add": add, "sub": sub, "mul": mul, "div": div,
    "exp": exp, "log": log, "softplus": softplus, "sigmoid": sigmoid,
}


def elementwise(op: str, a, b=None) -> Tensor:
    """Dispatch form of the elementwise ops ({add,sub,mul,div} binary)."""
    fn = _ELEMENTWISE.get(op)
    if fn is None:
        raise EngineError(f"unknown elementwise op '{op}'")
    if op in ("add", "sub", "mul", "div"):
        if b is None:
            raise EngineError(f"'{op}' requires two operands")
        return fn(a, b)
    if b is not None:
        raise EngineError(f"'{op}' takes one operand")
    return fn(a)


# ---------------------------------------------------------------------------
# Reductions


def _norm_axes(axes, ndim) -> tuple:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = [axes]
    out = []
    for ax in axes:
        if not isinstance(ax, (int, np.integer)):
            raise InvalidAxis(f"axis {ax!r} is not an integer")
        a = int(ax)
        if a < 0:
            a += ndim
        if not 0 <= a < ndim:
            raise InvalidAxis(f"axis {ax} out of range for rank {ndim}")
        out.append(a)
    if len(set(out)) != len(out):
        raise InvalidAxis(f"duplicate axes in {axes}")
    return tuple(sorted(out))


def _restore_dims(g: np.ndarray, shape, axes, keepdims) -> np.ndarray:
    if keepdims:
        return g
    for ax in axes:
        g = np.expand_dims(g, ax)
    return g


def reduce_sum(x: Tensor, axes=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axes, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def back(g):
        g = _restore_dims(g, x.shape, axes, keepdims)
        return (np.broadcast_to(g, x.shape).copy(),)

    return apply_op("sum", (x,), out, back)


def reduce_mean(x: Tensor, axes=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axes, x.ndim)
    count = 1
    for ax in axes:
        count *= x.shape[ax]
    out = x.data.mean(axis=axes, keepdims=keepdims)

    def back(g):
        g = _restore_dims(g, x.shape, axes, keepdims)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return apply_op("mean", (x,), out, back)


def reduce_max(x: Tensor, axes=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axes, x.ndim)
    out = x.data.max(axis=axes, keepdims=keepdims)

    def back(g):
        # Route gradient to the first maximal element in row-major order.
        moved = np.moveaxis(x.data, axes, range(x.ndim - len(axes), x.ndim))
        lead = moved.shape[: x.ndim - len(axes)]
        flat = moved.reshape(lead + (-1,))
        idx = flat.argmax(axis=-1)
        mask = np.zeros_like(flat)
        np.put_along_axis(mask, idx[..., None], 1.0, axis=-1)
        mask = np.moveaxis(mask.reshape(moved.shape),
                           range(x.ndim - len(axes), x.ndim), axes)
        g = _restore_dims(g, x.shape, axes, keepdims)
        return (mask * g,)

    return apply_op("max", (x,), out, back)


_REDUCE = {"sum": reduce_sum, "mean": reduce_mean, "max": reduce_max}


def reduce(op: str, x: Tensor, axes=None, keepdims=False) -> Tensor:
    fn = _REDUCE.get(op)
    if fn is None:
        raise EngineError(f"unknown reduce op '{op}'")
    return fn(x, axes=axes, keepdims=keepdims)


# ---------------------------------------------------------------------------
# Shape / structure ops


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = x.data.reshape(shape)

    def back(g):
        return (g.reshape(x.shape),)

    return apply_op("reshape", (x,), out.copy(), back)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = np.argsort(axes)
    out = np.ascontiguousarray(x.data.transpose(axes))

    def back(g):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return apply_op("transpose", (x,), out, back)


def getitem(x: Tensor, key) -> Tensor:
    """Basic slicing (slices/ellipsis only, so shapes stay static)."""
    if not isinstance(key, tuple):
        key = (key,)
    for k in key:
        if not isinstance(k, slice) and k is not Ellipsis:
            raise EngineError("getitem supports slices only")
    out = x.data[key]

    def back(g):
        gx = np.zeros_like(x.data)
        gx[key] = g
        return (gx,)

    return apply_op("getitem", (x,), out.copy(), back)


def flip(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    out = np.flip(x.data, axis=axes)

    def back(g):
        return (np.flip(g, axis=axes),)

    return apply_op("flip", (x,), out.copy(), back)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    d0 = tensors[0].dtype
    for t in tensors[1:]:
        if t.dtype != d0:
            raise DtypeMismatch("concat operands must share dtype")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def back(g):
        pieces = []
        sl = [slice(None)] * g.ndim
        for i in range(len(tensors)):
            sl[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
            pieces.append(g[tuple(sl)].copy())
        return tuple(pieces)

    return apply_op("concat", tuple(tensors), out, back)


def unstack(x: Tensor, axis: int) -> tuple:
    """Split into size-1 slices along ``axis``; one tape node total."""
    n = x.shape[axis]
    sl = [slice(None)] * x.ndim
    outs = []
    for i in range(n):
        sl[axis] = slice(i, i + 1)
        outs.append(np.ascontiguousarray(x.data[tuple(sl)]))

    def back(*gs):
        return (np.concatenate(gs, axis=axis),)

    return apply_op_multi("unstack", (x,), outs, back)


def chunk(x: Tensor, sections: int, axis: int) -> tuple:
    """Split into equal chunks along ``axis``; one tape node total."""
    size = x.shape[axis]
    if size % sections:
        raise ShapeMismatch(f"cannot split {size} into {sections} chunks")
    step = size // sections
    sl = [slice(None)] * x.ndim
    outs = []
    for i in range(sections):
        sl[axis] = slice(i * step, (i + 1) * step)
        outs.append(np.ascontiguousarray(x.data[tuple(sl)]))

    def back(*gs):
        return (np.concatenate(gs, axis=axis),)

    return apply_op_multi("chunk", (x,), outs, back)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.dtype != b.dtype:
        raise DtypeMismatch(f"{a.dtype.name} vs {b.dtype.name}")
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def back(g):
        return (g @ b.data.T, a.data.T @ g)

    return apply_op("matmul", (a, b), out, back)


def detach(x: Tensor) -> Tensor:
    return Tensor(x.data.copy())


# ---------------------------------------------------------------------------
# Gradient checking


class GradCheckReport:
    """Outcome of comparing tape gradients against central differences."""

    def __init__(self, tol):
        self.tol = tol
        self.entries = []  # (label, max_rel_err, n_coords)

    def add(self, label, err, n):
        self.entries.append((label, err, n))

    @property
    def max_rel_err(self) -> float:
        return max((e for _, e, _ in self.entries), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol

    def __repr__(self):
        lines = [f"grad_check: {'PASS' if self.passed else 'FAIL'} "
                 f"(max rel err {self.max_rel_err:.3e}, tol {self.tol:.1e})"]
        for label, err, n in self.entries:
            lines.append(f"  {label}: rel err {err:.3e} over {n} coords")
        return "\n".join(lines)


def grad_check(fn, inputs, eps: float = 1e-5, tol: float = 1e-6,
               floor: float = 1e-3) -> GradCheckReport:
    """Compare tape gradients of fn(*inputs) with central finite differences.

    All inputs must be f64. Relative error per coordinate is
    |g_tape - g_fd| / max(|g_tape|, |g_fd|, floor); the floor keeps
    finite-difference noise on near-zero gradients from dominating.
    """
    inputs = list(inputs)
    for t in inputs:
        if t.dtype != F64:
            raise EngineError("grad_check requires f64 inputs")
        t.requires_grad = True

    with GradTape() as tape:
        out = fn(*inputs)
    if out.size != 1:
        raise NotScalar("grad_check target must produce a scalar")
    if not np.isfinite(out.data).all():
        raise NonFiniteOutput("non-finite forward output")
    backward(tape, out)

    def value():
        v = fn(*inputs)
        f = float(v.data.reshape(()))
        if not np.isfinite(f):
            raise NonFiniteOutput("non-finite output during finite differences")
        return f

    report = GradCheckReport(tol)
    for i, t in enumerate(inputs):
        analytic = tape.grad(t).data
        flat = t.data.reshape(-1)
        fd = np.zeros_like(flat)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            fp = value()
            flat[j] = orig - eps
            fm = value()
            flat[j] = orig
            fd[j] = (fp - fm) / (2.0 * eps)
        fd = fd.reshape(t.shape)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(fd)), floor)
        err = float(np.max(np.abs(analytic - fd) / denom)) if t.size else 0.0
        name = getattr(t, "name", "") or f"input{i}"
        report.add(name, err, t.size)
    return report
