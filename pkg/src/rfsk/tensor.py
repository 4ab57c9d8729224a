"""Reverse-mode automatic differentiation over numpy arrays.

The engine is deliberately small: a `Tensor` wraps an ndarray, every operation
records its parents and a backward closure, and `backward()` walks the graph
in reverse topological order accumulating gradients. There is no lazy
evaluation, no kernel fusion, and no threading inside ops, so single-threaded
runs are bit-stable and the whole graph can be checked against central finite
differences.

Conventions:
  * float32 is the working precision; float64 graphs are built the same way
    for verification. Mixing dtypes in one op is a contract error.
  * Every op validates shapes up front and checks its output for NaN/Inf;
    non-finite values raise NumericError at the op that produced them.
  * Gradients accumulate additively into `.grad`; clearing is explicit.
  * Tensors are immutable after construction. The only sanctioned in-place
    mutation is an optimizer update to a leaf parameter.

`op_forward(name, ...)` dispatches by name over a closed registry; the named
set covers everything the rest of the package needs, and each entry is
exercised by the finite-difference gate in the test suite.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, NumericError

LEAKY_SLOPE = 0.2


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"{op}: non-finite values in output")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._op = "leaf"
        self._parents = ()
        self._backward = None

    # -- introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, op={self._op})"

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError("item() requires a single-element tensor")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    # -- graph ----------------------------------------------------------

    def backward(self):
        backward(self)

    # -- operator sugar ---------------------------------------------------

    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else shift(self, float(other))

    def __radd__(self, other):
        return shift(self, float(other))

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else shift(self, -float(other))

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, float(other))

    def __rmul__(self, other):
        return scale(self, float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes if axes else None)


def tensor(data, requires_grad=False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def param(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=True, dtype=dtype)


def _result(data, parents, op, backward_fn) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._op = op
    rg = any(p.requires_grad for p in parents)
    out.requires_grad = rg
    if rg:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g)
    else:
        t.grad = t.grad + g


def _same_dtype(op, *ts):
    d0 = ts[0].data.dtype
    for t in ts[1:]:
        if t.data.dtype != d0:
            raise ContractError(f"{op}: mixed dtypes {d0} and {t.data.dtype}")
    return d0


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum `g` down to `shape` (the reverse of numpy broadcasting)."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def backward(loss: Tensor) -> None:
    """Accumulate gradients of a scalar loss into every tracked tensor."""
    if loss.data.size != 1:
        raise ContractError(
            f"backward requires a scalar, got shape {loss.data.shape}")
    if not loss.requires_grad:
        raise ContractError("backward on a tensor with no tracked inputs")

    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    _accum(loss, np.ones_like(loss.data))
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def zero_grads(params) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype("add", a, b)
    data = a.data + b.data

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g, b.data.shape))

    return _result(data, (a, b), "add", bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype("sub", a, b)
    data = a.data - b.data

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g, b.data.shape))

    return _result(data, (a, b), "sub", bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype("mul", a, b)
    data = a.data * b.data

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _result(data, (a, b), "mul", bw)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    data = x.data * x.data.dtype.type(c)

    def bw(g):
        if x.requires_grad:
            _accum(x, g * x.data.dtype.type(c))

    return _result(data, (x,), "scale", bw)


def shift(x: Tensor, c: float) -> Tensor:
    """x + scalar constant."""
    data = x.data + x.data.dtype.type(float(c))

    def bw(g):
        if x.requires_grad:
            _accum(x, g)

    return _result(data, (x,), "shift", bw)


def leaky_relu(x: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    mask = x.data >= 0
    data = np.where(mask, x.data, x.data * x.data.dtype.type(slope))

    def bw(g):
        if x.requires_grad:
            _accum(x, np.where(mask, g, g * g.dtype.type(slope)))

    return _result(data, (x,), "leaky_relu", bw)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        data = x.data.reshape(shape)
    except ValueError as e:
        raise ContractError(f"reshape: {e}") from None

    def bw(g):
        if x.requires_grad:
            _accum(x, g.reshape(x.data.shape))

    return _result(data, (x,), "reshape", bw)


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.data.ndim)))
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(x.data.ndim)):
        raise ContractError(f"transpose: invalid axes {axes} for ndim {x.data.ndim}")
    inv = np.argsort(axes)
    data = x.data.transpose(axes)

    def bw(g):
        if x.requires_grad:
            _accum(x, g.transpose(inv))

    return _result(data, (x,), "transpose", bw)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    n = x.data.shape[axis]
    if not (0 <= start < stop <= n):
        raise ContractError(
            f"slice_axis: [{start}:{stop}] out of range for extent {n}")
    idx = [slice(None)] * x.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    data = np.ascontiguousarray(x.data[idx])

    def bw(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            gx[idx] = g
            _accum(x, gx)

    return _result(data, (x,), "slice_axis", bw)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ContractError("concat: empty input list")
    _same_dtype("concat", *tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                _accum(t, g[tuple(idx)])

    return _result(data, tuple(tensors), "concat", bw)


# ---------------------------------------------------------------------------
# reductions and normalization
# ---------------------------------------------------------------------------


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axis = _norm_axis(axis, x.data.ndim)
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if x.requires_grad:
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            _accum(x, np.broadcast_to(g, x.data.shape).astype(x.data.dtype, copy=False))

    return _result(np.asarray(data), (x,), "sum", bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axis = _norm_axis(axis, x.data.ndim)
    data = x.data.mean(axis=axis, keepdims=keepdims)
    if axis is None:
        count = x.data.size
    else:
        count = int(np.prod([x.data.shape[a] for a in axis]))

    def bw(g):
        if x.requires_grad:
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            gx = np.broadcast_to(g, x.data.shape).astype(x.data.dtype, copy=False)
            _accum(x, gx / x.data.dtype.type(count))

    return _result(np.asarray(data), (x,), "mean", bw)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, numerically stabilized."""
    m = x.data.max(axis=-1, keepdims=True)
    e = np.exp(x.data - m)
    data = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        if x.requires_grad:
            dot = (g * data).sum(axis=-1, keepdims=True)
            _accum(x, (g - dot) * data)

    return _result(data, (x,), "softmax", bw)


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """x / sqrt(sum(x^2, axis) + eps); output has unit L2 norm along axis."""
    s = (x.data * x.data).sum(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(s + x.data.dtype.type(eps))
    data = x.data * inv

    def bw(g):
        if x.requires_grad:
            dot = (g * x.data).sum(axis=axis, keepdims=True)
            _accum(x, g * inv - x.data * (dot * inv * inv * inv))

    return _result(data, (x,), "l2_normalize", bw)


def cosine_similarity(a: Tensor, b: Tensor, eps: float = 1e-8) -> Tensor:
    """Cosine of the angle between a and b along the last axis."""
    _same_dtype("cosine_similarity", a, b)
    if a.data.shape != b.data.shape:
        raise ContractError(
            f"cosine_similarity: shapes {a.data.shape} vs {b.data.shape}")
    dt = a.data.dtype.type
    d = (a.data * b.data).sum(axis=-1)
    na2 = (a.data * a.data).sum(axis=-1)
    nb2 = (b.data * b.data).sum(axis=-1)
    denom = np.maximum(np.sqrt(na2 * nb2), dt(eps))
    data = d / denom

    def bw(g):
        ge = np.expand_dims(g / denom, -1)
        ce = np.expand_dims(data, -1)
        if a.requires_grad:
            na2g = np.expand_dims(np.maximum(na2, dt(eps) * dt(eps)), -1)
            _accum(a, ge * (b.data - ce * np.expand_dims(denom, -1) * a.data / na2g))
        if b.requires_grad:
            nb2g = np.expand_dims(np.maximum(nb2, dt(eps) * dt(eps)), -1)
            _accum(b, ge * (a.data - ce * np.expand_dims(denom, -1) * b.data / nb2g))

    return _result(np.asarray(data), (a, b), "cosine_similarity", bw)


def sort_lastaxis(x: Tensor):
    """Ascending sort along the last axis.

    Returns (values, permutation). Ties keep the original order (stable), so
    the permutation is deterministic. Gradients route through the permutation:
    d sorted[k] / d x[perm[k]] = 1.
    """
    perm = np.argsort(x.data, axis=-1, kind="stable")
    data = np.take_along_axis(x.data, perm, axis=-1)

    def bw(g):
        if x.requires_grad:
            gx = np.empty_like(x.data)
            np.put_along_axis(gx, perm, g, axis=-1)
            _accum(x, gx)

    values = _result(data, (x,), "sort_lastaxis", bw)
    return values, perm


# ---------------------------------------------------------------------------
# linear algebra and convolution
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype("matmul", a, b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ContractError("matmul: both operands must have ndim >= 2")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ContractError(
            f"matmul: inner extents {a.data.shape} @ {b.data.shape}")
    data = np.matmul(a.data, b.data)

    def bw(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            _accum(a, _unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            _accum(b, _unbroadcast(gb, b.data.shape))

    return _result(data, (a, b), "matmul", bw)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b with x [..., d_in], w [d_in, d_out], b [d_out]."""
    _same_dtype("linear", x, w, b)
    if w.data.ndim != 2 or b.data.ndim != 1 or w.data.shape[1] != b.data.shape[0]:
        raise ContractError(
            f"linear: weight {w.data.shape} / bias {b.data.shape} mismatch")
    if x.data.shape[-1] != w.data.shape[0]:
        raise ContractError(
            f"linear: input {x.data.shape} vs weight {w.data.shape}")
    data = x.data @ w.data + b.data

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        x2 = x.data.reshape(-1, x.data.shape[-1])
        if x.requires_grad:
            _accum(x, (g2 @ w.data.T).reshape(x.data.shape))
        if w.requires_grad:
            _accum(w, x2.T @ g2)
        if b.requires_grad:
            _accum(b, g2.sum(axis=0))

    return _result(data, (x, w, b), "linear", bw)


def _im2col3x3(x: np.ndarray) -> np.ndarray:
    """[C,H,W] -> [C*9, H*W] patch matrix for a 3x3/s1/p1 convolution."""
    c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(1, 2))  # [C,H,W,3,3]
    return np.ascontiguousarray(
        win.transpose(0, 3, 4, 1, 2).reshape(c * 9, h * w))


def _col2im3x3(gcols: np.ndarray, c: int, h: int, w: int) -> np.ndarray:
    g = gcols.reshape(c, 3, 3, h, w)
    gx = np.zeros((c, h + 2, w + 2), dtype=gcols.dtype)
    for u in range(3):
        for v in range(3):
            gx[:, u:u + h, v:v + w] += g[:, u, v]
    return gx[:, 1:h + 1, 1:w + 1]


def conv2d(x: Tensor, w: Tensor) -> Tensor:
    """3x3 convolution, stride 1, zero padding 1.

    x: [C_in, H, W], w: [C_out, C_in, 3, 3] -> [C_out, H, W]. The kernel is a
    full graph citizen, so per-sample (modulated) kernels differentiate through
    both operands.
    """
    _same_dtype("conv2d", x, w)
    if x.data.ndim != 3 or w.data.ndim != 4 or w.data.shape[2:] != (3, 3):
        raise ContractError(
            f"conv2d: expected x [C,H,W], w [O,C,3,3]; got {x.data.shape}, {w.data.shape}")
    if w.data.shape[1] != x.data.shape[0]:
        raise ContractError(
            f"conv2d: channel mismatch x {x.data.shape} vs w {w.data.shape}")
    c_in, h, wid = x.data.shape
    c_out = w.data.shape[0]
    cols = _im2col3x3(x.data)
    wf = w.data.reshape(c_out, c_in * 9)
    data = (wf @ cols).reshape(c_out, h, wid)

    def bw(g):
        gf = g.reshape(c_out, h * wid)
        if w.requires_grad:
            _accum(w, (gf @ cols.T).reshape(w.data.shape))
        if x.requires_grad:
            gcols = wf.T @ gf
            _accum(x, _col2im3x3(gcols, c_in, h, wid))

    return _result(data, (x, w), "conv2d", bw)


def conv2d_1x1(x: Tensor, w: Tensor) -> Tensor:
    """Pointwise convolution. x: [C_in, H, W], w: [C_out, C_in, 1, 1]."""
    _same_dtype("conv2d_1x1", x, w)
    if x.data.ndim != 3 or w.data.ndim != 4 or w.data.shape[2:] != (1, 1):
        raise ContractError(
            f"conv2d_1x1: expected x [C,H,W], w [O,C,1,1]; got {x.data.shape}, {w.data.shape}")
    if w.data.shape[1] != x.data.shape[0]:
        raise ContractError(
            f"conv2d_1x1: channel mismatch x {x.data.shape} vs w {w.data.shape}")
    c_in, h, wid = x.data.shape
    c_out = w.data.shape[0]
    wf = w.data.reshape(c_out, c_in)
    data = (wf @ x.data.reshape(c_in, h * wid)).reshape(c_out, h, wid)

    def bw(g):
        gf = g.reshape(c_out, h * wid)
        if w.requires_grad:
            _accum(w, (gf @ x.data.reshape(c_in, h * wid).T).reshape(w.data.shape))
        if x.requires_grad:
            _accum(x, (wf.T @ gf).reshape(x.data.shape))

    return _result(data, (x, w), "conv2d_1x1", bw)


def box_filter_3x3(x: Tensor) -> Tensor:
    """Sum over each 3x3 neighborhood (zero padded) along the last two axes.

    Self-adjoint under zero padding, so the backward pass is the same filter
    applied to the incoming gradient.
    """
    if x.data.ndim < 2:
        raise ContractError("box_filter_3x3: needs at least 2 dims")

    def _box(a):
        pad = [(0, 0)] * (a.ndim - 2) + [(1, 1), (1, 1)]
        ap = np.pad(a, pad)
        h, w = a.shape[-2], a.shape[-1]
        out = np.zeros_like(a)
        for u in range(3):
            for v in range(3):
                out += ap[..., u:u + h, v:v + w]
        return out

    data = _box(x.data)

    def bw(g):
        if x.requires_grad:
            _accum(x, _box(g))

    return _result(data, (x,), "box_filter_3x3", bw)


# ---------------------------------------------------------------------------
# resampling
# ---------------------------------------------------------------------------

_UPSAMPLE_CACHE: dict = {}


def _upsample_matrix(n: int, dtype) -> np.ndarray:
    """[2n, n] bilinear interpolation matrix (half-pixel centers, edge clamped)."""
    key = (n, np.dtype(dtype).str)
    got = _UPSAMPLE_CACHE.get(key)
    if got is not None:
        return got
    u = np.zeros((2 * n, n), dtype=dtype)
    for i in range(2 * n):
        src = (i + 0.5) / 2.0 - 0.5
        src = min(max(src, 0.0), n - 1.0)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, n - 1)
        w1 = src - i0
        u[i, i0] += 1.0 - w1
        u[i, i1] += w1
    _UPSAMPLE_CACHE[key] = u
    return u


def upsample2x(x: Tensor) -> Tensor:
    """Bilinear x2 upsampling of the last two axes."""
    if x.data.ndim < 2:
        raise ContractError("upsample2x: needs at least 2 dims")
    h, w = x.data.shape[-2:]
    uh = _upsample_matrix(h, x.data.dtype)
    uw = _upsample_matrix(w, x.data.dtype)
    # uh @ x @ uw^T, kept as two matmuls so BLAS does the heavy lifting
    data = np.matmul(np.matmul(uh, x.data), uw.T)

    def bw(g):
        if x.requires_grad:
            _accum(x, np.matmul(np.matmul(uh.T, g), uw))

    return _result(np.ascontiguousarray(data), (x,), "upsample2x", bw)


def subsample2x(x: Tensor) -> Tensor:
    """Keep every second pixel (top-left phase) of the last two axes.

    Composed with conv2d this expresses a stride-2 convolution.
    """
    if x.data.ndim < 2:
        raise ContractError("subsample2x: needs at least 2 dims")
    h, w = x.data.shape[-2:]
    if h % 2 or w % 2:
        raise ContractError(f"subsample2x: odd spatial extents ({h}, {w})")
    data = np.ascontiguousarray(x.data[..., ::2, ::2])

    def bw(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            gx[..., ::2, ::2] = g
            _accum(x, gx)

    return _result(data, (x,), "subsample2x", bw)


# ---------------------------------------------------------------------------
# registry
# ---------------------------------------------------------------------------

OPS = {
    "matmul": matmul,
    "conv2d": conv2d,
    "conv2d_1x1": conv2d_1x1,
    "linear": linear,
    "add": add,
    "sub": sub,
    "mul": mul,
    "scale": scale,
    "shift": shift,
    "softmax": softmax,
    "leaky_relu": leaky_relu,
    "upsample2x": upsample2x,
    "subsample2x": subsample2x,
    "mean": mean,
    "sum": sum_,
    "l2_normalize": l2_normalize,
    "concat": concat,
    "sort_lastaxis": lambda x: sort_lastaxis(x)[0],
    "cosine_similarity": cosine_similarity,
    "box_filter_3x3": box_filter_3x3,
    "reshape": reshape,
    "transpose": transpose,
    "slice_axis": slice_axis,
}


def op_forward(name: str, *inputs, **attrs) -> Tensor:
    """Dispatch an operation by name. Unknown names are a contract error."""
    fn = OPS.get(name)
    if fn is None:
        raise ContractError(f"unknown op {name!r}")
    return fn(*inputs, **attrs)
