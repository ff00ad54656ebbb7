"""Tape-style reverse-mode automatic differentiation over numpy arrays.

Every primitive records a vector-Jacobian product written in terms of other
primitives, so ``grad(..., create_graph=True)`` returns ``Var`` objects that
can be differentiated again. That is what double backprop through a saliency
map needs.
"""
from __future__ import annotations

import contextlib
import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

# per thread, so concurrent attacks cannot switch each other's recording off
_state = threading.local()


class AutodiffError(RuntimeError):
    pass


class ShapeError(AutodiffError, ValueError):
    """Operands of a primitive have incompatible shapes."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        joined = " vs ".join(str(s) for s in self.shapes)
        super().__init__(f"shape mismatch in {op}: {joined}")


class NonDifferentiableError(AutodiffError):
    def __init__(self, op: str):
        self.op = op
        super().__init__(f"operation {op!r} is not differentiable")


@contextlib.contextmanager
def grad_mode(enabled: bool):
    prev = is_grad_enabled()
    _state.grad_enabled = enabled
    try:
        yield
    finally:
        _state.grad_enabled = prev


def no_grad():
    return grad_mode(False)


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


class Var:
    """A value in the computation graph.

    ``parents`` and ``vjp`` are empty for leaves. ``vjp`` maps the upstream
    gradient (a Var) to one gradient per parent (Var or None).
    """

    __slots__ = ("value", "parents", "vjp", "op", "requires_grad", "__weakref__")
    __array_priority__ = 100

    def __init__(self, value, requires_grad: bool = False):
        self.value = np.asarray(value, dtype=DTYPE)
        self.parents: tuple[Var, ...] = ()
        self.vjp = None
        self.op = "leaf"
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    def numpy(self) -> np.ndarray:
        return self.value

    def detach(self) -> "Var":
        return Var(self.value)

    def __repr__(self):
        return f"Var(op={self.op}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def constant(x) -> Var:
    return Var(x)


def _record(value: np.ndarray, op: str, parents: Sequence[Var], vjp) -> Var:
    out = Var(value)
    out.op = op
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.parents = tuple(parents)
        out.vjp = vjp
        out.requires_grad = True
    return out


# ---------------------------------------------------------------------------
# broadcasting helpers


def _broadcast_shape(op: str, a: Var, b: Var) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


def sum_to(x: Var, shape: tuple[int, ...]) -> Var:
    """Sum ``x`` down to ``shape`` (the adjoint of broadcasting)."""
    shape = tuple(shape)
    if x.shape == shape:
        return x
    lead = x.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and x.shape[i + lead] != 1
    )
    value = x.value.sum(axis=axes, keepdims=True)
    value = value.reshape(shape)
    src_shape = x.shape
    return _record(value, "sum_to", (x,), lambda g: (broadcast_to(g, src_shape),))


def broadcast_to(x: Var, shape: tuple[int, ...]) -> Var:
    shape = tuple(shape)
    if x.shape == shape:
        return x
    try:
        value = np.broadcast_to(x.value, shape).copy()
    except ValueError:
        raise ShapeError("broadcast_to", x.shape, shape) from None
    src_shape = x.shape
    return _record(value, "broadcast_to", (x,), lambda g: (sum_to(g, src_shape),))


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _record(a.value + b.value, "add", (a, b), lambda g: (sum_to(g, sa), sum_to(g, sb)))


def sub(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _record(
        a.value - b.value, "sub", (a, b), lambda g: (sum_to(g, sa), sum_to(neg(g), sb))
    )


def neg(a) -> Var:
    a = as_var(a)
    return _record(-a.value, "neg", (a,), lambda g: (neg(g),))


def mul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    _broadcast_shape("mul", a, b)
    sa, sb = a.shape, b.shape

    def vjp(g):
        ga = sum_to(mul(g, b), sa) if a.requires_grad else None
        gb = sum_to(mul(g, a), sb) if b.requires_grad else None
        return ga, gb

    return _record(a.value * b.value, "mul", (a, b), vjp)


def div(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    _broadcast_shape("div", a, b)
    sa, sb = a.shape, b.shape

    def vjp(g):
        ga = sum_to(div(g, b), sa) if a.requires_grad else None
        gb = sum_to(neg(div(mul(g, a), mul(b, b))), sb) if b.requires_grad else None
        return ga, gb

    return _record(a.value / b.value, "div", (a, b), vjp)


def scale(a, c: float) -> Var:
    """Multiply by a Python scalar without allocating a constant node."""
    a = as_var(a)
    c = float(c)
    return _record(a.value * c, "scale", (a,), lambda g: (scale(g, c),))


def exp(a) -> Var:
    a = as_var(a)
    out_holder = []

    def vjp(g):
        return (mul(g, out_holder[0]),)

    out = _record(np.exp(a.value), "exp", (a,), vjp)
    out_holder.append(out)
    return out


def log(a) -> Var:
    a = as_var(a)
    return _record(np.log(a.value), "log", (a,), lambda g: (div(g, a),))


def abs_(a) -> Var:
    a = as_var(a)
    sign = Var(np.sign(a.value))
    return _record(np.abs(a.value), "abs", (a,), lambda g: (mul(g, sign),))


def relu(a) -> Var:
    a = as_var(a)
    mask = Var((a.value > 0).astype(DTYPE))
    return _record(a.value * mask.value, "relu", (a,), lambda g: (mul(g, mask),))


def sign(a) -> Var:
    """Elementwise sign. Recorded so that differentiating through it fails loudly."""
    a = as_var(a)

    def vjp(g):
        raise NonDifferentiableError("sign")

    return _record(np.sign(a.value), "sign", (a,), vjp)


def _sigmoid_np(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(a, beta: float = 1.0) -> Var:
    """sigmoid(beta * a)."""
    a = as_var(a)
    beta = float(beta)
    holder = []

    def vjp(g):
        s = holder[0]
        return (scale(mul(g, mul(s, sub(1.0, s))), beta),)

    out = _record(_sigmoid_np(beta * a.value), "sigmoid", (a,), vjp)
    holder.append(out)
    return out


def _softplus_np(x: np.ndarray, beta: float) -> np.ndarray:
    z = beta * x
    # log(1 + e^z) = max(z, 0) + log1p(e^{-|z|}) never overflows
    return (np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))) / beta


def softplus(a, beta: float = 1.0) -> Var:
    """(1/beta) * log(1 + exp(beta * a)), overflow safe."""
    if beta <= 0:
        raise ValueError("softplus beta must be positive")
    a = as_var(a)
    return _record(
        _softplus_np(a.value, beta), "softplus", (a,), lambda g: (mul(g, sigmoid(a, beta)),)
    )


def guided_softplus(a, beta: float = 1.0) -> Var:
    """Softplus whose backward pass drops negative upstream gradient components."""
    if beta <= 0:
        raise ValueError("softplus beta must be positive")
    a = as_var(a)
    return _record(
        _softplus_np(a.value, beta),
        "guided_softplus",
        (a,),
        lambda g: (mul(relu(g), sigmoid(a, beta)),),
    )


# ---------------------------------------------------------------------------
# reductions and shape manipulation


def _norm_axes(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def sum_(a, axis=None, keepdims: bool = False) -> Var:
    a = as_var(a)
    axes = _norm_axes(axis, a.ndim)
    value = a.value.sum(axis=axes, keepdims=keepdims)
    src_shape = a.shape
    kept = tuple(1 if i in axes else s for i, s in enumerate(src_shape))

    def vjp(g):
        return (broadcast_to(reshape(g, kept), src_shape),)

    return _record(value, "sum", (a,), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Var:
    a = as_var(a)
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape) -> Var:
    a = as_var(a)
    shape = tuple(shape)
    try:
        value = a.value.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, shape) from None
    src_shape = a.shape
    return _record(value, "reshape", (a,), lambda g: (reshape(g, src_shape),))


def transpose(a, axes=None) -> Var:
    a = as_var(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record(
        np.transpose(a.value, axes), "transpose", (a,), lambda g: (transpose(g, inv),)
    )


def matmul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)

    def vjp(g):
        ga = matmul(g, transpose(b)) if a.requires_grad else None
        gb = matmul(transpose(a), g) if b.requires_grad else None
        return ga, gb

    return _record(a.value @ b.value, "matmul", (a, b), vjp)


def logsumexp(a, axis: int = -1, keepdims: bool = False) -> Var:
    a = as_var(a)
    m = a.value.max(axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    lse = m + np.log(np.exp(a.value - m).sum(axis=axis, keepdims=True))
    value = lse if keepdims else np.squeeze(lse, axis=axis)
    kept_shape = lse.shape
    holder = []

    def vjp(g):
        out = holder[0]
        out_k = out if keepdims else reshape(out, kept_shape)
        g_k = g if keepdims else reshape(g, kept_shape)
        soft = exp(sub(a, out_k))
        return (mul(g_k, soft),)

    out = _record(value, "logsumexp", (a,), vjp)
    holder.append(out)
    return out


def log_softmax(a, axis: int = -1) -> Var:
    return sub(a, logsumexp(a, axis=axis, keepdims=True))


def softmax_np(a: np.ndarray, axis: int = -1) -> np.ndarray:
    z = a - a.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


# ---------------------------------------------------------------------------
# convolution (NCHW, weights OIkk). The three linear maps below are closed
# under taking adjoints, which makes arbitrary-order derivatives available.


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c, hp, wp = xp.shape
    sn, sc, sh, sw = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, ho, wo, kh, kw),
        strides=(sn, sc, sh * stride, sw * stride, sh, sw),
        writeable=False,
    )


def _conv_out(h: int, k: int, stride: int, pad: int) -> int:
    return (h + 2 * pad - k) // stride + 1


def _pad(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _conv_fwd(x: np.ndarray, w: np.ndarray, stride: int, pad: int) -> np.ndarray:
    kh, kw = w.shape[2:]
    ho = _conv_out(x.shape[2], kh, stride, pad)
    wo = _conv_out(x.shape[3], kw, stride, pad)
    cols = _windows(_pad(x, pad), kh, kw, stride, ho, wo)
    out = np.tensordot(cols, w, axes=([1, 4, 5], [1, 2, 3]))  # N,Ho,Wo,O
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def _conv_bwd_input(g: np.ndarray, w: np.ndarray, in_shape, stride: int, pad: int) -> np.ndarray:
    n, c, h, wd = in_shape
    kh, kw = w.shape[2:]
    ho, wo = g.shape[2:]
    dcols = np.tensordot(g, w, axes=([1], [0]))  # N,Ho,Wo,C,kh,kw
    dxp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[
                :, :, :, :, i, j
            ].transpose(0, 3, 1, 2)
    if pad:
        dxp = dxp[:, :, pad : pad + h, pad : pad + wd]
    return np.ascontiguousarray(dxp)


def _conv_bwd_weight(x: np.ndarray, g: np.ndarray, w_shape, stride: int, pad: int) -> np.ndarray:
    kh, kw = w_shape[2:]
    ho, wo = g.shape[2:]
    cols = _windows(_pad(x, pad), kh, kw, stride, ho, wo)
    return np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))  # O,C,kh,kw


def conv2d(x, w, stride: int = 1, padding: int = 0) -> Var:
    x, w = as_var(x), as_var(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError("conv2d", x.shape, w.shape)
    if _conv_out(x.shape[2], w.shape[2], stride, padding) < 1:
        raise ShapeError("conv2d", x.shape, w.shape)
    xs, ws = x.shape, w.shape

    def vjp(g):
        gx = conv2d_input_grad(g, w, xs, stride, padding) if x.requires_grad else None
        gw = conv2d_weight_grad(x, g, ws, stride, padding) if w.requires_grad else None
        return gx, gw

    return _record(_conv_fwd(x.value, w.value, stride, padding), "conv2d", (x, w), vjp)


def conv2d_input_grad(g, w, in_shape, stride: int, padding: int) -> Var:
    """Adjoint of conv2d with respect to its input."""
    g, w = as_var(g), as_var(w)
    in_shape = tuple(in_shape)
    ws = w.shape

    def vjp(h):
        gg = conv2d(h, w, stride, padding) if g.requires_grad else None
        gw = conv2d_weight_grad(h, g, ws, stride, padding) if w.requires_grad else None
        return gg, gw

    value = _conv_bwd_input(g.value, w.value, in_shape, stride, padding)
    return _record(value, "conv2d_input_grad", (g, w), vjp)


def conv2d_weight_grad(x, g, w_shape, stride: int, padding: int) -> Var:
    """Adjoint of conv2d with respect to its weights."""
    x, g = as_var(x), as_var(g)
    w_shape = tuple(w_shape)
    xs = x.shape

    def vjp(h):
        gx = conv2d_input_grad(g, h, xs, stride, padding) if x.requires_grad else None
        gg = conv2d(x, h, stride, padding) if g.requires_grad else None
        return gx, gg

    value = _conv_bwd_weight(x.value, g.value, w_shape, stride, padding)
    return _record(value, "conv2d_weight_grad", (x, g), vjp)


# ---------------------------------------------------------------------------
# pooling


def sum_pool2d(x, k: int) -> Var:
    """Non-overlapping k x k window sums; trailing rows/cols that do not fill a window are dropped."""
    x = as_var(x)
    if x.ndim != 4:
        raise ShapeError("sum_pool2d", x.shape)
    n, c, h, w = x.shape
    ho, wo = h // k, w // k
    if ho < 1 or wo < 1:
        raise ShapeError("sum_pool2d", x.shape, (k, k))
    value = x.value[:, :, : ho * k, : wo * k].reshape(n, c, ho, k, wo, k).sum(axis=(3, 5))
    src_shape = x.shape
    return _record(value, "sum_pool2d", (x,), lambda g: (upsample2d(g, k, src_shape),))


def upsample2d(g, k: int, out_shape) -> Var:
    """Adjoint of sum_pool2d: repeat each entry over its window, zero-fill the remainder."""
    g = as_var(g)
    out_shape = tuple(out_shape)
    n, c, ho, wo = g.shape
    value = np.zeros(out_shape, dtype=DTYPE)
    value[:, :, : ho * k, : wo * k] = np.repeat(np.repeat(g.value, k, axis=2), k, axis=3)
    return _record(value, "upsample2d", (g,), lambda h: (sum_pool2d(h, k),))


def avg_pool2d(x, k: int) -> Var:
    return scale(sum_pool2d(x, k), 1.0 / (k * k))


def _gather(xv: np.ndarray, idx: np.ndarray, k: int) -> np.ndarray:
    n, c, ho, wo = idx.shape
    win = xv[:, :, : ho * k, : wo * k].reshape(n, c, ho, k, wo, k).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, ho, wo, k * k)
    return np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]


def _gather_var(x: Var, idx: np.ndarray, k: int) -> Var:
    src_shape = x.shape
    return _record(
        _gather(x.value, idx, k), "maxpool_gather", (x,), lambda g: (_scatter_var(g, idx, k, src_shape),)
    )


def _scatter_var(g: Var, idx: np.ndarray, k: int, out_shape) -> Var:
    n, c, ho, wo = idx.shape
    buf = np.zeros((n, c, ho, wo, k * k), dtype=DTYPE)
    np.put_along_axis(buf, idx[..., None], g.value[..., None], axis=-1)
    buf = buf.reshape(n, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * k, wo * k)
    value = np.zeros(out_shape, dtype=DTYPE)
    value[:, :, : ho * k, : wo * k] = buf
    return _record(value, "maxpool_scatter", (g,), lambda h: (_gather_var(h, idx, k),))


def max_pool2d(x, k: int) -> Var:
    """Non-overlapping max pooling. Ties go to the lowest flat index within the window."""
    x = as_var(x)
    if x.ndim != 4:
        raise ShapeError("max_pool2d", x.shape)
    n, c, h, w = x.shape
    ho, wo = h // k, w // k
    if ho < 1 or wo < 1:
        raise ShapeError("max_pool2d", x.shape, (k, k))
    win = x.value[:, :, : ho * k, : wo * k].reshape(n, c, ho, k, wo, k).transpose(0, 1, 2, 4, 3, 5)
    idx = win.reshape(n, c, ho, wo, k * k).argmax(axis=-1)  # argmax picks the first maximum
    return _gather_var(x, idx, k)


# ---------------------------------------------------------------------------
# differentiation


def _topo_order(root: Var) -> list[Var]:
    order: list[Var] = []
    seen: set[int] = set()
    stack: list[tuple[Var, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def grad(output: Var, wrt: Sequence[Var], create_graph: bool = False, as_arrays: bool | None = None):
    """Gradients of scalar ``output`` with respect to each Var in ``wrt``.

    With ``create_graph`` the results are Vars carrying their own provenance;
    otherwise plain numpy arrays are returned (override with ``as_arrays``).
    Vars unreachable from ``output`` receive zeros.
    """
    if output.value.size != 1:
        raise AutodiffError(f"grad requires a scalar output, got shape {output.shape}")
    if as_arrays is None:
        as_arrays = not create_graph
    wrt = list(wrt)
    wanted = {id(v): i for i, v in enumerate(wrt)}
    results: list[Var | None] = [None] * len(wrt)

    if output.requires_grad:
        grads: dict[int, Var] = {id(output): Var(np.ones_like(output.value))}
        with grad_mode(create_graph):
            for node in reversed(_topo_order(output)):
                g = grads.pop(id(node), None)
                if g is None:
                    continue
                if id(node) in wanted:
                    results[wanted[id(node)]] = g
                if node.vjp is None:
                    continue
                parent_grads = node.vjp(g)
                for p, pg in zip(node.parents, parent_grads):
                    if pg is None or not p.requires_grad:
                        continue
                    prev = grads.get(id(p))
                    grads[id(p)] = pg if prev is None else add(prev, pg)

    out = []
    for v, r in zip(wrt, results):
        if r is None:
            r = Var(np.zeros_like(v.value))
        if r.shape != v.shape:
            r = reshape(r, v.shape)
        out.append(r.value if as_arrays else r)
    return out


def forward_eval(root: Var) -> np.ndarray:
    """Value of ``root``. Graphs are evaluated eagerly as they are built."""
    return root.value


def _rel_err(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(float(np.max(np.abs(a))), float(np.max(np.abs(b))), 1e-12)
    return float(np.max(np.abs(a - b))) / scale


def finite_diff_check(f: Callable[[Var], Var], point, step: float = 1e-5) -> float:
    """Relative error max|a - n| / max(max|a|, max|n|) of the reverse-mode gradient against central differences.

    Normalising by the largest component keeps near-zero entries, where differencing noise
    dominates, from reporting spurious failures.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    point = np.array(point, dtype=DTYPE)
    x = Var(point.copy(), requires_grad=True)
    y = f(x)
    if not np.all(np.isfinite(y.value)):
        raise AutodiffError("function returned non-finite value")
    (analytic,) = grad(y, [x])

    numeric = np.zeros_like(point)
    flat = numeric.reshape(-1)
    with no_grad():
        for i in range(point.size):
            xp = point.copy().reshape(-1)
            xm = point.copy().reshape(-1)
            xp[i] += step
            xm[i] -= step
            fp = float(f(Var(xp.reshape(point.shape))).value)
            fm = float(f(Var(xm.reshape(point.shape))).value)
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise AutodiffError(f"function returned non-finite value near coordinate {i}")
            flat[i] = (fp - fm) / (2 * step)
    return _rel_err(analytic, numeric) if point.size else 0.0


def hvp_check(f: Callable[[Var], Var], point, direction, step: float = 1e-5) -> float:
    """Relative error of a double-backprop Hessian-vector product against differenced gradients."""
    point = np.asarray(point, dtype=DTYPE)
    v = np.asarray(direction, dtype=DTYPE)
    x = Var(point.copy(), requires_grad=True)
    (g,) = grad(f(x), [x], create_graph=True)
    (hv,) = grad(sum_(mul(g, Var(v))), [x])

    def gradient_at(p):
        xv = Var(p, requires_grad=True)
        return grad(f(xv), [xv])[0]

    numeric = (gradient_at(point + step * v) - gradient_at(point - step * v)) / (2 * step)
    return _rel_err(hv, numeric)


def stack_values(vars_: Iterable[Var]) -> np.ndarray:
    return np.stack([v.value for v in vars_])
