"""Float64 tensors with recorded reverse-mode differentiation.

Every differentiable quantity in this library flows through the ops
here. The arithmetic surface is deliberately small: add, mul, matmul,
valid conv2d, relu, sigmoid, exp, log, softplus, concat, sum/mean/max
reductions, elementwise maximum, and softmax. Shape plumbing (reshape,
transpose, indexing) moves data without arithmetic. Everything else in
the repo composes from these, which keeps the differentiation surface
auditable.

All storage is float64. Every op validates that its output is finite
and raises :class:`NonFiniteError` instead of propagating NaN/Inf.

Recording model: an op output keeps references to its parent tensors
plus a closure that maps the output gradient to parent gradients;
``backward`` walks that record once per node in reverse topological
order and accumulates into ``grad`` buffers. The recorded graph belongs
to the thread that built it; tensors themselves are plain values and
safe to hand between threads.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = [
    "NonFiniteError",
    "Tensor",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "conv2d",
    "relu",
    "sigmoid",
    "exp",
    "log",
    "softplus",
    "concat",
    "reshape",
    "transpose",
    "sum_",
    "mean",
    "max_reduce",
    "maximum",
    "minimum",
    "softmax",
    "log_softmax",
    "backward",
    "finite_diff_check",
]


class NonFiniteError(ArithmeticError):
    """An operation would have produced NaN or infinity."""


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op} produced a non-finite value")


class Tensor:
    """Dense float64 array with optional gradient accumulation.

    ``grad`` is allocated (zeros) for tensors created with
    ``requires_grad=True`` and is populated/accumulated by ``backward``.
    Repeated backward calls accumulate; use ``zero_grad`` to reset.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn", "_op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        _check_finite(arr, "tensor")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn = None
        self._op = "leaf"

    # -- basic introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError("item() requires a single-element tensor")
        return float(self.data.reshape(())[()])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data) if self.requires_grad else None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- operator sugar ------------------------------------------------------
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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self) -> None:
        backward(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


as_tensor = _as_tensor


def _from_op(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    data = np.asarray(data, dtype=np.float64)
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward_fn = None
    out._op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient back down to the shape it was broadcast from."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise arithmetic ---------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _from_op(a.data + b.data, (a, b), bw, "add")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bw(g):
        return _unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)

    return _from_op(a.data * b.data, (a, b), bw, "mul")


def neg(a) -> Tensor:
    return mul(a, -1.0)


def sub(a, b) -> Tensor:
    return add(a, neg(b))


def div(a, b) -> Tensor:
    """a / b for strictly positive b, composed as a * exp(-log(b))."""
    return mul(a, exp(neg(log(b))))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0

    def bw(g):
        return (g * mask,)

    return _from_op(np.where(mask, a.data, 0.0), (a,), bw, "relu")


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def bw(g):
        return (g * out * (1.0 - out),)

    return _from_op(out, (a,), bw, "sigmoid")


def exp(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)

    def bw(g):
        return (g * out,)

    return _from_op(out, (a,), bw, "exp")


def log(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(divide="raise", invalid="raise"):
        try:
            out = np.log(a.data)
        except FloatingPointError:
            raise NonFiniteError("log of a non-positive value") from None

    def bw(g):
        return (g / a.data,)

    return _from_op(out, (a,), bw, "log")


def softplus(a) -> Tensor:
    """log(1 + exp(a)) evaluated as max(a, 0) + log1p(exp(-|a|))."""
    a = _as_tensor(a)
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    sig = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def bw(g):
        return (g * sig,)

    return _from_op(out, (a,), bw, "softplus")


def maximum(a, b) -> Tensor:
    """Elementwise max; on ties the gradient flows to the first argument."""
    a, b = _as_tensor(a), _as_tensor(b)
    take_a = a.data >= b.data

    def bw(g):
        return (_unbroadcast(g * take_a, a.data.shape),
                _unbroadcast(g * ~take_a, b.data.shape))

    return _from_op(np.where(take_a, a.data, b.data), (a, b), bw, "maximum")


def minimum(a, b) -> Tensor:
    return neg(maximum(neg(a), neg(b)))


# -- linear algebra -----------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError("matmul expects 2-D operands")
    if a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.data.shape} @ {b.data.shape}")

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return _from_op(a.data @ b.data, (a, b), bw, "matmul")


def conv2d(x, kernels, stride: int = 1) -> Tensor:
    """Valid (no padding) 2-D convolution of a CHW input with OCKK kernels."""
    x, kernels = _as_tensor(x), _as_tensor(kernels)
    if x.data.ndim != 3:
        raise ValueError("conv2d input must be C x H x W")
    if kernels.data.ndim != 4:
        raise ValueError("conv2d kernels must be O x C x Kh x Kw")
    c, h, w = x.data.shape
    o, ck, kh, kw = kernels.data.shape
    if ck != c:
        raise ValueError(f"conv2d channel mismatch: input {c}, kernels {ck}")
    if kh > h or kw > w:
        raise ValueError("conv2d kernel larger than input")
    if stride < 1:
        raise ValueError("conv2d stride must be >= 1")
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1

    win = np.lib.stride_tricks.sliding_window_view(x.data, (kh, kw), axis=(1, 2))
    win = win[:, ::stride, ::stride]                       # (C, OH, OW, Kh, Kw)
    cols = win.transpose(1, 2, 0, 3, 4).reshape(oh * ow, c * kh * kw)
    wmat = kernels.data.reshape(o, c * kh * kw)
    out = (wmat @ cols.T).reshape(o, oh, ow)

    def bw(g):
        gm = g.reshape(o, oh * ow)
        gk = (gm @ cols).reshape(o, c, kh, kw)
        gcols = (gm.T @ wmat).reshape(oh, ow, c, kh, kw).transpose(2, 0, 1, 3, 4)
        gx = np.zeros((c, h, w))
        for i in range(kh):
            for j in range(kw):
                gx[:, i:i + stride * oh:stride, j:j + stride * ow:stride] += gcols[:, :, :, i, j]
        return gx, gk

    return _from_op(out, (x, kernels), bw, "conv2d")


# -- shape plumbing -----------------------------------------------------------

def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    parts = [_as_tensor(t) for t in tensors]
    if not parts:
        raise ValueError("concat of no tensors")
    sizes = [p.data.shape[axis] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)

    def bw(g):
        grads, start = [], 0
        for s in sizes:
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(start, start + s)
            grads.append(g[tuple(sl)])
            start += s
        return tuple(grads)

    return _from_op(out, parts, bw, "concat")


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    src = a.data.shape

    def bw(g):
        return (g.reshape(src),)

    return _from_op(a.data.reshape(shape), (a,), bw, "reshape")


def transpose(a, axes=None) -> Tensor:
    a = _as_tensor(a)

    def bw(g):
        return (np.transpose(g) if axes is None else np.transpose(g, np.argsort(axes)),)

    return _from_op(np.transpose(a.data, axes), (a,), bw, "transpose")


def getitem(a, idx) -> Tensor:
    a = _as_tensor(a)

    def bw(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)

    return _from_op(a.data[idx], (a,), bw, "getitem")


# -- reductions ---------------------------------------------------------------

def _restore_dims(g: np.ndarray, shape: tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape) if keepdims else np.full(shape, g)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    shape = a.data.shape

    def bw(g):
        return (np.ascontiguousarray(_restore_dims(g, shape, axis, keepdims)),)

    return _from_op(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), bw, "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    shape = a.data.shape
    n = a.data.size if axis is None else shape[axis]

    def bw(g):
        return (np.ascontiguousarray(_restore_dims(g, shape, axis, keepdims)) / n,)

    return _from_op(np.mean(a.data, axis=axis, keepdims=keepdims), (a,), bw, "mean")


def max_reduce(a, axis=None, keepdims=False) -> Tensor:
    """Max reduction; ties send the whole gradient to the first maximum."""
    a = _as_tensor(a)
    data = a.data
    if axis is None:
        flat_idx = int(np.argmax(data))
        out = data.reshape(-1)[flat_idx]
        if keepdims:
            out = np.full((1,) * data.ndim, out)

        def bw(g):
            ga = np.zeros_like(data)
            ga.reshape(-1)[flat_idx] = np.asarray(g).reshape(-1)[0]
            return (ga,)

        return _from_op(out, (a,), bw, "max")

    idx = np.argmax(data, axis=axis)
    out = np.take_along_axis(data, np.expand_dims(idx, axis), axis=axis)
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def bw(g):
        ga = np.zeros_like(data)
        gg = g if keepdims else np.expand_dims(g, axis)
        np.put_along_axis(ga, np.expand_dims(idx, axis), gg, axis=axis)
        return (ga,)

    return _from_op(out, (a,), bw, "max")


# -- softmax ------------------------------------------------------------------

def softmax(a, axis: int = -1) -> Tensor:
    """Stable softmax along ``axis`` (max is subtracted before exp)."""
    a = _as_tensor(a)
    if a.data.size == 0:
        raise ValueError("softmax of an empty tensor")
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def bw(g):
        dot = np.sum(g * out, axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _from_op(out, (a,), bw, "softmax")


def log_softmax(a, axis: int = -1) -> Tensor:
    """Stable log-softmax composed from max/sub/exp/sum/log."""
    a = _as_tensor(a)
    m = max_reduce(a, axis=axis, keepdims=True)
    shifted = sub(a, m)
    return sub(shifted, log(sum_(exp(shifted), axis=axis, keepdims=True)))


# -- backward pass ------------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every requires_grad leaf.

    Each recorded node is visited exactly once, in reverse topological
    order, so shared subexpressions contribute exactly once.
    """
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor")
    if loss.data.size != 1:
        raise ValueError("backward requires a scalar loss")
    if loss._backward_fn is None:
        raise ValueError("loss is detached from any recorded computation")

    order = _topo_order(loss)
    flows: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        flow = flows.pop(id(node), None)
        if flow is None:
            continue
        if node.grad is None:
            node.grad = flow.copy()
        else:
            node.grad = node.grad + flow
        if node._backward_fn is None:
            continue
        grads = node._backward_fn(flow)
        for parent, g in zip(node._parents, grads):
            if not parent.requires_grad or g is None:
                continue
            prev = flows.get(id(parent))
            flows[id(parent)] = g if prev is None else prev + g


# -- finite-difference oracle ---------------------------------------------------

def finite_diff_check(op: Callable[[Tensor], Tensor], point: Tensor, step: float = 1e-5) -> float:
    """Max relative error between recorded gradients and central differences.

    ``op`` must be a scalar-valued pure function of its tensor argument.
    Per coordinate the error is |analytic - numeric| divided by
    max(1e-12, |analytic| + |numeric|).
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x = Tensor(point.data, requires_grad=True)
    out = op(x)
    if not isinstance(out, Tensor) or out.data.size != 1:
        raise ValueError("finite_diff_check requires a scalar-valued op")
    backward(out)
    analytic = x.grad.reshape(-1).copy()

    base = point.data.copy()
    flat = base.reshape(-1)
    numeric = np.empty_like(analytic)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        f_plus = op(Tensor(base)).item()
        flat[i] = orig - step
        f_minus = op(Tensor(base)).item()
        flat[i] = orig
        numeric[i] = (f_plus - f_minus) / (2.0 * step)

    scale = np.maximum(1e-12, np.abs(analytic) + np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / scale)) if flat.size else 0.0
