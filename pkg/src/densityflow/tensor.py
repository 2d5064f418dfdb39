"""Dense numpy-backed tensors with reverse-mode automatic differentiation.

Every differentiable op builds an output ``Tensor`` that remembers its parents
and a closure mapping the output gradient to parent gradients. ``backward``
linearises the graph into a :class:`Tape` and walks it in reverse.
"""

from __future__ import annotations

import os
from typing import Callable, Iterator, Optional, Sequence, Tuple, Union

import numpy as np

PRECISIONS = {"float32": np.dtype(np.float32), "float64": np.dtype(np.float64)}
# extended precision is only used internally, for the numeric side of grad_check
_FLOAT_DTYPES = set(PRECISIONS.values()) | {np.dtype(np.longdouble)}


def resolve_dtype(precision: Union[str, np.dtype, type, None]) -> np.dtype:
    if precision is None:
        return DEFAULT_DTYPE
    if isinstance(precision, str):
        if precision not in PRECISIONS:
            raise ValueError(f"unknown precision {precision!r}; expected one of {sorted(PRECISIONS)}")
        return PRECISIONS[precision]
    dt = np.dtype(precision)
    if dt not in PRECISIONS.values():
        raise ValueError(f"unsupported dtype {dt}")
    return dt


# Fixed at import; ops otherwise follow the dtype of their inputs.
DEFAULT_DTYPE = resolve_dtype(os.environ.get("DENSITYFLOW_PRECISION", "float64"))

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence[float]]
BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class Tensor:
    """An n-dimensional float array that can take part in differentiation."""

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in _FLOAT_DTYPES else DEFAULT_DTYPE
        self.data: np.ndarray = np.asarray(arr, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: Tuple[Tensor, ...] = ()
        self._backward: Optional[BackwardFn] = None
        self.op = "leaf"

    # -- basic attributes -------------------------------------------------
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else _raise_non_scalar(self.shape)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- differentiation --------------------------------------------------
    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        if grad is None:
            if self.size != 1:
                raise ValueError(f"backward() without a seed gradient needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.dtype).reshape(self.shape)
        if not self.requires_grad:
            return
        tape = Tape.record(self)
        pending = {id(self): grad}
        for node in reversed(tape.nodes):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg

    # -- operator sugar ---------------------------------------------------
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
        return mul(self, -1.0)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _raise_non_scalar(shape):
    raise ValueError(f"item() needs a single-element tensor, got shape {shape}")


class Tape:
    """Operations reachable from an output, in topological order."""

    def __init__(self, nodes: Sequence[Tensor]):
        self.nodes = list(nodes)

    @classmethod
    def record(cls, output: Tensor) -> "Tape":
        order: list = []
        seen = set()
        stack = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self) -> Iterator[Tensor]:
        return iter(self.nodes)


def as_tensor(x: ArrayLike, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x), dtype=dtype)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: BackwardFn, op: str) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    out.op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# -- elementwise arithmetic ----------------------------------------------------

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), backward, "add")


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), backward, "sub")


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "mul")

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data * b.data, (a, b), backward, "mul")


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "div")
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), backward, "div")


def _pair(a: ArrayLike, b: ArrayLike) -> Tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    if isinstance(b, Tensor):
        return as_tensor(a, like=b), b
    return as_tensor(a), as_tensor(b)


def square(x: Tensor) -> Tensor:
    return mul(x, x)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,), "exp")


def relu(x: Tensor) -> Tensor:
    """Elementwise max(x, 0); the subgradient at exactly 0 is 0."""
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0.0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


# -- reductions and shape ops ----------------------------------------------------

def _norm_axes(axis, ndim: int):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for ax in axis:
        if not -ndim <= ax < ndim:
            raise ValueError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    return tuple(sorted(set(out)))


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(np.asarray(out), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return mul(sum_(x, axes, keepdims), 1.0 / count)


def mse(a: Tensor, b: ArrayLike) -> Tensor:
    a, b = _pair(a, b)
    if a.shape != b.shape:
        raise ValueError(f"mse: shape mismatch {a.shape} vs {b.shape}")
    return mean(square(sub(a, b)))


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ValueError(f"reshape: cannot view {x.shape} as {shape}") from None
    return _result(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not xs:
        raise ValueError("concat: empty input list")
    ref = xs[0]
    axis = _norm_axes(axis, ref.ndim)[0]
    for i, t in enumerate(xs):
        if t.ndim != ref.ndim:
            raise ValueError(f"concat: input {i} has rank {t.ndim}, expected {ref.ndim}")
        for d in range(ref.ndim):
            if d != axis and t.shape[d] != ref.shape[d]:
                raise ValueError(
                    f"concat: input {i} dimension {d} is {t.shape[d]}, expected {ref.shape[d]}"
                )
    bounds = np.cumsum([t.shape[axis] for t in xs])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(np.concatenate([t.data for t in xs], axis=axis), tuple(xs), backward, "concat")


def getitem(x: Tensor, index) -> Tensor:
    out = x.data[index]

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _result(np.array(out), (x,), backward, "getitem")


def take(x: Tensor, flat_index: np.ndarray) -> Tensor:
    """Gather from the flattened tensor; output has the shape of ``flat_index``."""
    flat_index = np.asarray(flat_index, dtype=np.intp)
    out = x.data.reshape(-1)[flat_index]

    def backward(g):
        full = np.zeros(x.size, dtype=x.dtype)
        np.add.at(full, flat_index.reshape(-1), g.reshape(-1))
        return (full.reshape(x.shape),)

    return _result(out, (x,), backward, "take")


# -- neural-net ops ----------------------------------------------------------------

def _accumulator(dtype) -> np.dtype:
    """At least double: reductions inside single-precision graphs accumulate wide and round once."""
    return np.promote_types(dtype, np.float64)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"softmax: axis {axis} out of range for rank {x.ndim}")
    xa = x.data.astype(_accumulator(x.dtype), copy=False)
    e = np.exp(xa - xa.max(axis=axis, keepdims=True))
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        g = g.astype(s.dtype, copy=False)
        return ((s * (g - (g * s).sum(axis=axis, keepdims=True))).astype(x.dtype, copy=False),)

    return _result(s.astype(x.dtype, copy=False), (x,), backward, "softmax")


def conv_output_size(size: int, k: int, stride: int, dilation: int, padding: int) -> int:
    span = size + 2 * padding - dilation * (k - 1) - 1
    if span < 0 or span % stride:
        raise ValueError(
            f"conv2d: extent {size} with kernel {k}, stride {stride}, dilation {dilation}, "
            f"padding {padding} does not give an integral output size"
        )
    return span // stride + 1


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    dilation: int = 1,
    padding: int = 0,
) -> Tensor:
    """Dilated 2-D cross-correlation over an NCHW input."""
    if x.ndim != 4:
        raise ValueError(f"conv2d: input must be rank 4 (N,C,H,W), got shape {x.shape}")
    if weight.ndim != 4:
        raise ValueError(f"conv2d: weight must be rank 4 (O,C,k,k), got shape {weight.shape}")
    n, c, h, w = x.shape
    o, cw, kh, kw = weight.shape
    if cw != c:
        raise ValueError(f"conv2d: input channels {c} do not match weight channels {cw}")
    if bias is not None and bias.shape != (o,):
        raise ValueError(f"conv2d: bias shape {bias.shape} does not match output channels {o}")
    if stride < 1 or dilation < 1 or padding < 0:
        raise ValueError("conv2d: stride and dilation must be >= 1 and padding >= 0")
    ho = conv_output_size(h, kh, stride, dilation, padding)
    wo = conv_output_size(w, kw, stride, dilation, padding)

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    dtype = np.result_type(x.dtype, weight.dtype, *(() if bias is None else (bias.dtype,)))
    acc = _accumulator(dtype)
    w_acc = weight.data.astype(acc, copy=False)
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=acc)
    row_span = stride * (ho - 1) + 1
    col_span = stride * (wo - 1) + 1
    for a in range(kh):
        for b in range(kw):
            r0, c0 = a * dilation, b * dilation
            cols[:, :, a, b] = xp[:, :, r0:r0 + row_span:stride, c0:c0 + col_span:stride]
    out = np.tensordot(cols, w_acc, axes=([1, 2, 3], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out, dtype=dtype)

    def backward(g):
        gx = gw = gb = None
        g = g.astype(acc, copy=False)
        if weight.requires_grad:
            gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 4, 5])).astype(weight.dtype, copy=False)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3)).astype(bias.dtype, copy=False)
        if x.requires_grad:
            gcols = np.tensordot(g, w_acc, axes=([1], [0]))  # N,Ho,Wo,C,kh,kw
            gxp = np.zeros(xp.shape, dtype=acc)
            for a in range(kh):
                for b in range(kw):
                    r0, c0 = a * dilation, b * dilation
                    gxp[:, :, r0:r0 + row_span:stride, c0:c0 + col_span:stride] += (
                        gcols[:, :, :, :, a, b].transpose(0, 3, 1, 2)
                    )
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
            gx = gx.astype(x.dtype, copy=False)
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _result(out, parents, backward, "conv2d")


def norm_affine(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-sample, per-channel normalisation over H and W, then scale and shift."""
    if x.ndim != 4:
        raise ValueError(f"norm_affine: input must be rank 4 (N,C,H,W), got shape {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(
            f"norm_affine: gamma {gamma.shape} / beta {beta.shape} must both be ({c},)"
        )
    m = x.shape[2] * x.shape[3]
    dtype = np.result_type(x.dtype, gamma.dtype, beta.dtype)
    acc = _accumulator(dtype)
    xa = x.data.astype(acc, copy=False)
    mu = xa.mean(axis=(2, 3), keepdims=True)
    centered = xa - mu
    var = (centered ** 2).mean(axis=(2, 3), keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    g4 = gamma.data.astype(acc)[None, :, None, None]
    out = (g4 * xhat + beta.data[None, :, None, None]).astype(dtype, copy=False)

    def backward(g):
        g = g.astype(acc, copy=False)
        ggamma = (g * xhat).sum(axis=(0, 2, 3)).astype(gamma.dtype, copy=False) if gamma.requires_grad else None
        gbeta = g.sum(axis=(0, 2, 3)).astype(beta.dtype, copy=False) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * g4
            gx = (inv_std / m) * (
                m * dxhat
                - dxhat.sum(axis=(2, 3), keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=(2, 3), keepdims=True)
            )
            gx = gx.astype(x.dtype, copy=False)
        return gx, ggamma, gbeta

    return _result(out, (x, gamma, beta), backward, "norm_affine")


def channel_norm_affine(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise across channels at each (sample, row, column), then scale and shift per channel.

    Unlike ``norm_affine`` the spatial layout of magnitudes survives, which
    matters when the network must regress how much of something is present.
    """
    if x.ndim != 4:
        raise ValueError(f"channel_norm_affine: input must be rank 4 (N,C,H,W), got shape {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(
            f"channel_norm_affine: gamma {gamma.shape} / beta {beta.shape} must both be ({c},)"
        )
    dtype = np.result_type(x.dtype, gamma.dtype, beta.dtype)
    acc = _accumulator(dtype)
    xa = x.data.astype(acc, copy=False)
    mu = xa.mean(axis=1, keepdims=True)
    centered = xa - mu
    var = (centered ** 2).mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    g4 = gamma.data.astype(acc)[None, :, None, None]
    out = (g4 * xhat + beta.data[None, :, None, None]).astype(dtype, copy=False)

    def backward(g):
        g = g.astype(acc, copy=False)
        ggamma = (g * xhat).sum(axis=(0, 2, 3)).astype(gamma.dtype, copy=False) if gamma.requires_grad else None
        gbeta = g.sum(axis=(0, 2, 3)).astype(beta.dtype, copy=False) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * g4
            gx = (inv_std / c) * (
                c * dxhat
                - dxhat.sum(axis=1, keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=1, keepdims=True)
            )
            gx = gx.astype(x.dtype, copy=False)
        return gx, ggamma, gbeta

    return _result(out, (x, gamma, beta), backward, "channel_norm_affine")


def avg_pool2d(x: Tensor, k: int) -> Tensor:
    n, c, h, w = x.shape
    if h % k or w % k:
        raise ValueError(f"avg_pool2d: spatial dims {(h, w)} not divisible by {k}")
    out = x.data.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))

    def backward(g):
        up = np.repeat(np.repeat(g, k, axis=2), k, axis=3)
        return (up / (k * k),)

    return _result(out, (x,), backward, "avg_pool2d")


# -- gradient checking ----------------------------------------------------------

def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: Optional[float] = None) -> float:
    """Largest relative disagreement between backprop and central differences.

    The numeric side is evaluated on an extended-precision copy of ``x`` (the
    rest of the graph promotes to it) so the comparison is not dominated by
    rounding in the function itself.
    """
    if eps is None:
        eps = 2.0 ** -20
    probe = Tensor(x.data.copy(), requires_grad=True)
    out = f(probe)
    if out.size != 1:
        raise ValueError(f"grad_check: function must return a scalar, got shape {out.shape}")
    out.backward()
    analytic = np.zeros(x.shape) if probe.grad is None else probe.grad.astype(np.longdouble)

    base = x.data.astype(np.longdouble)
    numeric = np.zeros_like(base)
    flat = base.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        up, down = orig + eps, orig - eps
        flat[i] = up
        hi = f(Tensor(base)).data.reshape(-1)[0]
        flat[i] = down
        lo = f(Tensor(base)).data.reshape(-1)[0]
        flat[i] = orig
        num_flat[i] = (hi - lo) / (up - down)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0
