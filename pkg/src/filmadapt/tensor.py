"""Dense float tensors with reverse-mode automatic differentiation.

The engine is deliberately small: a Tensor wraps a numpy float32/float64
buffer, and every differentiable operation records a node (parent links plus
a backward closure) into an implicit DAG. ``Tensor.backward`` walks that DAG
once in reverse topological order, summing gradients into every leaf that
requires them, then marks the graph as consumed.

Conventions enforced here:

* only float32 and float64 buffers exist; mixing the two in one op raises
* broadcasting follows trailing-axis alignment (numpy semantics), and the
  gradient of a stretched operand is summed over the stretched axes
* gradient accumulation is summation; callers zero grads between steps
* public ops validate their outputs for NaN/Inf while ``validate_outputs``
  is on (the default), raising ``NonFinite`` instead of propagating garbage
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class ShapeMismatch(ValueError):
    pass


class DtypeMismatch(TypeError):
    pass


class AxisOutOfRange(IndexError):
    pass


class IndexOutOfRange(IndexError):
    pass


class NotScalar(ValueError):
    pass


class GraphConsumed(RuntimeError):
    pass


class NonFinite(FloatingPointError):
    pass


class TargetOutOfRange(ValueError):
    pass


_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

# Module switch for output validation. Left on everywhere; flip off only in
# profiled hot loops that have already been validated.
validate_outputs = True

_grad_enabled = True


class no_grad:
    """Context manager that suspends graph recording."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn", "_recompute", "_consumed")

    def __init__(self, data, dtype=None, requires_grad: bool = False):
        arr = np.asarray(data)
        if dtype is not None:
            arr = np.asarray(arr, dtype=dtype)
        elif arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        if arr.dtype not in _FLOAT_DTYPES:
            raise DtypeMismatch(f"only float32/float64 tensors are supported, got {arr.dtype}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable[[np.ndarray], None] | None = None
        self._recompute: Callable[[], np.ndarray] | None = None
        self._consumed = False

    # ---- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{flag})"

    # ---- graph machinery -----------------------------------------------------

    def detach(self) -> "Tensor":
        """Same values, severed from the graph. Shares the buffer."""
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out.grad = None
        out._parents = ()
        out._backward_fn = None
        out._recompute = None
        out._consumed = False
        return out

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar. Each graph may be swept once."""
        if self.data.size != 1:
            raise NotScalar(f"backward requires a scalar, got shape {self.shape}")
        if self._consumed:
            raise GraphConsumed("backward was already called on this graph")

        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))

        if self.grad is None:
            self.grad = np.ones_like(self.data)
        else:
            self.grad = self.grad + np.ones_like(self.data)

        for node in reversed(topo):
            fn = node._backward_fn
            if fn is None:
                if node._parents:
                    raise GraphConsumed("graph shares nodes with an already-consumed graph")
                continue
            if node.grad is not None:
                fn(node.grad)
            node._backward_fn = None
            node._recompute = None
            node._consumed = True
            if node._parents:
                node.grad = None  # only leaves keep gradients

    # ---- operator sugar --------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(_coerce(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_coerce(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(_coerce(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_coerce(other, self.dtype), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape) -> "Tensor":
        return reshape(self, shape if len(shape) != 1 or not isinstance(shape[0], (tuple, list)) else tuple(shape[0]))

    def transpose(self, *axes) -> "Tensor":
        return transpose(self, axes if axes else None)

    @property
    def T(self) -> "Tensor":
        return transpose(self, None)


def _not_scalar(t: Tensor):
    raise NotScalar(f"expected scalar tensor, got shape {t.shape}")


def _coerce(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _check_dtypes(a: Tensor, b: Tensor, op: str) -> None:
    if a.dtype != b.dtype:
        raise DtypeMismatch(f"{op}: mixed dtypes {a.dtype.name} and {b.dtype.name}")


def _node(out_data: np.ndarray, parents: Sequence[Tensor], backward_fn, recompute, op: str) -> Tensor:
    if validate_outputs and not np.all(np.isfinite(out_data)):
        raise NonFinite(f"{op} produced non-finite values")
    req = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.requires_grad = req
    out.grad = None
    out._consumed = False
    if req:
        out._parents = tuple(p for p in parents if p.requires_grad)
        out._backward_fn = backward_fn
        out._recompute = recompute
    else:
        out._parents = ()
        out._backward_fn = None
        out._recompute = None
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.dtype)  # copy: g may alias a shared buffer
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to ``shape`` (inverse of trailing-axis broadcast)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeMismatch(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from exc


# ---- elementwise arithmetic ----------------------------------------------------


def add(a, b) -> Tensor:
    a = _coerce(a, getattr(b, "dtype", None) or np.float32)
    b = _coerce(b, a.dtype)
    _check_dtypes(a, b, "add")
    _broadcast_shape(a, b, "add")
    out = a.data + b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _node(out, (a, b), backward, lambda: a.data + b.data, "add")


def sub(a, b) -> Tensor:
    a = _coerce(a, getattr(b, "dtype", None) or np.float32)
    b = _coerce(b, a.dtype)
    _check_dtypes(a, b, "sub")
    _broadcast_shape(a, b, "sub")
    out = a.data - b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, -_unbroadcast(g, b.shape))

    return _node(out, (a, b), backward, lambda: a.data - b.data, "sub")


def mul(a, b) -> Tensor:
    a = _coerce(a, getattr(b, "dtype", None) or np.float32)
    b = _coerce(b, a.dtype)
    _check_dtypes(a, b, "mul")
    _broadcast_shape(a, b, "mul")
    out = a.data * b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _node(out, (a, b), backward, lambda: a.data * b.data, "mul")


def div(a, b) -> Tensor:
    a = _coerce(a, getattr(b, "dtype", None) or np.float32)
    b = _coerce(b, a.dtype)
    _check_dtypes(a, b, "div")
    _broadcast_shape(a, b, "div")
    out = a.data / b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g * out / b.data, b.shape))

    return _node(out, (a, b), backward, lambda: a.data / b.data, "div")


# ---- matmul and layout ----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if not isinstance(a, Tensor) or not isinstance(b, Tensor):
        raise TypeError("matmul expects Tensors")
    _check_dtypes(a, b, "matmul")
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatch(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul: inner extents {a.shape[-1]} and {b.shape[-2]} differ")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeMismatch(f"matmul: batch shapes {a.shape} and {b.shape} incompatible") from exc

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))

    return _node(out, (a, b), backward, lambda: np.matmul(a.data, b.data), "matmul")


def transpose(x: Tensor, axes=None) -> Tensor:
    perm = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    if sorted(perm) != list(range(x.ndim)):
        raise AxisOutOfRange(f"transpose: invalid axes {perm} for ndim {x.ndim}")
    out = np.transpose(x.data, perm)
    inverse = np.argsort(perm)

    def backward(g):
        _accumulate(x, np.transpose(g, inverse))

    return _node(out, (x,), backward, lambda: np.transpose(x.data, perm), "transpose")


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeMismatch(f"cannot reshape {x.shape} to {shape}") from exc

    def backward(g):
        _accumulate(x, g.reshape(x.shape))

    return _node(out, (x,), backward, lambda: x.data.reshape(shape), "reshape")


def stack(tensors: Sequence[Tensor]) -> Tensor:
    """Stack same-shape tensors along a new leading axis."""
    tensors = list(tensors)
    if not tensors:
        raise ShapeMismatch("stack of zero tensors")
    shape = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != shape:
            raise ShapeMismatch(f"stack: shapes {shape} and {t.shape} differ")
        _check_dtypes(tensors[0], t, "stack")
    out = np.stack([t.data for t in tensors])

    def backward(g):
        for i, t in enumerate(tensors):
            _accumulate(t, g[i])

    return _node(out, tuple(tensors), backward, lambda: np.stack([t.data for t in tensors]), "stack")


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice ``[start, start+length)`` along one axis."""
    if not -x.ndim <= axis < x.ndim:
        raise AxisOutOfRange(f"narrow: axis {axis} out of range for ndim {x.ndim}")
    axis = axis % x.ndim
    if start < 0 or length < 1 or start + length > x.shape[axis]:
        raise IndexOutOfRange(f"narrow: [{start}, {start + length}) outside extent {x.shape[axis]}")
    index = (slice(None),) * axis + (slice(start, start + length),)
    out = x.data[index]

    def backward(g):
        full = np.zeros(x.shape, dtype=x.dtype)
        full[index] = g
        _accumulate(x, full)

    return _node(out, (x,), backward, lambda: x.data[index], "narrow")


# ---- reductions ------------------------------------------------------------------


def _normalize_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    norm = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise AxisOutOfRange(f"axis {ax} out of range for ndim {ndim}")
        norm.append(ax % ndim)
    if len(set(norm)) != len(norm):
        raise AxisOutOfRange(f"repeated axes in {axes}")
    return tuple(norm)


def _expand_reduced(g: np.ndarray, shape: tuple[int, ...], axes: tuple[int, ...], keepdims: bool) -> np.ndarray:
    if not keepdims:
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        _accumulate(x, _expand_reduced(g, x.shape, axes, keepdims))

    return _node(np.asarray(out), (x,), backward, lambda: np.asarray(x.data.sum(axis=axes, keepdims=keepdims)), "sum")


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, x.ndim)
    count = 1
    for ax in axes:
        count *= x.shape[ax]
    out = x.data.mean(axis=axes, keepdims=keepdims)

    def backward(g):
        _accumulate(x, _expand_reduced(g, x.shape, axes, keepdims) / count)

    return _node(np.asarray(out), (x,), backward, lambda: np.asarray(x.data.mean(axis=axes, keepdims=keepdims)), "mean")


# ---- nonlinearities --------------------------------------------------------------


def _sigmoid_np(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid_np(x.data)

    def backward(g):
        _accumulate(x, g * out * (1.0 - out))

    return _node(out, (x,), backward, lambda: _sigmoid_np(x.data), "sigmoid")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def backward(g):
        _accumulate(x, g * out)

    return _node(out, (x,), backward, lambda: np.exp(x.data), "exp")


def log(x: Tensor) -> Tensor:
    out = np.log(x.data)

    def backward(g):
        _accumulate(x, g / x.data)

    return _node(out, (x,), backward, lambda: np.log(x.data), "log")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)

    def backward(g):
        _accumulate(x, g * (0.5 / out))

    return _node(out, (x,), backward, lambda: np.sqrt(x.data), "sqrt")


_GELU_C = 0.7978845608028654  # sqrt(2/pi)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximation GELU (smooth, finite-difference friendly)."""
    z = x.data
    inner = _GELU_C * (z + 0.044715 * z**3)
    t = np.tanh(inner)
    out = 0.5 * z * (1.0 + t)

    def backward(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * z**2)
        _accumulate(x, g * (0.5 * (1.0 + t) + 0.5 * z * (1.0 - t**2) * d_inner))

    def recompute():
        i2 = _GELU_C * (z + 0.044715 * z**3)
        return 0.5 * z * (1.0 + np.tanh(i2))

    return _node(out, (x,), backward, recompute, "gelu")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    (ax,) = _normalize_axes(axis, x.ndim)
    shifted = x.data - x.data.max(axis=ax, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=ax, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=ax, keepdims=True)
        _accumulate(x, out * (g - dot))

    def recompute():
        s = x.data - x.data.max(axis=ax, keepdims=True)
        e2 = np.exp(s)
        return e2 / e2.sum(axis=ax, keepdims=True)

    return _node(out, (x,), backward, recompute, "softmax")


# ---- binary cross-entropy with logits --------------------------------------------


def _bce_np(z: np.ndarray, t: np.ndarray) -> np.ndarray:
    # max(z,0) - z*t + log(1+exp(-|z|)): stable for any |z|
    return np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))


def bce_with_logits(z: Tensor, t: Tensor) -> Tensor:
    """Elementwise stable binary cross-entropy of logits ``z`` against
    targets ``t`` in [0,1] (hard labels or soft probabilities)."""
    if not isinstance(z, Tensor):
        z = Tensor(z)
    if not isinstance(t, Tensor):
        t = Tensor(np.asarray(t, dtype=z.dtype))
    _check_dtypes(z, t, "bce_with_logits")
    td = t.data
    if td.size and (td.min() < 0.0 or td.max() > 1.0):
        raise TargetOutOfRange(f"targets must lie in [0,1], got range [{td.min()}, {td.max()}]")
    _broadcast_shape(z, t, "bce_with_logits")
    out = _bce_np(z.data, td)

    def backward(g):
        if z.requires_grad:
            _accumulate(z, _unbroadcast(g * (_sigmoid_np(z.data) - td), z.shape))
        if t.requires_grad:
            _accumulate(t, _unbroadcast(g * (-z.data), t.shape))

    return _node(out, (z, t), backward, lambda: _bce_np(z.data, t.data), "bce_with_logits")


# ---- helpers ---------------------------------------------------------------------


def zeros(shape, dtype=np.float32, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def replay_matches(root: Tensor) -> bool:
    """Recompute every recorded node from its parents and compare bit-exactly
    with the stored forward values. Only meaningful before backward."""
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack = [root]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        topo.append(node)
        stack.extend(node._parents)
    for node in topo:
        if node._recompute is not None:
            if not np.array_equal(node._recompute(), node.data):
                return False
    return True
