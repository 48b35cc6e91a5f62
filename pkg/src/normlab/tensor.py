"""Dense float64 tensors with reverse-mode automatic differentiation.

Tensors hold 1- to 4-axis row-major arrays (axis order N,C,H,W for feature
maps). Every differentiable operation records itself on a dynamic tape;
``backward`` on a scalar result propagates adjoints to all tracked leaves.
Broadcasting is restricted to axes of extent 1 between same-rank operands,
so oracle comparisons stay unambiguous. All public operations verify that
finite inputs produce finite outputs and raise instead of letting NaN/Inf
propagate silently.
"""

from __future__ import annotations

import json
from typing import Callable, Iterable, Sequence

import numpy as np

from . import kernels

MAX_AXES = 4

# Names of every registered differentiable operation, in definition order.
# The gradient-check suites must cover each entry (see checks.py).
OP_REGISTRY: list[str] = []


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class NumericsError(ArithmeticError):
    """An operation produced (or would produce) non-finite values."""


class GraphError(RuntimeError):
    """Autodiff tape misuse: non-scalar loss or a consumed tape."""


def _register(name: str) -> str:
    OP_REGISTRY.append(name)
    return name


def _check_finite(arr: np.ndarray, op: str) -> None:
    # single-pass probe; a finite sum proves all elements finite, an
    # overflowed-but-finite array falls through to the exact check
    with np.errstate(all="ignore"):
        if np.isfinite(arr.sum()):
            return
    if not np.all(np.isfinite(arr)):
        raise NumericsError(f"{op}: produced non-finite values")


def _as_array(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if not 1 <= arr.ndim <= MAX_AXES:
        raise ShapeError(f"tensors are limited to 1..{MAX_AXES} axes, got {arr.ndim}")
    if arr.size == 0:
        raise ShapeError("tensors must have positive extents")
    return np.ascontiguousarray(arr)


class Tensor:
    """A dense float64 array plus optional autodiff bookkeeping.

    ``requires_grad`` marks a leaf whose adjoint should be accumulated by
    ``backward``. Results of operations on tracked tensors carry tape
    records; everything else is a plain value.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        _check_finite(self.data, "tensor")
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], tuple] | None = None
        self._consumed = False

    # -- introspection ----------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() requires a single-element tensor, shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def to_json(self) -> str:
        """Debug dump: ``{"shape": [...], "data": [...]}`` with row-major data."""
        return json.dumps({"shape": list(self.shape), "data": self.data.reshape(-1).tolist()})

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={list(self.shape)}, requires_grad={self.requires_grad})"

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_coerce(other, self.shape), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _result(data: np.ndarray, op: str, parents: tuple[Tensor, ...],
            vjp: Callable[[np.ndarray], tuple] | None) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._consumed = False
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
    else:
        out.requires_grad = False
        out._parents = ()
        out._vjp = None
    return out


def _coerce(value, like_shape: tuple[int, ...]) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.full((1,) * len(like_shape), float(value)))


def _broadcast_shape(sa: tuple[int, ...], sb: tuple[int, ...], op: str) -> tuple[int, ...]:
    if len(sa) != len(sb):
        raise ShapeError(f"{op}: rank mismatch {list(sa)} vs {list(sb)} "
                         "(no implicit rank promotion)")
    out = []
    for da, db in zip(sa, sb):
        if da == db or db == 1:
            out.append(da)
        elif da == 1:
            out.append(db)
        else:
            raise ShapeError(f"{op}: shapes {list(sa)} and {list(sb)} do not broadcast")
    return tuple(out)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    axes = tuple(i for i, (d, g) in enumerate(zip(shape, grad.shape)) if d == 1 and g != 1)
    return grad.sum(axis=axes, keepdims=True)


# -- elementwise ops -------------------------------------------------------

def _binary(a: Tensor, b, op: str, fwd, da, db) -> Tensor:
    if not isinstance(b, Tensor):
        # scalar operand: a constant, gradient flows only into `a`
        bval = float(b)
        with np.errstate(all="ignore"):
            data = fwd(a.data, bval)

        def vjp_scalar(g):
            return (da(g, a.data, bval),)

        return _result(data, op, (a,), vjp_scalar)

    _broadcast_shape(a.shape, b.shape, op)
    with np.errstate(all="ignore"):
        data = fwd(a.data, b.data)

    def vjp(g):
        return (_unbroadcast(da(g, a.data, b.data), a.shape),
                _unbroadcast(db(g, a.data, b.data), b.shape))

    return _result(data, op, (a, b), vjp)


_ADD = _register("add")
_SUB = _register("sub")
_MUL = _register("mul")
_DIV = _register("div")


def add(a: Tensor, b) -> Tensor:
    return _binary(a, b, "add", lambda x, y: x + y,
                   lambda g, x, y: g, lambda g, x, y: g)


def sub(a: Tensor, b) -> Tensor:
    return _binary(a, b, "sub", lambda x, y: x - y,
                   lambda g, x, y: g, lambda g, x, y: -g)


def mul(a: Tensor, b) -> Tensor:
    return _binary(a, b, "mul", lambda x, y: x * y,
                   lambda g, x, y: g * y, lambda g, x, y: g * x)


def div(a: Tensor, b) -> Tensor:
    bdata = b.data if isinstance(b, Tensor) else np.asarray(float(b))
    if np.any(bdata == 0.0):
        raise NumericsError("div: divisor contains 0")
    return _binary(a, b, "div", lambda x, y: x / y,
                   lambda g, x, y: g / y, lambda g, x, y: -g * x / (y * y))


def scale(a: Tensor, s: float) -> Tensor:
    """Multiply by a Python constant (no gradient for the constant)."""
    return mul(a, float(s))


def _unary(a: Tensor, op: str, fwd, da) -> Tensor:
    with np.errstate(all="ignore"):
        data = fwd(a.data)

    def vjp(g):
        return (da(g, a.data, data),)

    return _result(data, op, (a,), vjp)


_RELU = _register("relu")
_TANH = _register("tanh")
_SIGMOID = _register("sigmoid")
_EXP = _register("exp")
_LOG = _register("log")
_SQRT = _register("sqrt")
_SOFTPLUS = _register("softplus")


def relu(a: Tensor) -> Tensor:
    return _unary(a, "relu", lambda x: np.maximum(x, 0.0),
                  lambda g, x, y: g * (x > 0.0))


def tanh(a: Tensor) -> Tensor:
    return _unary(a, "tanh", np.tanh, lambda g, x, y: g * (1.0 - y * y))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # 0.5*(1+tanh(x/2)) is stable for large |x|
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a: Tensor) -> Tensor:
    return _unary(a, "sigmoid", _sigmoid, lambda g, x, y: g * y * (1.0 - y))


def exp(a: Tensor) -> Tensor:
    return _unary(a, "exp", np.exp, lambda g, x, y: g * y)


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0):
        raise NumericsError("log: requires strictly positive input")
    return _unary(a, "log", np.log, lambda g, x, y: g / x)


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0.0):
        raise NumericsError("sqrt: requires non-negative input")
    return _unary(a, "sqrt", np.sqrt, lambda g, x, y: g * 0.5 / y)


def softplus(a: Tensor) -> Tensor:
    return _unary(a, "softplus", lambda x: np.logaddexp(0.0, x),
                  lambda g, x, y: g * _sigmoid(x))


def elementwise(op: str, a: Tensor, b=None) -> Tensor:
    """Dispatch an elementwise operation by name.

    ``op`` is one of add, sub, mul, div, relu, scale. Binary ops accept a
    Tensor or scalar ``b``; relu is unary; scale requires a scalar ``b``.
    """
    if op == "relu":
        if b is not None:
            raise ValueError("relu takes no second operand")
        return relu(a)
    if b is None:
        raise ValueError(f"{op} requires a second operand")
    if op == "add":
        return add(a, b)
    if op == "sub":
        return sub(a, b)
    if op == "mul":
        return mul(a, b)
    if op == "div":
        return div(a, b)
    if op == "scale":
        return scale(a, b)
    raise ValueError(f"unknown elementwise op {op!r}")


# -- reductions ------------------------------------------------------------

_SUM = _register("sum")
_MEAN = _register("mean")
_MAX = _register("max")


def _norm_axes(axes, ndim: int, op: str) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    axes = tuple(sorted(set(int(ax) for ax in axes)))
    for ax in axes:
        if not 0 <= ax < ndim:
            raise ShapeError(f"{op}: axis {ax} invalid for {ndim}-axis tensor")
    return axes


def reduce_sum(x: Tensor, axes: Iterable[int] | None = None) -> Tensor:
    axes = _norm_axes(axes, x.ndim, "sum")
    if not axes:
        return x
    data = x.data.sum(axis=axes, keepdims=True)

    def vjp(g):
        return (np.broadcast_to(g, x.shape),)

    return _result(data, "sum", (x,), vjp)


def reduce_mean(x: Tensor, axes: Iterable[int] | None = None) -> Tensor:
    axes = _norm_axes(axes, x.ndim, "mean")
    if not axes:
        return x
    m = int(np.prod([x.shape[ax] for ax in axes]))
    data = x.data.sum(axis=axes, keepdims=True) / m

    def vjp(g):
        return (np.broadcast_to(g / m, x.shape),)

    return _result(data, "mean", (x,), vjp)


def reduce_max(x: Tensor, axes: Iterable[int] | None = None) -> Tensor:
    axes = _norm_axes(axes, x.ndim, "max")
    if not axes:
        return x
    data = x.data.max(axis=axes, keepdims=True)

    def vjp(g):
        # ties split the adjoint evenly; deterministic
        mask = x.data == data
        count = mask.sum(axis=axes, keepdims=True)
        return (mask * (g / count),)

    return _result(data, "max", (x,), vjp)


def reduce(kind: str, x: Tensor, axes: Iterable[int] | None = None) -> Tensor:
    """Dispatch a reduction (mean, sum, max) over an axis set, keeping dims."""
    if kind == "sum":
        return reduce_sum(x, axes)
    if kind == "mean":
        return reduce_mean(x, axes)
    if kind == "max":
        return reduce_max(x, axes)
    raise ValueError(f"unknown reduction {kind!r}")


# -- shape ops ---------------------------------------------------------------

_RESHAPE = _register("reshape")
_TRANSPOSE = _register("transpose")
_BROADCAST = _register("broadcast_to")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"reshape: cannot view {list(x.shape)} as {list(shape)}")
    if not 1 <= len(shape) <= MAX_AXES:
        raise ShapeError(f"reshape: target rank {len(shape)} outside 1..{MAX_AXES}")
    data = x.data.reshape(shape)

    def vjp(g):
        return (g.reshape(x.shape),)

    return _result(data, "reshape", (x,), vjp)


def transpose(x: Tensor) -> Tensor:
    """Swap the two axes of a matrix."""
    if x.ndim != 2:
        raise ShapeError(f"transpose: expects a 2-axis tensor, got {x.ndim}")
    data = np.ascontiguousarray(x.data.T)

    def vjp(g):
        return (np.ascontiguousarray(g.T),)

    return _result(data, "transpose", (x,), vjp)


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Materialize a broadcast along axes of extent 1."""
    shape = tuple(int(s) for s in shape)
    if _broadcast_shape(x.shape, shape, "broadcast_to") != shape:
        raise ShapeError(f"broadcast_to: {list(x.shape)} does not expand to {list(shape)}")
    data = np.ascontiguousarray(np.broadcast_to(x.data, shape))

    def vjp(g):
        return (_unbroadcast(g, x.shape),)

    return _result(data, "broadcast_to", (x,), vjp)


_CONCAT = _register("concat")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate two feature maps along the channel axis."""
    if a.ndim != 4 or b.ndim != 4:
        raise ShapeError("concat_channels expects [N,C,H,W] operands")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat_channels: shapes {list(a.shape)} and {list(b.shape)} "
                         "differ outside the channel axis")
    ca = a.shape[1]
    data = np.ascontiguousarray(np.concatenate([a.data, b.data], axis=1))

    def vjp(g):
        return (np.ascontiguousarray(g[:, :ca]), np.ascontiguousarray(g[:, ca:]))

    return _result(data, "concat", (a, b), vjp)


# -- linear algebra ----------------------------------------------------------

_MATMUL = _register("matmul")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError("matmul: both operands must be 2-axis")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner extents differ, {list(a.shape)} x {list(b.shape)}")
    data = a.data @ b.data

    def vjp(g):
        return (g @ b.data.T, a.data.T @ g)

    return _result(data, "matmul", (a, b), vjp)


# -- embedding lookup --------------------------------------------------------

_EMBEDDING = _register("embedding")


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]`` with scatter-add gradient into the table."""
    if table.ndim != 2:
        raise ShapeError("embedding: table must be 2-axis [vocab, dim]")
    ids = np.asarray(ids)
    if ids.ndim != 1 or not np.issubdtype(ids.dtype, np.integer):
        raise ShapeError("embedding: ids must be a 1-axis integer array")
    if ids.min() < 0 or ids.max() >= table.shape[0]:
        raise ShapeError(f"embedding: id out of vocabulary range [0, {table.shape[0]})")
    data = table.data[ids].copy()

    def vjp(g):
        dt = np.zeros_like(table.data)
        np.add.at(dt, ids, g)
        return (dt,)

    return _result(data, "embedding", (table,), vjp)


# -- convolution -------------------------------------------------------------

_CONV2D = _register("conv2d")


def conv2d(x: Tensor, w: Tensor, bias: Tensor, padding: int | tuple[int, int]) -> Tensor:
    """2-d cross-correlation (no kernel flip) over [N,Cin,H,W] feature maps.

    ``w`` is [Cout,Cin,kh,kw] with kh,kw in {1,3}; ``bias`` is [Cout].
    Padding 1 preserves spatial size for 3x3 kernels, padding 0 for 1x1.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError("conv2d: x must be [N,Cin,H,W] and w [Cout,Cin,kh,kw]")
    n, cin, h, wdt = x.shape
    cout, cin_w, kh, kw = w.shape
    if kh not in (1, 3) or kw not in (1, 3):
        raise ShapeError(f"conv2d: kernel extents must be 1 or 3, got {kh}x{kw}")
    if cin_w != cin:
        raise ShapeError(f"conv2d: channel mismatch, input {cin} vs kernel {cin_w}")
    if bias.ndim != 1 or bias.shape[0] != cout:
        raise ShapeError("conv2d: bias must be [Cout]")
    ph, pw = (padding, padding) if isinstance(padding, int) else (int(padding[0]), int(padding[1]))
    if h + 2 * ph < kh or wdt + 2 * pw < kw:
        raise ShapeError("conv2d: kernel larger than padded input")

    data = kernels.conv2d_forward(x.data, w.data, bias.data, ph, pw)

    def vjp(g):
        g = np.ascontiguousarray(g)
        dx = kernels.conv2d_grad_input(g, w.data, h, wdt, ph, pw)
        dw = kernels.conv2d_grad_weight(g, x.data, kh, kw, ph, pw)
        db = g.sum(axis=(0, 2, 3))
        return (dx, dw, db)

    return _result(data, "conv2d", (x, w, bias), vjp)


# -- backward pass -----------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Accumulate adjoints of ``loss`` into every tracked leaf's ``.grad``.

    The tape is consumed: a second backward through any part of the same
    graph raises GraphError.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {list(loss.shape)}")
    if loss._consumed:
        raise GraphError("backward: tape already consumed")
    if not loss.requires_grad:
        loss._consumed = True
        return

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        if node._vjp is not None and node._consumed:
            raise GraphError("backward: tape already consumed")
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._vjp is None:
            continue
        node._consumed = True
        grads = node._vjp(node.grad)
        for parent, g in zip(node._parents, grads):
            if g is None or not parent.requires_grad:
                continue
            # adjoint buffers are never mutated in place, so aliasing a
            # child's grad is safe; optimizers re-verify finiteness
            if parent.grad is None:
                parent.grad = np.asarray(g, dtype=np.float64)
            else:
                parent.grad = parent.grad + g
    loss._consumed = True


# -- finite-difference oracle -------------------------------------------------

def fd_gradient(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-6) -> Tensor:
    """Central-difference gradient estimate of a tensor-to-scalar function.

    Independent of the tape: evaluates ``f`` at 2*size perturbed copies of
    ``x`` and never inspects recorded operations.
    """
    if step <= 0:
        raise ValueError("fd_gradient: step must be positive")
    base = x.data
    out = np.empty_like(base)
    flat = out.reshape(-1)
    for i in range(base.size):
        plus = base.copy().reshape(-1)
        plus[i] += step
        minus = base.copy().reshape(-1)
        minus[i] -= step
        fp = f(Tensor(plus.reshape(base.shape)))
        fm = f(Tensor(minus.reshape(base.shape)))
        fp = fp.item() if isinstance(fp, Tensor) else float(fp)
        fm = fm.item() if isinstance(fm, Tensor) else float(fm)
        flat[i] = (fp - fm) / (2.0 * step)
    return Tensor(out)


def zeros(shape: Sequence[int], requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(tuple(shape)), requires_grad=requires_grad)


def ones(shape: Sequence[int], requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(tuple(shape)), requires_grad=requires_grad)
