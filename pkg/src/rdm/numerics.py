"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every operation on a :class:`Tensor` that involves a differentiable input
records its parents and a closure computing the vector-Jacobian product.
:func:`backward` walks that record in reverse topological order.  The graph is
rebuilt on every forward pass; nothing is cached between steps.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ParamStore",
    "AdamState",
    "ShapeError",
    "NonFiniteError",
    "as_tensor",
    "no_grad",
    "is_grad_enabled",
    "forward_op",
    "backward",
    "adam_step",
    "grad_check",
    "matmul",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "scale",
    "exp",
    "tanh",
    "sigmoid",
    "hardtanh",
    "square",
    "tsum",
    "mean",
    "concat",
    "slice_",
    "take",
    "reshape",
    "swapaxes",
    "mse",
    "custom_op",
]

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when operand shapes are invalid for an operation."""


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or infinity."""

    def __init__(self, kind: str, message: str | None = None):
        self.kind = kind
        super().__init__(message or f"{kind}: produced non-finite values")


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference mode)."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """An n-d float64 array that can take part in reverse-mode autodiff."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "kind", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.kind = "leaf"
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, kind={self.kind}{flag})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(kind: str, out: np.ndarray) -> None:
    if not np.isfinite(out).all():
        raise NonFiniteError(kind)


def _make(kind: str, out: np.ndarray, parents: Sequence[Tensor], vjp) -> Tensor:
    _check_finite(kind, out)
    result = Tensor.__new__(Tensor)
    result.data = out
    result.grad = None
    result.kind = kind
    result.name = None
    track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    result.requires_grad = track
    if track:
        result._parents = tuple(parents)
        result._vjp = vjp
    else:
        result._parents = ()
        result._vjp = None
    return result


def custom_op(kind: str, out, parents: Sequence[Tensor], vjp) -> Tensor:
    """Build a tape node from a forward value and a vector-Jacobian closure.

    ``vjp(g)`` must return one gradient (or ``None``) per parent.
    """
    return _make(kind, np.asarray(out, dtype=DTYPE), [as_tensor(p) for p in parents], vjp)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra > 0:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(k for k, n in enumerate(shape) if n == 1 and grad.shape[k] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(kind: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: incompatible shapes {a.shape} and {b.shape}") from None


# --- binary elementwise -----------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _make("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _make("mul", ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    ad, bd = a.data, b.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = ad / bd
    return _make("div", out, (a, b),
                 lambda g: (_unbroadcast(g / bd, ad.shape),
                            _unbroadcast(-g * ad / (bd * bd), bd.shape)))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None
    ad, bd = a.data, b.data

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make("matmul", out, (a, b), vjp)


# --- unary ------------------------------------------------------------------


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _make("scale", a.data * c, (a,), lambda g: (g * c,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make("exp", out, (a,), lambda g: (g * out,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # split branches keep exp() from overflowing for large |x|
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def hardtanh(a, lo: float = -1.0, hi: float = 1.0) -> Tensor:
    if not lo < hi:
        raise ValueError(f"hardtanh: need lo < hi, got ({lo}, {hi})")
    a = as_tensor(a)
    x = a.data
    out = np.clip(x, lo, hi)
    inside = (x > lo) & (x < hi)
    return _make("hardtanh", out, (a,), lambda g: (g * inside,))


def square(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return _make("square", x * x, (a,), lambda g: (2.0 * g * x,))


# --- reductions and shape ops -----------------------------------------------


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)
    shape = a.shape

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _make("sum", np.asarray(out, dtype=DTYPE), (a,), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = 1
    for k in axes:
        count *= a.shape[k]
    out = a.data.mean(axis=axes, keepdims=keepdims)
    shape = a.shape

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, shape).copy(),)

    return _make("mean", np.asarray(out, dtype=DTYPE), (a,), vjp)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: no inputs")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = ", ".join(str(t.shape) for t in tensors)
        raise ShapeError(f"concat: incompatible shapes {shapes} along axis {axis}") from None
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make("concat", out, tensors, vjp)


def slice_(a, index) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data[index]
    except IndexError as exc:
        raise ShapeError(f"slice: {exc} for shape {a.shape}") from None
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.add.at(full, index, g)
        return (full,)

    return _make("slice", np.array(out, dtype=DTYPE), (a,), vjp)


def take(a, indices, axis: int = -1) -> Tensor:
    """Gather 1-d ``indices`` along ``axis``; repeats accumulate in backward."""
    a = as_tensor(a)
    indices = np.asarray(indices, dtype=np.intp).reshape(-1)
    axis = axis % a.ndim
    if indices.size and (indices.min() < -a.shape[axis] or indices.max() >= a.shape[axis]):
        raise ShapeError(f"take: index out of range for axis {axis} of shape {a.shape}")
    out = np.take(a.data, indices, axis=axis)
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.add.at(np.moveaxis(full, axis, 0), indices, np.moveaxis(g, axis, 0))
        return (full,)

    return _make("take", out, (a,), vjp)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {tuple(shape)}") from None
    orig = a.shape
    return _make("reshape", out, (a,), lambda g: (g.reshape(orig),))


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    return _make("swapaxes", np.swapaxes(a.data, ax1, ax2), (a,),
                 lambda g: (np.swapaxes(g, ax1, ax2),))


def mse(a, b, axis=None) -> Tensor:
    """Mean of squared differences, over all entries or the given axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mse: incompatible shapes {a.shape} and {b.shape}")
    diff = a.data - b.data
    axes = _norm_axis(axis, a.ndim)
    count = 1
    for k in axes:
        count *= a.shape[k]
    out = (diff * diff).mean(axis=axes)

    def vjp(g):
        g = np.expand_dims(g, axes)
        ga = 2.0 * g * diff / count
        return ga, -ga

    return _make("mse", np.asarray(out, dtype=DTYPE), (a, b), vjp)


_OPS: dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "sub": sub,
    "div": div,
    "scale": scale,
    "exp": exp,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "hardtanh": hardtanh,
    "sum": tsum,
    "mean": mean,
    "concat": lambda *ts, axis=-1: concat(ts, axis=axis),
    "slice": slice_,
    "mse": mse,
}


def forward_op(kind: str, *inputs, **kwargs) -> Tensor:
    """Dispatch an operation by name; see ``_OPS`` for the supported kinds."""
    try:
        fn = _OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}; expected one of {sorted(_OPS)}") from None
    return fn(*inputs, **kwargs)


# --- reverse pass -----------------------------------------------------------


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in reversed(node._parents):
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, params: "ParamStore | None" = None) -> None:
    """Populate ``.grad`` on every leaf reachable from ``loss``.

    When ``params`` is given, every parameter in it receives a gradient;
    parameters that do not influence ``loss`` get exact zeros.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {}
    if loss.requires_grad:
        grads[id(loss)] = np.ones_like(loss.data)
        for node in reversed(_topo_order(loss)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._vjp is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
    if params is not None:
        for _, p in params.items():
            if p.grad is None:
                p.grad = np.zeros_like(p.data)


# --- parameters and optimizer -------------------------------------------------


class ParamStore:
    """Named trainable tensors, iterated in lexicographic name order."""

    def __init__(self, arrays: dict[str, np.ndarray] | None = None):
        self._params: dict[str, Tensor] = {}
        for name, arr in (arrays or {}).items():
            self.add(name, arr)

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(value, requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return sorted(self._params)

    def __iter__(self) -> Iterator[str]:
        return iter(self.names())

    def items(self) -> list[tuple[str, Tensor]]:
        return [(n, self._params[n]) for n in self.names()]

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(arrays)
        extra = set(arrays) - set(self._params)
        if missing or extra:
            raise KeyError(f"parameter mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, arr in arrays.items():
            p = self._params[name]
            arr = np.asarray(arr, dtype=DTYPE)
            if arr.shape != p.shape:
                raise ShapeError(f"parameter {name!r}: expected shape {p.shape}, got {arr.shape}")
            p.data = arr.copy()

    def n_values(self) -> int:
        return sum(p.size for p in self._params.values())


def merge_stores(*stores: ParamStore) -> list[tuple[str, Tensor]]:
    out = []
    for k, store in enumerate(stores):
        out.extend((f"{k}:{n}", p) for n, p in store.items())
    return out


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: ParamStore, state: AdamState) -> ParamStore:
    """Apply one bias-corrected Adam update in place and clear gradients."""
    for name, p in params.items():
        if p.grad is None:
            raise ValueError(f"adam_step: parameter {name!r} has no gradient")
    state.step += 1
    k = state.step
    c1 = 1.0 - state.beta1 ** k
    c2 = 1.0 - state.beta2 ** k
    for name, p in params.items():
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        p.data = p.data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.grad = None
    return params


def grad_check(f: Callable[[], Tensor], params: ParamStore | Iterable[tuple[str, Tensor]],
               eps: float = 1e-5) -> float:
    """Max relative error of analytic gradients against central differences.

    ``f`` is re-evaluated with each parameter entry perturbed in place, so it
    must be a deterministic function of the current parameter values.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"grad_check: eps must lie in [1e-7, 1e-3], got {eps}")
    items = params.items() if isinstance(params, ParamStore) else list(params)
    for _, p in items:
        p.grad = None
    loss = f()
    if not np.isfinite(loss.data).all():
        raise NonFiniteError("grad_check", "grad_check: objective is not finite")
    backward(loss)
    analytic = {n: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for n, p in items}
    worst = 0.0
    with no_grad():
        for name, p in items:
            flat = p.data.reshape(-1)
            for k in range(flat.size):
                orig = flat[k]
                flat[k] = orig + eps
                fp = float(f().data)
                flat[k] = orig - eps
                fm = float(f().data)
                flat[k] = orig
                if not (math.isfinite(fp) and math.isfinite(fm)):
                    raise NonFiniteError("grad_check", f"grad_check: objective not finite near {name}[{k}]")
                numeric = (fp - fm) / (2.0 * eps)
                a = analytic[name].reshape(-1)[k]
                worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    for _, p in items:
        p.grad = None
    return worst
