"""Dense tensors with define-by-run reverse-mode differentiation.

Every array in the model lives in a :class:`Tensor`. Operations executed while
gradient recording is enabled attach a backward closure and their parent
tensors to the result, so the recorded graph *is* the tape: :func:`backward`
orders it topologically from the loss and replays it in reverse.

Broadcasting is deliberately narrow. Elementwise binary ops accept operands of
identical shape, or a right operand whose shape equals the trailing axes of the
left one (bias, affine gain, positional embedding). :func:`matmul` accepts a
2-D right operand shared across leading axes. Anything else raises
:class:`ShapeError`.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "ShapeError",
    "GradMap",
    "tensor",
    "zeros",
    "ones",
    "get_default_dtype",
    "set_default_dtype",
    "precision",
    "no_grad",
    "is_grad_enabled",
    "backward",
    "grad_check",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "matmul",
    "transpose",
    "swap_last",
    "reshape",
    "getitem",
    "concat",
    "stack",
    "repeat_leading",
    "sum",
    "mean",
    "exp",
    "log",
    "sqrt",
    "abs",
    "relu",
    "gelu",
    "softmax",
    "log_softmax",
    "layer_norm",
    "embedding",
    "dropout",
    "detach",
]

_default_dtype: type = np.float32
_grad_enabled = True
_uid_counter = itertools.count()


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


def get_default_dtype():
    return _default_dtype


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {dtype!r}; use float32 or float64")
    _default_dtype = dtype


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the dtype used for newly created tensors."""
    previous = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """A node in the autodiff graph.

    Leaves are created by the user (parameters, inputs); interior nodes are
    created by operations and remember their parents together with a closure
    mapping the output gradient to one gradient per parent.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "uid", "_parents", "_backward")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else _default_dtype)
        if arr.ndim and 0 in arr.shape:
            raise ShapeError(f"tensor dimensions must be positive, got {arr.shape}")
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self.uid = next(_uid_counter)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def T(self) -> "Tensor":
        return swap_last(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() requires a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return detach(self)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad}{label})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operator sugar ------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor / tensor is not supported; multiply by an explicit reciprocal")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)


def tensor(data, requires_grad: bool = False, name: str | None = None, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name, dtype=dtype)


def zeros(shape, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_default_dtype), requires_grad=requires_grad, name=name)


def ones(shape, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(np.ones(shape, dtype=_default_dtype), requires_grad=requires_grad, name=name)


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype), dtype=like.dtype)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.uid = next(_uid_counter)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _is_trailing(small: tuple[int, ...], big: tuple[int, ...]) -> bool:
    return len(small) <= len(big) and big[len(big) - len(small):] == small


def _reduce_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    return grad.sum(axis=tuple(range(lead))).reshape(shape)


def _binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape or _is_trailing(b.shape, a.shape):
        return
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


# -- elementwise ------------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    b = _as_tensor(b, a)
    _binary_shapes(a, b, "add")
    sa, sb = a.shape, b.shape

    def bw(g):
        return g, _reduce_to(g, sb)

    return _result(a.data + b.data, (a, b), bw)


def sub(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    _binary_shapes(a, b, "sub")
    sb = b.shape

    def bw(g):
        return g, -_reduce_to(g, sb)

    return _result(a.data - b.data, (a, b), bw)


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        return scale(a, float(b))
    b = _as_tensor(b, a)
    _binary_shapes(a, b, "mul")
    ad, bd, sb = a.data, b.data, b.shape

    def bw(g):
        return g * bd, _reduce_to(g * ad, sb)

    return _result(ad * bd, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(a.data * a.dtype.type(c), (a,), lambda g: (g * g.dtype.type(c),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _result(np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a: Tensor) -> Tensor:
    """Square root whose gradient at exactly zero is taken as zero."""
    out = np.sqrt(a.data)

    def bw(g):
        safe = np.where(out > 0, out, 1)
        return (np.where(out > 0, g * 0.5 / safe, 0).astype(g.dtype),)

    return _result(out, (a,), bw)


def abs(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    ad = a.data
    return _result(np.abs(ad), (a,), lambda g: (g * np.sign(ad),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,))


_SQRT1_2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _SQRT1_2))
    out = (x * cdf).astype(a.dtype)

    def bw(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return ((g * (cdf + x * pdf)).astype(g.dtype),)

    return _result(out, (a,), bw)


def dropout(a: Tensor, p: float, rng: np.random.Generator | None, training: bool = True) -> Tensor:
    if not training or p <= 0.0:
        return a
    if rng is None:
        raise ValueError("dropout needs an explicit rng in training mode")
    keep = (rng.random(a.shape) >= p).astype(a.dtype) / a.dtype.type(1.0 - p)
    return _result(a.data * keep, (a,), lambda g: (g * keep,))


def detach(a: Tensor) -> Tensor:
    return Tensor(a.data, requires_grad=False, dtype=a.dtype)


# -- linear algebra and shape manipulation ----------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``a`` is ``(..., p, q)``. ``b`` is either ``(q, r)``, shared across every
    leading axis of ``a``, or ``(..., q, r)`` with leading axes equal to ``a``'s.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs at least 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    if b.ndim == 2:
        q, r = bd.shape
        flat = ad.reshape(-1, q)
        out = (flat @ bd).reshape(ad.shape[:-1] + (r,))

        def bw(g):
            g2 = g.reshape(-1, r)
            return (g2 @ bd.T).reshape(ad.shape), flat.T @ g2

        return _result(out, (a, b), bw)
    if a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: leading dimensions differ, {a.shape} @ {b.shape}")

    def bw(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _result(ad @ bd, (a, b), bw)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    nd = a.data.ndim
    if axes is None:
        axes = tuple(range(nd - 1, -1, -1))
    axes = tuple(ax % nd for ax in axes)
    if sorted(axes) != list(range(nd)):
        raise ShapeError(f"transpose: {axes} is not a permutation of the axes of {a.shape}")

    def bw(g):
        return (g.transpose(np.argsort(axes)),)

    return _result(a.data.transpose(axes), (a,), bw)


def swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from exc
    src = a.shape
    return _result(out, (a,), lambda g: (g.reshape(src),))


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(a: Tensor, idx) -> Tensor:
    if isinstance(idx, Tensor):
        idx = idx.data.astype(np.int64)
    out = a.data[idx]
    if not isinstance(out, np.ndarray):
        out = np.asarray(out, dtype=a.dtype)
    elif out.base is not None:
        out = out.copy()
    src, dtype = a.shape, a.dtype
    basic = _is_basic_index(idx)

    def bw(g):
        full = np.zeros(src, dtype=dtype)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _result(out, (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    ref = tensors[0]
    axis = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(
            t.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != axis
        ):
            raise ShapeError(f"concat along axis {axis}: {ref.shape} vs {t.shape}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    for t in tensors[1:]:
        if t.shape != tensors[0].shape:
            raise ShapeError(f"stack: {tensors[0].shape} vs {t.shape}")
    axis = axis % (tensors[0].ndim + 1)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _result(np.stack([t.data for t in tensors], axis=axis), tensors, bw)


def repeat_leading(a: Tensor, n: int) -> Tensor:
    """Tile ``a`` along a new leading axis of length ``n``."""
    out = np.broadcast_to(a.data, (n,) + a.shape).copy()
    return _result(out, (a,), lambda g: (g.sum(axis=0),))


def embedding(table: Tensor, indices) -> Tensor:
    """Row lookup ``table[indices]`` with scatter-add gradient."""
    idx = np.asarray(indices.data if isinstance(indices, Tensor) else indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"embedding index out of range for table of {table.shape[0]} rows")
    return getitem(table, idx)


# -- reductions -------------------------------------------------------------

def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axes(axis, a.ndim)
    out = np.asarray(a.data.sum(axis=axes, keepdims=keepdims), dtype=a.dtype)
    src = a.shape

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, src).copy(),)

    return _result(out, (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return scale(sum(a, axis=axes, keepdims=keepdims), 1.0 / count)


# -- normalisation and attention primitives ---------------------------------

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (a,), bw)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _result(out, (a,), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean and unit (population) variance, then
    apply ``gamma * xhat + beta``."""
    dim = x.shape[-1]
    if gamma.shape != (dim,) or beta.shape != (dim,):
        raise ShapeError(f"layer_norm: affine params {gamma.shape}/{beta.shape} do not match last axis of {x.shape}")
    xd = x.data
    # sum * (1/n) rather than .mean(): same values, far less per-call overhead
    k = 1.0 / dim
    centred = xd - xd.sum(axis=-1, keepdims=True) * k
    var = (centred * centred).sum(axis=-1, keepdims=True) * k
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centred * inv
    gd = gamma.data
    out = (xhat * gd + beta.data).astype(x.dtype, copy=False)

    def bw(g):
        dxhat = g * gd
        dx = inv * (
            dxhat
            - dxhat.sum(axis=-1, keepdims=True) * k
            - xhat * ((dxhat * xhat).sum(axis=-1, keepdims=True) * k)
        )
        lead = tuple(range(g.ndim - 1))
        return dx.astype(g.dtype), (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(out, (x, gamma, beta), bw)


# -- differentiation --------------------------------------------------------

class GradMap(dict):
    """Gradients keyed by leaf ``uid``; also indexable by the leaf tensor."""

    def __getitem__(self, key):
        if isinstance(key, Tensor):
            key = key.uid
        return super().__getitem__(key)

    def __contains__(self, key):
        if isinstance(key, Tensor):
            key = key.uid
        return super().__contains__(key)

    def get(self, key, default=None):
        if isinstance(key, Tensor):
            key = key.uid
        return super().get(key, default)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if node.uid in seen:
            continue
        seen.add(node.uid)
        stack_.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and parent.uid not in seen:
                stack_.append((parent, False))
    return order


def backward(loss: Tensor, accumulate: bool = False) -> GradMap:
    """Reverse-mode sweep from a scalar ``loss``.

    Returns the gradient of ``loss`` for every ``requires_grad`` leaf reachable
    from it and stores the same array in each leaf's ``.grad`` (summing into an
    existing ``.grad`` when ``accumulate`` is set).
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads = GradMap()
    if not loss.requires_grad:
        return grads
    order = _topological_order(loss)
    pending: dict[int, np.ndarray] = {loss.uid: np.ones(loss.shape, dtype=loss.dtype)}
    for node in reversed(order):
        g = pending.pop(node.uid, None)
        if g is None:
            continue
        if node._backward is None:
            if accumulate and node.grad is not None:
                node.grad = node.grad + g
            else:
                node.grad = g
            grads[node.uid] = node.grad
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = pending.get(parent.uid)
            pending[parent.uid] = pg if prev is None else prev + pg
    return grads


def grad_check(
    f: Callable[[], Tensor],
    params: Iterable[Tensor],
    step: float = 1e-6,
    coords_per_param: int = 32,
    seed: int = 0,
    abs_floor: float = 1e-6,
    detail: bool = False,
):
    """Compare analytic gradients of ``f()`` with central differences.

    For each parameter, ``coords_per_param`` coordinates are sampled (all of
    them when the tensor is smaller). The error of a coordinate is
    ``|analytic - numeric| / max(|analytic|, |numeric|, abs_floor)``; the floor
    keeps coordinates whose true gradient is zero from dividing by rounding
    noise.

    Returns the maximum error, or ``(max_error, per_param)`` with ``detail``.
    """
    params = list(params)
    rng = np.random.default_rng(seed)
    for p in params:
        p.grad = None
    grads = backward(f())
    worst = 0.0
    per_param: dict[str, float] = {}
    with no_grad():
        for i, p in enumerate(params):
            analytic = grads.get(p.uid)
            analytic = np.zeros(p.shape) if analytic is None else analytic.reshape(p.shape)
            flat = p.data.reshape(-1)
            n = flat.size
            picks = np.arange(n) if n <= coords_per_param else rng.choice(n, coords_per_param, replace=False)
            err = 0.0
            for j in picks:
                orig = flat[j]
                flat[j] = orig + step
                up = f().item()
                flat[j] = orig - step
                down = f().item()
                flat[j] = orig
                numeric = (up - down) / (2.0 * step)
                a = float(analytic.reshape(-1)[j])
                denom = max(np_abs(a), np_abs(numeric), abs_floor)
                err = max(err, np_abs(a - numeric) / denom)
            per_param[p.name or f"param{i}"] = err
            worst = max(worst, err)
    return (worst, per_param) if detail else worst


def np_abs(x: float) -> float:
    return x if x >= 0 else -x
