"""Dense tensors with a reverse-mode tape.

Every differentiable operation produces a new :class:`Tensor` that remembers its
parents and a closure mapping the output gradient to one gradient per parent.
:meth:`Tensor.backward` walks the recorded graph once in reverse topological
order.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ShapeError

_GRAD_ENABLED = True
_CHECK_FINITE = False


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def set_check_finite(flag: bool) -> bool:
    """Turn the NaN/Inf guard on or off. Returns the previous setting."""
    global _CHECK_FINITE
    prev = _CHECK_FINITE
    _CHECK_FINITE = bool(flag)
    return prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data, dtype=dtype)
    if dtype is None and not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float64)
    return arr


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (the inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "_retain")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self.op = ""
        self._retain = False

    # -- basic properties ---------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def retain_grad(self) -> "Tensor":
        """Keep the gradient of this non-leaf tensor after backward."""
        self._retain = True
        return self

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- backward -------------------------------------------------------------
    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into every requires_grad leaf.

        ``self`` must be a scalar unless an explicit seed gradient is given.
        Leaf gradients accumulate across calls; call ``zero_grad`` in between.
        """
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward needs a scalar loss, got shape {self.shape}")
            seed = np.ones_like(self.data)
        else:
            seed = _as_array(grad, self.dtype)
            if seed.shape != self.shape:
                raise ShapeError(f"seed gradient shape {seed.shape} != {self.shape}")
        if not self.requires_grad:
            raise ValueError("loss is not connected to any tensor that requires grad")

        order = _topological_order(self)
        grads = {id(self): seed}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf or node._retain:
                node.grad = g.copy() if node.grad is None else node.grad + g
            if node.is_leaf:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other, self.dtype)))

    def __rsub__(self, other):
        return add(_lift(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _lift(other, self.dtype)
        return mul(self, power(other, -1.0))

    def __rtruediv__(self, other):
        return mul(_lift(other, self.dtype), power(self, -1.0))

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return reduce(self, "sum", axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce(self, "mean", axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def _lift(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _topological_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def make_node(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    """Wrap a forward result, recording it on the tape when any parent needs grad."""
    if _CHECK_FINITE and not np.all(np.isfinite(data)):
        if all(np.all(np.isfinite(p.data)) for p in parents):
            raise FloatingPointError(f"non-finite output from '{op}' on finite inputs")
    out = Tensor(data)
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def build_tensor(shape: Sequence[int], values: Iterable[float], requires_grad: bool = False,
                 dtype=np.float64) -> Tensor:
    """Construct a tensor of ``shape`` from a flat row-major value list."""
    shape = tuple(int(s) for s in shape)
    if any(s < 1 for s in shape):
        raise ShapeError(f"all extents must be >= 1, got {shape}")
    values = np.asarray(list(values), dtype=dtype)
    if values.size != int(np.prod(shape)):
        raise ShapeError(f"{values.size} values cannot fill shape {shape}")
    return Tensor(values.reshape(shape), requires_grad=requires_grad)


# -- elementwise arithmetic -------------------------------------------------

def add(a, b) -> Tensor:
    a = _lift(a)
    b = _lift(b, a.dtype)
    sa, sb = a.shape, b.shape

    def backward(g):
        return unbroadcast(g, sa), unbroadcast(g, sb)

    return make_node(a.data + b.data, (a, b), backward, "add")


def neg(a: Tensor) -> Tensor:
    return make_node(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a = _lift(a)
    b = _lift(b, a.dtype)
    ad, bd = a.data, b.data

    def backward(g):
        ga = unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_node(ad * bd, (a, b), backward, "mul")


def power(a: Tensor, exponent: float) -> Tensor:
    ad = a.data
    out = ad ** exponent

    def backward(g):
        return (g * exponent * ad ** (exponent - 1),)

    return make_node(out, (a,), backward, "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_node(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor, clamp: float = 0.0) -> Tensor:
    """Natural log; values below ``clamp`` are clamped and pass no gradient."""
    ad = a.data
    if clamp > 0:
        safe = np.maximum(ad, clamp)

        def backward(g):
            return (np.where(ad >= clamp, g / safe, 0.0),)

        return make_node(np.log(safe), (a,), backward, "log")
    return make_node(np.log(ad), (a,), lambda g: (g / ad,), "log")


def activation(x: Tensor, kind: str) -> Tensor:
    """Elementwise ``relu``, ``sigmoid`` or ``tanh``. relu'(0) is taken as 0."""
    xd = x.data
    if kind == "relu":
        mask = xd > 0
        return make_node(np.where(mask, xd, 0.0).astype(xd.dtype), (x,),
                         lambda g: (g * mask,), "relu")
    if kind == "sigmoid":
        out = _sigmoid(xd)
        return make_node(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")
    if kind == "tanh":
        out = np.tanh(xd)
        return make_node(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")
    raise ValueError(f"unknown activation {kind!r}")


def relu(x: Tensor) -> Tensor:
    return activation(x, "relu")


def sigmoid(x: Tensor) -> Tensor:
    return activation(x, "sigmoid")


def tanh(x: Tensor) -> Tensor:
    return activation(x, "tanh")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# -- contraction ------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product ``[..., m, k] @ [..., k, n]`` with broadcast batch dims."""
    a = _lift(a)
    b = _lift(b, a.dtype)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands need at least two dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_node(ad @ bd, (a, b), backward, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` over the last axis. 2-D weights skip the batched path."""
    if x.ndim > 2 and w.ndim == 2:
        lead = x.shape[:-1]
        y = matmul(reshape(x, (-1, x.shape[-1])), w)
        if b is not None:
            y = add(y, b)
        return reshape(y, lead + (w.shape[-1],))
    y = matmul(x, w)
    return add(y, b) if b is not None else y


# -- reductions -------------------------------------------------------------

def _norm_axes(axes, ndim) -> tuple:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = tuple(a % ndim for a in axes)
    if len(set(out)) != len(out):
        raise ValueError(f"duplicate reduction axis in {axes}")
    return out


def reduce(x: Tensor, kind: str = "sum", axes=None, keepdims: bool = False) -> Tensor:
    """Sum or mean over ``axes`` (all axes when None)."""
    axes = _norm_axes(axes, x.ndim)
    shape = x.shape
    count = int(np.prod([shape[a] for a in axes])) if axes else 1
    if kind == "sum":
        out = x.data.sum(axis=axes, keepdims=keepdims)
        scale = 1.0
    elif kind == "mean":
        out = x.data.mean(axis=axes, keepdims=keepdims)
        scale = 1.0 / count
    else:
        raise ValueError(f"unknown reduction {kind!r}")

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g * scale, shape).astype(x.dtype, copy=True),)

    return make_node(np.asarray(out, dtype=x.dtype), (x,), backward, kind)


# -- data movement ----------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {src} to {shape}") from exc
    return make_node(out, (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(a % x.ndim for a in axes)
    inverse = tuple(np.argsort(axes))
    return make_node(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),), "transpose")


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    axes = list(range(x.ndim))
    axes[a], axes[b] = axes[b], axes[a]
    return transpose(x, axes)


def getitem(x: Tensor, index) -> Tensor:
    shape, dtype = x.shape, x.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        if _is_fancy(index):
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return make_node(x.data[index], (x,), backward, "slice")


def _is_fancy(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    return getitem(x, tuple(index))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    axis = axis % tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
                t.shape[i] != tensors[0].shape[i] for i in range(t.ndim) if i != axis):
            raise ShapeError(f"concat shapes disagree off axis {axis}: "
                             f"{[u.shape for u in tensors]}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(np.take(g, range(lo, hi), axis=axis)
                     for lo, hi in zip(bounds[:-1], bounds[1:]))

    return make_node(np.concatenate([t.data for t in tensors], axis=axis), tensors,
                     backward, "concat")


def split(x: Tensor, sizes: Sequence[int], axis: int = 0) -> list:
    if sum(sizes) != x.shape[axis]:
        raise ShapeError(f"split sizes {list(sizes)} do not cover extent {x.shape[axis]}")
    out, start = [], 0
    for n in sizes:
        out.append(slice_axis(x, axis, start, start + n))
        start += n
    return out


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return concat([reshape(t, t.shape[:axis % (t.ndim + 1)] + (1,) + t.shape[axis % (t.ndim + 1):])
                   for t in tensors], axis=axis)


def broadcast_to(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    src = x.shape
    return make_node(np.broadcast_to(x.data, shape).copy(), (x,),
                     lambda g: (unbroadcast(g, src),), "broadcast")


def shape_ops(x, op: str, *args, **kwargs):
    """Dispatch by name to reshape / transpose / concat / split / slice."""
    table = {"reshape": reshape, "transpose": transpose, "split": split,
             "slice": slice_axis}
    if op == "concat":
        return concat(x, *args, **kwargs)
    try:
        return table[op](x, *args, **kwargs)
    except KeyError:
        raise ValueError(f"unknown shape op {op!r}") from None
