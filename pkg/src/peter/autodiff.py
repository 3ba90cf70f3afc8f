"""A small reverse-mode autodiff engine over float64 numpy arrays.

Each operation returns a new :class:`Tensor` holding its parents and a closure
that maps the output gradient to parent gradients. :func:`backward` sorts the
graph topologically into a :class:`Tape` and walks it once in reverse.

Broadcasting is deliberately narrow: binary ops accept same-shape operands or
a scalar; trailing-vector bias addition goes through :func:`add_bias`, and a
2-D weight can right-multiply a batched operand in :func:`matmul`.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

MASK_SENTINEL = -1e9
LAYER_NORM_EPS = 1e-5

_ids = itertools.count()
_grad_enabled = True


class DimensionError(ValueError):
    pass


class DomainError(ValueError):
    pass


class GraphError(RuntimeError):
    pass


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference, validation)."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node_id", "_parents", "_backward", "_consumed", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id = next(_ids)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._consumed = False
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Iterable[Tensor], backward_fn) -> Tensor:
    parents = tuple(parents)
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _check_binary(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.data.size != 1 and b.data.size != 1:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (_reduce_to(g, a.shape), _reduce_to(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (_reduce_to(g, a.shape), _reduce_to(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "mul")
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)),
    )


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """``x[..., j] + bias[j]``; bias must match the trailing axis."""
    if bias.ndim != 1 or x.shape[-1:] != bias.shape:
        raise DimensionError(f"add_bias: bias {bias.shape} does not match trailing axis of {x.shape}")
    axes = tuple(range(x.ndim - 1))
    return _make(x.data + bias.data, (x, bias), lambda g: (g, g.sum(axis=axes)))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _make(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,))


def sigmoid(x: Tensor) -> Tensor:
    # split on sign so exp never overflows
    z = x.data
    e = np.exp(-np.abs(z))
    s = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(s, (x,), lambda g: (g * s * (1.0 - s),))


def log(x: Tensor, floor: float | None = None) -> Tensor:
    """Natural log. With ``floor`` set, inputs are clamped from below first and
    clamped entries get zero gradient; without it non-positive input raises."""
    z = x.data
    if floor is None:
        if np.any(z <= 0):
            raise DomainError(f"log of non-positive value {z[z <= 0].flat[0]}")
        live = np.ones_like(z, dtype=bool)
        zc = z
    else:
        live = z > floor
        zc = np.where(live, z, floor)
    return _make(np.log(zc), (x,), lambda g: (np.where(live, g / zc, 0.0),))


def elementwise(kind: str, *args) -> Tensor:
    ops = {"add": add, "relu": relu, "sigmoid": sigmoid, "log": log, "scale": scale}
    if kind not in ops:
        raise ValueError(f"unknown elementwise op {kind!r}")
    return ops[kind](*args)


# ---------------------------------------------------------------- reductions


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _make(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(x: Tensor) -> Tensor:
    n = max(x.data.size, 1)
    return scale(sum_all(x), 1.0 / n)


def sum_axis(x: Tensor, axis: int) -> Tensor:
    axis = axis % x.ndim
    shape = x.shape
    return _make(
        x.data.sum(axis=axis),
        (x,),
        lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),),
    )


# ---------------------------------------------------------------- shape ops


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; default swaps the last two."""
    if axes is None:
        axes = list(range(x.ndim))
        axes[-2], axes[-1] = axes[-1], axes[-2]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = list(xs)
    axis = axis % xs[0].ndim
    try:
        data = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {[x.shape for x in xs]} ({exc})") from None
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return _make(data, xs, lambda g: tuple(np.split(g, bounds, axis=axis)))


def take(x: Tensor, key) -> Tensor:
    """numpy-style indexing; backward scatters with accumulation."""
    shape = x.shape

    def bw(g):
        out = np.zeros(shape)
        np.add.at(out, key, g)
        return (out,)

    return _make(np.array(x.data[key], dtype=np.float64), (x,), bw)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise DimensionError(f"embedding table must be 2-D, got {table.shape}")
    n = table.shape[0]
    bad = ids[(ids < 0) | (ids >= n)]
    if bad.size:
        raise IndexError(f"embedding id {int(bad.flat[0])} out of range for table with {n} rows")
    return take(table, ids)


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    Leading (batch) axes must agree, or ``b`` may be a plain 2-D matrix shared
    across all of ``a``'s batch entries.
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    shared = b.ndim == 2 and a.ndim > 2
    if not shared and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch axes differ in {a.shape} and {b.shape}")
    out = a.data @ b.data

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if shared:
            k, n = b.shape
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _make(out, (a, b), bw)


def masked_softmax(scores: Tensor, mask) -> Tensor:
    """Softmax over the last axis after adding an additive mask.

    ``mask`` is a constant array broadcastable to ``scores`` whose entries are
    0 (visible) or at/below :data:`MASK_SENTINEL` (hidden). Hidden cells come
    out exactly 0.
    """
    mask = np.asarray(mask, dtype=np.float64)
    try:
        hidden = np.broadcast_to(mask <= MASK_SENTINEL / 2, scores.shape)
    except ValueError:
        raise DimensionError(f"mask {mask.shape} does not broadcast to scores {scores.shape}") from None
    if np.any(hidden.all(axis=-1)):
        raise ValueError("masked_softmax: a row is fully masked")
    z = np.where(hidden, -np.inf, scores.data)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.where(hidden, 0.0, np.exp(z))
    p = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _make(p, (scores,), bw)


def softmax(x: Tensor) -> Tensor:
    return masked_softmax(x, np.zeros((1,) * x.ndim))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    d = x.shape[-1]
    if d < 2:
        raise DimensionError("layer_norm needs at least 2 features")
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: gain {gain.shape} / bias {bias.shape} vs features {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    axes = tuple(range(x.ndim - 1))

    def bw(g):
        gh = g * gain.data
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _make(xhat * gain.data + bias.data, (x, gain, bias), bw)


# ---------------------------------------------------------------- tape + backward


class Tape:
    """Topologically ordered record of every node reachable from a root."""

    def __init__(self, root: Tensor):
        self.root = root
        self.nodes: list[Tensor] = []
        self.parents: dict[int, tuple[int, ...]] = {}
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                self.nodes.append(node)
                continue
            if node.node_id in seen:
                continue
            seen.add(node.node_id)
            self.parents[node.node_id] = tuple(p.node_id for p in node._parents)
            stack.append((node, True))
            for p in node._parents:
                if p.node_id not in seen:
                    stack.append((p, False))

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor, tape: Tape | None = None) -> Tape:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every tracked leaf."""
    if loss.data.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("loss is detached: no tracked tensor contributed to it")
    if loss._consumed:
        raise GraphError("graph already backpropagated; rebuild it with a fresh forward pass")
    tape = tape if tape is not None else Tape(loss)
    if any(n._consumed for n in tape.nodes):
        raise GraphError("graph contains nodes from an already backpropagated pass")
    grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(node.node_id, None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            grads[p.node_id] = grads[p.node_id] + pg if p.node_id in grads else pg
    for node in tape.nodes:
        if node._backward is not None:
            node._consumed = True
            node._backward = None
    return tape


# ---------------------------------------------------------------- optimisation


def global_grad_norm(params: Iterable[Tensor]) -> float:
    return float(np.sqrt(sum(float((p.grad * p.grad).sum()) for p in params)))


def clip_grad_norm(params: Iterable[Tensor], threshold: float) -> float:
    """Rescale all gradients in place so their joint L2 norm is at most
    ``threshold``. Returns the norm measured before clipping."""
    params = list(params)
    if threshold <= 0:
        raise ValueError("clip threshold must be positive")
    missing = [p.name or str(p.node_id) for p in params if p.grad is None]
    if missing:
        raise GraphError(f"missing gradients for {missing[:5]}")
    norm = global_grad_norm(params)
    if norm > threshold:
        factor = threshold / norm
        for p in params:
            p.grad = p.grad * factor
    return norm


def sgd_step_with_clip(params: Iterable[Tensor], lr: float, clip_threshold: float) -> float:
    params = list(params)
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    norm = clip_grad_norm(params, clip_threshold)
    for p in params:
        p.data -= lr * p.grad
        p.grad = None
    return norm
