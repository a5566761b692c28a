"""A small reverse-mode differentiation engine over dense float64 arrays.

Every primitive builds a :class:`Tensor` holding its forward value and a
closure that maps the output adjoint to the adjoints of its parents.
:func:`backward` walks the graph once in reverse topological order and
accumulates into the ``grad`` buffers of leaf tensors, which callers reset
with :func:`zero_grads` before each pass.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "tensor",
    "constant",
    "parameter",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "exp",
    "expm1",
    "log",
    "sqrt",
    "relu",
    "scale",
    "sum_reduce",
    "mean_reduce",
    "max_reduce",
    "concat",
    "reshape",
    "transpose",
    "take",
    "getitem",
    "scatter",
    "mix",
    "softmax_cross_entropy",
    "backward",
    "zero_grads",
    "grad_check",
]


class Tensor:
    """A node in the differentiation graph."""

    __slots__ = ("value", "_grad", "parents", "_adjoint", "op", "requires_grad")

    def __init__(self, value, requires_grad=False, parents=(), adjoint=None, op="leaf"):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents: tuple[Tensor, ...] = tuple(parents)
        self._adjoint = adjoint
        self.op = op
        self.requires_grad = requires_grad
        self._grad = np.zeros_like(self.value) if requires_grad and not parents else None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            return np.zeros_like(self.value)
        return self._grad

    @grad.setter
    def grad(self, g):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != self.value.shape:
            raise ValueError(f"grad shape {g.shape} != value shape {self.value.shape}")
        self._grad = g

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    def item(self) -> float:
        return float(self.value)

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape})"

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
        return getitem(self, index)


def tensor(value, requires_grad=False) -> Tensor:
    return Tensor(np.array(value, dtype=np.float64), requires_grad=requires_grad)


def constant(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def parameter(value) -> Tensor:
    return Tensor(np.array(value, dtype=np.float64), requires_grad=True)


def _node(value, parents, adjoint, op) -> Tensor:
    rg = any(p.requires_grad for p in parents)
    return Tensor(value, requires_grad=rg, parents=parents if rg else (), adjoint=adjoint if rg else None, op=op)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _broadcast_shape(a, b, "add")
    return _node(a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _broadcast_shape(a, b, "sub")
    return _node(a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _broadcast_shape(a, b, "mul")
    return _node(a.value * b.value, (a, b),
                 lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)),
                 "mul")


def div(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _broadcast_shape(a, b, "div")
    out = a.value / b.value
    return _node(out, (a, b),
                 lambda g: (_unbroadcast(g / b.value, a.shape), _unbroadcast(-g * out / b.value, b.shape)),
                 "div")


def neg(a) -> Tensor:
    a = constant(a)
    return _node(-a.value, (a,), lambda g: (-g,), "neg")


def scale(a, c: float) -> Tensor:
    """Multiply by a fixed real constant."""
    a = constant(a)
    c = float(c)
    return _node(a.value * c, (a,), lambda g: (g * c,), "scale")


def matmul(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    if a.value.ndim == 0 or b.value.ndim == 0 or a.shape[-1] != b.shape[0 if b.value.ndim == 1 else -2]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    av, bv = a.value, b.value

    def adjoint(g):
        if bv.ndim == 1:
            ga = np.multiply.outer(g, bv)
            gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1)
        elif av.ndim == 1:
            ga = bv @ g
            gb = np.outer(av, g)
        else:
            ga = g @ bv.T
            gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _node(av @ bv, (a, b), adjoint, "matmul")


def transpose(a) -> Tensor:
    a = constant(a)
    return _node(a.value.T, (a,), lambda g: (g.T,), "transpose")


def exp(a) -> Tensor:
    a = constant(a)
    out = np.exp(a.value)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def expm1(a) -> Tensor:
    a = constant(a)
    out = np.expm1(a.value)
    return _node(out, (a,), lambda g: (g * (out + 1.0),), "expm1")


def log(a) -> Tensor:
    a = constant(a)
    if np.any(a.value <= 0):
        raise ValueError("log: input must be strictly positive")
    return _node(np.log(a.value), (a,), lambda g: (g / a.value,), "log")


def sqrt(a) -> Tensor:
    a = constant(a)
    if np.any(a.value < 0):
        raise ValueError("sqrt: input must be nonnegative")
    out = np.sqrt(a.value)
    return _node(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def relu(a) -> Tensor:
    a = constant(a)
    mask = a.value > 0
    return _node(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,), "relu")


def sum_reduce(a, axis=None) -> Tensor:
    a = constant(a)
    out = a.value.sum(axis=axis)

    def adjoint(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(out, (a,), adjoint, "sum")


def mean_reduce(a, axis=None) -> Tensor:
    a = constant(a)
    n = a.value.size if axis is None else a.shape[axis]
    out = a.value.mean(axis=axis)

    def adjoint(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return _node(out, (a,), adjoint, "mean")


def max_reduce(a, axis=-1) -> Tensor:
    """Max along one axis; the adjoint flows to the first maximiser."""
    a = constant(a)
    idx = np.argmax(a.value, axis=axis)
    out = np.take_along_axis(a.value, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def adjoint(g):
        ga = np.zeros_like(a.value)
        np.put_along_axis(ga, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (ga,)

    return _node(out, (a,), adjoint, "max")


def concat(parts: Sequence, axis=-1) -> Tensor:
    parts = [constant(p) for p in parts]
    out = np.concatenate([p.value for p in parts], axis=axis)
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]
    return _node(out, tuple(parts), lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def reshape(a, shape) -> Tensor:
    a = constant(a)
    return _node(a.value.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def getitem(a, index) -> Tensor:
    a = constant(a)

    def adjoint(g):
        ga = np.zeros_like(a.value)
        np.add.at(ga, index, g)
        return (ga,)

    return _node(a.value[index], (a,), adjoint, "getitem")


def take(a, idx: np.ndarray) -> Tensor:
    """Gather along the last axis: ``out[..., *] = a[..., idx[*]]``."""
    a = constant(a)
    idx = np.asarray(idx)
    flat = idx.reshape(-1)

    def adjoint(g):
        ga = np.zeros_like(a.value)
        np.add.at(ga, (..., flat), g.reshape(g.shape[: a.value.ndim - 1] + (-1,)))
        return (ga,)

    out = a.value[..., flat].reshape(a.shape[:-1] + idx.shape)
    return _node(out, (a,), adjoint, "take")


def scatter(values, rows: np.ndarray, cols: np.ndarray, shape: tuple[int, int]) -> Tensor:
    """Dense matrix with ``values[k]`` added at ``(rows[k], cols[k])``."""
    values = constant(values)
    flat = np.ravel_multi_index((np.ravel(rows), np.ravel(cols)), shape)
    out = np.bincount(flat, weights=values.value.reshape(-1), minlength=shape[0] * shape[1])
    return _node(out.reshape(shape), (values,),
                 lambda g: (g.reshape(-1)[flat].reshape(values.shape),), "scatter")


def mix(weights, parts: Sequence) -> Tensor:
    """Weighted sum ``sum_k weights[k] * parts[k]`` of equally shaped tensors."""
    weights = constant(weights)
    parts = [constant(p) for p in parts]
    if weights.shape != (len(parts),):
        raise ValueError(f"mix: {weights.shape} weights for {len(parts)} parts")
    w = weights.value
    out = w[0] * parts[0].value
    for k in range(1, len(parts)):
        if parts[k].shape != out.shape:
            raise ValueError(f"mix: part shapes differ {parts[k].shape} vs {out.shape}")
        out = out + w[k] * parts[k].value

    def adjoint(g):
        gw = np.array([np.vdot(g, p.value) for p in parts])
        return (gw, *[w[k] * g for k in range(len(parts))])

    return _node(out, (weights, *parts), adjoint, "mix")


def softmax_cross_entropy(logits, onehot) -> Tensor:
    """Mean cross-entropy between ``softmax(logits)`` and one-hot rows."""
    logits, onehot = constant(logits), constant(onehot)
    if logits.shape != onehot.shape:
        raise ValueError(f"cross entropy: logits {logits.shape} vs labels {onehot.shape}")
    z = logits.value
    batched = z.ndim == 2
    z2 = z if batched else z[None, :]
    y2 = onehot.value if batched else onehot.value[None, :]
    zmax = z2.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z2 - zmax).sum(axis=1))
    n = z2.shape[0]
    loss = float(np.sum(y2.sum(axis=1) * lse - (y2 * z2).sum(axis=1)) / n)

    def adjoint(g):
        p = np.exp(z2 - lse[:, None])
        gz = g * (p * y2.sum(axis=1, keepdims=True) - y2) / n
        gy = g * (lse[:, None] - z2) / n
        return (gz if batched else gz[0], gy if batched else gy[0])

    return _node(np.array(loss), (logits, onehot), adjoint, "softmax_ce")


def _topological(root: Tensor) -> list[Tensor]:
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
        for p in reversed(node.parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> None:
    """Accumulate ``d root / d leaf`` into every reachable leaf's ``grad``.

    Raises:
        ValueError: if ``root`` is not a scalar.
    """
    if root.value.size != 1 or root.value.ndim > 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    adj: dict[int, np.ndarray] = {id(root): np.ones_like(root.value)}
    for node in reversed(_topological(root)):
        g = adj.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node._grad = node.grad + g
            continue
        for parent, pg in zip(node.parents, node._adjoint(g)):
            if not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=np.float64)
            if pg.shape != parent.shape:
                pg = pg.reshape(parent.shape)
            key = id(parent)
            adj[key] = adj[key] + pg if key in adj else pg


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p._grad = np.zeros_like(p.value)


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    n_coords: int = 64,
    seed: int = 0,
    atol: float = 1e-6,
) -> float:
    """Largest relative gap between backward gradients and central differences.

    ``f`` rebuilds the graph from the current values of ``params``. Up to
    ``n_coords`` coordinates per tensor are probed (all of them if fewer);
    the relative error of a coordinate is ``|a - n| / max(|a|, |n|, atol)``.
    """
    if not h > 0:
        raise ValueError("step must be positive")
    rng = np.random.default_rng(seed)
    zero_grads(params)
    backward(f())
    analytic = [p.grad.copy() for p in params]
    worst = 0.0
    for p, a in zip(params, analytic):
        size = p.value.size
        coords = np.arange(size) if size <= n_coords else rng.choice(size, n_coords, replace=False)
        flat = p.value.reshape(-1)
        for k in coords:
            orig = flat[k]
            flat[k] = orig + h
            fp = f().item()
            flat[k] = orig - h
            fm = f().item()
            flat[k] = orig
            num = (fp - fm) / (2 * h)
            ak = a.reshape(-1)[k]
            err = abs(ak - num) / max(abs(ak), abs(num), atol)
            worst = max(worst, err)
    return worst
