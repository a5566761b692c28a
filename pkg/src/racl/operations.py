"""Candidate operations on feature vectors and their Lipschitz constants.

The eight kinds mirror the usual differentiable-NAS candidate list. The four
weight-bearing kinds are dense maps ``relu(x) @ W.T`` where ``W`` is a
pointwise matrix times one or two banded circulant ("depthwise") factors;
their Lipschitz constant is the spectral norm of ``W``. The parameter-free
kinds have fixed constants: average pooling ``S**-0.5`` for stride ``S``,
max pooling 1, identity 1, zero 0.
"""

from __future__ import annotations

import functools
import math
from enum import Enum

import numpy as np

from . import diffgraph as dg

__all__ = [
    "OperationKind",
    "OPS",
    "power_iteration",
    "power_iteration_batch",
    "spectral_norm_node",
    "op_lipschitz",
    "init_op_params",
    "effective_matrix",
    "effective_matrix_value",
    "apply_op",
]


class OperationKind(Enum):
    SEP_LIN_A = "sep_lin_a"
    SEP_LIN_B = "sep_lin_b"
    DIL_LIN_A = "dil_lin_a"
    DIL_LIN_B = "dil_lin_b"
    AVG_POOL = "avg_pool"
    MAX_POOL = "max_pool"
    SKIP = "skip"
    ZERO = "zero"

    @property
    def weighted(self) -> bool:
        return self in _DEPTHWISE

    @property
    def depthwise(self) -> tuple[int, int, int]:
        """(taps, dilation, stacked factors) of a weight-bearing kind."""
        return _DEPTHWISE[self]

    def constant_lipschitz(self, stride: int = 1) -> float:
        if self is OperationKind.AVG_POOL:
            return stride ** -0.5
        if self in (OperationKind.MAX_POOL, OperationKind.SKIP):
            return 1.0
        if self is OperationKind.ZERO:
            return 0.0
        raise ValueError(f"{self.value} has a weight-dependent Lipschitz constant")


_DEPTHWISE = {
    OperationKind.SEP_LIN_A: (3, 1, 2),
    OperationKind.SEP_LIN_B: (5, 1, 2),
    OperationKind.DIL_LIN_A: (3, 2, 1),
    OperationKind.DIL_LIN_B: (5, 2, 1),
}

OPS: tuple[OperationKind, ...] = tuple(OperationKind)


def _start_vector(n: int) -> np.ndarray:
    v = np.random.default_rng(n).standard_normal(n)
    return v / np.linalg.norm(v)


def power_iteration(W: np.ndarray, max_iters: int = 5000, tol: float = 1e-14) -> float:
    """Largest singular value of ``W`` by power iteration on ``W.T @ W``.

    Stops once the estimate's relative change drops to ``tol``. An all-zero
    matrix returns 0.
    """
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    W = np.asarray(W, dtype=np.float64)
    if not np.any(W):
        return 0.0
    v = _start_vector(W.shape[1])
    est = np.linalg.norm(W @ v)
    for _ in range(max_iters):
        w = W.T @ (W @ v)
        nw = np.linalg.norm(w)
        if nw == 0.0:
            # start vector in the null space; restart from a basis direction
            v = np.eye(W.shape[1])[np.argmax(np.abs(W).sum(axis=0))]
            continue
        v = w / nw
        new = np.linalg.norm(W @ v)
        if abs(new - est) <= tol * new:
            est = new
            break
        est = new
    return float(est)


def power_iteration_batch(Ws: np.ndarray, max_iters: int = 5000, tol: float = 1e-14):
    """Vectorised :func:`power_iteration` over a stack ``(K, m, n)``.

    Returns ``(sigmas, vs)`` where ``vs`` are the converged right vectors.
    """
    Ws = np.asarray(Ws, dtype=np.float64)
    K, _, n = Ws.shape
    WtW = np.matmul(np.swapaxes(Ws, 1, 2), Ws)
    v = np.broadcast_to(_start_vector(n), (K, n)).copy()
    # ||W v||^2 = v' W'W v
    est = np.sqrt(np.einsum("kn,kn->k", v, np.matmul(WtW, v[:, :, None])[:, :, 0]))
    idx = np.arange(K)
    for _ in range(max_iters):
        if idx.size == 0:
            break
        w = np.matmul(WtW[idx], v[idx][:, :, None])[:, :, 0]
        nw = np.sqrt(np.einsum("kn,kn->k", w, w))
        nz = nw > 0
        vi = np.where(nz[:, None], w / np.where(nz, nw, 1.0)[:, None], v[idx])
        v[idx] = vi
        new = np.sqrt(np.maximum(np.einsum("kn,kn->k", vi, np.matmul(WtW[idx], vi[:, :, None])[:, :, 0]), 0.0))
        done = (np.abs(new - est[idx]) <= tol * new) | ~nz
        est[idx] = new
        idx = idx[~done]
    # report ||W v|| directly at the final vectors
    est = np.linalg.norm(np.matmul(Ws, v[:, :, None])[:, :, 0], axis=1)
    est[~np.any(Ws.reshape(K, -1), axis=1)] = 0.0
    return est, v


def spectral_norm_node(W: dg.Tensor, max_iters: int = 5000, tol: float = 1e-14) -> dg.Tensor:
    """Spectral norm as a graph node: ``||W v||`` with ``v`` held fixed.

    The gradient is the standard ``u v^T`` direction with ``u = W v / ||W v||``.
    """
    sig, v = power_iteration_batch(W.value[None], max_iters, tol)
    Wv = dg.matmul(W, dg.constant(v[0]))
    return dg.sqrt(dg.sum_reduce(dg.mul(Wv, Wv)))


def op_lipschitz(kind: OperationKind, W: np.ndarray | None = None, stride: int = 1) -> float:
    if kind.weighted:
        if W is None:
            raise ValueError(f"{kind.value} needs its weight matrix")
        return power_iteration(W)
    return kind.constant_lipschitz(stride)


@functools.lru_cache(maxsize=None)
def _band(n: int, taps: int, dilation: int) -> tuple[np.ndarray, np.ndarray]:
    rows = np.repeat(np.arange(n), taps)
    offsets = dilation * (np.arange(taps) - taps // 2)
    cols = (rows + np.tile(offsets, n)) % n
    return rows, cols


def init_op_params(kind: OperationKind, n_in: int, n_out: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Initial parameters for a weight-bearing kind (empty for the others)."""
    if not kind.weighted:
        return {}
    taps, _, stacks = kind.depthwise
    params = {"P": rng.standard_normal((n_out, n_in)) / math.sqrt(n_in)}
    for s in range(stacks):
        params[f"D{s}"] = rng.standard_normal((n_in, taps)) / math.sqrt(taps)
    return params


def effective_matrix(kind: OperationKind, params: dict[str, dg.Tensor]) -> dg.Tensor:
    """``W = P @ D_0 [@ D_1]`` as a graph node."""
    taps, dilation, stacks = kind.depthwise
    P = params["P"]
    n = P.shape[1]
    rows, cols = _band(n, taps, dilation)
    W = P
    for s in range(stacks):
        D = dg.scatter(params[f"D{s}"], rows, cols, (n, n))
        W = dg.matmul(W, D)
    return W


def effective_matrix_value(kind: OperationKind, params: dict[str, np.ndarray]) -> np.ndarray:
    """Plain-array twin of :func:`effective_matrix` (no graph)."""
    taps, dilation, stacks = kind.depthwise
    W = params["P"]
    n = W.shape[1]
    rows, cols = _band(n, taps, dilation)
    for s in range(stacks):
        D = np.zeros((n, n))
        np.add.at(D, (rows, cols), params[f"D{s}"].reshape(-1))
        W = W @ D
    return W


def _pool_index(n: int, stride: int) -> np.ndarray:
    if stride == 1:
        i = np.arange(n)
        return np.stack([(i - 1) % n, i, (i + 1) % n], axis=1)
    return np.arange(n).reshape(n // 2, 2)


def _avg_matrix(n: int, stride: int) -> np.ndarray:
    idx = _pool_index(n, stride)
    A = np.zeros((idx.shape[0], n))
    np.add.at(A, (np.repeat(np.arange(idx.shape[0]), idx.shape[1]), idx.reshape(-1)), 1.0 / idx.shape[1])
    return A


_CACHE: dict = {}


def _cached(key, build):
    if key not in _CACHE:
        _CACHE[key] = build()
    return _CACHE[key]


def apply_op(kind: OperationKind, x: dg.Tensor, stride: int, W: dg.Tensor | None = None,
             relu_x: dg.Tensor | None = None) -> dg.Tensor | None:
    """Apply ``kind`` to a batch ``x`` of shape ``(B, n)``.

    Stride 2 halves the width. Returns ``None`` for ZERO, whose output is
    identically zero. ``relu_x`` may carry a precomputed ``relu(x)``.
    """
    n = x.shape[-1]
    if kind.weighted:
        r = relu_x if relu_x is not None else dg.relu(x)
        return dg.matmul(r, dg.transpose(W))
    if kind is OperationKind.ZERO:
        return None
    if kind is OperationKind.SKIP:
        return x if stride == 1 else dg.take(x, np.arange(0, n, 2))
    if kind is OperationKind.AVG_POOL:
        A = _cached(("avg", n, stride), lambda: _avg_matrix(n, stride))
        return dg.matmul(x, dg.constant(A.T))
    # MAX_POOL: an overlapping window of 3 can touch a coordinate three
    # times, so it is scaled by 3**-0.5 to keep the l2 Lipschitz constant at 1
    idx = _cached(("max", n, stride), lambda: _pool_index(n, stride))
    out = dg.max_reduce(dg.take(x, idx), axis=-1)
    return dg.scale(out, 3 ** -0.5) if stride == 1 else out
