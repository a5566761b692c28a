"""Continuous search space: cells, sampled architecture weights, bounds.

A network is ``n_cells`` cells in series followed by a linear classifier.
Each cell has two input nodes and ``n_nodes - 2`` intermediate nodes; node
``j`` mixes every earlier node ``i`` through an edge that runs all eight
candidate operations:

    I_j = sum_i beta_ij * sum_o alpha_ijo * o(I_i)

with raw (unnormalised) positive weights drawn from log-normals. The cell
output is the concatenation of its intermediate nodes; the next cell reads
the block mean of that concatenation as node 0 and the last block as node 1,
both 1-Lipschitz maps of the cell output blocks.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import diffgraph as dg
from .lognormal import (
    ZERO_BOUND,
    LogNormalParams,
    fw_sum,
    is_zero_bound,
    ln_mean,
    ln_product,
    ln_scale,
    normal_quantile,
)
from .operations import (
    OPS,
    OperationKind,
    apply_op,
    effective_matrix,
    effective_matrix_value,
    init_op_params,
    power_iteration,
    power_iteration_batch,
)

__all__ = [
    "SupernetSpec",
    "ArchDistribution",
    "ArchSample",
    "Genotype",
    "Supernet",
    "sample_arch",
    "degenerate_sample",
    "edge_bound_dist",
    "node_bound_dist",
    "network_bound_dist",
    "network_bound_graph",
    "sampled_bound",
    "node_sums",
    "discretize",
]

N_OPS = len(OPS)
ZERO_INDEX = OPS.index(OperationKind.ZERO)
CELL_TYPES = ("normal", "reduce")
# midpoint of the [0, 1] input box; a translation leaves every Lipschitz bound unchanged
INPUT_CENTER = 0.5


@dataclass(frozen=True)
class SupernetSpec:
    """Shape of the search space.

    ``reduction_cells`` lists the (0-based) cell positions whose input edges
    have stride 2 and halve the feature width.
    """

    n_cells: int = 4
    n_nodes: int = 6
    width: int = 16
    input_dim: int = 16
    n_classes: int = 8
    reduction_cells: tuple[int, ...] = (2,)

    def __post_init__(self):
        object.__setattr__(self, "reduction_cells", tuple(self.reduction_cells))
        if self.n_nodes < 3:
            raise ValueError("a cell needs two inputs and at least one intermediate node")
        w = self.width
        for k in range(self.n_cells):
            if k in self.reduction_cells:
                if w % 2:
                    raise ValueError(f"cannot halve odd width {w} at cell {k}")
                w //= 2

    @property
    def n_intermediate(self) -> int:
        return self.n_nodes - 2

    @property
    def edges(self) -> list[tuple[int, int]]:
        return [(i, j) for j in range(2, self.n_nodes) for i in range(j)]

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def cell_type(self, k: int) -> str:
        return "reduce" if k in self.reduction_cells else "normal"

    def cell_widths(self) -> list[tuple[int, int]]:
        """(input width, node width) per cell."""
        out, w = [], self.width
        for k in range(self.n_cells):
            w_out = w // 2 if k in self.reduction_cells else w
            out.append((w, w_out))
            w = w_out
        return out

    def edge_stride(self, k: int, i: int) -> int:
        return 2 if (k in self.reduction_cells and i < 2) else 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["reduction_cells"] = list(self.reduction_cells)
        return d

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class ArchDistribution:
    """Trainable log-normal parameters, one table per cell type.

    ``mu_alpha[t]`` and ``log_sigma_alpha[t]`` have shape ``(n_edges, 8)``;
    ``mu_beta[t]`` and ``log_sigma_beta[t]`` have shape ``(n_edges,)``.
    Entries are leaf tensors so the optimiser can update them in place.
    """

    mu_alpha: dict[str, dg.Tensor]
    log_sigma_alpha: dict[str, dg.Tensor]
    mu_beta: dict[str, dg.Tensor]
    log_sigma_beta: dict[str, dg.Tensor]

    @classmethod
    def initial(cls, spec: SupernetSpec, sigma: float = 0.15, mu_alpha: float | None = None,
                mu_beta: float | None = None) -> "ArchDistribution":
        """Log-space means default to ``-ln 3`` for alpha and ``-ln(j)`` for the
        beta of each edge into node ``j``; with raw weights this keeps the
        activation scale roughly constant from cell to cell."""
        E = spec.n_edges
        ma = -math.log(3.0) if mu_alpha is None else mu_alpha
        if mu_beta is None:
            mb = np.array([-math.log(j) for (_, j) in spec.edges])
        else:
            mb = np.full(E, float(mu_beta))
        ls = math.log(sigma)
        return cls(
            mu_alpha={t: dg.parameter(np.full((E, N_OPS), ma)) for t in CELL_TYPES},
            log_sigma_alpha={t: dg.parameter(np.full((E, N_OPS), ls)) for t in CELL_TYPES},
            mu_beta={t: dg.parameter(mb.copy()) for t in CELL_TYPES},
            log_sigma_beta={t: dg.parameter(np.full(E, ls)) for t in CELL_TYPES},
        )

    def parameters(self) -> list[dg.Tensor]:
        out = []
        for t in CELL_TYPES:
            out += [self.mu_alpha[t], self.log_sigma_alpha[t], self.mu_beta[t], self.log_sigma_beta[t]]
        return out

    def named(self) -> dict[str, dg.Tensor]:
        out = {}
        for t in CELL_TYPES:
            out[f"{t}.mu_alpha"] = self.mu_alpha[t]
            out[f"{t}.log_sigma_alpha"] = self.log_sigma_alpha[t]
            out[f"{t}.mu_beta"] = self.mu_beta[t]
            out[f"{t}.log_sigma_beta"] = self.log_sigma_beta[t]
        return out

    def mu_parameters(self) -> list[dg.Tensor]:
        return [p for n, p in self.named().items() if ".mu_" in n]

    def sigma_parameters(self) -> list[dg.Tensor]:
        return [p for n, p in self.named().items() if ".log_sigma_" in n]

    def edge_alpha(self, t: str, e: int) -> list[LogNormalParams]:
        mu = self.mu_alpha[t].value[e]
        var = np.exp(2.0 * self.log_sigma_alpha[t].value[e])
        return [LogNormalParams(float(m), float(v)) for m, v in zip(mu, var)]

    def edge_beta(self, t: str, e: int) -> LogNormalParams:
        return LogNormalParams(float(self.mu_beta[t].value[e]),
                               float(np.exp(2.0 * self.log_sigma_beta[t].value[e])))

    def copy(self) -> "ArchDistribution":
        return ArchDistribution.from_arrays({n: p.value for n, p in self.named().items()})

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "ArchDistribution":
        get = lambda t, k: dg.parameter(np.array(arrays[f"{t}.{k}"], dtype=np.float64))
        return cls(
            mu_alpha={t: get(t, "mu_alpha") for t in CELL_TYPES},
            log_sigma_alpha={t: get(t, "log_sigma_alpha") for t in CELL_TYPES},
            mu_beta={t: get(t, "mu_beta") for t in CELL_TYPES},
            log_sigma_beta={t: get(t, "log_sigma_beta") for t in CELL_TYPES},
        )


@dataclass
class ArchSample:
    """Concrete positive weights for every cell instance.

    ``alpha`` has shape ``(n_cells, n_edges, 8)``, ``beta`` ``(n_cells, n_edges)``.
    ``eps_alpha``/``eps_beta`` keep the standard-normal draws so the sample
    can be rebuilt as a differentiable function of the distribution.
    """

    alpha: np.ndarray
    beta: np.ndarray
    eps_alpha: np.ndarray | None = None
    eps_beta: np.ndarray | None = None


def sample_arch(spec: SupernetSpec, dist: ArchDistribution, rng: np.random.Generator | int) -> ArchSample:
    """Reparameterised draw ``alpha = exp(mu + sigma * eps)``, one per cell instance."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    K, E = spec.n_cells, spec.n_edges
    eps_a = rng.standard_normal((K, E, N_OPS))
    eps_b = rng.standard_normal((K, E))
    alpha = np.empty_like(eps_a)
    beta = np.empty_like(eps_b)
    for k in range(K):
        t = spec.cell_type(k)
        alpha[k] = np.exp(dist.mu_alpha[t].value + np.exp(dist.log_sigma_alpha[t].value) * eps_a[k])
        beta[k] = np.exp(dist.mu_beta[t].value + np.exp(dist.log_sigma_beta[t].value) * eps_b[k])
    return ArchSample(alpha, beta, eps_a, eps_b)


@dataclass(frozen=True)
class Genotype:
    """Two (predecessor, operation) choices per intermediate node and cell type."""

    normal: tuple[tuple[tuple[int, str], ...], ...]
    reduce: tuple[tuple[tuple[int, str], ...], ...]
    meta: dict = field(default_factory=dict, compare=False, hash=False)

    def __post_init__(self):
        for name in CELL_TYPES:
            table = getattr(self, name)
            for node, pairs in enumerate(table, start=2):
                if len(pairs) != 2:
                    raise ValueError(f"{name} node {node}: expected 2 inputs, got {len(pairs)}")
                preds = [p for p, _ in pairs]
                if len(set(preds)) != 2 or not all(0 <= p < node for p in preds):
                    raise ValueError(f"{name} node {node}: bad predecessors {preds}")
                for _, op in pairs:
                    kind = OperationKind(op)
                    if kind is OperationKind.ZERO:
                        raise ValueError(f"{name} node {node}: zero op in genotype")

    def table(self, cell_type: str):
        return getattr(self, cell_type)


def degenerate_sample(spec: SupernetSpec, genotype: Genotype) -> ArchSample:
    """The sample with weight 1 on the genotype's choices and 0 elsewhere."""
    K, E = spec.n_cells, spec.n_edges
    alpha = np.zeros((K, E, N_OPS))
    beta = np.zeros((K, E))
    index = {e: n for n, e in enumerate(spec.edges)}
    for k in range(K):
        for j, pairs in enumerate(genotype.table(spec.cell_type(k)), start=2):
            for i, op in pairs:
                e = index[(i, j)]
                alpha[k, e, OPS.index(OperationKind(op))] = 1.0
                beta[k, e] = 1.0
    return ArchSample(alpha, beta)


class Supernet:
    """Weights and forward pass of the supernet (or of a discrete subnet).

    ``weights`` maps names such as ``cell0.e3.sep_lin_a.P`` to leaf tensors.
    A discrete network is the same object restricted to the genotype's
    operations via ``genotype``; its forward uses unit weights.
    """

    def __init__(self, spec: SupernetSpec, seed: int = 0, genotype: Genotype | None = None,
                 weights: dict[str, np.ndarray] | None = None):
        self.spec = spec
        self.genotype = genotype
        rng = np.random.default_rng(seed)
        self.weights: dict[str, dg.Tensor] = {}
        for k, (w_in, w_node) in enumerate(spec.cell_widths()):
            for e, (i, j) in enumerate(spec.edges):
                n_in = w_in if i < 2 else w_node
                for kind in OPS:
                    if not kind.weighted:
                        continue
                    # every candidate draws, so subnets share their supernet init
                    params = init_op_params(kind, n_in, w_node, rng)
                    if genotype is not None and not self._chosen(k, i, j, kind):
                        continue
                    for pname, value in params.items():
                        self.weights[f"cell{k}.e{e}.{kind.value}.{pname}"] = dg.parameter(value)
        self.stem = None
        if spec.input_dim != spec.width:
            # fixed projection with orthonormal rows: Lipschitz constant 1
            rs = np.random.default_rng(spec.input_dim)
            if spec.input_dim >= spec.width:
                q, _ = np.linalg.qr(rs.standard_normal((spec.input_dim, spec.width)))
                self.stem = q.T.copy()
            else:
                q, _ = np.linalg.qr(rs.standard_normal((spec.width, spec.input_dim)))
                self.stem = q
        w_last = spec.cell_widths()[-1][1]
        self.weights["classifier.W"] = dg.parameter(rng.standard_normal((spec.n_classes, w_last)) / math.sqrt(w_last))
        self.weights["classifier.b"] = dg.parameter(np.zeros(spec.n_classes))
        self._build_index()
        if weights is not None:
            self.load_weights(weights)

    def _chosen(self, k: int, i: int, j: int, kind: OperationKind) -> bool:
        pairs = self.genotype.table(self.spec.cell_type(k))[j - 2]
        return (i, kind.value) in [(p, op) for p, op in pairs]

    def parameters(self) -> list[dg.Tensor]:
        return list(self.weights.values())

    def state(self) -> dict[str, np.ndarray]:
        return {n: p.value.copy() for n, p in self.weights.items()}

    def load_weights(self, arrays: dict[str, np.ndarray]) -> None:
        missing = sorted(set(self.weights) - set(arrays))
        if missing:
            raise KeyError(f"missing weights: {missing}")
        for n, p in self.weights.items():
            value = np.array(arrays[n], dtype=np.float64)
            if value.shape != p.shape:
                raise ValueError(f"{n}: shape {value.shape} != {p.shape}")
            p.value = value

    def op_params(self, k: int, e: int, kind: OperationKind) -> dict[str, dg.Tensor]:
        return self._op_index[(k, e, kind)]

    def has_op(self, k: int, e: int, kind: OperationKind) -> bool:
        return (k, e, kind) in self._op_index

    def _build_index(self) -> None:
        self._op_index: dict[tuple, dict[str, dg.Tensor]] = {}
        for name, p in self.weights.items():
            if not name.startswith("cell"):
                continue
            cell, edge, op, pname = name.split(".")
            key = (int(cell[4:]), int(edge[1:]), OperationKind(op))
            self._op_index.setdefault(key, {})[pname] = p

    # ------------------------------------------------------------------
    # Lipschitz constants

    def lambdas(self) -> np.ndarray:
        """Per-(cell, edge, op) Lipschitz constants at the current weights."""
        spec = self.spec
        lam = np.zeros((spec.n_cells, spec.n_edges, N_OPS))
        groups: dict[tuple, list] = {}
        for k in range(spec.n_cells):
            for e, (i, j) in enumerate(spec.edges):
                stride = spec.edge_stride(k, i)
                for o, kind in enumerate(OPS):
                    if kind.weighted:
                        if self.has_op(k, e, kind):
                            params = {n: p.value for n, p in self.op_params(k, e, kind).items()}
                            W = effective_matrix_value(kind, params)
                            groups.setdefault(W.shape, []).append(((k, e, o), W))
                    else:
                        lam[k, e, o] = kind.constant_lipschitz(stride)
        for entries in groups.values():
            sig, _ = power_iteration_batch(np.stack([W for _, W in entries]))
            for (pos, _), s in zip(entries, sig):
                lam[pos] = s
        return lam

    def constant_C(self) -> float:
        """Loss-times-classifier factor: sqrt(2) * ||W_classifier||_2.

        sqrt(2) bounds the l2 norm of the cross-entropy gradient w.r.t. logits.
        """
        return math.sqrt(2.0) * power_iteration(self.weights["classifier.W"].value)

    # ------------------------------------------------------------------
    # forward

    def arch_tensors(self, sample: ArchSample, dist: ArchDistribution | None = None):
        """Per-cell alpha/beta as graph nodes.

        With ``dist`` the weights are rebuilt as ``exp(mu + exp(log_sigma) * eps)``
        so gradients reach the distribution parameters; otherwise they are
        constants.
        """
        alphas, betas = [], []
        for k in range(self.spec.n_cells):
            if dist is None:
                alphas.append(dg.constant(sample.alpha[k]))
                betas.append(dg.constant(sample.beta[k]))
                continue
            t = self.spec.cell_type(k)
            alphas.append(dg.exp(dist.mu_alpha[t] + dg.exp(dist.log_sigma_alpha[t]) * sample.eps_alpha[k]))
            betas.append(dg.exp(dist.mu_beta[t] + dg.exp(dist.log_sigma_beta[t]) * sample.eps_beta[k]))
        return alphas, betas

    def forward(self, x, alphas=None, betas=None) -> dg.Tensor:
        """Logits for a batch ``x`` of shape ``(B, input_dim)``.

        ``alphas``/``betas`` come from :meth:`arch_tensors`; a discrete
        network ignores them and uses its genotype.
        """
        spec = self.spec
        x = dg.constant(x)
        if x.value.ndim != 2 or x.shape[1] != spec.input_dim:
            raise ValueError(f"expected input of shape (B, {spec.input_dim}), got {x.shape}")
        if self.genotype is None and (alphas is None or betas is None):
            raise ValueError("the supernet forward needs alpha and beta")
        # uncentred inputs let the shared offset swamp the class signal, and some
        # genotypes then retrain to a constant predictor
        x = dg.sub(x, INPUT_CENTER)
        if self.stem is not None:
            x = dg.matmul(x, dg.constant(self.stem.T))
        in0 = in1 = x
        blocks = None
        for k in range(spec.n_cells):
            if self.genotype is None:
                blocks = self._mixed_cell(k, in0, in1, alphas[k], betas[k])
            else:
                blocks = self._discrete_cell(k, in0, in1)
            in0 = dg.scale(_sum(blocks), 1.0 / len(blocks))
            in1 = blocks[-1]
        features = in0
        return dg.add(dg.matmul(features, dg.transpose(self.weights["classifier.W"])),
                      self.weights["classifier.b"])

    __call__ = forward

    def _edge_terms(self, k, e, i, node, relu_cache):
        stride = self.spec.edge_stride(k, i)
        terms = []
        for kind in OPS:
            if kind is OperationKind.ZERO:
                continue
            W = None
            if kind.weighted:
                W = effective_matrix(kind, self.op_params(k, e, kind))
                if i not in relu_cache:
                    relu_cache[i] = dg.relu(node)
            terms.append(apply_op(kind, node, stride, W, relu_cache.get(i)))
        return terms

    def _mixed_cell(self, k, in0, in1, alpha, beta):
        spec = self.spec
        nodes = [in0, in1]
        relu_cache: dict[int, dg.Tensor] = {}
        live_ops = [o for o in range(N_OPS) if o != ZERO_INDEX]
        e = 0
        for j in range(2, spec.n_nodes):
            edge_out = []
            for i in range(j):
                terms = self._edge_terms(k, e, i, nodes[i], relu_cache)
                edge_out.append(dg.mix(alpha[e, live_ops], terms))
                e += 1
            nodes.append(dg.mix(beta[e - j: e], edge_out))
        return nodes[2:]

    def _discrete_cell(self, k, in0, in1):
        spec = self.spec
        nodes = [in0, in1]
        relu_cache: dict[int, dg.Tensor] = {}
        index = {edge: n for n, edge in enumerate(spec.edges)}
        for j, pairs in enumerate(self.genotype.table(spec.cell_type(k)), start=2):
            outs = []
            for i, op in pairs:
                kind = OperationKind(op)
                e = index[(i, j)]
                stride = spec.edge_stride(k, i)
                W = effective_matrix(kind, self.op_params(k, e, kind)) if kind.weighted else None
                if kind.weighted and i not in relu_cache:
                    relu_cache[i] = dg.relu(nodes[i])
                outs.append(apply_op(kind, nodes[i], stride, W, relu_cache.get(i)))
            nodes.append(dg.add(outs[0], outs[1]))
        return nodes[2:]


def _sum(parts):
    out = parts[0]
    for p in parts[1:]:
        out = dg.add(out, p)
    return out


# ----------------------------------------------------------------------
# bound distributions


def edge_bound_dist(alpha_terms: Sequence[LogNormalParams], lambdas: Sequence[float]) -> LogNormalParams:
    """Log-normal of ``sum_o alpha_o * lambda_o``; zero-constant ops drop out."""
    terms = [ln_scale(a, lam) for a, lam in zip(alpha_terms, lambdas) if lam > 0]
    if not terms:
        return ZERO_BOUND
    return fw_sum(terms)


def node_bound_dist(beta_terms: Sequence[LogNormalParams], edge_bounds: Sequence[LogNormalParams]) -> LogNormalParams:
    """Log-normal of ``sum_i beta_ij * edge_ij`` over the predecessors ``i``."""
    terms = [ln_product(b, eb) for b, eb in zip(beta_terms, edge_bounds) if not is_zero_bound(eb)]
    if not terms:
        return ZERO_BOUND
    return fw_sum(terms)


def network_bound_dist(spec: SupernetSpec, dist: ArchDistribution, lambdas: np.ndarray, C: float) -> LogNormalParams:
    """Log-normal bound on the network Lipschitz constant.

    Folds edge and node distributions over every cell and multiplies the node
    bounds (log-space means and variances add), plus ``ln C``.
    """
    if not C > 0:
        raise ValueError("C must be positive")
    total = LogNormalParams(math.log(C), 0.0)
    for k in range(spec.n_cells):
        t = spec.cell_type(k)
        e = 0
        for j in range(2, spec.n_nodes):
            edges, betas = [], []
            for _ in range(j):
                edges.append(edge_bound_dist(dist.edge_alpha(t, e), lambdas[k, e]))
                betas.append(dist.edge_beta(t, e))
                e += 1
            node = node_bound_dist(betas, edges)
            if is_zero_bound(node):
                return ZERO_BOUND
            total = ln_product(total, node)
    return total


def _fw_graph(mu: dg.Tensor, var: dg.Tensor, weight: np.ndarray | None, seg: np.ndarray):
    """Fenton-Wilkinson sums as graph nodes.

    ``mu``/``var`` hold term parameters along the last axis (flattened),
    ``weight`` optional positive scale per term (0 drops the term) and
    ``seg`` a 0/1 matrix mapping terms to output sums.
    """
    half = dg.exp(mu + dg.scale(var, 0.5))
    second = dg.exp(dg.scale(mu, 2.0) + var) * dg.expm1(var)
    if weight is not None:
        half = half * weight
        second = second * (weight * weight)
    S = dg.constant(seg)
    M = dg.matmul(S, half)
    V = dg.matmul(S, second)
    s = dg.log(V / (M * M) + 1.0)
    return dg.log(M) - dg.scale(s, 0.5), s


def network_bound_graph(spec: SupernetSpec, dist: ArchDistribution, lambdas: np.ndarray, C: float):
    """Same quantity as :func:`network_bound_dist` built in the graph.

    Returns ``(mu, var)`` scalar tensors differentiable w.r.t. the
    distribution parameters; ``lambdas`` and ``C`` are constants. Returns
    ``None`` when the bound is the zero point mass.
    """
    E = spec.n_edges
    edge_node = np.array([j for (_, j) in spec.edges])
    seg_nodes = (edge_node[None, :] == np.arange(2, spec.n_nodes)[:, None]).astype(float)
    mu_total = dg.constant(math.log(C))
    var_total = dg.constant(0.0)
    for k in range(spec.n_cells):
        t = spec.cell_type(k)
        lam = lambdas[k]
        live_edge = lam.max(axis=1) > 0
        if not all(live_edge[seg_nodes[n] > 0].any() for n in range(seg_nodes.shape[0])):
            return None
        mu_a = dg.reshape(dist.mu_alpha[t], (E * N_OPS,))
        var_a = dg.reshape(dg.exp(dg.scale(dist.log_sigma_alpha[t], 2.0)), (E * N_OPS,))
        seg_edges = np.kron(np.eye(E), np.ones(N_OPS))
        mu_e, var_e = _fw_graph(mu_a, var_a, lam.reshape(-1), seg_edges[live_edge])
        idx = np.flatnonzero(live_edge)
        mu_t = dg.getitem(dist.mu_beta[t], idx) + mu_e
        var_t = dg.exp(dg.scale(dg.getitem(dist.log_sigma_beta[t], idx), 2.0)) + var_e
        mu_n, var_n = _fw_graph(mu_t, var_t, None, seg_nodes[:, idx])
        mu_total = mu_total + dg.sum_reduce(mu_n)
        var_total = var_total + dg.sum_reduce(var_n)
    return mu_total, var_total


def node_sums(sample: ArchSample, lambdas: np.ndarray, spec: SupernetSpec) -> np.ndarray:
    """``sum_i beta_ij sum_o alpha_ijo lambda_o`` per (cell, intermediate node)."""
    edge = np.einsum("keo,keo->ke", sample.alpha, lambdas) * sample.beta
    edge_node = np.array([j for (_, j) in spec.edges])
    return np.stack([edge[:, edge_node == j].sum(axis=1) for j in range(2, spec.n_nodes)], axis=1)


def sampled_bound(spec: SupernetSpec, sample: ArchSample, lambdas: np.ndarray, C: float) -> float:
    """``C * prod_k prod_j sum_i beta * sum_o alpha * lambda`` at a concrete sample."""
    sums = node_sums(sample, lambdas, spec)
    if np.any(sums == 0):
        return 0.0
    return float(np.exp(math.log(C) + np.sum(np.log(sums))))


def discretize(spec: SupernetSpec, dist: ArchDistribution, scoring: str = "expectation",
               z: float | None = None, confidence: float = 0.9, meta: dict | None = None) -> Genotype:
    """Pick one operation per edge and two predecessors per node.

    Each (edge, op) scores ``E[beta] * E[alpha_op]`` (``scoring="expectation"``)
    or ``exp(mu - z*sigma)`` products (``scoring="lower"``, ``z`` defaulting to
    the ``confidence`` quantile). Ties go to the lower index.
    """
    if scoring not in ("expectation", "lower"):
        raise ValueError(f"unknown scoring {scoring!r}")
    if z is None:
        z = normal_quantile(confidence)

    def score(p: LogNormalParams) -> float:
        if scoring == "expectation":
            return ln_mean(p)
        return math.exp(p.mu - z * p.sigma)

    tables = {}
    for t in CELL_TYPES:
        rows = []
        e = 0
        for j in range(2, spec.n_nodes):
            best = []
            for i in range(j):
                b = score(dist.edge_beta(t, e))
                s = np.array([b * score(a) for a in dist.edge_alpha(t, e)])
                s[ZERO_INDEX] = -np.inf
                o = int(np.argmax(s))
                best.append((s[o], i, OPS[o].value))
                e += 1
            order = sorted(range(j), key=lambda i: (-best[i][0], i))[:2]
            rows.append(tuple((best[i][1], best[i][2]) for i in sorted(order)))
        tables[t] = tuple(rows)
    return Genotype(tables["normal"], tables["reduce"], meta=dict(meta or {}))
