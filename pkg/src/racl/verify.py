"""Oracle-backed verification suites shared by the CLI and the test-suite.

Every suite returns a list of :class:`Case` records; a run passes when all
cases are within tolerance. Monte Carlo suites draw from streams derived
from ``seed`` only, so their verdicts are reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import diffgraph as dg
from .lognormal import (
    LogNormalParams,
    fw_sum,
    ks_sampling_error,
    ln_cdf,
    _ks_normal,
    ln_product,
    mc_oracle,
    normal_cdf,
)
from .search import AdmmState, augmented_lagrangian, constraint_value
from .supernet import (
    ArchDistribution,
    Supernet,
    SupernetSpec,
    network_bound_dist,
    network_bound_graph,
    node_sums,
    sample_arch,
    sampled_bound,
)

__all__ = [
    "Case",
    "random_terms",
    "suite_fw",
    "suite_product",
    "suite_bound",
    "suite_constraint",
    "suite_validity",
    "SUITES",
    "gradcheck_diffgraph",
    "gradcheck_arch",
    "gradcheck_lagrangian",
    "GRADCHECK_TARGETS",
    "format_table",
    "bisect_quantile",
]


@dataclass(frozen=True)
class Case:
    suite: str
    name: str
    metric: str
    value: float
    tol: float

    @property
    def ok(self) -> bool:
        return bool(self.value <= self.tol)


def format_table(cases: list[Case], failures_only: bool = False) -> str:
    rows = [c for c in cases if not (failures_only and c.ok)]
    lines = [f"{'suite':<11} {'case':<26} {'metric':<16} {'value':>12} {'tol':>12}  status"]
    for c in rows:
        lines.append(f"{c.suite:<11} {c.name:<26} {c.metric:<16} {c.value:12.4g} {c.tol:12.4g}  "
                     f"{'ok' if c.ok else 'FAIL'}")
    return "\n".join(lines)


def random_terms(rng: np.random.Generator, max_terms: int = 8, mu_range=(-1.0, 1.0),
                 var_range=(0.0025, 0.09)) -> list[LogNormalParams]:
    k = int(rng.integers(1, max_terms + 1))
    mus = rng.uniform(*mu_range, size=k)
    vs = rng.uniform(*var_range, size=k)
    return [LogNormalParams(float(m), float(v)) for m, v in zip(mus, vs)]


# -- Monte Carlo suites ----------------------------------------------------

def suite_fw(n: int = 1_000_000, seed: int = 0, cases: int = 100, ks_tol: float = 0.05) -> list[Case]:
    """FW sums against sampling: moments within 3 SE, log-KS within ``ks_tol``."""
    rng = np.random.default_rng([seed, 11])
    out = []
    for i in range(cases):
        terms = random_terms(rng)
        fw = fw_sum(terms)
        st = mc_oracle(terms, "sum", n=n, seed=seed, reference=fw, tag=f"fw{i}")
        name = f"case{i:03d} ({len(terms)} terms)"
        out.append(Case("fw", name, "mean |z|", abs(fw.implied_mean - st.mean) / st.mean_se, 3.0))
        out.append(Case("fw", name, "variance |z|",
                        abs(fw.implied_variance - st.variance) / st.variance_se, 3.0))
        out.append(Case("fw", name, "ks", st.ks, ks_tol))
    return out


def suite_product(n: int = 1_000_000, seed: int = 0, cases: int = 20) -> list[Case]:
    """Products are exactly log-normal, so KS is pure sampling noise."""
    rng = np.random.default_rng([seed, 12])
    tol = 3.0 * ks_sampling_error(n)
    out = []
    for i in range(cases):
        a, b = random_terms(rng, max_terms=1)[0], random_terms(rng, max_terms=1)[0]
        ref = ln_product(a, b)
        st = mc_oracle([a, b], "product", n=n, seed=seed, reference=ref, tag=f"prod{i}")
        out.append(Case("product", f"pair{i:02d}", "ks", st.ks, tol))
    return out


def sample_bounds(spec: SupernetSpec, dist: ArchDistribution, lambdas: np.ndarray, C: float,
                  n: int, rng: np.random.Generator, chunk: int = 5000) -> np.ndarray:
    """``n`` draws of the network bound, evaluated in log space in chunks."""
    out = np.empty(n)
    done = 0
    while done < n:
        m = min(chunk, n - done)
        logs = np.full(m, math.log(C))
        for k in range(spec.n_cells):
            t = spec.cell_type(k)
            ma, sa = dist.mu_alpha[t].value, np.exp(dist.log_sigma_alpha[t].value)
            mb, sb = dist.mu_beta[t].value, np.exp(dist.log_sigma_beta[t].value)
            alpha = np.exp(ma + sa * rng.standard_normal((m,) + ma.shape))
            beta = np.exp(mb + sb * rng.standard_normal((m,) + mb.shape))
            edge = beta * np.einsum("neo,eo->ne", alpha, lambdas[k])
            for j in range(2, spec.n_nodes):
                cols = [e for e, (_, jj) in enumerate(spec.edges) if jj == j]
                logs += np.log(edge[:, cols].sum(axis=1))
        out[done:done + m] = logs
        done += m
    return out


def suite_bound(n: int = 100_000, seed: int = 0, ks_tol: float = 0.05) -> list[Case]:
    """Network log-normal bound against direct sampling of the bound."""
    spec = SupernetSpec()
    net = Supernet(spec, seed=seed)
    dist = ArchDistribution.initial(spec)
    lam, C = net.lambdas(), net.constant_C()
    ref = network_bound_dist(spec, dist, lam, C)
    logs = sample_bounds(spec, dist, lam, C, n, np.random.default_rng([seed, 13]))
    vals = np.exp(logs - ref.mu)  # rescaled to keep moments in range
    mean_se = vals.std(ddof=1) / math.sqrt(n)
    z_mean = abs(vals.mean() - math.exp(0.5 * ref.var)) / mean_se
    ks = _ks_normal(np.sort(logs), ref.mu, ref.var)
    graph_mu, graph_var = network_bound_graph(spec, dist, lam, C)
    return [
        Case("bound", "implied mean", "|z|", z_mean, 3.0),
        Case("bound", "log-bound ks", "ks", ks, ks_tol),
        Case("bound", "graph vs fold mu", "abs diff", abs(graph_mu.item() - ref.mu), 1e-10),
        Case("bound", "graph vs fold var", "abs diff", abs(graph_var.item() - ref.var), 1e-10),
    ]


def bisect_quantile(p: float) -> float:
    """Inverse of ``normal_cdf`` by bisection; slow but independent."""
    lo, hi = -40.0, 40.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if normal_cdf(mid) < p:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def suite_constraint(n: int = 100_000, seed: int = 0, cases: int = 20) -> list[Case]:
    """Constraint value against its closed form and probability against sampling."""
    rng = np.random.default_rng([seed, 14])
    out = [Case("constraint", "mu=ln(lambda), var=0", "abs c",
                abs(constraint_value(LogNormalParams(1.5, 0.0), 0.9, math.exp(1.5))), 1e-12)]
    for i in range(cases):
        mu, var = rng.uniform(-2, 4), rng.uniform(0.01, 2.0)
        eta, lam = rng.uniform(0.55, 0.99), math.exp(rng.uniform(-1, 5))
        p = LogNormalParams(mu, var)
        expected = mu + bisect_quantile(eta) * var - math.log(lam)
        out.append(Case("constraint", f"case{i:02d}", "abs c error",
                        abs(constraint_value(p, eta, lam) - expected), 1e-9))
        draws = rng.normal(mu, math.sqrt(var), size=n)
        frac = float(np.mean(draws <= math.log(lam)))
        prob = ln_cdf(p, lam)
        se = math.sqrt(max(prob * (1 - prob), 1.0 / n) / n)
        out.append(Case("constraint", f"case{i:02d}", "Pr |z|", abs(frac - prob) / se, 4.0))
    return out


def suite_validity(n: int = 100, seed: int = 0, samples: int = 20) -> list[Case]:
    """Empirical Lipschitz ratios of sampled networks against their bound.

    For each architecture sample, ``n`` probe pairs ``(x, x + delta)`` with
    perturbation scales spread over four decades are pushed through the
    network. The network-only bound is ``sampled_bound / sqrt(2)``; the
    per-node product form needs every node sum to be at least 1, which is
    reported as its own case.
    """
    spec = SupernetSpec()
    net = Supernet(spec, seed=seed)
    dist = ArchDistribution.initial(spec)
    lam, C = net.lambdas(), net.constant_C()
    rng = np.random.default_rng([seed, 15])
    out = []
    for s in range(samples):
        sample = sample_arch(spec, dist, rng)
        bound = sampled_bound(spec, sample, lam, C) / math.sqrt(2.0)
        alphas, betas = net.arch_tensors(sample)
        x = rng.standard_normal((n, spec.input_dim))
        delta = rng.standard_normal((n, spec.input_dim)) * 10.0 ** rng.uniform(-4, 0, (n, 1))
        diff = net.forward(x + delta, alphas, betas).value - net.forward(x, alphas, betas).value
        ratio = np.linalg.norm(diff, axis=1) / np.linalg.norm(delta, axis=1)
        name = f"sample{s:02d}"
        out.append(Case("validity", name, "violations", float(np.sum(ratio > bound * (1 + 1e-12))), 0.0))
        out.append(Case("validity", name, "1 - min node sum",
                        max(0.0, 1.0 - float(node_sums(sample, lam, spec).min())), 0.0))
    return out


SUITES: dict[str, Callable[..., list[Case]]] = {
    "fw": suite_fw,
    "product": suite_product,
    "bound": suite_bound,
    "constraint": suite_constraint,
    "validity": suite_validity,
}


# -- finite-difference suites ---------------------------------------------

def _rand(rng, *shape, lo=-1.0, hi=1.0):
    return dg.parameter(rng.uniform(lo, hi, size=shape))


def gradcheck_diffgraph(seed: int = 0, tol: float = 1e-5) -> list[Case]:
    """Every primitive's adjoint against central differences."""
    rng = np.random.default_rng(seed)
    a, b = _rand(rng, 3, 4), _rand(rng, 3, 4)
    pos = _rand(rng, 3, 4, lo=0.5, hi=2.0)
    row = _rand(rng, 4)
    m = _rand(rng, 4, 5)
    # spread values so relu/max never sit on a kink
    spread = dg.parameter(rng.permutation(np.linspace(-1.0, 1.0, 12)).reshape(3, 4) + 0.01)
    onehot = np.eye(4)[rng.integers(0, 4, size=3)]
    w = _rand(rng, 3, lo=0.2, hi=1.0)
    idx = np.array([[0, 2], [1, 3], [3, 0]])
    rows, cols = np.array([0, 1, 2, 2]), np.array([1, 0, 2, 3])
    vals = _rand(rng, 4)
    probe = rng.standard_normal((3, 4))

    def wsum(t):
        # weighted sum so that every output coordinate gets a distinct adjoint
        return dg.sum_reduce(dg.mul(t, dg.constant(probe[: t.shape[0], : t.shape[1]])))
    checks = {
        "add (broadcast)": (lambda: wsum(dg.add(a, row)), [a, row]),
        "sub": (lambda: wsum(dg.sub(a, b)), [a, b]),
        "mul (broadcast)": (lambda: wsum(dg.mul(a, row)), [a, row]),
        "div": (lambda: wsum(dg.div(a, pos)), [a, pos]),
        "neg/scale": (lambda: wsum(dg.scale(dg.neg(a), 2.5)), [a]),
        "matmul": (lambda: wsum(dg.matmul(a, m)[:, :4]), [a, m]),
        "transpose": (lambda: dg.sum_reduce(dg.mul(dg.transpose(a), dg.constant(probe.T))), [a]),
        "exp": (lambda: wsum(dg.exp(a)), [a]),
        "expm1": (lambda: wsum(dg.expm1(a)), [a]),
        "log": (lambda: wsum(dg.log(pos)), [pos]),
        "sqrt": (lambda: wsum(dg.sqrt(pos)), [pos]),
        "relu": (lambda: wsum(dg.relu(spread)), [spread]),
        "sum_reduce axis": (lambda: dg.sum_reduce(dg.mul(dg.sum_reduce(a, axis=0), row)), [a, row]),
        "mean_reduce axis": (lambda: dg.sum_reduce(dg.mul(dg.mean_reduce(a, axis=1), w)), [a, w]),
        "max_reduce": (lambda: dg.sum_reduce(dg.mul(dg.max_reduce(spread, axis=-1), w)), [spread, w]),
        "concat": (lambda: dg.sum_reduce(dg.mul(dg.concat([a, b], axis=-1),
                                                dg.constant(np.tile(probe, 2)))), [a, b]),
        "reshape": (lambda: dg.sum_reduce(dg.mul(dg.reshape(a, (4, 3)), dg.constant(probe.reshape(4, 3)))), [a]),
        "getitem": (lambda: dg.sum_reduce(dg.mul(a[:, 1:3], dg.constant(probe[:, :2]))), [a]),
        "take": (lambda: dg.sum_reduce(dg.mul(dg.take(a, idx), dg.constant(probe[:, :2]))), [a]),
        "scatter": (lambda: wsum(dg.scatter(vals, rows, cols, (3, 4))), [vals]),
        "mix": (lambda: wsum(dg.mix(w, [a, b, pos])), [w, a, b, pos]),
        "softmax_cross_entropy": (lambda: dg.softmax_cross_entropy(a, onehot), [a]),
    }
    out = []
    for name, (f, params) in checks.items():
        err = dg.grad_check(f, params, h=1e-6, seed=seed)
        out.append(Case("diffgraph", name, "rel err", err, tol))
    return out


def _tiny_setup(seed: int):
    spec = SupernetSpec(n_cells=2, n_nodes=4, width=6, input_dim=5, n_classes=3, reduction_cells=(1,))
    net = Supernet(spec, seed=seed)
    dist = ArchDistribution.initial(spec, sigma=0.3)
    rng = np.random.default_rng([seed, 15])
    # perturb the means so the check does not sit on a symmetric point
    for p in dist.parameters():
        p.value += 0.05 * rng.standard_normal(p.value.shape)
    x = rng.uniform(0, 1, size=(6, spec.input_dim))
    y = rng.integers(0, spec.n_classes, size=6)
    sample = sample_arch(spec, dist, rng)
    return spec, net, dist, x, np.eye(spec.n_classes)[y], sample


def gradcheck_arch(seed: int = 0, tol: float = 1e-4) -> list[Case]:
    """Supernet cross-entropy w.r.t. weights and architecture parameters."""
    spec, net, dist, x, onehot, sample = _tiny_setup(seed)

    def loss():
        alphas, betas = net.arch_tensors(sample, dist)
        return dg.softmax_cross_entropy(net(x, alphas, betas), onehot)

    weights = net.parameters()
    return [
        Case("arch", "weights", "rel err", dg.grad_check(loss, weights, h=1e-5, n_coords=4, seed=seed), tol),
        Case("arch", "architecture", "rel err", dg.grad_check(loss, dist.parameters(), h=1e-5, seed=seed), tol),
    ]


def gradcheck_lagrangian(seed: int = 0, tol: float = 1e-4) -> list[Case]:
    """Augmented Lagrangian, including the log-normal constraint graph."""
    spec, net, dist, x, onehot, sample = _tiny_setup(seed)
    lam, C = net.lambdas(), net.constant_C()
    state = AdmmState(theta=0.7, rho=0.3)
    lam_star = math.exp(network_bound_dist(spec, dist, lam, C).mu - 0.5)

    def constraint_only():
        return constraint_value(network_bound_graph(spec, dist, lam, C), 0.9, lam_star)

    def full():
        alphas, betas = net.arch_tensors(sample, dist)
        ce = dg.softmax_cross_entropy(net(x, alphas, betas), onehot)
        return augmented_lagrangian(ce, constraint_only(), state)

    params = dist.parameters()
    return [
        Case("lagrangian", "constraint graph", "rel err",
             dg.grad_check(constraint_only, params, h=1e-5, seed=seed), tol),
        Case("lagrangian", "full objective", "rel err", dg.grad_check(full, params, h=1e-5, seed=seed), tol),
    ]


GRADCHECK_TARGETS: dict[str, Callable[..., list[Case]]] = {
    "diffgraph": gradcheck_diffgraph,
    "arch": gradcheck_arch,
    "lagrangian": gradcheck_lagrangian,
}
