import math

import numpy as np
import pytest

from racl import diffgraph as dg
from racl.lognormal import (
    ZERO_BOUND,
    LogNormalParams,
    fw_sum,
    is_zero_bound,
    ln_cdf,
    ln_mean,
    ln_product,
    mc_oracle,
)
from racl.operations import OPS, OperationKind, effective_matrix_value
from racl.supernet import (
    ArchDistribution,
    ArchSample,
    Genotype,
    Supernet,
    SupernetSpec,
    degenerate_sample,
    discretize,
    edge_bound_dist,
    network_bound_dist,
    network_bound_graph,
    node_bound_dist,
    node_sums,
    sample_arch,
    sampled_bound,
)
from racl.verify import gradcheck_arch, sample_bounds, suite_validity

from oracles import brute_force_genotype, jacobi_singular_values

K = OperationKind
SKIP = OPS.index(K.SKIP)
ZERO = OPS.index(K.ZERO)
TINY = SupernetSpec(n_cells=2, n_nodes=4, width=8, input_dim=6, n_classes=3, reduction_cells=(1,))


def _identity_spec(n_nodes=3, n_cells=1):
    return SupernetSpec(n_cells=n_cells, n_nodes=n_nodes, width=4, input_dim=4, n_classes=4, reduction_cells=())


def _set_identity_classifier(net):
    net.weights["classifier.W"].value = np.eye(net.spec.n_classes)
    net.weights["classifier.b"].value = np.zeros(net.spec.n_classes)


# -- spec and distribution ------------------------------------------------

def test_spec_edges_and_widths():
    spec = SupernetSpec()
    assert spec.n_edges == 2 + 3 + 4 + 5
    assert spec.edges[:3] == [(0, 2), (1, 2), (0, 3)]
    assert spec.cell_widths() == [(16, 16), (16, 16), (16, 8), (8, 8)]
    assert spec.edge_stride(2, 1) == 2 and spec.edge_stride(2, 2) == 1 and spec.edge_stride(0, 0) == 1


def test_spec_rejects_bad_shapes():
    with pytest.raises(ValueError):
        SupernetSpec(n_nodes=2)
    with pytest.raises(ValueError):
        SupernetSpec(width=6, reduction_cells=(0, 1))


def test_spec_digest_is_stable_and_sensitive():
    assert SupernetSpec().digest() == SupernetSpec().digest()
    assert SupernetSpec().digest() != SupernetSpec(width=8).digest()
    assert SupernetSpec(**SupernetSpec().to_dict()) == SupernetSpec()


def test_initial_distribution_shapes_and_values():
    dist = ArchDistribution.initial(TINY, sigma=0.2)
    assert dist.mu_alpha["normal"].shape == (TINY.n_edges, 8)
    np.testing.assert_allclose(np.exp(dist.log_sigma_beta["reduce"].value), 0.2)
    np.testing.assert_allclose(dist.mu_beta["normal"].value, [-math.log(j) for _, j in TINY.edges])
    flat = ArchDistribution.initial(TINY, mu_alpha=0.0, mu_beta=0.0)
    assert np.all(flat.mu_alpha["normal"].value == 0) and np.all(flat.mu_beta["reduce"].value == 0)
    assert len(dist.parameters()) == 8
    assert len(dist.mu_parameters()) == len(dist.sigma_parameters()) == 4


def test_distribution_copy_is_independent():
    dist = ArchDistribution.initial(TINY)
    twin = dist.copy()
    twin.mu_alpha["normal"].value[0, 0] = 9.0
    assert dist.mu_alpha["normal"].value[0, 0] != 9.0


# -- sampling ---------------------------------------------------------------

def test_sample_with_vanishing_sigma_is_exp_mu():
    dist = ArchDistribution.initial(TINY, sigma=1e-8)
    s = sample_arch(TINY, dist, 3)
    np.testing.assert_allclose(s.alpha, math.exp(-math.log(3)), rtol=1e-6)
    assert np.all(s.alpha > 0) and np.all(s.beta > 0)


def test_sample_is_deterministic_per_seed():
    dist = ArchDistribution.initial(TINY)
    a, b = sample_arch(TINY, dist, 11), sample_arch(TINY, dist, 11)
    np.testing.assert_array_equal(a.alpha, b.alpha)
    np.testing.assert_array_equal(a.eps_beta, b.eps_beta)
    assert not np.array_equal(a.alpha, sample_arch(TINY, dist, 12).alpha)


def test_sample_uses_cell_type_tables():
    dist = ArchDistribution.initial(TINY, sigma=1e-8)
    dist.mu_alpha["reduce"].value[:] = 1.0
    s = sample_arch(TINY, dist, 0)
    np.testing.assert_allclose(s.alpha[1], math.e, rtol=1e-6)
    np.testing.assert_allclose(s.alpha[0], 1 / 3, rtol=1e-6)


def test_sample_log_mean_monte_carlo():
    spec = SupernetSpec(n_cells=1, n_nodes=3, width=4, input_dim=4, n_classes=2, reduction_cells=())
    dist = ArchDistribution.initial(spec, sigma=0.3, mu_alpha=0.2)
    rng = np.random.default_rng(5)
    logs = np.concatenate([np.log(sample_arch(spec, dist, rng).alpha[0, 0]) for _ in range(12500)])
    assert logs.size == 10**5
    se = 0.3 / math.sqrt(logs.size)
    assert abs(logs.mean() - 0.2) <= 3 * se


def test_eps_reconstructs_sample():
    dist = ArchDistribution.initial(TINY)
    s = sample_arch(TINY, dist, 4)
    net = Supernet(TINY, seed=0)
    alphas, betas = net.arch_tensors(s, dist)
    for k in range(TINY.n_cells):
        np.testing.assert_allclose(alphas[k].value, s.alpha[k], rtol=1e-14)
        np.testing.assert_allclose(betas[k].value, s.beta[k], rtol=1e-14)


# -- forward ------------------------------------------------------------------

def test_forward_zero_alpha_gives_zero_features():
    spec = _identity_spec(n_nodes=4)
    net = Supernet(spec, seed=0)
    _set_identity_classifier(net)
    net.weights["classifier.b"].value = np.arange(4.0)
    sample = ArchSample(np.zeros((1, spec.n_edges, 8)), np.ones((1, spec.n_edges)))
    sample.alpha[0, :, ZERO] = 1.0
    x = np.random.default_rng(0).standard_normal((5, 4))
    logits = net.forward(x, *net.arch_tensors(sample)).value
    np.testing.assert_array_equal(logits, np.tile(np.arange(4.0), (5, 1)))


def test_forward_single_skip_edge_is_centred_identity():
    spec = _identity_spec()
    net = Supernet(spec, seed=0)
    _set_identity_classifier(net)
    alpha = np.zeros((1, spec.n_edges, 8))
    beta = np.zeros((1, spec.n_edges))
    alpha[0, 0, SKIP] = beta[0, 0] = 1.0
    x = np.random.default_rng(1).standard_normal((7, 4))
    logits = net.forward(x, *net.arch_tensors(ArchSample(alpha, beta))).value
    np.testing.assert_allclose(logits, x - 0.5, rtol=0, atol=1e-15)


def test_forward_rejects_bad_inputs():
    net = Supernet(TINY, seed=0)
    sample = sample_arch(TINY, ArchDistribution.initial(TINY), 0)
    with pytest.raises(ValueError):
        net.forward(np.zeros((3, 5)), *net.arch_tensors(sample))
    with pytest.raises(ValueError):
        net.forward(np.zeros(6), *net.arch_tensors(sample))
    with pytest.raises(ValueError):
        net.forward(np.zeros((3, 6)))


def test_forward_output_shape_with_stem():
    spec = SupernetSpec(n_cells=2, n_nodes=4, width=8, input_dim=20, n_classes=5, reduction_cells=(0,))
    net = Supernet(spec, seed=0)
    assert np.allclose(net.stem @ net.stem.T, np.eye(8))
    sample = sample_arch(spec, ArchDistribution.initial(spec), 0)
    assert net.forward(np.ones((3, 20)), *net.arch_tensors(sample)).shape == (3, 5)


def _genotype_tiny():
    normal = (((0, "skip"), (1, "sep_lin_a")), ((0, "dil_lin_b"), (2, "max_pool")))
    reduce = (((0, "avg_pool"), (1, "sep_lin_b")), ((1, "dil_lin_a"), (2, "skip")))
    return Genotype(normal, reduce)


def test_degenerate_sample_matches_discrete_forward():
    g = _genotype_tiny()
    full = Supernet(TINY, seed=3)
    sub = Supernet(TINY, seed=3, genotype=g)
    for name, p in sub.weights.items():
        np.testing.assert_array_equal(p.value, full.weights[name].value)
    x = np.random.default_rng(2).standard_normal((9, TINY.input_dim))
    mixed = full.forward(x, *full.arch_tensors(degenerate_sample(TINY, g))).value
    np.testing.assert_allclose(sub.forward(x).value, mixed, rtol=0, atol=1e-12)


def test_discrete_net_holds_only_chosen_weights():
    sub = Supernet(TINY, seed=0, genotype=_genotype_tiny())
    kinds = {name.split(".")[2] for name in sub.weights if name.startswith("cell")}
    assert kinds == {"sep_lin_a", "sep_lin_b", "dil_lin_a", "dil_lin_b"}
    assert not sub.has_op(0, 0, K.SEP_LIN_A)


def test_load_weights_checks_names_and_shapes():
    net = Supernet(TINY, seed=0)
    state = net.state()
    other = Supernet(TINY, seed=1, weights=state)
    for n in state:
        np.testing.assert_array_equal(other.weights[n].value, state[n])
    bad = dict(state)
    bad.pop("classifier.b")
    with pytest.raises(KeyError):
        net.load_weights(bad)
    bad = dict(state, **{"classifier.b": np.zeros(7)})
    with pytest.raises(ValueError):
        net.load_weights(bad)


@pytest.mark.parametrize("case", gradcheck_arch(), ids=lambda c: c.name)
def test_forward_gradients_finite_difference(case):
    assert case.value <= 1e-4, case


# -- Lipschitz constants -----------------------------------------------------

def test_lambdas_table():
    net = Supernet(TINY, seed=0)
    lam = net.lambdas()
    assert lam.shape == (2, TINY.n_edges, 8)
    assert np.all(lam[:, :, ZERO] == 0)
    assert np.all(lam[:, :, SKIP] == 1)
    avg = OPS.index(K.AVG_POOL)
    assert lam[1, 0, avg] == pytest.approx(2 ** -0.5) and lam[1, 4, avg] == 1.0
    params = {n: p.value for n, p in net.op_params(0, 1, K.DIL_LIN_B).items()}
    expected = jacobi_singular_values(effective_matrix_value(K.DIL_LIN_B, params))[0]
    assert lam[0, 1, OPS.index(K.DIL_LIN_B)] == pytest.approx(expected, rel=1e-8)


def test_constant_C_examples():
    net = Supernet(_identity_spec(), seed=0)
    _set_identity_classifier(net)
    assert net.constant_C() == pytest.approx(math.sqrt(2), rel=1e-14)
    spec = SupernetSpec(n_cells=1, n_nodes=3, width=2, input_dim=2, n_classes=2, reduction_cells=())
    net = Supernet(spec, seed=0)
    net.weights["classifier.W"].value = np.diag([2.0, 1.0])
    assert net.constant_C() == pytest.approx(2 * math.sqrt(2), rel=1e-14)
    net = Supernet(SupernetSpec(), seed=7)
    W = net.weights["classifier.W"].value
    assert net.constant_C() == pytest.approx(math.sqrt(2) * jacobi_singular_values(W)[0], rel=1e-8)


# -- bound distributions ----------------------------------------------------

def test_edge_bound_skip_only():
    alphas = [LogNormalParams(0.0, 0.0)] + [LogNormalParams(0.0, 0.1)] * 7
    lam = [1.0] + [0.0] * 7
    assert edge_bound_dist(alphas, lam) == LogNormalParams(0.0, 0.0)


def test_edge_bound_two_iid_terms():
    p = edge_bound_dist([LogNormalParams(0.0, 0.25)] * 2, [1.0, 1.0])
    assert p.mu == pytest.approx(0.7517510609004962, abs=1e-12)
    assert p.var == pytest.approx(0.1327922393188983, abs=1e-12)


def test_edge_bound_all_zero_is_marker():
    assert is_zero_bound(edge_bound_dist([LogNormalParams(0.0, 0.1)] * 2, [0.0, 0.0]))


def test_edge_bound_full_edge_monte_carlo():
    net = Supernet(SupernetSpec(), seed=0)
    lam = net.lambdas()[0, 4]
    dist = ArchDistribution.initial(SupernetSpec())
    alphas = dist.edge_alpha("normal", 4)
    fw = edge_bound_dist(alphas, lam)
    rng = np.random.default_rng(9)
    n = 10**5
    mu = np.array([a.mu for a in alphas])
    sd = np.sqrt([a.var for a in alphas])
    vals = np.exp(mu + sd * rng.standard_normal((n, 8))) @ lam
    assert abs(vals.mean() - fw.implied_mean) <= 3 * vals.std(ddof=1) / math.sqrt(n)


def test_node_bound_single_unit_beta_is_edge():
    edge = LogNormalParams(0.4, 0.07)
    assert node_bound_dist([LogNormalParams(0.0, 0.0)], [edge]) == edge


def test_node_bound_two_identical_predecessors_monte_carlo():
    beta, edge = LogNormalParams(-0.3, 0.05), LogNormalParams(0.5, 0.04)
    p = node_bound_dist([beta, beta], [edge, edge])
    prod = ln_product(beta, edge)
    assert p == fw_sum([prod, prod])
    st = mc_oracle([prod, prod], "sum", n=10**5, seed=1, reference=p)
    assert abs(p.implied_mean - st.mean) <= 3 * st.mean_se


def test_node_bound_degenerate_is_deterministic():
    betas = [LogNormalParams(math.log(b), 0.0) for b in (0.5, 2.0)]
    edges = [LogNormalParams(math.log(l), 0.0) for l in (3.0, 0.25)]
    p = node_bound_dist(betas, edges)
    assert p.mu == pytest.approx(math.log(0.5 * 3.0 + 2.0 * 0.25), abs=1e-14)
    assert p.var == pytest.approx(0.0, abs=1e-15)


def test_node_bound_zero_predecessors():
    assert is_zero_bound(node_bound_dist([LogNormalParams(0, 0.1)], [ZERO_BOUND]))


def _one_node_setup():
    spec = SupernetSpec(n_cells=1, n_nodes=3, width=4, input_dim=4, n_classes=2, reduction_cells=())
    dist = ArchDistribution.initial(spec, sigma=0.2)
    lam = Supernet(spec, seed=0).lambdas()
    return spec, dist, lam


def test_network_bound_one_node_is_node_bound():
    spec, dist, lam = _one_node_setup()
    edges = [edge_bound_dist(dist.edge_alpha("normal", e), lam[0, e]) for e in range(2)]
    node = node_bound_dist([dist.edge_beta("normal", e) for e in range(2)], edges)
    net = network_bound_dist(spec, dist, lam, 1.0)
    assert net.mu == pytest.approx(node.mu, abs=1e-14) and net.var == pytest.approx(node.var, abs=1e-14)


def test_network_bound_doubles_with_duplicate_cell():
    spec, dist, lam = _one_node_setup()
    one = network_bound_dist(spec, dist, lam, 1.0)
    two_spec = SupernetSpec(n_cells=2, n_nodes=3, width=4, input_dim=4, n_classes=2, reduction_cells=())
    two = network_bound_dist(two_spec, dist, np.concatenate([lam, lam]), 1.0)
    assert two.mu == pytest.approx(2 * one.mu, rel=1e-14)
    assert two.var == pytest.approx(2 * one.var, rel=1e-14)
    shifted = network_bound_dist(spec, dist, lam, math.e)
    assert shifted.mu == pytest.approx(one.mu + 1.0, rel=1e-14)


def test_network_bound_rejects_nonpositive_C():
    spec, dist, lam = _one_node_setup()
    with pytest.raises(ValueError):
        network_bound_dist(spec, dist, lam, 0.0)


def test_network_bound_zero_node_collapses():
    spec, dist, lam = _one_node_setup()
    lam = lam.copy()
    lam[:] = 0.0
    assert is_zero_bound(network_bound_dist(spec, dist, lam, 1.0))
    assert network_bound_graph(spec, dist, lam, 1.0) is None


def test_network_bound_probability_matches_sampling():
    spec = SupernetSpec()
    net = Supernet(spec, seed=1)
    dist = ArchDistribution.initial(spec)
    lam, C = net.lambdas(), net.constant_C()
    p = network_bound_dist(spec, dist, lam, C)
    logs = sample_bounds(spec, dist, lam, C, 10**5, np.random.default_rng(21))
    for q in (0.1, 0.5, 0.9):
        x = float(np.exp(np.quantile(logs, q)))
        assert abs(ln_cdf(p, x) - q) <= 0.01


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_graph_and_fold_paths_agree(seed):
    rng = np.random.default_rng(seed)
    dist = ArchDistribution.initial(TINY)
    for p in dist.parameters():
        p.value = p.value + rng.uniform(-0.3, 0.3, p.shape)
    lam = Supernet(TINY, seed=seed).lambdas()
    fold = network_bound_dist(TINY, dist, lam, 2.5)
    mu, var = network_bound_graph(TINY, dist, lam, 2.5)
    assert abs(mu.item() - fold.mu) <= 1e-10 and abs(var.item() - fold.var) <= 1e-10


def test_bound_mu_increases_with_every_mu_alpha():
    dist = ArchDistribution.initial(TINY)
    lam = Supernet(TINY, seed=0).lambdas()
    base = network_bound_dist(TINY, dist, lam, 1.0).mu
    mu, _ = network_bound_graph(TINY, dist, lam, 1.0)
    dg.zero_grads(dist.parameters())
    dg.backward(mu)
    for t in ("normal", "reduce"):
        grad = dist.mu_alpha[t].grad
        assert np.all(grad[:, ZERO] == 0)
        assert np.all(np.delete(grad, ZERO, axis=1) > 0)
        bumped = dist.copy()
        bumped.mu_alpha[t].value[1, SKIP] += 0.1
        assert network_bound_dist(TINY, bumped, lam, 1.0).mu > base


# -- sampled bounds ----------------------------------------------------------

def test_sampled_bound_all_skip_is_one():
    spec = _identity_spec()
    alpha = np.zeros((1, 2, 8))
    beta = np.zeros((1, 2))
    alpha[0, 0, SKIP] = beta[0, 0] = 1.0
    lam = Supernet(spec, seed=0).lambdas()
    assert sampled_bound(spec, ArchSample(alpha, beta), lam, 1.0) == 1.0


def test_sampled_bound_zero_only_edges_give_zero():
    spec = _identity_spec(n_nodes=4)
    alpha = np.zeros((1, spec.n_edges, 8))
    alpha[0, :, ZERO] = 1.0
    lam = Supernet(spec, seed=0).lambdas()
    assert sampled_bound(spec, ArchSample(alpha, np.ones((1, spec.n_edges))), lam, 3.0) == 0.0


def test_sampled_bound_is_product_of_node_sums():
    dist = ArchDistribution.initial(TINY)
    net = Supernet(TINY, seed=0)
    lam, C = net.lambdas(), net.constant_C()
    s = sample_arch(TINY, dist, 0)
    sums = node_sums(s, lam, TINY)
    assert sums.shape == (2, 2)
    direct = C
    for k in range(2):
        e = 0
        for j in range(2, 4):
            total = 0.0
            for _ in range(j):
                total += s.beta[k, e] * float(s.alpha[k, e] @ lam[k, e])
                e += 1
            direct *= total
    assert sampled_bound(TINY, s, lam, C) == pytest.approx(direct, rel=1e-12)


def test_sampled_bounds_fit_network_distribution():
    spec = SupernetSpec()
    net = Supernet(spec, seed=2)
    dist = ArchDistribution.initial(spec)
    lam, C = net.lambdas(), net.constant_C()
    rng = np.random.default_rng(3)
    direct = [math.log(sampled_bound(spec, sample_arch(spec, dist, rng), lam, C)) for _ in range(2000)]
    ref = network_bound_dist(spec, dist, lam, C)
    assert abs(np.mean(direct) - ref.mu) <= 4 * math.sqrt(ref.var / 2000)


def test_bound_validity_on_probe_pairs():
    cases = suite_validity(n=50, seed=1, samples=5)
    assert all(c.ok for c in cases), [c for c in cases if not c.ok]


# -- discretization ------------------------------------------------------------

def test_discretize_dominant_mean():
    dist = ArchDistribution.initial(TINY)
    for t in ("normal", "reduce"):
        dist.mu_alpha[t].value[:] = -5.0
        dist.mu_alpha[t].value[:, OPS.index(K.DIL_LIN_A)] = 5.0
    g = discretize(TINY, dist)
    assert all(op == "dil_lin_a" for row in g.normal + g.reduce for _, op in row)


def test_discretize_never_picks_zero():
    dist = ArchDistribution.initial(TINY)
    for t in ("normal", "reduce"):
        dist.mu_alpha[t].value[:, ZERO] = 10.0
    g = discretize(TINY, dist)
    assert all(op != "zero" for row in g.normal + g.reduce for _, op in row)


def test_discretize_tie_rule():
    dist = ArchDistribution.initial(TINY, mu_alpha=0.0, mu_beta=0.0)
    g = discretize(TINY, dist)
    assert g.normal == (((0, "sep_lin_a"), (1, "sep_lin_a")), ((0, "sep_lin_a"), (1, "sep_lin_a")))


@pytest.mark.parametrize("seed", range(5))
def test_discretize_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    dist = ArchDistribution.initial(TINY)
    for p in dist.parameters():
        p.value = rng.uniform(-2, 2, p.shape)
    g = discretize(TINY, dist)
    for t in ("normal", "reduce"):
        va = np.exp(2 * dist.log_sigma_alpha[t].value)
        vb = np.exp(2 * dist.log_sigma_beta[t].value)
        rows = brute_force_genotype(TINY.n_nodes, dist.mu_alpha[t].value, va, dist.mu_beta[t].value, vb, ZERO)
        expected = tuple(tuple((i, OPS[o].value) for i, o in row) for row in rows)
        assert g.table(t) == expected


@pytest.mark.parametrize("shift", [-3.0, 0.7, 4.0])
def test_discretize_per_edge_shift_invariance(shift):
    # node 2 has exactly two predecessors, so edge (0, 2) is always kept
    # and its chosen op is visible in the genotype
    rng = np.random.default_rng(8)
    dist = ArchDistribution.initial(TINY)
    dist.mu_alpha["normal"].value = rng.uniform(-1, 1, (TINY.n_edges, 8))
    shifted = dist.copy()
    shifted.mu_alpha["normal"].value[0] += shift
    assert discretize(TINY, dist).normal[0][0] == discretize(TINY, shifted).normal[0][0]


def test_discretize_lower_scoring_penalises_spread():
    dist = ArchDistribution.initial(TINY, mu_alpha=0.0)
    for t in ("normal", "reduce"):
        dist.log_sigma_alpha[t].value[:, OPS.index(K.SEP_LIN_A)] = math.log(1.0)
    mean_pick = discretize(TINY, dist)
    lower_pick = discretize(TINY, dist, scoring="lower", confidence=0.9)
    assert mean_pick.normal[0][0][1] == "sep_lin_a"
    assert lower_pick.normal[0][0][1] == "sep_lin_b"
    with pytest.raises(ValueError):
        discretize(TINY, dist, scoring="median")


def test_discretize_scores_are_expectations():
    dist = ArchDistribution.initial(TINY)
    p = dist.edge_alpha("normal", 0)[0]
    assert ln_mean(p) == pytest.approx(math.exp(p.mu + p.var / 2))


# -- genotype -------------------------------------------------------------------

@pytest.mark.parametrize("row", [
    ((0, "skip"),),                          # one input only
    ((0, "skip"), (0, "max_pool")),          # repeated predecessor
    ((0, "skip"), (2, "max_pool")),          # predecessor not earlier
    ((0, "skip"), (1, "zero")),              # zero op
])
def test_genotype_rejects_invalid_rows(row):
    ok = ((0, "skip"), (1, "skip"))
    with pytest.raises(ValueError):
        Genotype((row,), (ok,))


def test_genotype_rejects_unknown_op():
    with pytest.raises(ValueError):
        Genotype((((0, "conv"), (1, "skip")),), (((0, "skip"), (1, "skip")),))


def test_genotype_equality_ignores_meta():
    g = _genotype_tiny()
    h = Genotype(g.normal, g.reduce, meta={"seed": 4})
    assert g == h and hash(g) == hash(h)
