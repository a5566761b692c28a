import numpy as np
import pytest
from hypothesis import given, strategies as st

from racl import diffgraph as dg
from racl.operations import (
    OPS,
    OperationKind,
    apply_op,
    effective_matrix,
    effective_matrix_value,
    init_op_params,
    op_lipschitz,
    power_iteration,
    power_iteration_batch,
    spectral_norm_node,
)

from oracles import jacobi_singular_values

K = OperationKind


def test_eight_kinds_with_constant_table():
    assert len(OPS) == 8
    assert op_lipschitz(K.AVG_POOL, stride=2) == pytest.approx(0.70711, abs=1e-5)
    assert op_lipschitz(K.AVG_POOL, stride=1) == 1.0
    assert op_lipschitz(K.ZERO) == 0.0
    assert op_lipschitz(K.MAX_POOL) == 1.0
    assert op_lipschitz(K.SKIP) == 1.0


def test_weighted_kind_needs_weights():
    assert op_lipschitz(K.SEP_LIN_A, np.diag([3.0, 1.0])) == pytest.approx(3.0, rel=1e-14)
    with pytest.raises(ValueError):
        op_lipschitz(K.DIL_LIN_B)
    with pytest.raises(ValueError):
        K.SEP_LIN_A.constant_lipschitz()


def test_power_iteration_trivial_cases():
    assert power_iteration(np.eye(4)) == pytest.approx(1.0, rel=1e-14)
    assert power_iteration(np.diag([5.0, 2.0, 1.0])) == pytest.approx(5.0, rel=1e-14)
    assert power_iteration(np.zeros((3, 3))) == 0.0
    with pytest.raises(ValueError):
        power_iteration(np.eye(2), max_iters=0)


def test_power_iteration_start_in_null_space():
    # the fixed start vector is orthogonal to the only non-null direction
    v = np.random.default_rng(2).standard_normal(2)
    W = np.outer([1.0, 0.0], [-v[1], v[0]]) * 2.0 / np.hypot(*v)
    assert power_iteration(W) == pytest.approx(2.0, rel=1e-12)


def test_power_iteration_matches_jacobi_oracle():
    W = np.random.default_rng(0).standard_normal((8, 8))
    assert power_iteration(W) == pytest.approx(jacobi_singular_values(W)[0], rel=1e-8)


@given(st.integers(1, 16), st.integers(1, 16), st.integers(0, 10**6))
def test_power_iteration_rectangular(m, n, seed):
    W = np.random.default_rng(seed).standard_normal((m, n))
    s = jacobi_singular_values(W)
    if len(s) > 1 and s[1] > 0.95 * s[0]:
        return  # too small a spectral gap for a fixed iteration budget
    assert power_iteration(W) == pytest.approx(s[0], rel=1e-8)


def test_batched_power_iteration_agrees():
    rng = np.random.default_rng(1)
    Ws = rng.standard_normal((12, 6, 5))
    Ws[3] = 0.0
    sig, vs = power_iteration_batch(Ws)
    assert sig[3] == 0.0
    for k in range(12):
        if k != 3:
            assert sig[k] == pytest.approx(power_iteration(Ws[k]), rel=1e-10)
            assert np.linalg.norm(vs[k]) == pytest.approx(1.0)


def test_spectral_norm_node_value_and_gradient():
    W = dg.parameter(np.random.default_rng(4).standard_normal((5, 4)))
    node = spectral_norm_node(W)
    assert node.item() == pytest.approx(np.linalg.norm(W.value, 2), rel=1e-10)
    dg.backward(node)
    U, S, Vt = np.linalg.svd(W.value)
    uv = np.outer(U[:, 0], Vt[0])
    uv *= np.sign(uv[0, 0] * W.grad[0, 0])
    # v converges like the square root of the singular-value tolerance
    np.testing.assert_allclose(W.grad, uv, atol=1e-6)


@pytest.mark.parametrize("kind", [k for k in OPS if k.weighted])
def test_effective_matrix_twins(kind):
    rng = np.random.default_rng(0)
    params = init_op_params(kind, 8, 6, rng)
    graph = effective_matrix(kind, {n: dg.parameter(v) for n, v in params.items()})
    np.testing.assert_allclose(graph.value, effective_matrix_value(kind, params), rtol=0, atol=1e-15)
    assert graph.shape == (6, 8)


def test_depthwise_band_structure():
    params = init_op_params(K.DIL_LIN_A, 8, 8, np.random.default_rng(0))
    params["P"] = np.eye(8)
    W = effective_matrix_value(K.DIL_LIN_A, params)
    # taps at offsets -2, 0, +2 (dilation 2), circular
    assert set(np.flatnonzero(W[0])) == {6, 0, 2}
    assert W[0, 6] == params["D0"][0, 0] and W[0, 2] == params["D0"][0, 2]


def test_parameter_counts_differ_between_kinds():
    rng = np.random.default_rng(0)
    sizes = {k: sum(v.size for v in init_op_params(k, 16, 16, rng).values()) for k in OPS if k.weighted}
    assert len(set(sizes.values())) == 4
    assert init_op_params(K.SKIP, 16, 16, rng) == {}


def _out(kind, x, stride, W=None):
    y = apply_op(kind, dg.tensor(x), stride, W)
    return np.zeros((x.shape[0], x.shape[1] // stride)) if y is None else y.value


@pytest.mark.parametrize("kind", OPS)
@pytest.mark.parametrize("stride", [1, 2])
def test_empirical_lipschitz_within_constant(kind, stride):
    rng = np.random.default_rng([OPS.index(kind), stride])
    n = 16
    W = None
    if kind.weighted:
        params = init_op_params(kind, n, n // stride, rng)
        W = dg.tensor(effective_matrix_value(kind, params))
        lam = op_lipschitz(kind, W.value)
    else:
        lam = op_lipschitz(kind, stride=stride)
    x = rng.standard_normal((500, n))
    y = x + rng.standard_normal((500, n)) * rng.uniform(1e-3, 1.0, (500, 1))
    ratio = np.linalg.norm(_out(kind, x, stride, W) - _out(kind, y, stride, W), axis=1) / np.linalg.norm(x - y, axis=1)
    assert np.all(ratio <= lam * (1 + 1e-12))
    assert _out(kind, x, stride, W).shape == (500, n // stride)


def test_pooling_and_skip_values():
    x = np.array([[1.0, 4.0, 2.0, 8.0]])
    np.testing.assert_allclose(_out(K.SKIP, x, 1), x)
    np.testing.assert_allclose(_out(K.SKIP, x, 2), [[1.0, 2.0]])
    np.testing.assert_allclose(_out(K.AVG_POOL, x, 2), [[2.5, 5.0]])
    np.testing.assert_allclose(_out(K.MAX_POOL, x, 2), [[4.0, 8.0]])
    np.testing.assert_allclose(_out(K.AVG_POOL, x, 1), [[13 / 3, 7 / 3, 14 / 3, 11 / 3]])
    np.testing.assert_allclose(_out(K.MAX_POOL, x, 1), np.array([[8.0, 4.0, 8.0, 8.0]]) / np.sqrt(3))
    assert apply_op(K.ZERO, dg.tensor(x), 1) is None
