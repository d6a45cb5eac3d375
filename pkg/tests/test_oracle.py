import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gumbel_rao.estimators import constant_objective, linear_objective, random_table_objective
from gumbel_rao.gumbel_core import RngStream, sample_gumbel, tempered_softmax, tempered_softmax_jacobian
from gumbel_rao.oracle import (
    CapacityError,
    KahanSum,
    PoisonedRunError,
    StreamingMoments,
    compare_paired,
    conditional_moments,
    decompose_variance,
    estimator_fn,
    exact_gradient,
    exact_parallel_gradient,
    expected_objective,
    gr_reference,
    measure_stats,
    reinforce_reference,
    variance_components,
)
from gumbel_rao.scg import random_chain_objective

THETA = np.array([0.3, -0.7, 1.2])


def test_exact_gradient_closed_form():
    assert np.allclose(exact_gradient(np.zeros(2), linear_objective([1.0, 0.0])), [0.25, -0.25], atol=1e-15)
    assert np.all(exact_gradient(THETA, constant_objective(3, 7.0)) == 0.0)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.integers(2, 6), elements=st.floats(-3, 3)), st.integers(0, 1000))
def test_exact_gradient_finite_differences(theta, seed):
    obj = random_table_objective(RngStream(seed, 0), theta.size)
    g = exact_gradient(theta, obj)
    fd = np.empty_like(g)
    for j in range(theta.size):
        e = np.zeros_like(theta)
        e[j] = 1e-6
        fd[j] = (expected_objective(theta + e, obj) - expected_objective(theta - e, obj)) / 2e-6
    assert np.max(np.abs(g - fd)) / max(1.0, np.abs(g).max()) < 1e-6


def test_parallel_gradient_single_node_matches():
    from gumbel_rao.scg import ChainObjective

    obj = random_table_objective(RngStream(1, 0), 3)
    chain = ChainObjective(1, 3, lambda x: obj.eval(x[..., 0, :]), lambda x: obj.grad(x[..., 0, :])[..., None, :])
    assert np.allclose(exact_parallel_gradient(THETA[None], chain)[0], exact_gradient(THETA, obj), atol=1e-14)


def test_capacity_guard():
    obj = random_chain_objective(RngStream(0, 0), 21, 2)
    with pytest.raises(CapacityError):
        exact_parallel_gradient(np.zeros((21, 2)), obj)


def test_moments_constant_estimator():
    v = np.array([1.0, -2.0, 3.0])
    st_ = measure_stats(lambda s, c: np.tile(v, (c, 1)), v, 1000, RngStream(0, 0))
    assert st_.cov_trace == 0.0 and st_.bias_norm == 0.0 and st_.mse == 0.0


def test_moments_gaussian_noise():
    ref = np.array([0.5, 0.0, -1.0])
    st_ = measure_stats(lambda s, c: ref + s.generator().standard_normal((c, 3)), ref, 200_000, RngStream(1, 0))
    assert abs(st_.cov_trace - 3.0) < st_.cov_trace_radius
    assert abs(st_.mse - 3.0) < st_.mse_radius
    assert abs(st_.mse - (st_.cov_trace + st_.bias_norm**2)) < 1e-10


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 400), st.integers(1, 400), st.integers(0, 2**32))
def test_streaming_merge_matches_batch(na, nb, seed):
    gen = np.random.default_rng(seed)
    x = gen.normal(size=(na + nb, 3)) * [1.0, 10.0, 0.1] + 1e4
    a, b = StreamingMoments(3), StreamingMoments(3)
    a.add_batch(x[:na])
    b.add_batch(x[na:])
    a.merge(b)
    assert a.count == na + nb
    assert np.allclose(a.mean, x.mean(axis=0), rtol=0, atol=1e-9)
    assert np.allclose(a.covariance(), np.cov(x.T, bias=True), rtol=1e-8, atol=1e-12)


def test_kahan_sum_recovers_small_terms():
    k = KahanSum()
    k.add(1.0)
    for _ in range(10_000):
        k.add(1e-16)
    assert k.total == pytest.approx(1.0 + 1e-12, abs=1e-16)


def test_poisoned_run_names_stream():
    with pytest.raises(PoisonedRunError, match="seed=4"):
        measure_stats(lambda s, c: np.full((c, 2), np.nan), np.zeros(2), 10, RngStream(4, 0))


def test_reinforce_unbiased_and_stgs_worse_than_grmc100():
    obj = random_table_objective(RngStream(2, 0), 3)
    ref = exact_gradient(THETA, obj)
    rf = measure_stats(estimator_fn("reinforce", THETA, obj), ref, 200_000, RngStream(2, 1))
    assert np.all(np.abs(rf.bias) <= rf.mean_radius)
    cmp = compare_paired(
        estimator_fn("stgs", THETA, obj, 0.1), estimator_fn("grmc100", THETA, obj, 0.1), ref, 100_000, RngStream(2, 2)
    )
    assert cmp.mse_difference > cmp.mse_difference_radius


def test_gr_reference_flat_regime():
    # relative distance to the saturated Jacobian shrinks like 1/tau
    rel = []
    for tau in (1e2, 1e3, 1e4):
        jac, se = gr_reference(np.zeros(3), tau, 0, 100_000, RngStream(0, 0))
        flat = (np.eye(3) / 3 - 1 / 9) / tau
        rel.append(np.max(np.abs(jac - flat)) * tau / 0.25)
    assert rel[2] < 1e-3
    assert rel[0] / rel[1] == pytest.approx(10, rel=0.2) and rel[1] / rel[2] == pytest.approx(10, rel=0.2)


def test_gr_reference_self_consistency():
    a, sa = gr_reference(np.zeros(2), 1.0, 0, 10**6, RngStream(1, 0))
    b, sb = gr_reference(np.zeros(2), 1.0, 0, 10**6, RngStream(1, 1))
    assert np.all(np.abs(a - b) <= 6 * np.hypot(sa, sb))


def test_gr_reference_tower_rule():
    tau = 0.5
    p = tempered_softmax(THETA, 1.0)
    tower = np.zeros((3, 3))
    var = np.zeros((3, 3))
    for d in range(3):
        jac, se = gr_reference(THETA, tau, d, 200_000, RngStream(3, d))
        tower += p[d] * jac
        var += (p[d] * se) ** 2
    x = THETA + sample_gumbel(RngStream(3, 9), 3, size=600_000)
    jacs = tempered_softmax_jacobian(x, tau)
    direct = jacs.mean(axis=0)
    direct_se = jacs.std(axis=0, ddof=1) / np.sqrt(len(x))
    assert np.all(np.abs(tower - direct) <= 4 * np.sqrt(var + direct_se**2) + 1e-12)


def test_conditional_moments_within_matches_stgs_given_outcome():
    v = np.array([1.0, -1.0, 0.5])
    cm = conditional_moments(THETA, 0.5, 1, 50_000, RngStream(0, 0), v=v)
    assert cm.within_trace > 0 and cm.gr.shape == (3,)
    assert np.allclose(cm.gr, v @ cm.jacobian)


def test_constant_objective_has_no_variance_components():
    a, c = variance_components(THETA, 0.5, constant_objective(3, 2.0), RngStream(0, 0), k_ref=1000)
    assert a == 0.0 and c == 0.0


def test_decomposition_limits():
    obj = random_table_objective(RngStream(4, 0), 3)
    rep = decompose_variance(THETA, 0.5, obj, [1, 1000], [1], 50_000, RngStream(4, 1), k_ref=200_000)
    first, last = rep.grid
    assert abs(first["measured"] - (rep.a + rep.c)) / first["measured"] < 0.05
    assert abs(last["measured"] - rep.c) <= last["measured_radius"] + rep.a / 1000 + 0.02 * rep.c
    preds = [r["predicted"] for r in rep.grid]
    assert preds[0] > preds[1] > rep.c
    assert rep.as_dict()["version"] == 1


def test_reinforce_reference_brackets_enumeration():
    obj = random_table_objective(RngStream(5, 0), 3)
    mean, radius = reinforce_reference(THETA, obj, 200_000, RngStream(5, 1))
    assert np.all(np.abs(mean - exact_gradient(THETA, obj)) <= radius)
