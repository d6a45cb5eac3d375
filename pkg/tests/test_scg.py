import numpy as np
import pytest

from gumbel_rao.estimators import constant_objective, estimate_grmc, estimate_st, estimate_stgs, random_table_objective
from gumbel_rao.gumbel_core import DimensionError, RngStream, jacobian_contract, tempered_softmax
from gumbel_rao.oracle import (
    exact_gradient,
    exact_parallel_gradient,
    exact_sequential_gradient,
    exact_sequential_objective,
)
from gumbel_rao.scg import (
    ChainObjective,
    ConfigurationError,
    Surrogate,
    backward_parallel,
    backward_sequential,
    constant_link,
    forward_parallel,
    forward_sequential,
    linear_link,
    random_chain_objective,
    separable_chain_objective,
)


def single_node(obj):
    return ChainObjective(1, obj.arity, lambda x: obj.eval(x[..., 0, :]), lambda x: obj.grad(x[..., 0, :])[..., None, :])


def scaled(obj, alpha):
    return ChainObjective(obj.m, obj.n, lambda x: alpha * obj.eval(x), lambda x: alpha * obj.partials(x))


def replicate_parallel(thetas, obj, sur, n_rep, seed, chunk=50_000):
    out = []
    for i, start in enumerate(range(0, n_rep, chunk)):
        g = forward_parallel(RngStream(seed, i), thetas, obj, sur, replicates=min(chunk, n_rep - start))
        out.append(backward_parallel(g))
    return np.concatenate(out)


def replicate_sequential(theta1, links, obj, sur, n_rep, seed, chunk=50_000):
    out = []
    for i, start in enumerate(range(0, n_rep, chunk)):
        g = forward_sequential(RngStream(seed, i), theta1, links, obj, sur, replicates=min(chunk, n_rep - start))
        out.append(backward_sequential(g).theta1)
    return np.concatenate(out)


def within_4sigma(samples, ref):
    se = samples.std(axis=0, ddof=1) / np.sqrt(len(samples))
    return np.all(np.abs(samples.mean(axis=0) - ref) <= 4 * se + 1e-12)


THETA = np.array([0.3, -0.7, 1.2])


@pytest.mark.parametrize("mode", ["st", "stgs"])
def test_single_node_reduces_to_estimator(mode):
    obj = random_table_objective(RngStream(0, 0), 3)
    rng = RngStream(5, 0)
    graph = forward_parallel(rng, THETA[None], single_node(obj), Surrogate(mode, 0.5), replicates=200)
    grads = backward_parallel(graph)[:, 0]
    fn = estimate_st if mode == "st" else estimate_stgs
    est = fn(rng.split(0), THETA, 0.5, obj, replicates=200)
    assert np.array_equal(graph.index[:, 0], est.outcome)
    assert np.allclose(grads, est.values, rtol=0, atol=1e-15)


def test_single_node_grmc_matches_estimator_in_law():
    obj = random_table_objective(RngStream(0, 0), 3)
    chain = single_node(obj)
    g = replicate_parallel(THETA[None], chain, Surrogate("grmc", 0.5, 10), 100_000, 1)[:, 0]
    e = estimate_grmc(RngStream(2, 0), THETA, 0.5, obj, 10, replicates=100_000).values
    se = np.sqrt(g.var(0, ddof=1) / len(g) + e.var(0, ddof=1) / len(e))
    assert np.all(np.abs(g.mean(0) - e.mean(0)) < 4 * se)


def test_separable_st_first_node_ignores_second():
    g1 = random_table_objective(RngStream(1, 0), 3)
    g2 = random_table_objective(RngStream(1, 1), 3)
    obj = separable_chain_objective([g1, g2])
    thetas = np.stack([THETA, -THETA])
    graph = forward_parallel(RngStream(1, 2), thetas, obj, Surrogate("st", 0.5), replicates=500)
    grads = backward_parallel(graph)
    d1 = graph.samples[:, 0]
    expected = jacobian_contract(g1.grad(d1), tempered_softmax(THETA, 0.5), 0.5)
    assert np.allclose(grads[:, 0], expected, rtol=0, atol=1e-15)


def test_parallel_reinforce_matches_enumeration():
    obj = random_chain_objective(RngStream(2, 0), 3, 2)
    thetas = RngStream(2, 1).generator().normal(size=(3, 2))
    ref = exact_parallel_gradient(thetas, obj)
    g = replicate_parallel(thetas, obj, Surrogate("reinforce"), 400_000, 3)
    assert within_4sigma(g.reshape(len(g), -1), ref.ravel())


@pytest.mark.parametrize("sur", [Surrogate("st", 0.5), Surrogate("stgs", 0.5), Surrogate("grmc", 0.5, 20)])
def test_constant_objective_zero_gradients(sur):
    const = constant_objective(2, 4.0)
    obj = separable_chain_objective([const, const])
    graph = forward_parallel(RngStream(0, 0), np.zeros((2, 2)), obj, sur, replicates=100)
    assert np.all(backward_parallel(graph) == 0.0)
    seq = forward_sequential(RngStream(0, 0), np.zeros(2), [linear_link(np.eye(2))], obj, sur, replicates=100)
    assert np.all(backward_sequential(seq).nodes == 0.0)


def test_grmc_one_matches_stgs_per_node():
    obj = random_chain_objective(RngStream(3, 0), 2, 3)
    thetas = np.stack([THETA, THETA[::-1]])
    a = replicate_parallel(thetas, obj, Surrogate("stgs", 0.5), 200_000, 4)
    b = replicate_parallel(thetas, obj, Surrogate("grmc", 0.5, 1), 200_000, 5)
    se = np.sqrt(a.var(0, ddof=1) / len(a) + b.var(0, ddof=1) / len(b))
    assert np.all(np.abs(a.mean(0) - b.mean(0)) < 4 * se)


def test_grmc100_per_node_trace_below_stgs():
    obj = random_chain_objective(RngStream(4, 0), 2, 2)
    thetas = np.array([[0.2, -0.4], [1.0, 0.0]])
    a = replicate_parallel(thetas, obj, Surrogate("stgs", 0.5), 100_000, 6)
    b = replicate_parallel(thetas, obj, Surrogate("grmc", 0.5, 100), 100_000, 6)
    for j in range(2):
        assert np.trace(np.cov(b[:, j].T)) <= np.trace(np.cov(a[:, j].T))


def test_zero_link_gives_uniform_second_node():
    obj = random_chain_objective(RngStream(5, 0), 2, 2)
    link = linear_link(np.zeros((2, 2)))
    graph = forward_sequential(RngStream(5, 1), np.array([3.0, -3.0]), [link], obj, Surrogate("st", 1.0), replicates=200_000)
    assert np.all(graph.thetas[:, 1] == 0.0)
    freq = np.mean(graph.index[:, 1] == 0)
    assert abs(freq - 0.5) < 4 * np.sqrt(0.25 / 200_000)


def test_sequential_reinforce_matches_enumeration():
    obj = random_chain_objective(RngStream(6, 0), 2, 2)
    link = linear_link(RngStream(6, 1).generator().normal(size=(2, 2)), np.array([0.1, -0.2]))
    theta1 = np.array([0.4, -0.3])
    ref = exact_sequential_gradient(theta1, [link], obj)
    g = replicate_sequential(theta1, [link], obj, Surrogate("reinforce"), 400_000, 7)
    assert within_4sigma(g, ref)


def test_sequential_enumeration_matches_finite_differences():
    obj = random_chain_objective(RngStream(6, 0), 3, 2)
    links = [linear_link(np.array([[1.0, -2.0], [0.5, 0.3]])), linear_link(np.array([[0.2, 0.1], [-1.0, 2.0]]))]
    theta1 = np.array([0.4, -0.3])
    g = exact_sequential_gradient(theta1, links, obj)
    e = np.array([1e-6, 0.0])
    fd0 = (exact_sequential_objective(theta1 + e, links, obj) - exact_sequential_objective(theta1 - e, links, obj)) / 2e-6
    assert g[0] == pytest.approx(fd0, rel=1e-6, abs=1e-9)


def test_forward_pass_is_mode_independent():
    obj = random_chain_objective(RngStream(7, 0), 2, 3)
    link = linear_link(np.eye(3))
    graphs = [
        forward_sequential(RngStream(7, 1), THETA, [link], obj, sur, replicates=300)
        for sur in (Surrogate("reinforce"), Surrogate("st", 0.3), Surrogate("stgs", 0.3), Surrogate("grmc", 0.3, 5))
    ]
    for g in graphs[1:]:
        assert np.array_equal(g.index, graphs[0].index)
        assert np.array_equal(g.f, graphs[0].f)


@pytest.mark.parametrize("sur", [Surrogate("st", 0.5), Surrogate("stgs", 0.5), Surrogate("grmc", 0.5, 8)])
def test_constant_link_matches_parallel(sur):
    obj = random_chain_objective(RngStream(8, 0), 2, 3)
    theta2 = np.array([0.5, 0.0, -0.5])
    seq = forward_sequential(RngStream(8, 1), THETA, [constant_link(theta2)], obj, sur, replicates=400)
    par = forward_parallel(RngStream(8, 1), np.stack([THETA, theta2]), obj, sur, replicates=400)
    assert np.array_equal(seq.index, par.index)
    assert np.allclose(backward_sequential(seq).nodes, backward_parallel(par), rtol=0, atol=1e-14)


@pytest.mark.parametrize("sur", [Surrogate("st", 0.5), Surrogate("stgs", 0.5), Surrogate("grmc", 0.5, 8)])
def test_single_node_sequential_matches_parallel(sur):
    obj = single_node(random_table_objective(RngStream(9, 0), 3))
    seq = forward_sequential(RngStream(9, 1), THETA, [], obj, sur, replicates=300)
    par = forward_parallel(RngStream(9, 1), THETA[None], obj, sur, replicates=300)
    assert np.allclose(backward_sequential(seq).theta1, backward_parallel(par)[:, 0], rtol=0, atol=1e-15)


def test_first_node_only_objective_with_flat_link():
    g1 = random_table_objective(RngStream(10, 0), 2)
    obj = separable_chain_objective([g1, constant_objective(2, 0.0)])
    seq = forward_sequential(RngStream(10, 1), np.array([0.2, 0.1]), [constant_link(np.zeros(2))], obj, Surrogate("stgs", 0.5), replicates=200)
    grads = backward_sequential(seq)
    assert np.all(grads.nodes[:, 1] == 0.0)
    expected = jacobian_contract(g1.grad(seq.samples[:, 0]), tempered_softmax(seq.perturbed[:, 0], 0.5), 0.5)
    assert np.allclose(grads.theta1, expected, rtol=0, atol=1e-15)


@pytest.mark.parametrize("sur", [Surrogate("st", 0.5), Surrogate("stgs", 0.5), Surrogate("grmc", 0.5, 8)])
def test_backward_is_linear_in_frozen_partials(sur):
    obj = random_chain_objective(RngStream(11, 0), 2, 3)
    link = linear_link(RngStream(11, 1).generator().normal(size=(3, 3)))
    a = backward_sequential(forward_sequential(RngStream(11, 2), THETA, [link], obj, sur, replicates=100)).nodes
    b = backward_sequential(forward_sequential(RngStream(11, 2), THETA, [link], scaled(obj, -2.5), sur, replicates=100)).nodes
    assert np.allclose(b, -2.5 * a, rtol=1e-12, atol=1e-14)


def test_stop_gradient_value_is_frozen():
    obj = random_chain_objective(RngStream(12, 0), 2, 2)
    graph = forward_parallel(RngStream(12, 1), np.zeros((2, 2)), obj, Surrogate("st", 1.0), replicates=10)
    before = backward_parallel(graph)
    assert np.array_equal(graph.partials.value, obj.partials(graph.points))
    assert np.array_equal(backward_parallel(graph), before)


def test_grmc1000_theta1_mse_not_above_stgs():
    obj = random_chain_objective(RngStream(13, 0), 2, 2)
    link = linear_link(RngStream(13, 1).generator().normal(size=(2, 2)))
    theta1 = np.array([0.3, -0.2])
    ref = exact_sequential_gradient(theta1, [link], obj)
    a = replicate_sequential(theta1, [link], obj, Surrogate("stgs", 0.5), 20_000, 14)
    b = replicate_sequential(theta1, [link], obj, Surrogate("grmc", 0.5, 1000), 20_000, 14)
    ea, eb = np.sum((a - ref) ** 2, 1), np.sum((b - ref) ** 2, 1)
    d = eb - ea
    assert d.mean() <= 4 * d.std(ddof=1) / np.sqrt(len(d))


def test_configuration_errors():
    obj = random_chain_objective(RngStream(0, 0), 2, 2)
    with pytest.raises(ConfigurationError):
        Surrogate("nope")
    with pytest.raises(ValueError):
        Surrogate("st", 0.0)
    with pytest.raises(DimensionError):
        forward_parallel(RngStream(0, 0), np.zeros((3, 2)), obj, Surrogate("st"))
    with pytest.raises(DimensionError):
        forward_sequential(RngStream(0, 0), np.zeros(2), [], obj, Surrogate("st"))
    with pytest.raises(ConfigurationError):
        ChainObjective(2, 2, lambda x: np.sum(x, axis=(-1, -2)), lambda x: 0 * x)
    graph = forward_parallel(RngStream(0, 0), np.zeros((2, 2)), obj, Surrogate("st"))
    with pytest.raises(ConfigurationError):
        backward_sequential(graph)


def test_surrogate_parse():
    assert Surrogate.parse("grmc100", 0.3) == Surrogate("grmc", 0.3, 100)
    assert Surrogate.parse("ST-GS").mode == "stgs"
