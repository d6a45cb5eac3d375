import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gumbel_rao.gumbel_core import (
    DimensionError,
    OneHotSample,
    RngStream,
    check_logits,
    jacobian_contract,
    log_partition,
    posterior_gumbels_from_exponentials,
    sample_categorical_gumbel_max,
    sample_gumbel,
    sample_posterior_gumbels,
    tempered_softmax,
    tempered_softmax_jacobian,
)
from gumbel_rao.checks import central_difference_jacobian, posterior_law_zscores

GAMMA = 0.5772156649015329
N = 10**6

logits = st.integers(2, 8).flatmap(
    lambda n: arrays(np.float64, n, elements=st.floats(-20, 20, allow_nan=False, allow_infinity=False))
)
taus = st.floats(0.05, 5.0)


def test_gumbel_moments():
    g = sample_gumbel(RngStream(1, 0), N)
    var = np.pi**2 / 6
    assert abs(g.mean() - GAMMA) < 4 * np.sqrt(var / N)
    # Var(sample variance) ~ (kurtosis - 1) sigma^4 / N; Gumbel kurtosis is 5.4
    assert abs(g.var() - var) < 4 * np.sqrt((5.4 - 1) * var**2 / N)


def test_streams_are_deterministic_and_distinct():
    a = sample_gumbel(RngStream(3, 7), 100)
    assert np.array_equal(a, sample_gumbel(RngStream(3, 7), 100))
    assert not np.array_equal(a, sample_gumbel(RngStream(3, 8), 100))
    assert not np.array_equal(a, sample_gumbel(RngStream(4, 7), 100))
    s = RngStream(3, 7)
    assert s.split(1) == s.split(1) != s.split(2)


def test_gumbel_max_marginal_two_categories():
    d, _ = sample_categorical_gumbel_max(RngStream(2, 0), np.array([0.0, np.log(3.0)]), size=N)
    freq = np.mean(d.index == 1)
    assert abs(freq - 0.75) < 4 * np.sqrt(0.25 * 0.75 / N)


def test_gumbel_max_uniform_and_consistent():
    d, pert = sample_categorical_gumbel_max(RngStream(2, 1), np.zeros(3), size=N)
    freq = np.bincount(d.index, minlength=3) / N
    assert np.all(np.abs(freq - 1 / 3) < 4 * np.sqrt(2 / 9 / N))
    assert np.array_equal(np.argmax(pert.values, axis=-1), d.index)


def test_single_draw_has_scalar_index():
    d, pert = sample_categorical_gumbel_max(RngStream(0, 0), np.array([0.1, 0.2, 0.3]))
    assert isinstance(d.index, int) and pert.values.shape == (3,)
    assert d.vector().tolist() == np.eye(3)[d.index].tolist()


def test_posterior_active_coordinate_location():
    x = sample_posterior_gumbels(RngStream(5, 0), np.zeros(2), OneHotSample(0, 2), size=N).values
    assert abs(x[:, 0].mean() - (GAMMA + np.log(2))) < 4 * np.sqrt(np.pi**2 / 6 / N)
    assert np.all(np.argmax(x, axis=-1) == 0)


@pytest.mark.parametrize("theta", [[0.5, -0.3, 1.1], [-1.0, 2.0, 0.0]])
def test_posterior_matches_rejection_filter(theta):
    zm, zv = posterior_law_zscores(theta, 2, 400_000, RngStream(6, 0))
    assert zm.max() < 4 and zv.max() < 4


@settings(max_examples=50, deadline=None)
@given(logits, st.integers(0, 2**31))
def test_posterior_argmax_always_conditioned(theta, seed):
    idx = seed % theta.size
    x = sample_posterior_gumbels(RngStream(seed, 0), theta, OneHotSample(idx, theta.size), size=200).values
    assert np.all(np.argmax(x, axis=-1) == idx)


def test_posterior_tiny_exponentials_stay_ordered():
    theta = np.array([0.0, 30.0, -30.0])
    e = np.array([[1e-300, 1e-300, 1e-300], [50.0, 1e-12, 700.0]])
    x = posterior_gumbels_from_exponentials(theta, np.array([2, 2]), e)
    # ties can appear once E_j exp(-theta_j) underflows relative to E_i / Z
    assert np.all(np.isfinite(x)) and np.all(x[:, 2] >= x.max(axis=-1))


def test_softmax_examples():
    assert np.allclose(tempered_softmax(np.zeros(3), 1.0), 1 / 3)
    assert np.allclose(tempered_softmax(np.array([0.0, np.log(3.0)]), 1.0), [0.25, 0.75])
    s = tempered_softmax(np.array([1000.0, 0.0]), 1.0)
    assert s.tolist() == [1.0, 0.0]


@settings(max_examples=100, deadline=None)
@given(logits, taus)
def test_softmax_on_simplex(x, tau):
    s = tempered_softmax(x, tau)
    assert np.all(s >= 0) and abs(s.sum() - 1) < 1e-12


def test_jacobian_examples():
    jac = tempered_softmax_jacobian(np.array([0.0, np.log(3.0)]), 1.0)
    assert np.allclose(jac, [[0.1875, -0.1875], [-0.1875, 0.1875]], atol=1e-15)
    jac = tempered_softmax_jacobian(np.zeros(3), 0.5)
    assert np.allclose(jac, 2 * (np.eye(3) / 3 - np.ones((3, 3)) / 9), atol=1e-15)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.integers(2, 8), elements=st.floats(-4, 4)), st.floats(0.2, 3.0))
def test_jacobian_matches_finite_differences(x, tau):
    jac = tempered_softmax_jacobian(x, tau)
    fd = central_difference_jacobian(x, tau)
    assert np.max(np.abs(jac - fd)) / max(1.0, np.abs(jac).max()) < 1e-6


@settings(max_examples=100, deadline=None)
@given(logits, taus)
def test_jacobian_structure_and_contraction(x, tau):
    jac = tempered_softmax_jacobian(x, tau)
    assert np.allclose(jac, jac.T, atol=1e-15)
    assert np.allclose(jac.sum(axis=-1), 0.0, atol=1e-12 / tau)
    v = np.linspace(-1, 1, x.size)
    assert np.allclose(jacobian_contract(v, tempered_softmax(x, tau), tau), v @ jac, atol=1e-12 / tau)


def test_log_partition_examples():
    assert np.isclose(log_partition(np.zeros(2)), np.log(2))
    assert log_partition(np.array([1000.0, 1000.0])) == pytest.approx(1000 + np.log(2), abs=1e-12)
    assert np.isclose(log_partition(np.array([0.0, np.log(3.0)])), np.log(4))


@pytest.mark.parametrize("bad", [[1.0], [0.0, np.nan], [np.inf, 0.0]])
def test_logit_validation(bad):
    with pytest.raises((DimensionError, ValueError)):
        check_logits(bad)


@pytest.mark.parametrize("tau", [0.0, -1.0, np.nan, np.inf])
def test_temperature_validation(tau):
    with pytest.raises(ValueError):
        tempered_softmax(np.zeros(2), tau)
