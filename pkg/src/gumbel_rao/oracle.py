"""Ground truth and measurement.

* exact gradients by enumerating outcomes (single variable and chains),
* a high-K reference for the conditional Jacobian ``E[J(theta + G) | D]``,
* streamed replicate statistics (mean, covariance trace, bias, MSE) with
  4-sigma radii, and
* the within/between-outcome variance decomposition of minibatched GR-MC.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .estimators import ObjectiveSpec, estimate
from .gumbel_core import (
    DimensionError,
    RngStream,
    check_logits,
    check_tau,
    posterior_gumbels_from_exponentials,
    sample_exponential,
    tempered_softmax,
    tempered_softmax_jacobian,
)

MAX_OUTCOMES = 2**20
SIGMA = 4.0


class CapacityError(RuntimeError):
    """Enumeration would exceed the configured outcome budget."""


class PoisonedRunError(FloatingPointError):
    """An estimator produced a non-finite value."""


# --------------------------------------------------------------------------
# exact gradients


def exact_gradient(theta, obj: ObjectiveSpec) -> np.ndarray:
    """``sum_d f(d) p(d) (d - p)`` over the n vertices."""
    theta = check_logits(theta)
    n = theta.size
    if n > MAX_OUTCOMES:
        raise CapacityError(f"{n} outcomes exceeds the enumeration limit {MAX_OUTCOMES}")
    if obj.arity != n:
        raise DimensionError("objective arity does not match logits")
    p = tempered_softmax(theta, 1.0)
    f = obj.vertex_values()
    f = f - f[0]  # shift-invariant; makes constant objectives give exact zeros
    return p * f - (p @ f) * p


def expected_objective(theta, obj: ObjectiveSpec) -> float:
    theta = check_logits(theta)
    return float(tempered_softmax(theta, 1.0) @ obj.vertex_values())


def _joint_outcomes(n: int, m: int) -> np.ndarray:
    if n**m > MAX_OUTCOMES:
        raise CapacityError(f"{n}^{m} joint outcomes exceeds the enumeration limit {MAX_OUTCOMES}")
    return np.array(list(itertools.product(range(n), repeat=m)), dtype=np.int64).reshape(-1, m)


def exact_parallel_gradient(thetas, obj) -> np.ndarray:
    """Per-node gradients ``(m, n)`` of ``E f(D^1..D^m)`` for independent nodes."""
    thetas = check_logits(thetas)
    m, n = thetas.shape
    idx = _joint_outcomes(n, m)
    probs = tempered_softmax(thetas, 1.0)
    pj = probs[np.arange(m), idx]
    weight = np.prod(pj, axis=1)
    f = np.asarray(obj.eval(np.eye(n)[idx]), dtype=np.float64)
    f = f - f[0]
    score = np.eye(n)[idx] - probs
    return np.einsum("o,o,ojn->jn", f, weight, score)


def _sequential_enumeration(theta1, links, n: int):
    m = len(links) + 1
    idx = _joint_outcomes(n, m)
    d = np.eye(n)[idx]
    thetas = np.empty(d.shape)
    thetas[:, 0] = theta1
    for j, link in enumerate(links):
        thetas[:, j + 1] = link.eval(d[:, j])
    probs = tempered_softmax(thetas, 1.0)
    weight = np.prod(np.take_along_axis(probs, idx[..., None], axis=-1)[..., 0], axis=1)
    return d, probs, weight


def exact_sequential_gradient(theta1, links, obj) -> np.ndarray:
    """Gradient w.r.t. the first node's logits for ``theta^{j+1} = h_j(D^j)``."""
    theta1 = check_logits(theta1)
    d, probs, weight = _sequential_enumeration(theta1, links, theta1.size)
    f = np.asarray(obj.eval(d), dtype=np.float64)
    return np.einsum("o,o,on->n", f, weight, d[:, 0] - probs[:, 0])


def exact_sequential_objective(theta1, links, obj) -> float:
    theta1 = check_logits(theta1)
    d, _, weight = _sequential_enumeration(theta1, links, theta1.size)
    return float(weight @ np.asarray(obj.eval(d), dtype=np.float64))


# --------------------------------------------------------------------------
# streamed moments


class KahanSum:
    """Compensated running sum of scalars or fixed-shape arrays."""

    def __init__(self, shape=()):
        self.total = np.zeros(shape)
        self._comp = np.zeros(shape)

    def add(self, x):
        y = np.asarray(x, dtype=np.float64) - self._comp
        t = self.total + y
        self._comp = (t - self.total) - y
        self.total = t


class StreamingMoments:
    """Mean and co-moment matrix of vectors, merged chunk-wise (Chan et al.)."""

    def __init__(self, n: int):
        self.count = 0
        self.mean = np.zeros(n)
        self.m2 = np.zeros((n, n))

    def add_batch(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        nb = x.shape[0]
        if nb == 0:
            return
        mb = x.mean(axis=0)
        xc = x - mb
        self.merge_parts(nb, mb, xc.T @ xc)

    def merge_parts(self, nb, mb, m2b):
        na = self.count
        tot = na + nb
        delta = mb - self.mean
        self.mean = self.mean + delta * (nb / tot)
        self.m2 = self.m2 + m2b + np.outer(delta, delta) * (na * nb / tot)
        self.count = tot

    def merge(self, other: "StreamingMoments"):
        if other.count:
            self.merge_parts(other.count, other.mean, other.m2)

    def covariance(self, ddof: int = 0) -> np.ndarray:
        return self.m2 / (self.count - ddof)


@dataclass(frozen=True)
class EstimatorStats:
    n_replicates: int
    mean: np.ndarray
    covariance: np.ndarray
    cov_trace: float
    bias: np.ndarray
    mse: float
    mean_radius: np.ndarray
    bias_radius: float
    cov_trace_radius: float
    mse_radius: float

    @property
    def bias_norm(self) -> float:
        return float(np.linalg.norm(self.bias))

    @property
    def log10_trace(self) -> float:
        return float(np.log10(self.cov_trace)) if self.cov_trace > 0 else float("-inf")

    @property
    def log10_trace_radius(self) -> float:
        if self.cov_trace <= 0:
            return 0.0
        return float(self.cov_trace_radius / (self.cov_trace * np.log(10.0)))


class _Accumulator:
    """Streams replicate estimates into the quantities of :class:`EstimatorStats`."""

    def __init__(self, reference):
        self.reference = np.asarray(reference, dtype=np.float64)
        n = self.reference.size
        self.moments = StreamingMoments(n)
        self.sq_err = StreamingMoments(1)
        self.sq_err_sum = KahanSum()
        self.center = None
        self.spread = StreamingMoments(1)

    def add(self, x):
        if self.center is None:
            self.center = x.mean(axis=0)
        self.moments.add_batch(x)
        err = np.sum((x - self.reference) ** 2, axis=1)
        self.sq_err.add_batch(err[:, None])
        self.sq_err_sum.add(np.sum(err))
        self.spread.add_batch(np.sum((x - self.center) ** 2, axis=1)[:, None])
        return err

    def stats(self) -> EstimatorStats:
        mom = self.moments
        n_rep = mom.count
        cov = mom.covariance()
        trace = float(np.trace(cov))
        bias = mom.mean - self.reference
        mse = float(self.sq_err_sum.total) / n_rep
        root_n = np.sqrt(n_rep)
        return EstimatorStats(
            n_replicates=n_rep,
            mean=mom.mean.copy(),
            covariance=cov,
            cov_trace=trace,
            bias=bias,
            mse=mse,
            mean_radius=SIGMA * np.sqrt(np.diag(mom.covariance(ddof=1)) / n_rep),
            bias_radius=float(SIGMA * np.sqrt(trace / n_rep)),
            cov_trace_radius=float(SIGMA * np.sqrt(self.spread.covariance(ddof=1)[0, 0]) / root_n),
            mse_radius=float(SIGMA * np.sqrt(self.sq_err.covariance(ddof=1)[0, 0]) / root_n),
        )


EstimatorFn = Callable[[RngStream, int], np.ndarray]

DEFAULT_CHUNK = 50_000


def _chunks(n_replicates: int, chunk: int):
    for i, start in enumerate(range(0, n_replicates, chunk)):
        yield i, min(chunk, n_replicates - start)


def _checked(x, rng: RngStream, name="estimator"):
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise PoisonedRunError(f"non-finite {name} output in replicate stream seed={rng.seed} stream={rng.stream}")
    return x


def measure_stats(estimator: EstimatorFn, reference, n_replicates: int, rng: RngStream, chunk: int = DEFAULT_CHUNK) -> EstimatorStats:
    """Replicate ``estimator(stream, count) -> (count, n)`` and summarize against ``reference``.

    Chunk ``i`` uses ``rng.split(i)``; two estimators measured with the same
    ``rng`` therefore consume identical streams.
    """
    if n_replicates < 2:
        raise ValueError("need at least two replicates")
    acc = _Accumulator(reference)
    for i, count in _chunks(n_replicates, chunk):
        sub = rng.split(i)
        acc.add(_checked(estimator(sub, count), sub))
    return acc.stats()


@dataclass(frozen=True)
class PairedComparison:
    first: EstimatorStats
    second: EstimatorStats
    mse_difference: float
    mse_difference_radius: float


def compare_paired(first: EstimatorFn, second: EstimatorFn, reference, n_replicates: int, rng: RngStream, chunk: int = DEFAULT_CHUNK) -> PairedComparison:
    """Measure two estimators on shared streams; report ``MSE(first) - MSE(second)``.

    The radius comes from the per-replicate paired differences of squared error.
    """
    acc_a, acc_b = _Accumulator(reference), _Accumulator(reference)
    diff = StreamingMoments(1)
    for i, count in _chunks(n_replicates, chunk):
        sub = rng.split(i)
        ea = acc_a.add(_checked(first(sub, count), sub))
        eb = acc_b.add(_checked(second(sub, count), sub))
        diff.add_batch((ea - eb)[:, None])
    radius = SIGMA * np.sqrt(diff.covariance(ddof=1)[0, 0] / diff.count)
    return PairedComparison(acc_a.stats(), acc_b.stats(), float(diff.mean[0]), float(radius))


def estimator_fn(name: str, theta, obj: ObjectiveSpec, tau: float = 1.0, b: int = 1) -> EstimatorFn:
    """Adapter from an estimator id to the ``(stream, count) -> array`` form."""

    def run(stream: RngStream, count: int) -> np.ndarray:
        return estimate(name, stream, theta, obj, tau=tau, b=b, replicates=count).values

    return run


def reinforce_reference(theta, obj: ObjectiveSpec, n_replicates: int, rng: RngStream) -> tuple[np.ndarray, np.ndarray]:
    """Large-sample REINFORCE mean as a reference gradient, with its 4-sigma radius.

    :func:`exact_gradient` is the default reference; this path mirrors the
    sampling-based protocol for objectives too large to enumerate.
    """
    st = measure_stats(estimator_fn("reinforce", theta, obj), np.zeros(np.size(theta)), n_replicates, rng)
    return st.mean, st.mean_radius


def mahalanobis(stats: EstimatorStats, reference) -> float:
    """Distance of the replicate mean from ``reference`` in standard-error units.

    Uses the pseudo-inverse, since score-function estimates live in the
    sum-zero subspace.
    """
    cov_mean = stats.covariance * stats.n_replicates / (stats.n_replicates - 1) / stats.n_replicates
    delta = stats.mean - np.asarray(reference)
    return float(np.sqrt(delta @ np.linalg.pinv(cov_mean, rcond=1e-10, hermitian=True) @ delta))


# --------------------------------------------------------------------------
# conditional (Gumbel-Rao) references


@dataclass(frozen=True)
class ConditionalMoments:
    index: int
    k_ref: int
    jacobian: np.ndarray
    jacobian_stderr: np.ndarray
    gr: np.ndarray | None = None
    within_trace: float | None = None


def conditional_moments(theta, tau: float, index: int, k_ref: int, rng: RngStream, v=None, blocks: int = 100, chunk: int = 200_000) -> ConditionalMoments:
    """Posterior average of the softmax Jacobian given ``argmax = index``.

    The standard error comes from a delete-one-block jackknife over
    ``blocks`` equal blocks, so the effective sample size is rounded up to a
    multiple of ``blocks``.  If ``v`` is given, also returns ``v @ J`` and the
    trace of its conditional covariance (the ST-GS spread given ``D``).
    """
    theta = check_logits(theta)
    tau = check_tau(tau)
    n = theta.size
    per_block = -(-int(k_ref) // blocks)
    block_sums = np.zeros((blocks, n, n))
    gen = rng.generator()
    contrib = StreamingMoments(n) if v is not None else None
    for b in range(blocks):
        left = per_block
        while left:
            size = min(left, chunk)
            e = sample_exponential(gen, (size, n))
            x = posterior_gumbels_from_exponentials(theta, np.full(size, index), e)
            jac = tempered_softmax_jacobian(x, tau)
            block_sums[b] += jac.sum(axis=0)
            if contrib is not None:
                contrib.add_batch(np.asarray(v) @ jac)
            left -= size
    block_means = block_sums / per_block
    mean = block_means.mean(axis=0)
    loo = (blocks * mean - block_means) / (blocks - 1)
    stderr = np.sqrt((blocks - 1) / blocks * np.sum((loo - mean) ** 2, axis=0))
    gr = within = None
    if contrib is not None:
        gr = np.asarray(v) @ mean
        within = float(np.trace(contrib.covariance(ddof=1)))
    return ConditionalMoments(index, per_block * blocks, mean, stderr, gr, within)


def gr_reference(theta, tau: float, index: int, k_ref: int, rng: RngStream):
    """``(E[J(theta + G) | argmax = index], jackknife standard error)``."""
    cm = conditional_moments(theta, tau, index, k_ref, rng)
    return cm.jacobian, cm.jacobian_stderr


@dataclass(frozen=True)
class DecompositionReport:
    a: float
    c: float
    grid: list = field(default_factory=list)
    max_relative_error: float = float("nan")

    def as_dict(self) -> dict:
        return {
            "version": 1,
            "a": self.a,
            "c": self.c,
            "grid": self.grid,
            "max_relative_error": self.max_relative_error,
        }


def variance_components(theta, tau: float, obj: ObjectiveSpec, rng: RngStream, k_ref: int = 10**6) -> tuple[float, float]:
    """``(E[Var[STGS | D]], Var[GR])`` as covariance traces, by conditioning on each outcome.

    The between-outcome term is corrected for the Monte Carlo noise of the
    per-outcome GR estimates.
    """
    theta = check_logits(theta)
    n = theta.size
    if n > MAX_OUTCOMES:
        raise CapacityError("too many outcomes to enumerate")
    p = tempered_softmax(theta, 1.0)
    grads = np.asarray(obj.grad(np.eye(n)), dtype=np.float64)
    within = np.empty(n)
    gr = np.empty((n, n))
    k_eff = np.empty(n)
    for d in range(n):
        cm = conditional_moments(theta, tau, d, k_ref, rng.split(d), v=grads[d])
        within[d] = cm.within_trace
        gr[d] = cm.gr
        k_eff[d] = cm.k_ref
    a = float(p @ within)
    mean_gr = p @ gr
    raw = float(p @ np.sum((gr - mean_gr) ** 2, axis=1))
    c = raw - float(np.sum(p * (1.0 - p) * within / k_eff))
    return max(a, 0.0), max(c, 0.0)


def decompose_variance(theta, tau: float, obj: ObjectiveSpec, k_grid: Sequence[int], b_grid: Sequence[int], n_replicates: int, rng: RngStream, k_ref: int = 10**6) -> DecompositionReport:
    """Predict ``trace Var = a/(B K) + c/B`` and compare with measured GR-MC traces."""
    if not k_grid or not b_grid:
        raise ValueError("decomposition grids must be nonempty")
    theta = check_logits(theta)
    a, c = variance_components(theta, tau, obj, rng.split(0), k_ref)
    reference = exact_gradient(theta, obj)
    rows = []
    for bi, b in enumerate(b_grid):
        for ki, k in enumerate(k_grid):
            predicted = a / (b * k) + c / b
            stats = measure_stats(
                estimator_fn(f"grmc{k}", theta, obj, tau, b),
                reference,
                n_replicates,
                rng.split(1, bi, ki),
            )
            measured = stats.cov_trace
            if predicted > 0:
                rel = abs(predicted - measured) / predicted
            else:
                rel = 0.0 if measured == 0 else float("inf")
            rows.append(
                {
                    "B": int(b),
                    "K": int(k),
                    "predicted": predicted,
                    "measured": measured,
                    "measured_radius": stats.cov_trace_radius,
                    "relative_error": rel,
                }
            )
    return DecompositionReport(a, c, rows, max(r["relative_error"] for r in rows))
