"""Named self-checks run by ``grk check``.

Each check returns a :class:`CheckResult` with the measured value and the
bound it was held to.  Sample sizes and tolerances come from the config so a
check can be forced to fail (for example ``jacobian_tol = 1e-30``).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .estimators import (
    InstrumentedObjective,
    estimate_grmc,
    estimate_st,
    estimate_stgs,
    posterior_jacobian_average,
    posterior_source,
    random_table_objective,
)
from .experiments import QpSpec, build_a_matrix
from .gumbel_core import (
    OneHotSample,
    RngStream,
    log_partition,
    posterior_gumbels_from_exponentials,
    sample_categorical_gumbel_max,
    sample_gumbel,
    sample_posterior_gumbels,
    tempered_softmax,
    tempered_softmax_jacobian,
)
from .oracle import estimator_fn, exact_gradient, expected_objective, measure_stats

EULER_GAMMA = 0.5772156649015329

DEFAULTS = {
    "samples": 200_000,
    "jacobian_tol": 1e-6,
    "identity_tol": 1e-12,
    "mse_identity_tol": 1e-10,
    "sigma": 4.0,
}


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    tolerance: float
    detail: str = ""

    def as_dict(self):
        return asdict(self)


def _result(name, value, tol, detail="", *, below=True):
    value = float(value)
    ok = value <= tol if below else value >= tol
    return CheckResult(name, bool(ok and np.isfinite(value)), value, float(tol), detail)


def central_difference_jacobian(x, tau, step=1e-6):
    n = x.size
    out = np.empty((n, n))
    for j in range(n):
        e = np.zeros(n)
        e[j] = step
        out[:, j] = (tempered_softmax(x + e, tau) - tempered_softmax(x - e, tau)) / (2 * step)
    return out


def jacobian_fd_error(x, tau):
    jac = tempered_softmax_jacobian(x, tau)
    fd = central_difference_jacobian(x, tau)
    return np.max(np.abs(jac - fd)) / max(1.0, np.max(np.abs(jac)))


def check_softmax_simplex(cfg, rng):
    x = rng.generator().normal(scale=5.0, size=(1000, 6))
    s = tempered_softmax(x, 0.3)
    err = np.max(np.abs(s.sum(axis=-1) - 1.0))
    inside = bool(np.all((s >= 0) & (s <= 1)))
    return _result("softmax_simplex", err if inside else np.inf, 1e-14)


def check_softmax_stability(cfg, rng):
    s = tempered_softmax(np.array([1000.0, 0.0]), 1.0)
    return _result("softmax_stability", np.max(np.abs(s - [1.0, 0.0])), 0.0)


def check_jacobian_fd(cfg, rng):
    gen = rng.generator()
    worst = 0.0
    for i in range(100):
        n = (2, 3, 8)[i % 3]
        x = gen.normal(scale=2.0, size=n)
        tau = float(gen.uniform(0.2, 2.0))
        worst = max(worst, jacobian_fd_error(x, tau))
    return _result("jacobian_fd", worst, cfg["jacobian_tol"], "100 random (x, tau), n in {2,3,8}")


def check_jacobian_structure(cfg, rng):
    x = rng.generator().normal(size=(100, 5))
    jac = tempered_softmax_jacobian(x, 0.7)
    err = max(np.max(np.abs(jac.sum(axis=-1))), np.max(np.abs(jac - np.swapaxes(jac, -1, -2))))
    return _result("jacobian_rowsum_symmetry", err, 1e-14)


def check_log_partition(cfg, rng):
    err = abs(log_partition(np.array([1000.0, 1000.0])) - (1000.0 + np.log(2.0)))
    return _result("log_partition_stability", err, 1e-12)


def check_gumbel_moments(cfg, rng):
    n = cfg["samples"]
    g = sample_gumbel(rng, n)
    z = abs(g.mean() - EULER_GAMMA) / np.sqrt(np.pi**2 / 6 / n)
    return _result("gumbel_mean", z, cfg["sigma"], "z-score of sample mean vs Euler-Mascheroni")


def check_gumbel_max_marginal(cfg, rng):
    n = cfg["samples"]
    theta = np.array([0.5, -0.3, 1.1])
    d, _ = sample_categorical_gumbel_max(rng, theta, size=n)
    p = tempered_softmax(theta, 1.0)
    freq = np.bincount(d.index, minlength=3) / n
    z = np.max(np.abs(freq - p) / np.sqrt(p * (1 - p) / n))
    return _result("gumbel_max_marginal", z, cfg["sigma"], "max binomial z-score")


def check_posterior_argmax(cfg, rng):
    n = cfg["samples"]
    theta = np.array([0.5, -0.3, 1.1])
    idx = rng.generator().integers(0, 3, size=n)
    x = sample_posterior_gumbels(rng.split(1), theta, OneHotSample(idx, 3)).values
    bad = int(np.count_nonzero(np.argmax(x, axis=-1) != idx))
    return _result("posterior_argmax", bad, 0, "violations")


def posterior_law_zscores(theta, index, n, rng: RngStream):
    """Two-sample z-scores of posterior draws vs rejection-filtered unconditional draws.

    Returns per-coordinate z-scores for the mean and for the variance; the
    variance standard error uses the sample fourth central moment.
    """
    theta = np.asarray(theta, dtype=np.float64)
    d, pert = sample_categorical_gumbel_max(rng.split(0), theta, size=n)
    kept = pert.values[d.index == index]
    post = sample_posterior_gumbels(rng.split(1), theta, OneHotSample(index, theta.size), size=n).values

    def mean_se2(a):
        return a.var(0, ddof=1) / len(a)

    def var_se2(a):
        c = a - a.mean(0)
        return (np.mean(c**4, axis=0) - np.mean(c**2, axis=0) ** 2) / len(a)

    zm = np.abs(post.mean(0) - kept.mean(0)) / np.sqrt(mean_se2(post) + mean_se2(kept))
    zv = np.abs(post.var(0, ddof=1) - kept.var(0, ddof=1)) / np.sqrt(var_se2(post) + var_se2(kept))
    return zm, zv


def check_posterior_law(cfg, rng):
    zm, zv = posterior_law_zscores([0.5, -0.3, 1.1], 2, cfg["samples"], rng)
    return _result("posterior_law", max(zm.max(), zv.max()), cfg["sigma"], "max two-sample z (mean, variance) over coordinates")


def check_kernel_reference(cfg, rng):
    gen = rng.generator()
    theta = gen.normal(size=4)
    r, k, n = 40, 9, 4
    idx = gen.integers(0, n, size=r)
    v = gen.normal(size=(r, n))
    worst = 0.0
    for tau in (0.1, 0.5, 1.0, 0.37):
        sub = np.random.Generator(np.random.Philox(7))
        fast = posterior_jacobian_average(sub, theta, idx, v, tau, k)
        sub = np.random.Generator(np.random.Philox(7))
        e = posterior_source(sub).standard_exponential((r, n, k)).transpose(0, 2, 1)
        x = posterior_gumbels_from_exponentials(theta, np.repeat(idx[:, None], k, 1), e)
        ref = np.einsum("ri,rij->rj", v, tempered_softmax_jacobian(x, tau).mean(axis=1))
        worst = max(worst, np.max(np.abs(fast - ref)))
    return _result("posterior_kernel_reference", worst, 1e-12, "compiled vs numpy posterior Jacobian")


def check_determinism(cfg, rng):
    theta = np.array([0.5, -0.3, 1.1])
    a = sample_posterior_gumbels(rng, theta, OneHotSample(1, 3), size=100).values
    b = sample_posterior_gumbels(rng, theta, OneHotSample(1, 3), size=100).values
    obj = random_table_objective(rng, 3)
    g1 = estimate_grmc(rng, theta, 0.5, obj, 10, replicates=50).values
    g2 = estimate_grmc(rng, theta, 0.5, obj, 10, replicates=50).values
    same = np.array_equal(a, b) and np.array_equal(g1, g2)
    return _result("determinism", 0 if same else 1, 0)


def check_exact_gradient_fd(cfg, rng):
    gen = rng.generator()
    worst = 0.0
    for i in range(100):
        n = 2 + i % 4
        theta = gen.normal(size=n)
        obj = random_table_objective(rng.split(i), n)
        g = exact_gradient(theta, obj)
        fd = np.empty(n)
        for j in range(n):
            e = np.zeros(n)
            e[j] = 1e-6
            fd[j] = (expected_objective(theta + e, obj) - expected_objective(theta - e, obj)) / 2e-6
        worst = max(worst, np.max(np.abs(g - fd)) / max(1.0, np.max(np.abs(g))))
    return _result("exact_gradient_fd", worst, 1e-6)


def check_reformulation(cfg, rng):
    spec = QpSpec.default(3)
    p = rng.generator().dirichlet(np.ones(3), size=100)
    eye = np.eye(3)
    worst = 0.0
    for pi in p:
        a = build_a_matrix(pi, spec)
        u = eye - spec.c
        lhs = pi @ np.einsum("di,ij,dj->d", u, a, u)
        worst = max(worst, abs(lhs - spec.value(pi)))
    return _result("reformulation_identity", worst, cfg["identity_tol"], "100 random interior p")


def check_mse_identity(cfg, rng):
    theta = np.array([0.3, -0.7, 1.2])
    obj = random_table_objective(rng, 3)
    ref = exact_gradient(theta, obj)
    worst = 0.0
    for name in ("reinforce", "stgs", "grmc10"):
        st = measure_stats(estimator_fn(name, theta, obj, 0.5), ref, 20_000, rng.split(1))
        worst = max(worst, abs(st.mse - (st.cov_trace + st.bias_norm**2)) / st.mse)
    return _result("mse_identity", worst, cfg["mse_identity_tol"])


def check_single_evaluation(cfg, rng):
    theta = np.array([0.3, -0.7, 1.2])
    obj = InstrumentedObjective(random_table_objective(rng, 3))
    worst = 0
    for fn in (lambda: estimate_st(rng, theta, 0.5, obj), lambda: estimate_stgs(rng, theta, 0.5, obj)) + tuple(
        (lambda k=k: estimate_grmc(rng, theta, 0.5, obj, k)) for k in (1, 10, 1000)
    ):
        obj.reset()
        fn()
        worst = max(worst, abs(obj.counts["eval"] - 1), abs(obj.counts["grad"] - 1))
    return _result("single_evaluation", worst, 0, "max deviation from one eval/grad per estimate")


CHECKS = (
    check_softmax_simplex,
    check_softmax_stability,
    check_jacobian_fd,
    check_jacobian_structure,
    check_log_partition,
    check_gumbel_moments,
    check_gumbel_max_marginal,
    check_posterior_argmax,
    check_posterior_law,
    check_kernel_reference,
    check_determinism,
    check_exact_gradient_fd,
    check_reformulation,
    check_mse_identity,
    check_single_evaluation,
)


def run_checks(config: dict | None = None, seed: int = 0) -> list[CheckResult]:
    cfg = {**DEFAULTS, **(config or {})}
    base = RngStream(seed, 0)
    return [check(cfg, base.split(i)) for i, check in enumerate(CHECKS)]
