"""Single-variable gradient estimators for ``d E[f(D)] / d theta``.

Every estimator shares the calling convention::

    estimate_xxx(rng, theta, [tau,] obj, ..., replicates=None) -> GradientEstimate

``replicates=None`` returns one estimate of shape ``(n,)``; an integer ``R``
returns ``R`` i.i.d. estimates of shape ``(R, n)``, computed in one
vectorized pass.  All estimators draw the discrete outcome first, from the
same Gumbel-max coupling, so two estimators handed the same ``RngStream``
see the same sequence of outcomes and differ only in what they draw
afterwards.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import _kernels
from .gumbel_core import (
    DimensionError,
    RngLike,
    RngStream,
    as_generator,
    check_logits,
    check_tau,
    jacobian_contract,
    log_partition,
    sample_gumbel,
    tempered_softmax,
)

ESTIMATORS = ("reinforce", "gs", "st", "stgs", "grmc")


class GradientCheckError(ValueError):
    """A user-supplied gradient disagrees with finite differences of its function."""


@dataclass(frozen=True)
class ObjectiveSpec:
    """Differentiable objective on the simplex.

    ``eval`` maps ``(..., n) -> (...)`` and ``grad`` maps ``(..., n) -> (..., n)``;
    both must accept batches.  ``interior`` says whether ``eval`` is
    meaningful off the vertices (needed by the relaxed GS estimator).
    """

    arity: int
    eval: Callable[[np.ndarray], np.ndarray]
    grad: Callable[[np.ndarray], np.ndarray]
    interior: bool = True
    validate: bool = field(default=True, repr=False, compare=False)

    def __post_init__(self):
        if self.arity < 2:
            raise DimensionError("objective arity must be at least 2")
        if self.validate:
            check_gradient(self.eval, self.grad, self.arity)

    def vertex_values(self) -> np.ndarray:
        return np.asarray(self.eval(np.eye(self.arity)), dtype=np.float64)


def check_gradient(fun, grad, n, *, points: int = 8, step: float = 1e-6, rtol: float = 1e-5, seed: int = 0):
    """Compare ``grad`` with central differences of ``fun`` at random interior points."""
    gen = np.random.default_rng(seed)
    x = gen.dirichlet(np.ones(n), size=points)
    g = np.asarray(grad(x), dtype=np.float64)
    fd = np.empty_like(g)
    for j in range(n):
        e = np.zeros(n)
        e[j] = step
        fd[:, j] = (np.asarray(fun(x + e)) - np.asarray(fun(x - e))) / (2 * step)
    err = np.max(np.abs(g - fd)) / max(1.0, np.max(np.abs(fd)))
    if not err < rtol:
        raise GradientCheckError(f"gradient mismatch vs finite differences: relative error {err:.3g}")
    return err


def linear_objective(v, **kw) -> ObjectiveSpec:
    v = np.asarray(v, dtype=np.float64)
    return ObjectiveSpec(
        v.size,
        lambda x: np.asarray(x) @ v,
        lambda x: np.broadcast_to(v, np.shape(x)).copy(),
        **kw,
    )


def constant_objective(n: int, c: float = 1.0, **kw) -> ObjectiveSpec:
    return ObjectiveSpec(
        n,
        lambda x: np.full(np.shape(x)[:-1], float(c)),
        lambda x: np.zeros(np.shape(x)),
        **kw,
    )


def quadratic_objective(m, t) -> ObjectiveSpec:
    """``f(x) = x^T M x + t^T x``; its vertex values form the table ``diag(M) + t``."""
    m = np.asarray(m, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    sym = m + m.T
    return ObjectiveSpec(
        t.size,
        lambda x: np.einsum("...i,ij,...j->...", x, m, x) + np.asarray(x) @ t,
        lambda x: np.asarray(x) @ sym.T + t,
    )


def random_table_objective(rng: RngLike, n: int) -> ObjectiveSpec:
    """Random quadratic objective; gradients differ from vertex to vertex."""
    gen = as_generator(rng)
    return quadratic_objective(gen.normal(size=(n, n)), gen.normal(size=n))


class InstrumentedObjective(ObjectiveSpec):
    """Objective wrapper counting evaluated points (rows), not Python calls."""

    def __init__(self, obj: ObjectiveSpec):
        counts = {"eval": 0, "grad": 0}

        def _eval(x):
            counts["eval"] += int(np.prod(np.shape(x)[:-1], dtype=np.int64))
            return obj.eval(x)

        def _grad(x):
            counts["grad"] += int(np.prod(np.shape(x)[:-1], dtype=np.int64))
            return obj.grad(x)

        super().__init__(obj.arity, _eval, _grad, obj.interior, validate=False)
        object.__setattr__(self, "counts", counts)

    def reset(self):
        self.counts["eval"] = self.counts["grad"] = 0


@dataclass
class BaselineState:
    """Exponentially decayed running mean of observed objective values."""

    mean: float = 0.0
    count: int = 0
    decay: float = 0.99

    def __post_init__(self):
        if not 0.0 < self.decay <= 1.0:
            raise ValueError("baseline decay must lie in (0, 1]")

    @property
    def value(self) -> float:
        return self.mean if self.count else 0.0

    def update(self, f: float):
        if self.count == 0:
            self.mean = float(f)
        else:
            self.mean = self.decay * self.mean + (1.0 - self.decay) * float(f)
        self.count += 1


@dataclass(frozen=True)
class GradientEstimate:
    values: np.ndarray
    estimator: str
    objective: np.ndarray | float | None = None
    outcome: np.ndarray | int | None = None
    seed: int | None = None
    stream: int | None = None


def parse_estimator(name: str) -> tuple[str, int]:
    """``"grmc100" -> ("grmc", 100)``; other ids map to ``(id, 1)``."""
    name = name.strip().lower().replace("-", "")
    if name.startswith("grmc"):
        k = int(name[4:] or 1)
        if k < 1:
            raise ValueError("GR-MC needs K >= 1")
        return "grmc", k
    if name not in ESTIMATORS:
        raise ValueError(f"unknown estimator {name!r}")
    return name, 1


def _prepare(rng, theta, obj, replicates):
    theta = check_logits(theta)
    if theta.ndim != 1:
        raise DimensionError("estimators take a single logit vector")
    n = theta.size
    if obj.arity != n:
        raise DimensionError(f"objective arity {obj.arity} does not match logits of length {n}")
    gen = as_generator(rng)
    r = 1 if replicates is None else int(replicates)
    if r < 1:
        raise ValueError("replicates must be >= 1")
    g = sample_gumbel(gen, n, size=r)
    x = theta + g
    return theta, gen, x, np.argmax(x, axis=-1)


def _finish(rng, values, name, fvals, replicates, outcome=None):
    meta = rng if isinstance(rng, RngStream) else None
    if replicates is None:
        values = values[0]
        fvals = float(fvals[0])
        if outcome is not None:
            outcome = outcome[0]
    if not np.all(np.isfinite(values)):
        raise FloatingPointError(f"non-finite {name} estimate")
    return GradientEstimate(
        values,
        name,
        fvals,
        outcome,
        seed=None if meta is None else meta.seed,
        stream=None if meta is None else meta.stream,
    )


def estimate_reinforce(rng, theta, obj: ObjectiveSpec, baseline: BaselineState | None = None, replicates=None):
    """Score-function estimator ``(f(D) - b) (D - softmax(theta))``."""
    theta, _, _, idx = _prepare(rng, theta, obj, replicates)
    n = theta.size
    d = np.eye(n)[idx]
    fvals = np.asarray(obj.eval(d), dtype=np.float64)
    if baseline is None:
        centered = fvals
    else:
        b = np.empty_like(fvals)
        for r, f in enumerate(fvals):
            b[r] = baseline.value
            baseline.update(f)
        centered = fvals - b
    values = centered[:, None] * (d - tempered_softmax(theta, 1.0))
    return _finish(rng, values, "reinforce", fvals, replicates, idx)


def estimate_gs(rng, theta, tau: float, obj: ObjectiveSpec, replicates=None):
    """Relaxed estimator: ``df/dS`` at ``S = softmax_tau(theta + G)`` times its Jacobian."""
    tau = check_tau(tau)
    if not obj.interior:
        raise ValueError("GS needs an objective defined on the simplex interior")
    theta, _, x, idx = _prepare(rng, theta, obj, replicates)
    s = tempered_softmax(x, tau)
    fvals = np.asarray(obj.eval(s), dtype=np.float64)
    values = jacobian_contract(obj.grad(s), s, tau)
    return _finish(rng, values, "gs", fvals, replicates, idx)


def estimate_st(rng, theta, tau: float, obj: ObjectiveSpec, replicates=None):
    """Straight-through with the Jacobian of ``softmax_tau(theta)``."""
    tau = check_tau(tau)
    theta, _, _, idx = _prepare(rng, theta, obj, replicates)
    d = np.eye(theta.size)[idx]
    fvals = np.asarray(obj.eval(d), dtype=np.float64)
    values = jacobian_contract(obj.grad(d), tempered_softmax(theta, tau), tau)
    return _finish(rng, values, "st", fvals, replicates, idx)


def estimate_stgs(rng, theta, tau: float, obj: ObjectiveSpec, replicates=None):
    """Straight-through Gumbel-Softmax: Jacobian at the coupled ``theta + G``."""
    tau = check_tau(tau)
    theta, _, x, idx = _prepare(rng, theta, obj, replicates)
    d = np.eye(theta.size)[idx]
    fvals = np.asarray(obj.eval(d), dtype=np.float64)
    values = jacobian_contract(obj.grad(d), tempered_softmax(x, tau), tau)
    return _finish(rng, values, "stgs", fvals, replicates, idx)


def posterior_source(gen: np.random.Generator) -> np.random.Generator:
    """Bulk generator for posterior exponentials, seeded from ``gen``.

    GR-MC needs ``R * K * n`` exponentials, far more than anything else, and
    SFC64 draws them about twice as fast as Philox.  Seeding it from the
    stream keeps every result a function of ``(seed, stream)``.
    """
    return np.random.Generator(np.random.SFC64(gen.integers(0, 2**63, size=4)))


def posterior_jacobian_average(gen: np.random.Generator, theta, index, v, tau: float, k: int) -> np.ndarray:
    """``v @ mean_k J(theta + G^k)`` with ``G^k`` drawn from the posterior given ``index``.

    ``theta`` is ``(n,)`` or per-replicate ``(R, n)``; ``index`` is ``(R,)``
    and ``v`` is ``(R, n)``.  Draws come from ``posterior_source(gen)``, one
    replicate at a time, so memory is ``O(n K)``.
    """
    tau = check_tau(tau)
    if k < 1:
        raise ValueError("K must be >= 1")
    index = np.ascontiguousarray(index, dtype=np.int64)
    v = np.ascontiguousarray(v, dtype=np.float64)
    r, n = v.shape
    theta = np.broadcast_to(np.asarray(theta, dtype=np.float64), (r, n))
    with np.errstate(over="ignore"):
        scale = np.ascontiguousarray(np.exp(np.asarray(log_partition(theta))[:, None] - theta))
    out = np.empty((r, n))
    _kernels.posterior_contraction(
        posterior_source(gen), int(k), scale, index, v, tau, _kernels.integer_power(tau), out
    )
    return out


def estimate_grmc(rng, theta, tau: float, obj: ObjectiveSpec, k: int, replicates=None):
    """Gumbel-Rao Monte Carlo: ST-GS with the Jacobian averaged over K posterior draws.

    ``f`` and its gradient are evaluated once, at the sampled vertex.
    """
    tau = check_tau(tau)
    if k < 1:
        raise ValueError("K must be >= 1")
    theta, gen, _, idx = _prepare(rng, theta, obj, replicates)
    d = np.eye(theta.size)[idx]
    fvals = np.asarray(obj.eval(d), dtype=np.float64)
    values = posterior_jacobian_average(gen, theta, idx, obj.grad(d), tau, k)
    return _finish(rng, values, f"grmc{k}", fvals, replicates, idx)


def estimate_grmc_minibatched(rng, theta, tau: float, obj: ObjectiveSpec, k: int, b: int, replicates=None):
    """Average of ``b`` independent GR-MC estimates, each with its own outcome."""
    if b < 1:
        raise ValueError("minibatch size must be >= 1")
    r = 1 if replicates is None else int(replicates)
    est = estimate_grmc(rng, theta, tau, obj, k, replicates=r * b)
    values = est.values.reshape(r, b, -1).mean(axis=1)
    fvals = np.asarray(est.objective).reshape(r, b).mean(axis=1)
    return _finish(rng, values, f"grmc{k}x{b}", fvals, replicates, est.outcome.reshape(r, b))


def estimate(name: str, rng, theta, obj: ObjectiveSpec, *, tau: float = 1.0, b: int = 1, replicates=None):
    """Dispatch by estimator id (``reinforce``, ``gs``, ``st``, ``stgs``, ``grmc<K>``),
    averaging ``b`` independent draws per returned estimate."""
    kind, k = parse_estimator(name)
    if b < 1:
        raise ValueError("minibatch size must be >= 1")
    r = 1 if replicates is None else int(replicates)
    rb = r * b
    if kind == "reinforce":
        est = estimate_reinforce(rng, theta, obj, replicates=rb)
    elif kind == "gs":
        est = estimate_gs(rng, theta, tau, obj, replicates=rb)
    elif kind == "st":
        est = estimate_st(rng, theta, tau, obj, replicates=rb)
    elif kind == "stgs":
        est = estimate_stgs(rng, theta, tau, obj, replicates=rb)
    else:
        est = estimate_grmc(rng, theta, tau, obj, k, replicates=rb)
    values = est.values.reshape(r, b, -1).mean(axis=1)
    fvals = np.asarray(est.objective).reshape(r, b).mean(axis=1)
    return _finish(rng, values, est.estimator, fvals, replicates, est.outcome.reshape(r, b))
