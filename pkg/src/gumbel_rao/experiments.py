"""Quadratic program on the probability simplex as a stochastic problem.

Minimizing ``(p - c)^T Q (p - c)`` over the simplex is rewritten as
minimizing ``E[(D - c)^T A(p) (D - c)]`` with ``D ~ Discrete(p)``, for a
matrix ``A(p)`` chosen so that the two objectives agree.  ``p`` is
parameterized as ``softmax(theta)`` and ``A(p)`` is held fixed within each
gradient estimate.
"""

from __future__ import annotations

import itertools
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .estimators import ObjectiveSpec, estimate, parse_estimator
from .gumbel_core import RngStream, check_logits, check_tau, tempered_softmax
from .oracle import estimator_fn, exact_gradient, measure_stats

log = logging.getLogger(__name__)


class DegeneratePointError(ValueError):
    def __init__(self, i: int, j: int, p):
        super().__init__(f"A(p) has a zero denominator at ({i}, {j}) for p={np.round(p, 6).tolist()}")
        self.i, self.j = i, j


class DivergenceError(FloatingPointError):
    def __init__(self, message: str, run: "TrainRun"):
        super().__init__(message)
        self.run = run


def default_q(n: int) -> np.ndarray:
    i = np.arange(n)
    return np.exp(-2.0 * np.abs(i[:, None] - i[None, :]))


@dataclass(frozen=True)
class QpSpec:
    q: np.ndarray
    c: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.q, dtype=np.float64)
        c = np.asarray(self.c, dtype=np.float64)
        if q.shape != (c.size, c.size):
            raise ValueError("Q must be n x n with n = len(c)")
        if not np.allclose(q, q.T, rtol=0, atol=1e-14):
            raise ValueError("Q must be symmetric")
        np.linalg.cholesky(q)  # raises LinAlgError unless positive definite
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "c", c)

    @classmethod
    def default(cls, n: int = 3) -> "QpSpec":
        return cls(default_q(n), np.full(n, 1.0 / 3.0))

    @property
    def n(self) -> int:
        return self.c.size

    def value(self, p) -> np.ndarray | float:
        r = np.asarray(p) - self.c
        out = np.einsum("...i,ij,...j->...", r, self.q, r)
        return float(out) if np.ndim(out) == 0 else out


def build_a_matrix(p, spec: QpSpec, eps: float = 1e-15) -> np.ndarray:
    """The matrix with ``E_p[(D - c)^T A (D - c)] = (p - c)^T Q (p - c)``."""
    p = np.asarray(p, dtype=np.float64)
    r = p - spec.c
    den = _denominators(p, spec.c)
    bad = np.argwhere(np.abs(den) <= eps)
    if bad.size:
        i, j = bad[0]
        raise DegeneratePointError(int(i), int(j), p)
    return np.outer(r, r) / den * spec.q


def _denominators(p, c):
    den = c[:, None] * c[None, :] - p[:, None] * c[None, :] - c[:, None] * p[None, :]
    np.fill_diagonal(den, p - 2.0 * p * c + c * c)
    return den


def a_matrix_derivative(p, spec: QpSpec) -> np.ndarray:
    """``dA[i, j, k] = d A_ij / d p_k``."""
    p = np.asarray(p, dtype=np.float64)
    n, c = spec.n, spec.c
    r = p - c
    den = _denominators(p, c)
    eye = np.eye(n)
    dnum = eye[:, None, :] * r[None, :, None] + r[:, None, None] * eye[None, :, :]
    dden = -(eye[:, None, :] * c[None, :, None] + c[:, None, None] * eye[None, :, :])
    idx = np.arange(n)
    dden[idx, idx, :] = eye * (1.0 - 2.0 * c)[:, None]
    num = np.outer(r, r)
    return spec.q[..., None] * (dnum * den[..., None] - num[..., None] * dden) / den[..., None] ** 2


def qp_direct_gradient(theta, outcomes, spec: QpSpec) -> np.ndarray:
    """Gradient of ``(D - c)^T A(softmax(theta)) (D - c)`` in ``theta`` with ``D`` held fixed.

    ``outcomes`` is an index array; the result has shape ``(*outcomes.shape, n)``.
    This is the path through ``A(p)`` that frozen-``A`` estimators leave out.
    """
    theta = check_logits(theta)
    p = tempered_softmax(theta, 1.0)
    u = np.eye(spec.n)[np.asarray(outcomes)] - spec.c
    dfdp = np.einsum("ijk,...i,...j->...k", a_matrix_derivative(p, spec), u, u)
    jac = np.diag(p) - np.outer(p, p)
    return dfdp @ jac


def qp_objective_spec(theta, spec: QpSpec, validate: bool = True) -> ObjectiveSpec:
    """``f(x) = (x - c)^T A (x - c)`` with ``A = A(softmax(theta))`` frozen."""
    theta = check_logits(theta)
    a = build_a_matrix(tempered_softmax(theta, 1.0), spec)
    c = spec.c
    return ObjectiveSpec(
        spec.n,
        lambda x: np.einsum("...i,ij,...j->...", np.asarray(x) - c, a, np.asarray(x) - c),
        lambda x: 2.0 * (np.asarray(x) - c) @ a,
        validate=validate,
    )


def project_simplex(v) -> np.ndarray:
    """Euclidean projection onto the probability simplex (sort-based)."""
    v = np.asarray(v, dtype=np.float64)
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    ks = np.arange(1, v.size + 1)
    rho = np.nonzero(u - css / ks > 0)[0][-1]
    return np.maximum(v - css[rho] / (rho + 1.0), 0.0)


def solve_qp(spec: QpSpec, iters: int = 100_000, tol: float = 1e-12) -> tuple[np.ndarray, float]:
    """Projected gradient descent with step ``1 / (2 lambda_max(Q))``."""
    step = 1.0 / (2.0 * np.linalg.eigvalsh(spec.q)[-1])
    p = np.full(spec.n, 1.0 / spec.n)
    for _ in range(iters):
        nxt = project_simplex(p - step * 2.0 * spec.q @ (p - spec.c))
        done = np.max(np.abs(nxt - p)) < tol
        p = nxt
        if done:
            break
    return p, spec.value(p)


@dataclass(frozen=True)
class SimplexGrid:
    resolution: int
    margin: float
    points: np.ndarray

    def __len__(self):
        return len(self.points)


def simplex_grid(resolution: int = 40, margin: float = 1e-3, n: int = 3) -> SimplexGrid:
    """Barycentric points ``k / resolution`` whose coordinates are all ``>= margin``."""
    pts = [
        np.array((*head, resolution - sum(head))) / resolution
        for head in itertools.product(range(resolution + 1), repeat=n - 1)
        if sum(head) <= resolution
    ]
    pts = np.array([p for p in pts if p.min() >= margin])
    return SimplexGrid(resolution, margin, pts.reshape(-1, n))


def _variance_point(args):
    p, taus, estimators, spec, n_replicates, rng = args
    theta = np.log(p)
    try:
        obj = qp_objective_spec(theta, spec, validate=False)
    except DegeneratePointError:
        return None
    reference = exact_gradient(theta, obj)
    out = []
    for ti, tau in enumerate(taus):
        stream = rng.split(ti)
        for name in estimators:
            stats = measure_stats(estimator_fn(name, theta, obj, tau), reference, n_replicates, stream, chunk=10_000)
            out.append((tau, name, stats.log10_trace, stats.log10_trace_radius))
    return out


def variance_map(spec: QpSpec, taus: Sequence[float], estimators: Sequence[str], grid: SimplexGrid, n_replicates: int, rng: RngStream, workers: int = 1) -> list[tuple]:
    """Rows ``(*p, tau, estimator, log10_trace, ci_radius)`` over the grid.

    Every estimator at a given point and temperature consumes the same
    stream.  Points with a degenerate ``A(p)`` are skipped.  Output order is
    fixed (point, tau, estimator) whatever ``workers`` is.
    """
    for tau in taus:
        check_tau(tau)
    for name in estimators:
        parse_estimator(name)
    tasks = [(p, list(taus), list(estimators), spec, n_replicates, rng.split(i)) for i, p in enumerate(grid.points)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_variance_point, tasks, chunksize=1))
    else:
        results = [_variance_point(t) for t in tasks]
    rows = []
    for p, res in zip(grid.points, results):
        if res is None:
            log.warning("skipping degenerate grid point p=%s", p.tolist())
            continue
        for tau, name, lt, rad in res:
            rows.append((*p.tolist(), tau, name, lt, rad))
    return rows


@dataclass
class TrainRun:
    estimator: str
    tau: float
    lr: float
    seed: int
    objective: list = field(default_factory=list)
    thetas: list = field(default_factory=list)

    @property
    def iterations(self) -> int:
        return len(self.objective) - 1

    def iterations_to(self, threshold: float) -> int | None:
        for it, v in enumerate(self.objective):
            if v <= threshold:
                return it
        return None


DEFAULT_THETA0 = tuple(np.log([0.6, 0.3, 0.1]))


def qp_full_gradient(theta, spec: QpSpec) -> np.ndarray:
    """Exact gradient of ``(p - c)^T Q (p - c)`` as the enumerated expectation of
    the frozen-``A`` gradient plus the expected direct term."""
    theta = check_logits(theta)
    p = tempered_softmax(theta, 1.0)
    frozen = exact_gradient(theta, qp_objective_spec(theta, spec, validate=False))
    return frozen + p @ qp_direct_gradient(theta, np.arange(spec.n), spec)


def train_qp(spec: QpSpec, estimator: str, tau: float, lr: float, iters: int, seed: int, b: int = 1, theta0=None, stop_below: float | None = None) -> TrainRun:
    """Plain SGD on the logits, logging the exact objective at every iterate.

    Each step adds the estimator output (``A`` frozen) to the direct term
    through ``A(p)`` evaluated at the estimator's own sampled outcome, so
    ``f`` is still evaluated once per step.  ``estimator="exact"`` follows
    the enumerated gradient instead.
    """
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    if theta0 is None:
        theta0 = DEFAULT_THETA0 if spec.n == 3 else np.log(np.arange(spec.n, 0, -1) / (spec.n * (spec.n + 1) / 2))
    theta = check_logits(np.array(theta0, dtype=np.float64))
    base = RngStream(seed, 0)
    run = TrainRun(estimator, tau, lr, seed)
    run.objective.append(spec.value(tempered_softmax(theta, 1.0)))
    run.thetas.append(theta.copy())
    for it in range(iters):
        obj = qp_objective_spec(theta, spec, validate=False)
        if estimator == "exact":
            grad = qp_full_gradient(theta, spec)
        else:
            est = estimate(estimator, base.split(it), theta, obj, tau=tau, b=b)
            grad = est.values + qp_direct_gradient(theta, est.outcome, spec).mean(axis=0)
        theta = theta - lr * grad
        if not np.all(np.isfinite(theta)):
            raise DivergenceError(f"non-finite logits at iteration {it + 1}", run)
        run.objective.append(spec.value(tempered_softmax(theta, 1.0)))
        run.thetas.append(theta.copy())
        if stop_below is not None and run.objective[-1] <= stop_below:
            break
    return run


def iterations_to_threshold(spec: QpSpec, estimator: str, tau: float, lr: float, seeds, threshold: float, max_iters: int, **kw) -> list:
    """Per-seed first iteration reaching ``threshold`` (``None`` if never)."""
    return [
        train_qp(spec, estimator, tau, lr, max_iters, seed, stop_below=threshold, **kw).iterations_to(threshold)
        for seed in seeds
    ]


def median_iterations(hits) -> float:
    """Median over seeds, counting runs that never reach the threshold as infinite."""
    return float(np.median([np.inf if h is None else h for h in hits]))
