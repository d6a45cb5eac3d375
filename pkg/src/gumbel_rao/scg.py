"""Surrogate-loss backward passes for graphs of several discrete variables.

Two topologies are supported: a parallel layer of independent nodes and a
sequential chain where each node's logits are a function of the previous
node's one-hot sample, ``theta^{j+1} = h_j(D^j)``.

There is no autodiff engine.  Objectives and links supply analytic partials
and the backward passes chain them explicitly.  Quantities that the surrogate
marks with stop-gradient (objective partials, downstream credit) are frozen
copies stored on the realized graph; backward reads them and never
differentiates through them.

All arrays carry a leading replicate axis ``R``: node logits and samples are
``(R, m, n)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .estimators import posterior_jacobian_average
from .gumbel_core import (
    DimensionError,
    RngStream,
    as_generator,
    check_logits,
    check_tau,
    jacobian_contract,
    sample_gumbel,
    tempered_softmax,
)

MODES = ("reinforce", "gs", "st", "stgs", "grmc")


class ConfigurationError(ValueError):
    """Graph, mode and objective are not compatible."""


@dataclass(frozen=True)
class Surrogate:
    """Which surrogate the backward pass differentiates."""

    mode: str
    tau: float = 1.0
    k: int = 1

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"unknown surrogate mode {self.mode!r}")
        check_tau(self.tau)
        if self.k < 1:
            raise ValueError("K must be >= 1")

    @classmethod
    def parse(cls, name: str, tau: float = 1.0) -> "Surrogate":
        name = name.lower().replace("-", "")
        if name.startswith("grmc"):
            return cls("grmc", tau, int(name[4:] or 1))
        return cls(name, tau)


@dataclass(frozen=True)
class StopGradient:
    """A value the backward pass must treat as a constant."""

    value: np.ndarray


@dataclass(frozen=True)
class LinkFunction:
    """``h: R^n -> R^n`` with Jacobian ``jacobian(x)[..., a, b] = d h_a / d x_b``."""

    eval: Callable[[np.ndarray], np.ndarray]
    jacobian: Callable[[np.ndarray], np.ndarray] | None

    def check(self, n: int, *, step: float = 1e-6, rtol: float = 1e-5, seed: int = 0) -> float:
        if self.jacobian is None:
            raise ConfigurationError("link function has no Jacobian")
        gen = np.random.default_rng(seed)
        x = gen.dirichlet(np.ones(n), size=4)
        jac = np.asarray(self.jacobian(x))
        fd = np.empty_like(jac)
        for b in range(n):
            e = np.zeros(n)
            e[b] = step
            fd[..., :, b] = (self.eval(x + e) - self.eval(x - e)) / (2 * step)
        err = np.max(np.abs(jac - fd)) / max(1.0, np.max(np.abs(fd)))
        if not err < rtol:
            raise ConfigurationError(f"link Jacobian disagrees with finite differences ({err:.3g})")
        return err


def linear_link(w, b=None) -> LinkFunction:
    """``h(x) = W x + b``."""
    w = np.asarray(w, dtype=np.float64)
    b = np.zeros(w.shape[0]) if b is None else np.asarray(b, dtype=np.float64)
    return LinkFunction(
        lambda x: np.asarray(x) @ w.T + b,
        lambda x: np.broadcast_to(w, (*np.shape(x)[:-1], *w.shape)).copy(),
    )


def constant_link(theta) -> LinkFunction:
    theta = np.asarray(theta, dtype=np.float64)
    return linear_link(np.zeros((theta.size, theta.size)), theta)


@dataclass(frozen=True)
class ChainObjective:
    """``f(D^1..D^m)``: ``eval`` maps ``(..., m, n) -> (...)``, ``partials`` to ``(..., m, n)``."""

    m: int
    n: int
    eval: Callable[[np.ndarray], np.ndarray]
    partials: Callable[[np.ndarray], np.ndarray]
    interior: bool = True
    validate: bool = True

    def __post_init__(self):
        if self.validate:
            _check_partials(self)


def _check_partials(obj: ChainObjective, *, step: float = 1e-6, rtol: float = 1e-5):
    gen = np.random.default_rng(0)
    x = gen.dirichlet(np.ones(obj.n), size=(4, obj.m))
    g = np.asarray(obj.partials(x))
    fd = np.empty_like(g)
    for j in range(obj.m):
        for i in range(obj.n):
            e = np.zeros((obj.m, obj.n))
            e[j, i] = step
            fd[:, j, i] = (obj.eval(x + e) - obj.eval(x - e)) / (2 * step)
    err = np.max(np.abs(g - fd)) / max(1.0, np.max(np.abs(fd)))
    if not err < rtol:
        raise ConfigurationError(f"objective partials disagree with finite differences ({err:.3g})")


def quadratic_chain_objective(m: int, n: int, mat, vec) -> ChainObjective:
    """``f(x) = x^T M x + t^T x`` on the flattened ``(m * n)`` vector."""
    mat = np.asarray(mat, dtype=np.float64)
    vec = np.asarray(vec, dtype=np.float64)
    sym = mat + mat.T

    def _eval(x):
        flat = np.asarray(x).reshape(*np.shape(x)[:-2], m * n)
        return np.einsum("...i,ij,...j->...", flat, mat, flat) + flat @ vec

    def _partials(x):
        flat = np.asarray(x).reshape(*np.shape(x)[:-2], m * n)
        return (flat @ sym.T + vec).reshape(np.shape(x))

    return ChainObjective(m, n, _eval, _partials)


def random_chain_objective(rng, m: int, n: int) -> ChainObjective:
    gen = as_generator(rng)
    return quadratic_chain_objective(m, n, gen.normal(size=(m * n, m * n)), gen.normal(size=m * n))


def separable_chain_objective(node_objectives: Sequence) -> ChainObjective:
    """``f = sum_j g_j(D^j)`` from single-node ``ObjectiveSpec`` instances."""
    m = len(node_objectives)
    n = node_objectives[0].arity

    def _eval(x):
        return sum(o.eval(x[..., j, :]) for j, o in enumerate(node_objectives))

    def _partials(x):
        return np.stack([o.grad(x[..., j, :]) for j, o in enumerate(node_objectives)], axis=-2)

    return ChainObjective(m, n, _eval, _partials)


@dataclass(frozen=True)
class RealizedGraph:
    """Everything the backward pass needs, frozen after the forward pass."""

    topology: str
    surrogate: Surrogate
    thetas: np.ndarray
    index: np.ndarray
    perturbed: np.ndarray
    points: np.ndarray
    f: np.ndarray
    partials: StopGradient
    links: tuple = ()
    backward_rng: RngStream | None = None

    @property
    def samples(self) -> np.ndarray:
        return np.eye(self.thetas.shape[-1])[self.index]


class ChainGradient(NamedTuple):
    theta1: np.ndarray
    nodes: np.ndarray


def _forward_rngs(rng):
    if isinstance(rng, RngStream):
        return rng.split(0).generator(), rng.split(1)
    gen = as_generator(rng)
    return gen, RngStream(int(gen.integers(2**63)), int(gen.integers(2**63)))


def forward_parallel(rng, thetas, obj: ChainObjective, surrogate: Surrogate, replicates: int = 1) -> RealizedGraph:
    """Sample all nodes independently and record ``f`` and its partials once."""
    thetas = check_logits(thetas)
    if thetas.ndim != 2:
        raise DimensionError("parallel layer takes an (m, n) array of logits")
    m, n = thetas.shape
    if (obj.m, obj.n) != (m, n):
        raise DimensionError(f"objective expects ({obj.m}, {obj.n}) nodes, got ({m}, {n})")
    if surrogate.mode == "gs" and not obj.interior:
        raise ConfigurationError("GS mode needs an objective defined on the simplex interior")
    gen, back = _forward_rngs(rng)
    theta_r = np.broadcast_to(thetas, (replicates, m, n)).copy()
    x = theta_r + sample_gumbel(gen, n, size=(replicates, m))
    index = np.argmax(x, axis=-1)
    if surrogate.mode == "gs":
        points = tempered_softmax(x, surrogate.tau)
    else:
        points = np.eye(n)[index]
    f = np.asarray(obj.eval(points), dtype=np.float64)
    partials = StopGradient(np.array(obj.partials(points), dtype=np.float64))
    return RealizedGraph("parallel", surrogate, theta_r, index, x, points, f, partials, (), back)


def _surrogate_vjp(graph: RealizedGraph, j: int, credit: np.ndarray) -> np.ndarray:
    """``credit @ d(surrogate_j) / d theta^j`` for the ST family and GS."""
    sur = graph.surrogate
    theta = graph.thetas[:, j]
    if sur.mode == "st":
        return jacobian_contract(credit, tempered_softmax(theta, sur.tau), sur.tau)
    if sur.mode in ("stgs", "gs"):
        return jacobian_contract(credit, tempered_softmax(graph.perturbed[:, j], sur.tau), sur.tau)
    if sur.mode == "grmc":
        gen = graph.backward_rng.split(j).generator()
        return posterior_jacobian_average(gen, theta, graph.index[:, j], credit, sur.tau, sur.k)
    raise ConfigurationError(f"mode {sur.mode!r} has no Jacobian surrogate")


def _score(graph: RealizedGraph, j: int) -> np.ndarray:
    return graph.samples[:, j] - tempered_softmax(graph.thetas[:, j], 1.0)


def backward_parallel(graph: RealizedGraph) -> np.ndarray:
    """Per-node logit gradients ``(R, m, n)``."""
    if graph.topology != "parallel":
        raise ConfigurationError("backward_parallel needs a parallel graph")
    m = graph.thetas.shape[1]
    grads = np.empty_like(graph.thetas)
    frozen = graph.partials.value
    for j in range(m):
        if graph.surrogate.mode == "reinforce":
            grads[:, j] = graph.f[:, None] * _score(graph, j)
        else:
            grads[:, j] = _surrogate_vjp(graph, j, frozen[:, j])
    return grads


def forward_sequential(rng, theta1, links: Sequence[LinkFunction], obj: ChainObjective, surrogate: Surrogate, replicates: int = 1) -> RealizedGraph:
    """Sample ``D^1`` from ``theta1`` and each later node from ``h_j(D^j)``.

    In GS mode the links and ``f`` see the relaxed ``S^j`` instead of ``D^j``.
    """
    theta1 = check_logits(theta1)
    if theta1.ndim != 1:
        raise DimensionError("sequential chain takes one logit vector for the first node")
    n = theta1.size
    m = len(links) + 1
    if (obj.m, obj.n) != (m, n):
        raise DimensionError(f"objective expects ({obj.m}, {obj.n}) nodes, chain has ({m}, {n})")
    if surrogate.mode == "gs" and not obj.interior:
        raise ConfigurationError("GS mode needs an objective defined on the simplex interior")
    gen, back = _forward_rngs(rng)
    g = sample_gumbel(gen, n, size=(replicates, m))
    thetas = np.empty((replicates, m, n))
    x = np.empty_like(thetas)
    points = np.empty_like(thetas)
    thetas[:, 0] = theta1
    for j in range(m):
        x[:, j] = thetas[:, j] + g[:, j]
        if surrogate.mode == "gs":
            points[:, j] = tempered_softmax(x[:, j], surrogate.tau)
        else:
            points[:, j] = np.eye(n)[np.argmax(x[:, j], axis=-1)]
        if j + 1 < m:
            thetas[:, j + 1] = links[j].eval(points[:, j])
    if not np.all(np.isfinite(thetas)):
        raise FloatingPointError("link function produced non-finite logits")
    index = np.argmax(x, axis=-1)
    f = np.asarray(obj.eval(points), dtype=np.float64)
    partials = StopGradient(np.array(obj.partials(points), dtype=np.float64))
    return RealizedGraph("sequential", surrogate, thetas, index, x, points, f, partials, tuple(links), back)


def backward_sequential(graph: RealizedGraph) -> ChainGradient:
    """Run the credit recursion from the last node to the first.

    Node ``m`` receives the frozen ``df/dD^m``.  Node ``j`` receives
    ``df/dD^j`` plus the gradient already computed for node ``j+1`` pulled
    back through the link Jacobian ``d theta^{j+1} / d D^j``.  Each node's
    logit gradient is its credit times its surrogate Jacobian.
    """
    if graph.topology != "sequential":
        raise ConfigurationError("backward_sequential needs a sequential graph")
    m = graph.thetas.shape[1]
    grads = np.empty_like(graph.thetas)
    if graph.surrogate.mode == "reinforce":
        for j in range(m):
            grads[:, j] = graph.f[:, None] * _score(graph, j)
        return ChainGradient(grads[:, 0], grads)
    frozen = graph.partials.value
    upstream = np.zeros_like(grads[:, 0])
    for j in reversed(range(m)):
        credit = frozen[:, j] + upstream
        grads[:, j] = _surrogate_vjp(graph, j, credit)
        if j > 0:
            link = graph.links[j - 1]
            if link.jacobian is None:
                raise ConfigurationError(f"link {j - 1} has no Jacobian")
            jac = np.asarray(link.jacobian(graph.points[:, j - 1]))
            upstream = np.einsum("ra,rab->rb", grads[:, j], jac)
    return ChainGradient(grads[:, 0], grads)
