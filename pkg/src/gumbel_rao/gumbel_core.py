"""Gumbel noise, Gumbel-max categorical sampling and the tempered softmax.

All samplers accept either an :class:`RngStream` or a ready
``numpy.random.Generator``.  Passing an ``RngStream`` makes the call a pure
function of its arguments: a fresh Philox generator keyed by
``(seed, stream)`` is built on every call.

Arrays follow the numpy convention that the category axis is the last one,
so every function here also works on batches of shape ``(..., n)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

_MASK64 = (1 << 64) - 1


class DimensionError(ValueError):
    """Raised when arities of logits, samples or objectives disagree."""


@dataclass(frozen=True)
class RngStream:
    """Reproducible random stream identified by a ``(seed, stream)`` pair.

    The pair is used directly as the 128-bit Philox key, so distinct stream
    ids give independent counter-based sequences.
    """

    seed: int
    stream: int = 0

    def generator(self) -> np.random.Generator:
        key = np.array([self.seed & _MASK64, self.stream & _MASK64], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))

    def split(self, *labels: int) -> "RngStream":
        """Child stream for a tuple of non-negative integer labels."""
        ss = np.random.SeedSequence(
            entropy=self.seed & _MASK64,
            spawn_key=(self.stream & _MASK64, *(int(x) for x in labels)),
        )
        return RngStream(self.seed, int(ss.generate_state(1, np.uint64)[0]))


RngLike = Union[RngStream, np.random.Generator]


def as_generator(rng: RngLike) -> np.random.Generator:
    if isinstance(rng, RngStream):
        return rng.generator()
    if isinstance(rng, np.random.Generator):
        return rng
    raise TypeError(f"expected RngStream or numpy Generator, got {type(rng).__name__}")


@dataclass(frozen=True)
class OneHotSample:
    """Categorical outcome stored by index; ``index`` may be an int array for batches."""

    index: Union[int, np.ndarray]
    arity: int

    def vector(self) -> np.ndarray:
        return np.eye(self.arity)[self.index]


@dataclass(frozen=True)
class PerturbedLogits:
    """A realization of ``theta + G``, optionally drawn conditionally on an outcome."""

    values: np.ndarray
    conditioned_on: OneHotSample | None = None


def check_logits(theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    if theta.ndim == 0 or theta.shape[-1] < 2:
        raise DimensionError("logits need at least two categories")
    if not np.all(np.isfinite(theta)):
        raise ValueError("logits must be finite")
    return theta


def check_tau(tau: float) -> float:
    tau = float(tau)
    if not tau > 0.0 or not np.isfinite(tau):
        raise ValueError(f"temperature must be a positive finite number, got {tau!r}")
    return tau


def _shape(size, n: int) -> tuple:
    if size is None:
        return (n,)
    if np.isscalar(size):
        return (int(size), n)
    return (*size, n)


def open_uniform(gen: np.random.Generator, shape) -> np.ndarray:
    """Uniform draws on the open interval (0, 1); exact zeros are redrawn."""
    u = gen.random(shape)
    zeros = u == 0.0
    while zeros.any():
        u[zeros] = gen.random(int(zeros.sum()))
        zeros = u == 0.0
    return u


def sample_exponential(rng: RngLike, shape) -> np.ndarray:
    """Unit exponentials as ``-log(U)`` with ``U`` in (0, 1)."""
    return -np.log(open_uniform(as_generator(rng), shape))


def sample_gumbel(rng: RngLike, n: int, size=None) -> np.ndarray:
    """Standard Gumbel draws ``-log(-log U)``; shape ``(n,)`` or ``(*size, n)``."""
    if n < 1:
        raise ValueError("sample_gumbel needs n >= 1")
    u = open_uniform(as_generator(rng), _shape(size, n))
    return -np.log(-np.log(u))


def sample_categorical_gumbel_max(rng: RngLike, theta, size=None):
    """Draw ``D = onehot(argmax(theta + G))`` and return it with ``theta + G``.

    ``theta`` may itself be a batch ``(..., n)``; ``size`` prepends extra
    replicate axes.  Ties resolve to the lowest index (``np.argmax``).
    """
    theta = check_logits(theta)
    n = theta.shape[-1]
    if size is None:
        shape = theta.shape
    else:
        shape = _shape(size, n)
    g = sample_gumbel(rng, n, size=shape[:-1] if len(shape) > 1 else None)
    x = theta + g
    index = np.argmax(x, axis=-1)
    if index.ndim == 0:
        index = int(index)
    return OneHotSample(index, n), PerturbedLogits(x)


def log_partition(theta) -> np.ndarray | float:
    """``log sum exp(theta)`` over the last axis."""
    theta = np.asarray(theta, dtype=np.float64)
    m = theta.max(axis=-1, keepdims=True)
    out = np.log(np.exp(theta - m).sum(axis=-1)) + m[..., 0]
    return float(out) if out.ndim == 0 else out


def posterior_gumbels_from_exponentials(theta, index, e) -> np.ndarray:
    """Map unit exponentials ``e`` to a draw of ``theta + G`` given ``argmax = index``.

    Active coordinate: ``-log(E_i) + log Z``.  Others:
    ``-log(E_j exp(-theta_j) + E_i / Z)``, evaluated with ``logaddexp``.
    """
    theta = np.asarray(theta, dtype=np.float64)
    e = np.asarray(e, dtype=np.float64)
    theta = np.broadcast_to(theta, e.shape)
    index = np.asarray(index)
    log_z = np.asarray(log_partition(theta))[..., None]
    log_e = np.log(e)
    log_ei = np.take_along_axis(log_e, index[..., None], axis=-1)
    top = -log_ei + log_z
    out = -np.logaddexp(log_e - theta, log_ei - log_z)
    np.put_along_axis(out, index[..., None], top, axis=-1)
    return out


def sample_posterior_gumbels(rng: RngLike, theta, d: OneHotSample, size=None) -> PerturbedLogits:
    """Draw ``theta + G`` conditioned on the Gumbel-max outcome ``d``.

    The batch shape is the broadcast of ``theta[..., 0]``, ``d.index`` and
    ``size``.
    """
    theta = check_logits(theta)
    n = theta.shape[-1]
    if d.arity != n:
        raise DimensionError(f"outcome arity {d.arity} does not match logits of length {n}")
    index = np.asarray(d.index)
    batch = np.broadcast_shapes(theta.shape[:-1], index.shape)
    if size is not None:
        batch = np.broadcast_shapes(batch, tuple(np.atleast_1d(size)))
    e = sample_exponential(rng, (*batch, n))
    index = np.broadcast_to(index, batch)
    return PerturbedLogits(posterior_gumbels_from_exponentials(theta, index, e), d)


def tempered_softmax(x, tau: float) -> np.ndarray:
    tau = check_tau(tau)
    z = np.asarray(x, dtype=np.float64) / tau
    z = z - z.max(axis=-1, keepdims=True)
    w = np.exp(z)
    return w / w.sum(axis=-1, keepdims=True)


def tempered_softmax_jacobian(x, tau: float) -> np.ndarray:
    """``J_ij = (s_i [i=j] - s_i s_j) / tau``; batched over leading axes."""
    s = tempered_softmax(x, tau)
    jac = -s[..., :, None] * s[..., None, :]
    idx = np.arange(s.shape[-1])
    jac[..., idx, idx] += s
    return jac / tau


def jacobian_contract(v, s, tau: float) -> np.ndarray:
    """Row vector ``v`` times the softmax Jacobian, given softmax output ``s``.

    Equals ``v @ tempered_softmax_jacobian(x, tau)`` but avoids the n x n
    matrix: ``s * (v - v.s) / tau``.
    """
    vs = np.sum(v * s, axis=-1, keepdims=True)
    return s * (v - vs) / tau
