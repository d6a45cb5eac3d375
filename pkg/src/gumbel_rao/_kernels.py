"""Compiled inner loop for the K-sample posterior Jacobian average.

Given an outcome ``i`` and posterior exponentials ``E``, the tempered softmax
of the posterior perturbation has the closed form

    s_j / s_i = (1 + (E_j / E_i) * Z * exp(-theta_j)) ** (-1 / tau),   j != i

so no Gumbel is ever materialized.  The kernel draws the exponentials itself,
one replicate at a time into an ``(n, K)`` scratch block (row ``j`` holds the K
draws of ``E_j``), so every inner loop runs over K contiguous draws without
branches.  It returns ``v @ mean_k J(theta + G^k)`` per replicate.
"""

from __future__ import annotations

import numba
import numpy as np

# reassociation lets the K-loops vectorize; infinities must survive, so no nnan/ninf
_FLAGS = {"reassoc", "contract", "nsz", "arcp"}


@numba.njit(cache=True, fastmath=_FLAGS)
def posterior_contraction(gen, n_mc, ratio_scale, index, v, tau, int_power, out):
    """Accumulate ``v @ J`` averaged over K posterior samples.

    gen         : numpy Generator supplying the standard exponentials
    n_mc        : K, posterior draws per replicate
    ratio_scale : (R, n) ``Z / exp(theta_j)`` per replicate
    index       : (R,) active category per replicate
    v           : (R, n) upstream gradient dL/dD
    int_power   : ``1/tau`` when it is a small integer, else 0
    out         : (R, n) written in place
    """
    n_rep, n = v.shape
    inv_tau = 1.0 / tau
    e = np.empty((n, n_mc))
    s = np.empty((n, n_mc))
    base = np.empty(n_mc)
    vs = np.empty(n_mc)
    for r in range(n_rep):
        for j in range(n):
            for k in range(n_mc):
                e[j, k] = gen.standard_exponential()
        i = index[r]
        ei = e[i]
        si = s[i]
        for k in range(n_mc):
            si[k] = 1.0
        for j in range(n):
            if j == i:
                continue
            c = ratio_scale[r, j]
            ej = e[j]
            sj = s[j]
            for k in range(n_mc):
                base[k] = 1.0 + c * (ej[k] / ei[k])
            if int_power > 0:
                for k in range(n_mc):
                    sj[k] = 1.0
                p = int_power
                while True:
                    if p & 1:
                        for k in range(n_mc):
                            sj[k] *= base[k]
                    p >>= 1
                    if p == 0:
                        break
                    for k in range(n_mc):
                        base[k] *= base[k]
                for k in range(n_mc):
                    sj[k] = 1.0 / sj[k]
            else:
                for k in range(n_mc):
                    sj[k] = np.exp(-inv_tau * np.log(base[k]))
            for k in range(n_mc):
                si[k] += sj[k]
        # si holds the normalizer; turn it into s_i and rescale the rest
        for k in range(n_mc):
            si[k] = 1.0 / si[k]
            vs[k] = v[r, i] * si[k]
        for j in range(n):
            if j == i:
                continue
            sj = s[j]
            vj = v[r, j]
            for k in range(n_mc):
                sj[k] *= si[k]
                vs[k] += vj * sj[k]
        for j in range(n):
            sj = s[j]
            vj = v[r, j]
            acc = 0.0
            for k in range(n_mc):
                acc += sj[k] * (vj - vs[k])
            out[r, j] = acc * inv_tau / n_mc


def integer_power(tau: float) -> int:
    """``1/tau`` when it is a small integer (exact repeated multiplication), else 0."""
    inv = 1.0 / tau
    p = round(inv)
    if 1 <= p <= 64 and abs(inv - p) <= 1e-12 * inv:
        return int(p)
    return 0
