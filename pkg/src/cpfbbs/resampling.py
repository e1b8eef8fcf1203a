"""Unconditional and conditional resampling schemes.

All indices are 0-based. Every scheme takes unnormalised, non-negative
weights ``g`` and a :class:`numpy.random.Generator`; the jitted kernels
consume the same generator so that a run is reproducible from one seed.

Schemes are identified by small integer codes so that the particle filter
kernels can dispatch on them without Python callbacks:

==============  ====  =============================================
name            code  conditional version
==============  ====  =============================================
multinomial     0     :func:`cond_multinomial`
killing         1     :func:`cond_killing`
systematic      2     (none)
systematic_mp   3     :func:`cond_systematic_mean_partition`
==============  ====  =============================================

Random draws happen in a fixed order per call (documented on each kernel),
so a given generator state always yields the same ancestors.
"""

from __future__ import annotations

import numpy as np
from numba import njit

__all__ = [
    "MULTINOMIAL",
    "KILLING",
    "SYSTEMATIC",
    "SYSTEMATIC_MP",
    "SCHEMES",
    "CONDITIONAL_SCHEMES",
    "DegenerateWeightsError",
    "ReferenceWeightError",
    "scheme_code",
    "weights_from_log",
    "multinomial",
    "killing",
    "systematic",
    "mean_partition_order",
    "is_mean_partition",
    "systematic_mean_partition",
    "cond_multinomial",
    "cond_killing",
    "cond_systematic_mean_partition",
    "cyclic_shift",
    "random_cyclic_shift",
    "resample",
    "cond_resample",
]

MULTINOMIAL = 0
KILLING = 1
SYSTEMATIC = 2
SYSTEMATIC_MP = 3

SCHEMES = {
    "multinomial": MULTINOMIAL,
    "killing": KILLING,
    "systematic": SYSTEMATIC,
    "systematic_mp": SYSTEMATIC_MP,
}
CONDITIONAL_SCHEMES = {
    "multinomial": MULTINOMIAL,
    "killing": KILLING,
    "systematic_mp": SYSTEMATIC_MP,
}

# kernel status codes
OK = 0
DEGENERATE = 1
REFERENCE_ZERO = 2


class DegenerateWeightsError(ValueError):
    """All weights are zero (or the weight vector is otherwise unusable)."""


class ReferenceWeightError(ValueError):
    """The conditioning index has zero weight, so the conditional law is undefined."""


def scheme_code(scheme, conditional=False):
    """Translate a scheme name (or code) to its integer code."""
    table = CONDITIONAL_SCHEMES if conditional else SCHEMES
    if isinstance(scheme, str):
        try:
            return table[scheme]
        except KeyError:
            kind = "conditional " if conditional else ""
            raise ValueError(
                f"unknown {kind}resampling scheme {scheme!r}; choose from {sorted(table)}"
            ) from None
    code = int(scheme)
    if code not in table.values():
        raise ValueError(f"unknown resampling code {code}")
    return code


def weights_from_log(logw):
    """Exponentiate log-weights after subtracting their maximum.

    Raises :class:`DegenerateWeightsError` if every entry is ``-inf``.
    """
    logw = np.asarray(logw, dtype=float)
    m = np.max(logw)
    if not np.isfinite(m):
        raise DegenerateWeightsError("degenerate weights: all log-weights are -inf")
    return np.exp(logw - m)


# ---------------------------------------------------------------------------
# jitted kernels


@njit(cache=True, inline="always")
def _total(g):
    """Sum of weights, or -1.0 if the vector is unusable."""
    s = 0.0
    for j in range(g.shape[0]):
        if not (g[j] >= 0.0) or g[j] == np.inf:
            return -1.0
        s += g[j]
    if not (s > 0.0) or s == np.inf:
        return -1.0
    return s


@njit(cache=True, inline="always")
def _cumsum(g, cum):
    s = 0.0
    for j in range(g.shape[0]):
        s += g[j]
        cum[j] = s
    return s


@njit(cache=True, inline="always")
def _inverse_cdf(cum, v):
    """Smallest j with cum[j] >= v, i.e. cum[j-1] < v <= cum[j]."""
    lo = 0
    hi = cum.shape[0] - 1
    while lo < hi:
        mid = (lo + hi) // 2
        if cum[mid] >= v:
            hi = mid
        else:
            lo = mid + 1
    return lo


@njit(cache=True, inline="always")
def _categorical(g, total, rng):
    """One draw from Categ(g / total) by a linear scan; one uniform."""
    v = (1.0 - rng.random()) * total
    n = g.shape[0]
    s = 0.0
    last = -1
    for j in range(n):
        if g[j] > 0.0:
            s += g[j]
            last = j
            if s >= v:
                return j
    return last


@njit(cache=True, inline="always")
def _multinomial(g, rng, out, fw, iw):
    """Draw order: one uniform per slot, slots in increasing order."""
    n = g.shape[0]
    if _total(g) < 0.0:
        return DEGENERATE
    cum = fw[0]
    tot = _cumsum(g, cum)
    for i in range(n):
        out[i] = _inverse_cdf(cum, (1.0 - rng.random()) * tot)
    return OK


@njit(cache=True, inline="always")
def _killing(g, rng, out, fw, iw):
    """Draw order per slot i: keep-uniform, then (if killed) a categorical uniform."""
    n = g.shape[0]
    if _total(g) < 0.0:
        return DEGENERATE
    cum = fw[0]
    tot = _cumsum(g, cum)
    gstar = 0.0
    for j in range(n):
        if g[j] > gstar:
            gstar = g[j]
    for i in range(n):
        if rng.random() * gstar < g[i]:
            out[i] = i
        else:
            out[i] = _inverse_cdf(cum, (1.0 - rng.random()) * tot)
    return OK


@njit(cache=True, inline="always")
def _systematic_u(g, u, out, fw, iw):
    """Systematic resampling for a given offset u in (0, 1]."""
    n = g.shape[0]
    if _total(g) < 0.0:
        return DEGENERATE
    cum = fw[0]
    tot = _cumsum(g, cum)
    j = 0
    for i in range(n):
        v = (i + u) / n * tot
        while j < n - 1 and cum[j] < v:
            j += 1
        # zero-weight trailing entries can never be selected
        while g[j] == 0.0 and j > 0:
            j -= 1
        out[i] = j
    return OK


@njit(cache=True, inline="always")
def _systematic(g, rng, out, fw, iw):
    """One uniform for the common offset."""
    return _systematic_u(g, 1.0 - rng.random(), out, fw, iw)


@njit(cache=True, inline="always")
def _mean_partition_order(w, perm):
    """Hoare-style partition: entries <= mean first, entries > mean last.

    ``perm`` receives a permutation of ``0..n-1``; ``w`` is not modified.
    """
    n = w.shape[0]
    p = 0.0
    for j in range(n):
        perm[j] = j
        p += w[j]
    p /= n
    il = -1
    iu = n
    while True:
        while il < min(iu, n - 1):
            il += 1
            if w[perm[il]] > p:
                break
        while iu > il:
            iu -= 1
            if w[perm[iu]] <= p:
                break
        if il == iu:
            break
        tmp = perm[il]
        perm[il] = perm[iu]
        perm[iu] = tmp


@njit(cache=True, inline="always")
def _systematic_mp_u(g, u, out, fw, iw):
    n = g.shape[0]
    perm = iw[0]
    _mean_partition_order(g, perm)
    gp = fw[1]
    for j in range(n):
        gp[j] = g[perm[j]]
    status = _systematic_u(gp, u, out, fw, iw)
    if status != OK:
        return status
    for i in range(n):
        out[i] = perm[out[i]]
    return OK


@njit(cache=True, inline="always")
def _systematic_mp(g, rng, out, fw, iw):
    return _systematic_mp_u(g, 1.0 - rng.random(), out, fw, iw)


@njit(cache=True, inline="always")
def _cond_multinomial(i, k, g, rng, out, fw, iw):
    """Independent draws for every slot except ``k``; slot ``k`` is set to ``i``."""
    n = g.shape[0]
    if _total(g) < 0.0:
        return DEGENERATE
    if not (g[i] > 0.0):
        return REFERENCE_ZERO
    cum = fw[0]
    tot = _cumsum(g, cum)
    for j in range(n):
        if j == k:
            out[j] = i
        else:
            out[j] = _inverse_cdf(cum, (1.0 - rng.random()) * tot)
    return OK


@njit(cache=True, inline="always")
def _cond_killing(i, k, g, rng, out, fw, iw):
    """Draw order: unconditional killing, then the relabelling index J."""
    n = g.shape[0]
    if _total(g) < 0.0:
        return DEGENERATE
    if not (g[i] > 0.0):
        return REFERENCE_ZERO
    abar = iw[2]
    _killing(g, rng, abar, fw, iw)
    gstar = 0.0
    tot = 0.0
    for j in range(n):
        tot += g[j]
        if g[j] > gstar:
            gstar = g[j]
    # unnormalised h(.|i); the total is n * gstar
    h = fw[1]
    for j in range(n):
        h[j] = gstar - g[j]
    h[i] = gstar + (tot - g[i])
    jj = _categorical(h, n * gstar, rng)
    abar[jj] = i
    shift = jj - k
    for j in range(n):
        out[j] = abar[(j + shift) % n]
    return OK


@njit(cache=True, inline="always")
def _cond_systematic_mp(i, k, g, rng, out, fw, iw):
    """Draw order: branch uniform, offset uniform, cyclic offset C-bar."""
    n = g.shape[0]
    tot = _total(g)
    if tot < 0.0:
        return DEGENERATE
    if not (g[i] > 0.0):
        return REFERENCE_ZERO
    nw = n * g[i] / tot
    fl = np.floor(nw)
    r = nw - fl
    p = r * (fl + 1.0) / nw
    if rng.random() < p:
        ubar = r * rng.random()
        count = int(fl) + 1
    else:
        ubar = r + (1.0 - r) * rng.random()
        count = int(fl)
    if count < 1:
        # only possible through rounding when n * W^i is an integer
        count = 1
        ubar = 0.0
    perm = iw[0]
    _mean_partition_order(g, perm)
    s = 0
    for j in range(n):
        if perm[j] == i:
            s = j
            break
    ptil = iw[1]
    gp = fw[1]
    for j in range(n):
        ptil[j] = perm[(j + s) % n]
        gp[j] = g[ptil[j]]
    cum = fw[0]
    tot2 = _cumsum(gp, cum)
    abar = iw[2]
    jj = 0
    for m in range(n):
        v = (m + ubar) / n * tot2
        while jj < n - 1 and cum[jj] < v:
            jj += 1
        while gp[jj] == 0.0 and jj > 0:
            jj -= 1
        abar[m] = ptil[jj]
    cbar = int(rng.random() * count)
    if cbar >= count:
        cbar = count - 1
    # guards the stratum boundary against rounding in the cumulative sums
    abar[cbar] = i
    shift = cbar - k
    for j in range(n):
        out[j] = abar[(j + shift) % n]
    return OK


def workspace(n):
    """Scratch buffers ``(float[2, n], int[3, n])`` shared by the resampling kernels."""
    return np.empty((2, n)), np.empty((3, n), dtype=np.int64)


@njit(cache=True)
def _resample(scheme, g, rng, out, fw, iw):
    if scheme == 0:
        return _multinomial(g, rng, out, fw, iw)
    elif scheme == 1:
        return _killing(g, rng, out, fw, iw)
    elif scheme == 2:
        return _systematic(g, rng, out, fw, iw)
    return _systematic_mp(g, rng, out, fw, iw)


@njit(cache=True)
def _cond_resample(scheme, i, k, g, rng, out, fw, iw):
    if g.shape[0] == 1:
        if not (g[0] > 0.0):
            return REFERENCE_ZERO
        out[0] = i
        return OK
    if scheme == 0:
        return _cond_multinomial(i, k, g, rng, out, fw, iw)
    elif scheme == 1:
        return _cond_killing(i, k, g, rng, out, fw, iw)
    return _cond_systematic_mp(i, k, g, rng, out, fw, iw)


# ---------------------------------------------------------------------------
# Python API


def _as_weights(g):
    g = np.ascontiguousarray(g, dtype=float)
    if g.ndim != 1 or g.shape[0] < 1:
        raise ValueError("weights must be a non-empty 1-d array")
    return g


def _raise(status, what="weights"):
    if status == DEGENERATE:
        raise DegenerateWeightsError(f"degenerate {what}: need non-negative entries with a positive sum")
    if status == REFERENCE_ZERO:
        raise ReferenceWeightError("reference weight zero: the conditional resampling is undefined")


def _check_slots(i, k, n):
    if not (0 <= i < n and 0 <= k < n):
        raise IndexError(f"conditioning indices ({i}, {k}) out of range for N={n}")


def multinomial(g, rng):
    """I.i.d. ancestors from ``Categ(g / sum(g))``."""
    g = _as_weights(g)
    out = np.empty(g.shape[0], dtype=np.int64)
    _raise(_multinomial(g, rng, out, *workspace(g.shape[0])))
    return out


def killing(g, rng):
    """Killing resampling with ``g* = max(g)``.

    Slot ``i`` keeps its own particle with probability ``g[i] / g*`` and
    otherwise draws from the weighted pool, independently across slots.
    """
    g = _as_weights(g)
    out = np.empty(g.shape[0], dtype=np.int64)
    _raise(_killing(g, rng, out, *workspace(g.shape[0])))
    return out


def systematic(g, rng=None, u=None):
    """Systematic resampling; pass ``u`` in (0, 1] to fix the common offset."""
    g = _as_weights(g)
    out = np.empty(g.shape[0], dtype=np.int64)
    if u is None:
        u = 1.0 - rng.random()
    _raise(_systematic_u(g, float(u), out, *workspace(g.shape[0])))
    return out


def mean_partition_order(w):
    """Permutation placing entries ``<= mean(w)`` before entries ``> mean(w)``.

    Runs in O(N) time. Ties with the mean land in the first segment.
    """
    w = _as_weights(w)
    perm = np.empty(w.shape[0], dtype=np.int64)
    _mean_partition_order(w, perm)
    return perm


def is_mean_partition(w, perm):
    """Check the mean-partition predicate for ``w`` re-indexed by ``perm``."""
    w = np.asarray(w, dtype=float)
    perm = np.asarray(perm)
    if sorted(perm.tolist()) != list(range(w.shape[0])):
        return False
    above = w[perm] > w.mean()
    # once above the mean, never back below
    return not np.any(above[:-1] & ~above[1:])


def systematic_mean_partition(g, rng=None, u=None):
    """Systematic resampling run over the weights in mean-partition order."""
    g = _as_weights(g)
    out = np.empty(g.shape[0], dtype=np.int64)
    if u is None:
        u = 1.0 - rng.random()
    _raise(_systematic_mp_u(g, float(u), out, *workspace(g.shape[0])))
    return out


def cond_multinomial(i, k, g, rng):
    """Multinomial ancestors conditioned on ``A[k] == i``."""
    g = _as_weights(g)
    _check_slots(i, k, g.shape[0])
    out = np.empty(g.shape[0], dtype=np.int64)
    _raise(_cond_resample(MULTINOMIAL, i, k, g, rng, out, *workspace(g.shape[0])))
    return out


def cond_killing(i, k, g, rng):
    """Conditional killing resampling; ``A[k] == i`` on every draw.

    Its unconditional counterpart is killing followed by a uniformly random
    cyclic shift of the slots.
    """
    g = _as_weights(g)
    _check_slots(i, k, g.shape[0])
    out = np.empty(g.shape[0], dtype=np.int64)
    _raise(_cond_resample(KILLING, i, k, g, rng, out, *workspace(g.shape[0])))
    return out


def cond_systematic_mean_partition(i, k, g, rng):
    """Conditional systematic resampling with mean partition; ``A[k] == i``.

    The count of ``i`` among the ancestors is drawn first from its law given
    ``A[k] == i``, then the offset is drawn given that count, and finally
    the output is cyclically shifted so that slot ``k`` lands on a copy of
    ``i``. The unconditional counterpart is :func:`systematic_mean_partition`
    followed by a uniformly random cyclic shift.
    """
    g = _as_weights(g)
    _check_slots(i, k, g.shape[0])
    out = np.empty(g.shape[0], dtype=np.int64)
    _raise(_cond_resample(SYSTEMATIC_MP, i, k, g, rng, out, *workspace(g.shape[0])))
    return out


def cyclic_shift(s, n):
    """The cyclic shift ``j -> (j + s) mod n`` as an index array."""
    if n < 1:
        raise ValueError("n must be positive")
    return (np.arange(n) + s) % n


def random_cyclic_shift(a, rng):
    """Return ``a`` re-indexed by a uniformly random cyclic shift."""
    a = np.asarray(a)
    return a[cyclic_shift(int(rng.integers(a.shape[0])), a.shape[0])]


def resample(scheme, g, rng):
    """Unconditional resampling by scheme name or code."""
    g = _as_weights(g)
    out = np.empty(g.shape[0], dtype=np.int64)
    _raise(_resample(scheme_code(scheme), g, rng, out, *workspace(g.shape[0])))
    return out


def cond_resample(scheme, i, k, g, rng):
    """Conditional resampling by scheme name or code."""
    g = _as_weights(g)
    _check_slots(i, k, g.shape[0])
    out = np.empty(g.shape[0], dtype=np.int64)
    _raise(_cond_resample(scheme_code(scheme, conditional=True), i, k, g, rng, out, *workspace(g.shape[0])))
    return out
