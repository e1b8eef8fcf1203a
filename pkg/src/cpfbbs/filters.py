"""Particle filter, conditional particle filters and bridge backward sampling.

All indices are 0-based: times run ``0..T-1`` and particle slots ``0..N-1``.
``A[k]`` holds the ancestors used when moving from time ``k`` to ``k+1``
and ``logW[k]`` the log-potentials ``log G_k`` of the particles at time
``k`` paired with their parents.

Models are Feynman-Kac models with affine-Gaussian proposals
``M_k(. | x) = N(F_k x + c_k, L_k L_k')`` and a potential family from
:mod:`cpfbbs.potentials`. Blocks longer than one step additionally need
the conditionals of a :class:`~cpfbbs.lingauss.LinearGaussianOracle`.

The heavy lifting happens in compiled kernels; whole chains and batches of
one-sweep replicates run without returning to Python.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from . import potentials as pot
from .lingauss import LinearGaussianOracle, NumericalError, psd_cholesky
from .resampling import (
    DEGENERATE,
    OK,
    REFERENCE_ZERO,
    DegenerateWeightsError,
    ReferenceWeightError,
    _categorical,
    _cond_resample,
    _resample,
    scheme_code,
)

__all__ = [
    "FkModel",
    "ParticleSystem",
    "ReferencePath",
    "ChainResult",
    "METHODS",
    "as_blocking",
    "dense_blocking",
    "particle_filter",
    "ancestor_trace",
    "cpf",
    "cpf_at",
    "cpf_bs",
    "cpf_bbs",
    "bridge_cpf",
    "run_chain",
    "sweep_replicates",
]

AT = 0
BBS = 1
METHODS = {"cpf_at": AT, "cpf_bs": BBS, "cpf_bbs": BBS}

# kernel status codes beyond the resampling ones
BRIDGE_DEGENERATE = 3
BAD_POTENTIAL = 4

_LOG_2PI = math.log(2.0 * math.pi)


# ---------------------------------------------------------------------------
# model containers


@dataclass(frozen=True, eq=False)
class FkModel:
    """Feynman-Kac model with affine-Gaussian proposals.

    ``F[k], c[k], chol[k]`` describe ``M_k`` for ``k >= 1``; entry 0 is
    unused. ``potential`` is a family code from :mod:`cpfbbs.potentials`.
    """

    m1_mean: np.ndarray
    m1_chol: np.ndarray
    F: np.ndarray
    c: np.ndarray
    chol: np.ndarray
    potential: int = pot.NONE
    fpar: np.ndarray = field(default_factory=lambda: np.zeros(1))
    ipar: np.ndarray = field(default_factory=lambda: np.zeros(1, dtype=np.int64))
    oracle: LinearGaussianOracle | None = None
    grid: np.ndarray | None = None
    name: str = ""

    def __post_init__(self):
        conv = {
            "m1_mean": np.float64, "m1_chol": np.float64, "F": np.float64,
            "c": np.float64, "chol": np.float64, "fpar": np.float64, "ipar": np.int64,
        }
        for name, dt in conv.items():
            object.__setattr__(self, name, np.ascontiguousarray(getattr(self, name), dtype=dt))
        T, d = self.c.shape
        if T < 2:
            raise ValueError("a Feynman-Kac model needs T >= 2")
        if self.F.shape != (T, d, d) or self.chol.shape != (T, d, d):
            raise ValueError("proposal arrays have inconsistent shapes")
        if self.m1_mean.shape != (d,) or self.m1_chol.shape != (d, d):
            raise ValueError("initial law has the wrong dimension")
        if self.oracle is not None and (self.oracle.T, self.oracle.dim) != (T, d):
            raise ValueError("oracle does not match the model horizon/dimension")
        if self.grid is not None:
            object.__setattr__(self, "grid", np.asarray(self.grid, float))
        object.__setattr__(self, "_blocks", {})

    @property
    def T(self):
        return self.c.shape[0]

    @property
    def dim(self):
        return self.c.shape[1]

    @classmethod
    def from_oracle(cls, oracle, potential=pot.NONE, fpar=None, ipar=None, grid=None, name=""):
        m1, L1, F, c, chol = oracle.proposal_arrays()
        return cls(
            m1, L1, F, c, chol, potential,
            np.zeros(1) if fpar is None else fpar,
            np.zeros(1, dtype=np.int64) if ipar is None else ipar,
            oracle, grid, name,
        )

    # Python-side helpers, mostly for tests and diagnostics

    def log_potential(self, k, xprev, x):
        return pot.evaluate(self.potential, k, xprev, x, self.fpar, self.ipar)

    def sample_initial(self, rng, n=None):
        z = rng.standard_normal((1 if n is None else n, self.dim))
        out = self.m1_mean + z @ self.m1_chol.T
        return out[0] if n is None else out

    def sample_transition(self, k, x, rng):
        x = np.asarray(x, float)
        z = rng.standard_normal(x.shape)
        return x @ self.F[k].T + self.c[k] + z @ self.chol[k].T

    def log_transition(self, k, x_prev, x):
        """``log M_k(x | x_prev)``, vectorised over rows of ``x_prev``."""
        mean = np.atleast_2d(x_prev) @ self.F[k].T + self.c[k]
        return _gauss_logpdf_rows(np.asarray(x, float), mean, self.chol[k])

    def block_arrays(self, boundaries):
        """Packed block/bridge coefficients for a blocking (cached)."""
        key = tuple(as_blocking(boundaries, self.T))
        if key in self._blocks:
            return self._blocks[key]
        T, d = self.T, self.dim
        bounds = np.asarray(key, dtype=np.int64)
        if self.oracle is not None and np.any(np.diff(bounds) > 1):
            _, P, pc, pchol, R, rc, rchol = self.oracle.blocking_arrays(key)
            P, pc, pchol = P.copy(), pc.copy(), pchol.copy()
        elif np.any(np.diff(bounds) > 1):
            raise ValueError("blocks longer than one step need a bridge oracle")
        else:
            P = np.zeros((T, d, d))
            pc = np.zeros((T, d))
            pchol = np.zeros((T, d, d))
            R = np.zeros((1, d, 2 * d))
            rc = np.zeros((1, d))
            rchol = np.zeros((1, d, d))
        # one-step blocks use the proposal itself so that dense blocking
        # reproduces backward sampling exactly
        for l, u in zip(key[:-1], key[1:]):
            if u == l + 1:
                P[u], pc[u], pchol[u] = self.F[u], self.c[u], self.chol[u]
        plogdet = np.zeros(T)
        for u in key[1:]:
            dg = np.diag(pchol[u])
            if not np.all(dg > 0):
                raise NumericalError(f"block density ending at {u} is singular")
            plogdet[u] = np.sum(np.log(dg))
        out = tuple(np.ascontiguousarray(a) for a in (bounds, P, pc, pchol, plogdet, R, rc, rchol))
        self._blocks[key] = out
        return out


def _gauss_logpdf_rows(x, mean, L):
    from scipy.linalg import solve_triangular

    diff = (x - np.atleast_2d(mean)).T
    z = solve_triangular(L, diff, lower=True)
    d = L.shape[0]
    out = -0.5 * np.sum(z * z, axis=0) - np.sum(np.log(np.diag(L))) - 0.5 * d * _LOG_2PI
    return out if out.shape[0] > 1 else float(out[0])


@dataclass
class ParticleSystem:
    """States ``X[T, N, d]``, ancestors ``A[T-1, N]`` and log-potentials ``logW[T, N]``."""

    X: np.ndarray
    A: np.ndarray
    logW: np.ndarray

    @property
    def W(self):
        """Normalised weights per time."""
        w = np.exp(self.logW - self.logW.max(axis=1, keepdims=True))
        return w / w.sum(axis=1, keepdims=True)

    @property
    def log_normaliser(self):
        """``log prod_k mean_i W_k^(i)``, the unbiased normalising-constant estimate."""
        m = self.logW.max(axis=1)
        return float(np.sum(m + np.log(np.mean(np.exp(self.logW - m[:, None]), axis=1))))


@dataclass
class ReferencePath:
    """Reference states ``x[T, d]`` and the slots ``B[T]`` they occupy."""

    x: np.ndarray
    B: np.ndarray

    def __post_init__(self):
        self.x = np.ascontiguousarray(np.atleast_2d(np.asarray(self.x, float)))
        if self.x.shape[0] == 1 and np.ndim(self.B) and len(self.B) > 1:
            self.x = self.x.T.copy()
        self.B = np.ascontiguousarray(self.B, dtype=np.int64)
        if self.B.shape != (self.x.shape[0],):
            raise ValueError("reference states and slots must have the same length")


@dataclass
class ChainResult:
    """Output of :func:`run_chain`.

    ``trace[it, t, j]`` records component ``comps[j]`` at time ``t`` after
    iteration ``it``. ``changes[b]`` counts iterations where the lower
    boundary state of block ``b`` moved.
    """

    trace: np.ndarray
    changes: np.ndarray
    blocking: np.ndarray
    final: ReferencePath
    comps: np.ndarray

    @property
    def n_iter(self):
        return self.trace.shape[0]


def as_blocking(boundaries, T):
    """Validate a blocking sequence ``0 = b_0 < ... < b_L = T-1``."""
    b = np.asarray(boundaries, dtype=np.int64).ravel()
    if b.size < 2 or b[0] != 0 or b[-1] != T - 1 or np.any(np.diff(b) <= 0):
        raise ValueError(f"invalid blocking sequence for T={T}: {b.tolist()}")
    return b


def dense_blocking(T):
    return np.arange(T, dtype=np.int64)


# ---------------------------------------------------------------------------
# kernels


@njit(cache=True, inline="always")
def _gauss(mean, L, rng, out):
    # ``out`` holds the standard normals first; rows are filled from the
    # bottom so that entries still needed are not yet overwritten
    d = mean.shape[0]
    for j in range(d):
        out[j] = rng.standard_normal()
    for r in range(d - 1, -1, -1):
        s = mean[r]
        for j in range(r + 1):
            s += L[r, j] * out[j]
        out[r] = s


@njit(cache=True, inline="always")
def _affine(Fm, x, c, out):
    d = out.shape[0]
    for r in range(d):
        s = c[r]
        for j in range(x.shape[0]):
            s += Fm[r, j] * x[j]
        out[r] = s


@njit(cache=True, inline="always")
def _logpdf_chol(x, mean, L, logdet_half, z):
    d = x.shape[0]
    q = 0.0
    for r in range(d):
        s = x[r] - mean[r]
        for j in range(r):
            s -= L[r, j] * z[j]
        z[r] = s / L[r, r]
        q += z[r] * z[r]
    return -0.5 * q - logdet_half - 0.5 * d * _LOG_2PI


@njit(cache=True)
def _scratch(N, d):
    """Buffers reused across steps: resampling (float, int), bridge weights, small vectors
    and row selectors (identity, then a free row)."""
    ix = np.empty((2, N), dtype=np.int64)
    for i in range(N):
        ix[0, i] = i
    return np.empty((2, N)), np.empty((3, N), dtype=np.int64), np.empty((5, N)), np.empty(4 * d), ix


@njit(cache=True, inline="always")
def _normalise(logw, g):
    """Exponentiate relative to the max; returns total, -1 if degenerate, -2 on NaN/+inf."""
    m = -np.inf
    for j in range(logw.shape[0]):
        v = logw[j]
        if math.isnan(v) or v == np.inf:
            return -2.0
        if v > m:
            m = v
    if m == -np.inf:
        return -1.0
    s = 0.0
    for j in range(logw.shape[0]):
        g[j] = math.exp(logw[j] - m)
        s += g[j]
    return s


@njit(cache=True, inline="always")
def _set_err(err, code, k):
    err[0] = code
    err[1] = k


@njit(cache=True)
def _forward(cond, scheme, X, A, logW, xref, bref, m1, L1, F, c, chol, pcode, fpar, ipar, rng, err, g,
             fw, iw, vs, ix):
    """Particle filter (``cond=False``) or conditional particle filter sweep."""
    T, N, d = X.shape
    mean = vs[:d]
    for i in range(N):
        if cond and i == bref[0]:
            X[0, i, :] = xref[0]
        else:
            _gauss(m1, L1, rng, X[0, i])
    ident = ix[0]
    pot.log_potential_rows(pcode, 0, X[0], ident, X[0], ident, fpar, ipar, logW[0])
    for k in range(T - 1):
        tot = _normalise(logW[k], g)
        if tot < 0:
            _set_err(err, DEGENERATE if tot == -1.0 else BAD_POTENTIAL, k)
            return
        if cond:
            st = _cond_resample(scheme, bref[k], bref[k + 1], g, rng, A[k], fw, iw)
        else:
            st = _resample(scheme, g, rng, A[k], fw, iw)
        if st != OK:
            _set_err(err, st, k)
            return
        for i in range(N):
            par = X[k, A[k, i]]
            if cond and i == bref[k + 1]:
                X[k + 1, i, :] = xref[k + 1]
            else:
                _affine(F[k + 1], par, c[k + 1], mean)
                _gauss(mean, chol[k + 1], rng, X[k + 1, i])
        pot.log_potential_rows(pcode, k + 1, X[k], A[k], X[k + 1], ident, fpar, ipar, logW[k + 1])


@njit(cache=True)
def _bridge(scheme, X, A, logW, l, u, bstar, P, pc, pchol, plogdet, R, rc, rchol,
            pcode, fpar, ipar, rng, err, Xt, At, newx, newB, fw, iw, bw, vs, ix):
    """Bridge CPF over block ``(l, u)`` towards ``newx[u]``; writes the new path on ``l..u-1``."""
    T, N, d = X.shape
    xu = newx[u]
    nb = u - l
    gprev = bw[0]
    gnext = bw[1]
    lw = bw[2]
    lwn = bw[3]
    g = bw[4]
    mean = vs[:d]
    pair = vs[d:3 * d]
    z = vs[3 * d:]
    for i in range(N):
        _affine(P[u], X[l, i], pc[u], mean)
        # lookahead weight M_{u|l}(x_u | x_l)^{1/(u-l)}, carried along lineages
        lw[i] = _logpdf_chol(xu, mean, pchol[u], plogdet[u], z) / nb
        gprev[i] = logW[l, i]
        Xt[l, i, :] = X[l, i]
    for v in range(l + 1, u):
        for i in range(N):
            gnext[i] = gprev[i] + lw[i]
        tot = _normalise(gnext, g)
        if tot < 0:
            _set_err(err, DEGENERATE if tot == -1.0 else BAD_POTENTIAL, v - 1)
            return
        st = _cond_resample(scheme, bstar[v - 1], bstar[v], g, rng, At[v - 1], fw, iw)
        if st != OK:
            _set_err(err, st, v - 1)
            return
        pair[d:] = xu
        for i in range(N):
            par = Xt[v - 1, At[v - 1, i]]
            if i == bstar[v]:
                Xt[v, i, :] = X[v, bstar[v]]
            else:
                pair[:d] = par
                _affine(R[v], pair, rc[v], mean)
                _gauss(mean, rchol[v], rng, Xt[v, i])
            lwn[i] = lw[At[v - 1, i]]
        pot.log_potential_rows(pcode, v, Xt[v - 1], At[v - 1], Xt[v], ix[0], fpar, ipar, gnext)
        gprev[:] = gnext
        lw[:] = lwn
    # every particle at u - 1 is paired with the fixed state newx[u]
    sel = ix[1]
    for j in range(N):
        sel[j] = u
    pot.log_potential_rows(pcode, u, Xt[u - 1], ix[0], newx, sel, fpar, ipar, lwn)
    for j in range(N):
        gnext[j] = gprev[j] + lwn[j] + lw[j]
    tot = _normalise(gnext, g)
    if tot < 0:
        _set_err(err, BRIDGE_DEGENERATE if tot == -1.0 else BAD_POTENTIAL, u)
        return
    b = _categorical(g, tot, rng)
    newB[u - 1] = b
    newx[u - 1, :] = Xt[u - 1, b]
    for v in range(u - 2, l - 1, -1):
        b = At[v, b]
        newB[v] = b
        newx[v, :] = Xt[v, b]


@njit(cache=True)
def _sweep(method, scheme, X, A, logW, xref, bref, newx, newB, bstar, changes,
           m1, L1, F, c, chol, pcode, fpar, ipar,
           bounds, P, pc, pchol, plogdet, R, rc, rchol, rng, err, Xt, At, g, fw, iw, bw, vs, ix):
    """One CPF-AT or CPF-BBS update from ``(xref, bref)`` into ``(newx, newB)``."""
    T, N, d = X.shape
    _forward(True, scheme, X, A, logW, xref, bref, m1, L1, F, c, chol, pcode, fpar, ipar, rng, err, g,
             fw, iw, vs, ix)
    if err[0] != 0:
        return
    tot = _normalise(logW[T - 1], g)
    if tot < 0:
        _set_err(err, DEGENERATE if tot == -1.0 else BAD_POTENTIAL, T - 1)
        return
    b = _categorical(g, tot, rng)
    newB[T - 1] = b
    newx[T - 1, :] = X[T - 1, b]
    if method == AT:
        for k in range(T - 2, -1, -1):
            b = A[k, b]
            newB[k] = b
            newx[k, :] = X[k, b]
        return
    for kb in range(bounds.shape[0] - 1, 0, -1):
        u = bounds[kb]
        l = bounds[kb - 1]
        bstar[u] = newB[u]
        for v in range(u - 1, l - 1, -1):
            bstar[v] = A[v, bstar[v + 1]]
        _bridge(scheme, X, A, logW, l, u, bstar, P, pc, pchol, plogdet, R, rc, rchol,
                pcode, fpar, ipar, rng, err, Xt, At, newx, newB, fw, iw, bw, vs, ix)
        if err[0] != 0:
            return
        changed = 0
        for j in range(d):
            if newx[l, j] != X[l, bstar[l], j]:
                changed = 1
        changes[kb - 1] = changed


@njit(cache=True)
def _chain(method, scheme, n_iter, xref, bref, comps, trace, tally, N,
           m1, L1, F, c, chol, pcode, fpar, ipar,
           bounds, P, pc, pchol, plogdet, R, rc, rchol, rng, err):
    T, d = xref.shape
    X = np.empty((T, N, d))
    A = np.empty((T - 1, N), dtype=np.int64)
    logW = np.empty((T, N))
    Xt = np.empty((T, N, d))
    At = np.empty((T - 1, N), dtype=np.int64)
    g = np.empty(N)
    fw, iw, bw, vs, ix = _scratch(N, d)
    newx = np.empty((T, d))
    newB = np.empty(T, dtype=np.int64)
    bstar = np.empty(T, dtype=np.int64)
    changes = np.zeros(max(bounds.shape[0] - 1, 1), dtype=np.int64)
    for it in range(n_iter):
        _sweep(method, scheme, X, A, logW, xref, bref, newx, newB, bstar, changes,
               m1, L1, F, c, chol, pcode, fpar, ipar,
               bounds, P, pc, pchol, plogdet, R, rc, rchol, rng, err, Xt, At, g, fw, iw, bw, vs, ix)
        if err[0] != 0:
            err[2] = it
            return
        for t in range(T):
            for j in range(comps.shape[0]):
                trace[it, t, j] = newx[t, comps[j]]
        if method != AT:
            for b in range(bounds.shape[0] - 1):
                tally[b] += changes[b]
        xref[:, :] = newx
        bref[:] = newB


@njit(cache=True)
def _replicates(method, scheme, xrefs, brefs, out, outB, N,
                m1, L1, F, c, chol, pcode, fpar, ipar,
                bounds, P, pc, pchol, plogdet, R, rc, rchol, rng, err):
    n_rep, T, d = xrefs.shape
    X = np.empty((T, N, d))
    A = np.empty((T - 1, N), dtype=np.int64)
    logW = np.empty((T, N))
    Xt = np.empty((T, N, d))
    At = np.empty((T - 1, N), dtype=np.int64)
    g = np.empty(N)
    fw, iw, bw, vs, ix = _scratch(N, d)
    bstar = np.empty(T, dtype=np.int64)
    changes = np.zeros(max(bounds.shape[0] - 1, 1), dtype=np.int64)
    for r in range(n_rep):
        _sweep(method, scheme, X, A, logW, xrefs[r], brefs[r], out[r], outB[r], bstar, changes,
               m1, L1, F, c, chol, pcode, fpar, ipar,
               bounds, P, pc, pchol, plogdet, R, rc, rchol, rng, err, Xt, At, g, fw, iw, bw, vs, ix)
        if err[0] != 0:
            err[2] = r
            return


@njit(cache=True)
def _pf(scheme, X, A, logW, m1, L1, F, c, chol, pcode, fpar, ipar, rng, err):
    T, N, d = X.shape
    g = np.empty(N)
    fw, iw, bw, vs, ix = _scratch(N, d)
    dummy_x = np.empty((T, d))
    dummy_b = np.zeros(T, dtype=np.int64)
    _forward(False, scheme, X, A, logW, dummy_x, dummy_b, m1, L1, F, c, chol, pcode, fpar, ipar, rng, err, g,
             fw, iw, vs, ix)


# ---------------------------------------------------------------------------
# Python API


def _raise(err, what=""):
    code, k = int(err[0]), int(err[1])
    if code == OK:
        return
    suffix = f" ({what})" if what else ""
    if code == DEGENERATE:
        raise DegenerateWeightsError(f"degenerate weights at time {k}{suffix}")
    if code == REFERENCE_ZERO:
        raise ReferenceWeightError(f"reference weight zero at time {k}{suffix}")
    if code == BRIDGE_DEGENERATE:
        raise DegenerateWeightsError(f"degenerate bridge weights in the block ending at time {k}{suffix}")
    if code == BAD_POTENTIAL:
        raise NumericalError(f"non-finite log-potential (NaN or +inf) at time {k}{suffix}")
    raise RuntimeError(f"kernel failed with status {code} at time {k}")


def _prop(model):
    return (model.m1_mean, model.m1_chol, model.F, model.c, model.chol,
            int(model.potential), model.fpar, model.ipar)


def _method_and_blocks(model, method, blocking):
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {sorted(METHODS)}")
    code = METHODS[method]
    if method == "cpf_bs":
        if blocking is not None and not np.array_equal(as_blocking(blocking, model.T), dense_blocking(model.T)):
            raise ValueError("cpf_bs uses the dense blocking")
        blocking = dense_blocking(model.T)
    elif method == "cpf_bbs":
        if blocking is None:
            raise ValueError("cpf_bbs needs a blocking sequence")
    else:
        blocking = np.array([0, model.T - 1])
        d, T = model.dim, model.T
        z = np.zeros
        return code, (np.asarray(blocking, np.int64), z((T, d, d)), z((T, d)), z((T, d, d)), z(T),
                      z((1, d, 2 * d)), z((1, d)), z((1, d, d)))
    return code, model.block_arrays(blocking)


def _check_ref(model, ref, N):
    if N < 1:
        raise ValueError("need at least one particle")
    if ref.x.shape != (model.T, model.dim):
        raise ValueError(f"reference path must have shape {(model.T, model.dim)}")
    if np.any(ref.B < 0) or np.any(ref.B >= N):
        raise ValueError("reference slots out of range")


def particle_filter(model: FkModel, scheme, N, rng) -> ParticleSystem:
    """Plain particle filter with an unconditional resampling."""
    if N < 1:
        raise ValueError("need at least one particle")
    code = scheme_code(scheme)
    T, d = model.T, model.dim
    X = np.empty((T, N, d))
    A = np.empty((T - 1, N), dtype=np.int64)
    logW = np.empty((T, N))
    err = np.zeros(3, dtype=np.int64)
    _pf(code, X, A, logW, *_prop(model), rng, err)
    _raise(err, "particle filter")
    return ParticleSystem(X, A, logW)


def ancestor_trace(A, b_u, l=0):
    """Trace ``b_v = A[v][b_{v+1}]`` backwards from ``b_u`` at time ``l + len(A)``.

    ``A`` holds the ancestor rows for times ``l..u-1``; the result lists
    the indices at times ``l..u-1``.
    """
    A = np.asarray(A)
    n = A.shape[0]
    out = np.empty(n, dtype=np.int64)
    b = int(b_u)
    for v in range(n - 1, -1, -1):
        b = int(A[v][b])
        out[v] = b
    return out


def cpf(model: FkModel, scheme, ref: ReferencePath, N, rng):
    """Forward conditional particle filter; returns ``(system, B_T)``."""
    _check_ref(model, ref, N)
    code = scheme_code(scheme, conditional=True)
    T, d = model.T, model.dim
    X = np.empty((T, N, d))
    A = np.empty((T - 1, N), dtype=np.int64)
    logW = np.empty((T, N))
    g = np.empty(N)
    err = np.zeros(3, dtype=np.int64)
    fw, iw, _, vs, ix = _scratch(N, d)
    _forward(True, code, X, A, logW, ref.x, ref.B, *_prop(model), rng, err, g, fw, iw, vs, ix)
    _raise(err, "conditional particle filter")
    tot = _normalise(logW[-1], g)
    if tot < 0:
        _raise(np.array([DEGENERATE if tot == -1 else BAD_POTENTIAL, T - 1, 0]))
    return ParticleSystem(X, A, logW), int(_categorical(g, tot, rng))


def _one_sweep(model, method, scheme, ref, N, rng, blocking=None):
    _check_ref(model, ref, N)
    code = scheme_code(scheme, conditional=True)
    mcode, blocks = _method_and_blocks(model, method, blocking)
    out = np.empty((1, model.T, model.dim))
    outB = np.empty((1, model.T), dtype=np.int64)
    err = np.zeros(3, dtype=np.int64)
    _replicates(mcode, code, ref.x[None].copy(), ref.B[None].copy(), out, outB, N,
                *_prop(model), *blocks, rng, err)
    _raise(err, method)
    return ReferencePath(out[0], outB[0])


def cpf_at(model, scheme, ref, N, rng) -> ReferencePath:
    """CPF with ancestor tracing."""
    return _one_sweep(model, "cpf_at", scheme, ref, N, rng)


def cpf_bbs(model, scheme, ref, blocking, N, rng) -> ReferencePath:
    """CPF with bridge backward sampling over the given blocking."""
    return _one_sweep(model, "cpf_bbs", scheme, ref, N, rng, blocking)


def cpf_bs(model, scheme, ref, N, rng) -> ReferencePath:
    """CPF with backward sampling (bridge sampling over the dense blocking)."""
    return _one_sweep(model, "cpf_bs", scheme, ref, N, rng)


def bridge_cpf(model, scheme, system: ParticleSystem, l, u, bstar, x_u, rng, blocking=None):
    """Run the bridge CPF over block ``(l, u)`` of an existing forward system.

    ``bstar`` gives the reference slots for times ``l..u-1`` (typically traced
    from the forward ancestors) and ``x_u`` the state conditioned on at ``u``.
    The block coefficients come from ``blocking`` (default: the single block
    ``(l, u)`` joined to the horizon ends). Returns ``(x_new[l:u], B_new[l:u])``.
    """
    T, d = model.T, model.dim
    if not 0 <= l < u < T:
        raise ValueError(f"need 0 <= l < u < T, got ({l}, {u})")
    if blocking is None:
        blocking = sorted({0, l, u, T - 1})
    blocks = model.block_arrays(blocking)
    if l not in blocks[0] or u not in blocks[0]:
        raise ValueError("l and u must be boundaries of the blocking")
    code = scheme_code(scheme, conditional=True)
    N = system.X.shape[1]
    bs = np.zeros(T, dtype=np.int64)
    bs[l:u] = np.asarray(bstar, dtype=np.int64)
    newx = np.zeros((T, d))
    newx[u] = np.asarray(x_u, float).reshape(d)
    newB = np.zeros(T, dtype=np.int64)
    Xt = np.empty((T, N, d))
    At = np.empty((T - 1, N), dtype=np.int64)
    err = np.zeros(3, dtype=np.int64)
    _, P, pc, pchol, plogdet, R, rc, rchol = blocks
    _bridge(code, system.X, system.A, system.logW, l, u, bs,
            P, pc, pchol, plogdet, R, rc, rchol, int(model.potential), model.fpar, model.ipar,
            rng, err, Xt, At, newx, newB, *_scratch(N, d))
    _raise(err, "bridge CPF")
    return newx[l:u].copy(), newB[l:u].copy()


def initial_path(model, N, rng):
    """Draw a path from a particle filter's final weights by ancestor tracing."""
    ps = particle_filter(model, "systematic_mp", N, rng)
    g = np.exp(ps.logW[-1] - ps.logW[-1].max())
    b = int(_categorical(g, g.sum(), rng))
    B = np.append(ancestor_trace(ps.A, b), b)
    return ps.X[np.arange(model.T), B].copy()


def run_chain(model, method, scheme, N, n_iter, rng, blocking=None, init=None, comps=None) -> ChainResult:
    """Iterate a CPF kernel ``n_iter`` times, recording selected components.

    ``init`` is a :class:`ReferencePath` or a ``(T, d)`` array (slots drawn
    uniformly). By default the chain starts from a path traced out of a
    particle filter with ``N`` particles, which has positive weight even
    under hard constraints.
    """
    if n_iter < 1:
        raise ValueError("n_iter must be positive")
    T, d = model.T, model.dim
    if init is None:
        init = ReferencePath(initial_path(model, N, rng), rng.integers(N, size=T))
    elif not isinstance(init, ReferencePath):
        init = ReferencePath(np.asarray(init, float).reshape(T, d), rng.integers(N, size=T))
    _check_ref(model, init, N)
    comps = np.arange(d) if comps is None else np.atleast_1d(np.asarray(comps, dtype=np.int64))
    if np.any(comps < 0) or np.any(comps >= d):
        raise ValueError("component index out of range")
    code = scheme_code(scheme, conditional=True)
    mcode, blocks = _method_and_blocks(model, method, blocking)
    trace = np.empty((n_iter, T, comps.shape[0]))
    tally = np.zeros(max(blocks[0].shape[0] - 1, 1), dtype=np.int64)
    xref = init.x.copy()
    bref = init.B.copy()
    err = np.zeros(3, dtype=np.int64)
    _chain(mcode, code, n_iter, xref, bref, comps, trace, tally, N,
           *_prop(model), *blocks, rng, err)
    _raise(err, f"{method}, iteration {int(err[2])}")
    n_blocks = blocks[0].shape[0] - 1 if mcode != AT else 0
    return ChainResult(trace, tally[:n_blocks], blocks[0], ReferencePath(xref, bref), comps)


def sweep_replicates(model, method, scheme, N, xrefs, rng, blocking=None, brefs=None):
    """Apply one update independently to each reference in ``xrefs[R, T, d]``.

    Slots are drawn uniformly unless ``brefs`` is given. Returns the new
    paths ``[R, T, d]`` and slots ``[R, T]``.
    """
    xrefs = np.ascontiguousarray(xrefs, dtype=np.float64)
    if xrefs.ndim == 2:
        xrefs = xrefs[:, :, None].copy()
    n_rep, T, d = xrefs.shape
    if (T, d) != (model.T, model.dim):
        raise ValueError("replicate paths do not match the model")
    if brefs is None:
        brefs = rng.integers(N, size=(n_rep, T))
    brefs = np.ascontiguousarray(brefs, dtype=np.int64)
    code = scheme_code(scheme, conditional=True)
    mcode, blocks = _method_and_blocks(model, method, blocking)
    out = np.empty_like(xrefs)
    outB = np.empty((n_rep, T), dtype=np.int64)
    err = np.zeros(3, dtype=np.int64)
    _replicates(mcode, code, xrefs, brefs, out, outB, N, *_prop(model), *blocks, rng, err)
    _raise(err, f"{method}, replicate {int(err[2])}")
    return out, outB


def gaussian_model_chol(cov):
    """Cholesky factor helper for building :class:`FkModel` inputs by hand."""
    return psd_cholesky(cov)
