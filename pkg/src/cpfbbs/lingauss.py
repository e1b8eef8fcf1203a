"""Linear-Gaussian machinery: SDE discretisation, Kalman filtering/smoothing,
smoothed cross-covariances and the block conditionals used by bridging.

Times are grid indices ``0..T-1``. A :class:`SmootherOutput` describes the
Gaussian Markov chain ``X_0..X_{T-1}`` given all (possibly missing)
observations; every conditional needed by the bridge filter is read off it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
from scipy import linalg

__all__ = [
    "NumericalError",
    "GaussianDist",
    "GaussianTransition",
    "AffineGaussian",
    "LinearSde",
    "LgssObservation",
    "SmootherOutput",
    "psd_cholesky",
    "transition",
    "discretise",
    "kalman_filter",
    "kalman_filter_lgssm",
    "kalman_smoother",
    "smoothed_cross_cov",
    "block_conditional",
    "block_density",
    "bridge_conditional",
    "bridge_sample_dist",
    "LinearGaussianOracle",
]


class NumericalError(ArithmeticError):
    """A covariance stayed non-positive-definite after jitter repair."""


def psd_cholesky(S, what="covariance"):
    """Lower Cholesky factor, symmetrising and adding jitter once if needed.

    A zero matrix is returned as a zero factor (point mass).
    """
    S = np.atleast_2d(np.asarray(S, dtype=float))
    S = 0.5 * (S + S.T)
    if not np.any(S):
        return np.zeros_like(S)
    try:
        return np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        d = S.shape[0]
        jitter = 1e-10 * max(np.trace(S) / d, np.finfo(float).tiny)
        try:
            return np.linalg.cholesky(S + jitter * np.eye(d))
        except np.linalg.LinAlgError:
            raise NumericalError(f"{what} is not positive semi-definite") from None


def _solve_psd(S, B, what="covariance"):
    """S^{-1} B through a (jitter-repaired) Cholesky factorisation."""
    L = psd_cholesky(S, what)
    if not np.all(np.diag(L) > 0):
        raise NumericalError(f"{what} is singular")
    return linalg.cho_solve((L, True), B)


@dataclass(frozen=True)
class GaussianDist:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", np.atleast_1d(np.asarray(self.mean, float)))
        cov = np.atleast_2d(np.asarray(self.cov, float))
        object.__setattr__(self, "cov", 0.5 * (cov + cov.T))

    @property
    def dim(self):
        return self.mean.shape[0]

    def sample(self, rng, size=None):
        L = psd_cholesky(self.cov)
        shape = (self.dim,) if size is None else (size, self.dim)
        z = rng.standard_normal(shape)
        return self.mean + z @ L.T

    def logpdf(self, x):
        x = np.asarray(x, float)
        L = psd_cholesky(self.cov)
        diff = np.atleast_2d(x - self.mean)
        z = linalg.solve_triangular(L, diff.T, lower=True)
        out = -0.5 * np.sum(z * z, axis=0) - np.sum(np.log(np.diag(L))) - 0.5 * self.dim * np.log(2 * np.pi)
        return out if x.ndim > 1 else out[0]


@dataclass(frozen=True)
class GaussianTransition:
    """``X_t | X_s = x ~ N(T_st x, Q_st)``."""

    T_st: np.ndarray
    Q_st: np.ndarray


class AffineGaussian(NamedTuple):
    """Conditional law ``N(A x + b, cov)`` of one block given another."""

    A: np.ndarray
    b: np.ndarray
    cov: np.ndarray

    def dist(self, x):
        return GaussianDist(self.A @ np.asarray(x, float) + self.b, self.cov)


@dataclass(frozen=True)
class LinearSde:
    """``dX = F X dt + K dB``, ``X_0 ~ N(mu_init, Sigma_init)``."""

    F: np.ndarray
    K: np.ndarray
    mu_init: np.ndarray
    Sigma_init: np.ndarray

    def __post_init__(self):
        F = np.atleast_2d(np.asarray(self.F, float))
        K = np.atleast_2d(np.asarray(self.K, float))
        mu = np.atleast_1d(np.asarray(self.mu_init, float))
        S = np.atleast_2d(np.asarray(self.Sigma_init, float))
        d = F.shape[0]
        if F.shape != (d, d) or K.shape[0] != d or mu.shape != (d,) or S.shape != (d, d):
            raise ValueError("inconsistent SDE dimensions")
        for name, val in (("F", F), ("K", K), ("mu_init", mu), ("Sigma_init", S)):
            object.__setattr__(self, name, val)

    @property
    def dim(self):
        return self.F.shape[0]


@dataclass(frozen=True)
class LgssObservation:
    """``y ~ N(Z x, H)`` at one grid index; ``y=None`` (or NaN) marks it missing."""

    Z: np.ndarray
    H: np.ndarray
    y: np.ndarray | None = None

    @property
    def missing(self):
        return self.y is None or bool(np.any(np.isnan(np.asarray(self.y, float))))


@dataclass(frozen=True)
class SmootherOutput:
    """Filtered, predicted and (once smoothed) smoothed moments on the grid.

    ``gain[k]`` is the smoother gain linking ``k`` and ``k+1``:
    ``Cov(X_k, X_t | Y) = gain[k] Cov(X_{k+1}, X_t | Y)`` for ``t > k``.
    """

    filt_mean: np.ndarray  # (T, d)
    filt_cov: np.ndarray  # (T, d, d)
    pred_mean: np.ndarray  # (T, d); entry 0 is the prior
    pred_cov: np.ndarray
    trans: np.ndarray  # (T, d, d); trans[k] maps k-1 -> k, trans[0] unused
    loglik: float
    smooth_mean: np.ndarray | None = None
    smooth_cov: np.ndarray | None = None
    gain: np.ndarray | None = None  # (T-1, d, d)

    @property
    def T(self):
        return self.filt_mean.shape[0]

    @property
    def dim(self):
        return self.filt_mean.shape[1]

    @property
    def smoothed(self):
        return self.smooth_mean is not None


def transition(sde: LinearSde, s: float, t: float) -> GaussianTransition:
    """Exact discretisation over ``[s, t]``.

    Van Loan's matrix exponential is applied on a sub-interval short enough
    that its ``-F'`` block cannot amplify rounding, then the result is
    doubled up with ``Q(2h) = Phi(h) Q(h) Phi(h)' + Q(h)``.
    """
    if not t > s:
        raise ValueError(f"transition needs t > s, got s={s}, t={t}")
    d = sde.dim
    dt = t - s
    nrm = np.abs(sde.F).sum(axis=1).max() * dt
    j = max(0, int(np.ceil(np.log2(nrm / 0.5)))) if nrm > 0.5 else 0
    h = dt / 2.0 ** j
    C = np.zeros((2 * d, 2 * d))
    C[:d, :d] = sde.F
    C[:d, d:] = sde.K @ sde.K.T
    C[d:, d:] = -sde.F.T
    E = linalg.expm(C * h)
    Phi = E[:d, :d]
    Q = E[:d, d:] @ Phi.T
    for _ in range(j):
        Q = Phi @ Q @ Phi.T + Q
        Phi = Phi @ Phi
    if j:
        Phi = linalg.expm(sde.F * dt)
    return GaussianTransition(Phi, 0.5 * (Q + Q.T))


def discretise(sde: LinearSde, grid: Sequence[float]) -> list[GaussianTransition | None]:
    """Transitions between consecutive grid times (entry 0 is ``None``)."""
    grid = np.asarray(grid, float)
    if grid.ndim != 1 or grid.shape[0] < 1 or np.any(np.diff(grid) <= 0):
        raise ValueError("grid must be strictly increasing")
    return [None] + [transition(sde, grid[k - 1], grid[k]) for k in range(1, grid.shape[0])]


def kalman_filter_lgssm(m1, P1, transitions, observations) -> SmootherOutput:
    """Kalman filter for ``X_k = T_k X_{k-1} + N(0, Q_k)`` with optional observations.

    ``observations[k]`` is an :class:`LgssObservation` or ``None``; missing
    values skip the update step. Also returns the log marginal likelihood of
    the observed values.
    """
    T = len(transitions)
    m1 = np.atleast_1d(np.asarray(m1, float))
    d = m1.shape[0]
    fm = np.empty((T, d))
    fc = np.empty((T, d, d))
    pm = np.empty((T, d))
    pc = np.empty((T, d, d))
    tr = np.zeros((T, d, d))
    tr[0] = np.eye(d)
    loglik = 0.0
    m, P = m1, np.atleast_2d(np.asarray(P1, float))
    for k in range(T):
        if k > 0:
            trk = transitions[k]
            tr[k] = trk.T_st
            m = trk.T_st @ m
            P = trk.T_st @ P @ trk.T_st.T + trk.Q_st
            P = 0.5 * (P + P.T)
        pm[k], pc[k] = m, P
        obs = observations[k] if observations is not None else None
        if obs is not None and not obs.missing:
            Z = np.atleast_2d(obs.Z)
            H = np.atleast_2d(obs.H)
            y = np.atleast_1d(np.asarray(obs.y, float))
            S = Z @ P @ Z.T + H
            L = psd_cholesky(S, "innovation covariance")
            if not np.all(np.diag(L) > 0):
                raise NumericalError("innovation covariance is singular")
            v = y - Z @ m
            PZt = P @ Z.T
            Kg = linalg.cho_solve((L, True), PZt.T).T
            z = linalg.solve_triangular(L, v, lower=True)
            loglik += -0.5 * (z @ z) - np.sum(np.log(np.diag(L))) - 0.5 * len(y) * np.log(2 * np.pi)
            m = m + Kg @ v
            P = P - Kg @ PZt.T
            P = 0.5 * (P + P.T)
        fm[k], fc[k] = m, P
    return SmootherOutput(fm, fc, pm, pc, tr, float(loglik))


def kalman_filter(sde: LinearSde, obs, grid) -> SmootherOutput:
    """Kalman filter for a linear SDE observed on a time grid.

    ``obs`` is a sequence aligned with ``grid`` (entries may be ``None``) or
    a mapping from grid index to :class:`LgssObservation`.
    """
    grid = np.asarray(grid, float)
    trans = discretise(sde, grid)
    if isinstance(obs, dict):
        seq = [None] * grid.shape[0]
        for k, o in obs.items():
            if not 0 <= k < grid.shape[0]:
                raise ValueError(f"observation index {k} is off the grid")
            seq[k] = o
        obs = seq
    elif obs is not None and len(obs) != grid.shape[0]:
        raise ValueError("observation sequence must align with the grid")
    return kalman_filter_lgssm(sde.mu_init, sde.Sigma_init, trans, obs)


def kalman_smoother(filt: SmootherOutput) -> SmootherOutput:
    """Rauch-Tung-Striebel backward pass."""
    T, d = filt.T, filt.dim
    sm = np.empty((T, d))
    sc = np.empty((T, d, d))
    gain = np.empty((max(T - 1, 0), d, d))
    sm[-1], sc[-1] = filt.filt_mean[-1], filt.filt_cov[-1]
    for k in range(T - 2, -1, -1):
        A = filt.trans[k + 1]
        Pp = filt.pred_cov[k + 1]
        # J = P_{k|k} A' P_{k+1|k}^{-1}
        J = _solve_psd(Pp, A @ filt.filt_cov[k], "predicted covariance").T
        gain[k] = J
        sm[k] = filt.filt_mean[k] + J @ (sm[k + 1] - filt.pred_mean[k + 1])
        C = filt.filt_cov[k] + J @ (sc[k + 1] - Pp) @ J.T
        sc[k] = 0.5 * (C + C.T)
    return SmootherOutput(
        filt.filt_mean, filt.filt_cov, filt.pred_mean, filt.pred_cov, filt.trans,
        filt.loglik, sm, sc, gain,
    )


def _require_smoothed(sm):
    if not sm.smoothed:
        raise ValueError("run kalman_smoother first")


def smoothed_cross_cov(sm: SmootherOutput, s: int, t: int) -> np.ndarray:
    """``Cov(X_s, X_t | Y)`` for ``s <= t`` by the backward gain recursion."""
    _require_smoothed(sm)
    if not (0 <= s <= t < sm.T):
        raise ValueError(f"need 0 <= s <= t < T, got s={s}, t={t}")
    C = sm.smooth_cov[t]
    for v in range(t - 1, s - 1, -1):
        C = sm.gain[v] @ C
    return C


def block_conditional(sm: SmootherOutput, l: int, u: int) -> AffineGaussian:
    """Law of ``X_u`` given ``X_l`` (and the observations) as an affine Gaussian."""
    _require_smoothed(sm)
    if not (0 <= l < u < sm.T):
        raise ValueError(f"need 0 <= l < u < T, got l={l}, u={u}")
    C_lu = smoothed_cross_cov(sm, l, u)
    K = _solve_psd(sm.smooth_cov[l], C_lu, f"smoothed covariance at {l}").T
    cov = sm.smooth_cov[u] - K @ C_lu
    return AffineGaussian(K, sm.smooth_mean[u] - K @ sm.smooth_mean[l], 0.5 * (cov + cov.T))


def block_density(sm: SmootherOutput, l: int, u: int, x_l, x_u):
    """Log-density of ``X_u = x_u`` given ``X_l = x_l``; vectorised over rows of ``x_l``."""
    cond = block_conditional(sm, l, u)
    x_l = np.asarray(x_l, float)
    mean = np.atleast_2d(x_l) @ cond.A.T + cond.b
    L = psd_cholesky(cond.cov)
    z = linalg.solve_triangular(L, (np.asarray(x_u, float) - mean).T, lower=True)
    out = -0.5 * np.sum(z * z, axis=0) - np.sum(np.log(np.diag(L))) - 0.5 * sm.dim * np.log(2 * np.pi)
    return out if x_l.ndim > 1 else float(out[0])


def bridge_conditional(sm: SmootherOutput, k: int, u: int) -> AffineGaussian:
    """Law of ``X_k`` given ``(X_{k-1}, X_u)``; ``A`` acts on the stacked pair."""
    _require_smoothed(sm)
    if not (1 <= k < u < sm.T):
        raise ValueError(f"need 1 <= k < u < T, got k={k}, u={u}")
    d = sm.dim
    S_pp = sm.smooth_cov[k - 1]
    S_uu = sm.smooth_cov[u]
    S_pu = smoothed_cross_cov(sm, k - 1, u)
    S_pk = smoothed_cross_cov(sm, k - 1, k)
    S_ku = smoothed_cross_cov(sm, k, u)
    joint = np.block([[S_pp, S_pu], [S_pu.T, S_uu]])
    cross = np.hstack([S_pk.T, S_ku])  # Cov(X_k, (X_{k-1}, X_u))
    A = _solve_psd(joint, cross.T, "bridge block covariance").T
    mu_pair = np.concatenate([sm.smooth_mean[k - 1], sm.smooth_mean[u]])
    cov = sm.smooth_cov[k] - A @ cross.T
    cov = 0.5 * (cov + cov.T)
    # a deterministic bridge can leave tiny negative rounding on the diagonal
    if np.trace(cov) <= 1e-14 * max(np.trace(sm.smooth_cov[k]), 1e-300):
        cov = np.zeros((d, d))
    return AffineGaussian(A, sm.smooth_mean[k] - A @ mu_pair, cov)


def bridge_sample_dist(sm: SmootherOutput, k: int, u: int, x_prev, x_u) -> GaussianDist:
    cond = bridge_conditional(sm, k, u)
    return cond.dist(np.concatenate([np.atleast_1d(x_prev), np.atleast_1d(x_u)]))


def sample_paths(sm: SmootherOutput, n, rng):
    """Exact joint draws ``[n, T, d]`` given the observations (forward filter, backward sample)."""
    T, d = sm.T, sm.dim
    out = np.empty((n, T, d))
    L = psd_cholesky(sm.filt_cov[-1])
    out[:, -1] = sm.filt_mean[-1] + rng.standard_normal((n, d)) @ L.T
    for k in range(T - 2, -1, -1):
        A = sm.trans[k + 1]
        Pp = sm.pred_cov[k + 1]
        J = _solve_psd(Pp, A @ sm.filt_cov[k]).T
        cov = sm.filt_cov[k] - J @ Pp @ J.T
        Lk = psd_cholesky(cov)
        mean = sm.filt_mean[k] + (out[:, k + 1] - sm.pred_mean[k + 1]) @ J.T
        out[:, k] = mean + rng.standard_normal((n, d)) @ Lk.T
    return out


class LinearGaussianOracle:
    """Conditionals of a Gaussian Markov path, packed for the filter kernels.

    Wraps a smoothed :class:`SmootherOutput`. Provides the one-step proposal
    ``M_k``, block densities ``M_{u|l}`` and bridge laws, both as Python
    callables and as dense coefficient arrays for a given blocking.
    """

    def __init__(self, smoother: SmootherOutput):
        _require_smoothed(smoother)
        self.smoother = smoother
        self._blockings = {}

    @property
    def T(self):
        return self.smoother.T

    @property
    def dim(self):
        return self.smoother.dim

    def initial(self) -> GaussianDist:
        return GaussianDist(self.smoother.smooth_mean[0], self.smoother.smooth_cov[0])

    def step(self, k) -> AffineGaussian:
        return block_conditional(self.smoother, k - 1, k)

    def log_block_density(self, l, u, x_l, x_u):
        return block_density(self.smoother, l, u, x_l, x_u)

    def bridge_sample(self, k, x_prev, u, x_u, rng):
        return bridge_sample_dist(self.smoother, k, u, x_prev, x_u).sample(rng)

    def proposal_arrays(self):
        """``(m1_mean, m1_chol, F, c, chol)`` with ``F[k], c[k], chol[k]`` for step k-1 -> k."""
        T, d = self.T, self.dim
        F = np.zeros((T, d, d))
        c = np.zeros((T, d))
        chol = np.zeros((T, d, d))
        for k in range(1, T):
            st = self.step(k)
            F[k], c[k], chol[k] = st.A, st.b, psd_cholesky(st.cov, f"proposal covariance at {k}")
        init = self.initial()
        return init.mean.copy(), psd_cholesky(init.cov, "initial covariance"), F, c, chol

    def blocking_arrays(self, boundaries):
        """Coefficient arrays for the blocks of a blocking sequence.

        Returns ``(lower, P, pc, pchol, R, rc, rchol)`` where, for an upper
        boundary ``u`` with lower boundary ``lower[u]``, ``X_u | X_l ~
        N(P[u] x + pc[u], pchol[u] pchol[u]')`` and, for an interior index
        ``k``, ``X_k | (X_{k-1}, X_u) ~ N(R[k] (x, x_u) + rc[k], ...)``.
        Results are cached per blocking.
        """
        key = tuple(int(b) for b in boundaries)
        if key in self._blockings:
            return self._blockings[key]
        T, d = self.T, self.dim
        lower = np.full(T, -1, dtype=np.int64)
        P = np.zeros((T, d, d))
        pc = np.zeros((T, d))
        pchol = np.zeros((T, d, d))
        R = np.zeros((T, d, 2 * d))
        rc = np.zeros((T, d))
        rchol = np.zeros((T, d, d))
        for l, u in zip(key[:-1], key[1:]):
            lower[u] = l
            bc = block_conditional(self.smoother, l, u)
            P[u], pc[u], pchol[u] = bc.A, bc.b, psd_cholesky(bc.cov, f"block covariance ({l}, {u})")
            for k in range(l + 1, u):
                br = bridge_conditional(self.smoother, k, u)
                R[k], rc[k], rchol[k] = br.A, br.b, psd_cholesky(br.cov, f"bridge covariance at {k}")
        out = (lower, P, pc, pchol, R, rc, rchol)
        self._blockings[key] = out
        return out

    @classmethod
    def from_sde(cls, sde: LinearSde, grid, obs=None):
        filt = kalman_filter(sde, obs if obs is not None else [None] * len(grid), grid)
        return cls(kalman_smoother(filt))
