"""Correlated random walk with a quadratic path-integral potential (CTCRW-P).

State ``(V, L)`` follows ``dV = -beta_v V dt + sigma dB`` and
``dL = (-beta_x L + V) dt``; the potential penalises ``L^2 / (2 eta^2)``
along the path through Riemann weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .. import potentials as pot
from ..filters import FkModel
from ..lingauss import (
    GaussianTransition,
    LinearGaussianOracle,
    LinearSde,
    kalman_filter_lgssm,
    kalman_smoother,
    transition,
)

# the closed-form Q cancels to relative error ~ eps / (gap * min(t, 1/(bv+bx)))^2;
# below this product the matrix exponential is used instead
_MIN_SEPARATION = 0.1


@dataclass(frozen=True)
class CtcrwpParams:
    beta_v: float
    beta_x: float
    sigma: float
    eta: float = 1.0
    tau: float = 8.0
    dt: float = 2.0 ** -5

    def __post_init__(self):
        if not (self.sigma > 0 and self.eta > 0 and self.dt > 0 and self.tau > 0):
            raise ValueError("sigma, eta, tau and dt must be positive")
        if not (self.beta_v > 0 and self.beta_x > 0):
            raise ValueError("beta_v and beta_x must be positive")
        n = self.tau / self.dt
        if abs(n - round(n)) > 1e-9 * max(1.0, n):
            raise ValueError("tau must be a multiple of dt")

    @property
    def T(self):
        return int(round(self.tau / self.dt)) + 1

    @property
    def grid(self):
        return self.dt * np.arange(self.T)


def ctcrwp_sde(beta_v, beta_x, sigma):
    F = np.array([[-beta_v, 0.0], [1.0, -beta_x]])
    K = np.array([[sigma, 0.0], [0.0, 0.0]])
    S = ctcrwp_stationary_cov(beta_v, beta_x, sigma)
    return LinearSde(F, K, np.zeros(2), S)


def ctcrwp_expm(beta_v, beta_x, t):
    """``expm(F t)`` in closed form."""
    ev, ex = math.exp(-beta_v * t), math.exp(-beta_x * t)
    if beta_v == beta_x:
        off = t * ev
    else:
        # (e^{-bx t} - e^{-bv t}) / (bv - bx), written to avoid cancellation
        dlt = (beta_v - beta_x) * t
        off = ex * t * (-math.expm1(-dlt) / dlt)
    return np.array([[ev, 0.0], [off, ex]])


def ctcrwp_cond_cov(beta_v, beta_x, sigma, t):
    """Conditional covariance ``Q`` over an interval of length ``t``.

    The closed forms are used where they are well conditioned; short
    intervals and close rates fall back to the matrix exponential.
    """
    bv, bx, s2 = beta_v, beta_x, sigma ** 2
    q11 = s2 / (2 * bv) * (-math.expm1(-2 * bv * t))
    if bv == bx and 2 * bv * t >= 1.0:
        e = math.exp(-2 * bv * t)
        q12 = s2 / (4 * bv ** 2) * (1 + e * (-2 * bv * t - 1))
        q22 = s2 / (4 * bv ** 3) * (1 - e * (1 + 2 * bv * t * (bv * t + 1)))
    elif abs(bv - bx) * min(t, 1.0 / (bv + bx)) < _MIN_SEPARATION:
        return transition(ctcrwp_sde(bv, bx, sigma), 0.0, t).Q_st
    else:
        a = -math.expm1(-(bv + bx) * t) / (bv + bx)
        b = -math.expm1(-2 * bv * t) / (2 * bv)
        c = -math.expm1(-2 * bx * t) / (2 * bx)
        q12 = s2 / (bv - bx) * (a - b)
        q22 = s2 / (bv - bx) ** 2 * (c + b - 2 * a)
    return np.array([[q11, q12], [q12, q22]])


def ctcrwp_stationary_cov(beta_v, beta_x, sigma):
    """Stationary covariance ``S``.

    The bracketed differences simplify exactly, e.g.
    ``s22 = sigma^2 / (2 beta_x beta_v (beta_x + beta_v))``, which also
    covers ``beta_v == beta_x``.
    """
    bv, bx, s2 = beta_v, beta_x, sigma ** 2
    s11 = s2 / (2 * bv)
    s12 = s2 / (2 * bv * (bv + bx))
    s22 = s2 / (2 * bx * bv * (bx + bv))
    return np.array([[s11, s12], [s12, s22]])


def ctcrwp_unit_stationary(sigma):
    """``(beta_v, beta_x)`` giving a stationary covariance with unit diagonal.

    ``s11 = 1`` fixes ``beta_v = sigma^2/2``; ``s22 = 1`` is then a quadratic
    in ``beta_x`` with one positive root.
    """
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    bv = 0.5 * sigma ** 2
    # beta_x^2 + beta_v beta_x - sigma^2 / (2 beta_v) = 0
    bx = 0.5 * (-bv + math.sqrt(bv * bv + 2 * sigma ** 2 / bv))
    S = ctcrwp_stationary_cov(bv, bx, sigma)
    if not (abs(S[0, 0] - 1) < 1e-10 and abs(S[1, 1] - 1) < 1e-10):
        raise ArithmeticError("no unit-variance parameters found")
    return bv, bx


def ctcrwp_fk(params: CtcrwpParams) -> FkModel:
    """FK model with stationary start, exact transitions and ``exp(-dt L^2/(2 eta^2))`` potentials.

    The returned model carries the prior smoother as its bridge oracle.
    """
    p = params
    T = p.T
    grid = p.grid
    S = ctcrwp_stationary_cov(p.beta_v, p.beta_x, p.sigma)
    tr = GaussianTransition(ctcrwp_expm(p.beta_v, p.beta_x, p.dt), ctcrwp_cond_cov(p.beta_v, p.beta_x, p.sigma, p.dt))
    prior = kalman_smoother(kalman_filter_lgssm(np.zeros(2), S, [None] + [tr] * (T - 1), None))
    dts = np.append(np.diff(grid), 0.0)
    fpar = np.concatenate([dts, [0.0, 1.0 / (2 * p.eta ** 2)]])
    ipar = np.array([T], dtype=np.int64)
    return FkModel.from_oracle(LinearGaussianOracle(prior), pot.QUADRATIC, fpar, ipar, grid=grid, name="ctcrwp")
