"""Linear-Gaussian test models whose smoothing laws are known exactly.

The state follows a linear-Gaussian chain and each time carries a scalar
Gaussian observation ``y_k ~ N(z.x_k, var_k)`` used as the potential. The
Kalman smoother gives the exact target marginals.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import potentials as pot
from ..filters import FkModel
from ..lingauss import (
    GaussianTransition,
    LgssObservation,
    LinearGaussianOracle,
    SmootherOutput,
    kalman_filter_lgssm,
    kalman_smoother,
    sample_paths,
)


@dataclass(frozen=True)
class LinearGaussianFk:
    """A model together with its exact smoother (target) and prior oracle."""

    model: FkModel
    posterior: SmootherOutput

    @property
    def log_normaliser(self):
        return self.posterior.loglik

    def exact_paths(self, n, rng):
        """Exact draws ``[n, T, d]`` from the smoothing distribution."""
        return sample_paths(self.posterior, n, rng)


def linear_gaussian_fk(m1, P1, transitions, y, obs_var, z) -> LinearGaussianFk:
    """FK model with prior dynamics ``transitions`` and Gaussian observation potentials.

    ``transitions[k]`` (``k >= 1``) maps ``k-1 -> k``; ``y`` may contain NaN for
    missing observations.
    """
    y = np.asarray(y, float)
    T = y.shape[0]
    m1 = np.atleast_1d(np.asarray(m1, float))
    d = m1.shape[0]
    z = np.atleast_1d(np.asarray(z, float))
    var = np.broadcast_to(np.asarray(obs_var, float), (T,)).copy()
    if z.shape != (d,) or np.any(var <= 0):
        raise ValueError("observation vector/variances are invalid")
    prior = kalman_smoother(kalman_filter_lgssm(m1, P1, transitions, None))
    oracle = LinearGaussianOracle(prior)
    fpar = np.concatenate([y, var, z])
    ipar = np.array([T], dtype=np.int64)
    model = FkModel.from_oracle(oracle, pot.GAUSS_OBS, fpar, ipar, name="linear-gaussian")
    obs = [None if np.isnan(y[k]) else LgssObservation(z[None, :], [[var[k]]], [y[k]]) for k in range(T)]
    post = kalman_smoother(kalman_filter_lgssm(m1, P1, transitions, obs))
    return LinearGaussianFk(model, post)


def ar1_fk(T=10, rho=0.9, q=None, obs_var=1.0, y=None, rng=None) -> LinearGaussianFk:
    """Stationary scalar AR(1) prior ``x_k = rho x_{k-1} + N(0, q)`` with Gaussian potentials.

    Without ``y`` the observations are simulated from the model using ``rng``.
    The default ``q = 1 - rho^2`` gives a unit stationary variance.
    """
    q = 1.0 - rho ** 2 if q is None else q
    p1 = q / (1.0 - rho ** 2) if abs(rho) < 1 else 1.0
    trans = [None] + [GaussianTransition(np.array([[rho]]), np.array([[q]]))] * (T - 1)
    if y is None:
        rng = np.random.default_rng(0) if rng is None else rng
        x = np.empty(T)
        x[0] = rng.normal(0, np.sqrt(p1))
        for k in range(1, T):
            x[k] = rho * x[k - 1] + rng.normal(0, np.sqrt(q))
        y = x + rng.normal(0, np.sqrt(obs_var), T)
    return linear_gaussian_fk([0.0], [[p1]], trans, y, obs_var, [1.0])
