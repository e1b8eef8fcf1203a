"""Planar correlated random walk with terrain preference (CTCRW-T).

Each axis follows ``dV = -beta V dt + sigma dB``, ``dL = V dt``; the state
is ``(V_x, L_x, V_y, L_y)``. Locations are observed with ``N(0, eta^2 I)``
noise. The proposals are the walk conditioned on all observations, and the
potentials ``exp(-dt * (-log v))`` come from a terrain raster.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import block_diag

from .. import potentials as pot
from ..filters import FkModel
from ..lingauss import GaussianTransition, LgssObservation, LinearGaussianOracle, LinearSde, kalman_filter_lgssm, kalman_smoother
from .terrain import TerrainRaster

_OBS_TOL = 1e-9


@dataclass(frozen=True)
class CtcrwParams:
    beta: float = 1.0
    sigma: float = 300.0
    eta: float = 50.0
    sigma_L: float = 50.0

    def __post_init__(self):
        if not (self.beta > 0 and self.sigma > 0 and self.eta > 0 and self.sigma_L > 0):
            raise ValueError("beta, sigma, eta and sigma_L must be positive")


def ctcrw_sde(beta, sigma):
    """One axis of the walk as a linear SDE (initial law left at zero)."""
    F = np.array([[-beta, 0.0], [1.0, 0.0]])
    K = np.array([[sigma, 0.0], [0.0, 0.0]])
    return LinearSde(F, K, np.zeros(2), np.zeros((2, 2)))


def ctcrw_transition(beta, sigma, t):
    """Closed-form ``(T, Q)`` for one axis over an interval of length ``t``."""
    e1 = math.exp(-beta * t)
    em1 = -math.expm1(-beta * t)
    em2 = -math.expm1(-2 * beta * t)
    s2 = sigma ** 2
    Tm = np.array([[e1, 0.0], [em1 / beta, 1.0]])
    q11 = s2 / (2 * beta) * em2
    q12 = s2 / (2 * beta ** 2) * em1 * em1
    q22 = s2 / beta ** 2 * (t - 2 / beta * em1 + em2 / (2 * beta))
    return Tm, np.array([[q11, q12], [q12, q22]])


def ctcrwt_fk(params: CtcrwParams, obs_times, obs, raster: TerrainRaster, grid, off_value=np.inf) -> FkModel:
    """FK model whose proposals are the observation-conditioned walk on ``grid``.

    ``obs[j]`` is the location observed at ``obs_times[j]``, which must be a
    grid time. Outside the raster the potential is ``off_value`` (the
    default makes leaving the map impossible).
    """
    p = params
    grid = np.asarray(grid, float)
    if grid.ndim != 1 or grid.shape[0] < 2 or np.any(np.diff(grid) <= 0):
        raise ValueError("grid must be strictly increasing with at least two points")
    obs = np.atleast_2d(np.asarray(obs, float))
    obs_times = np.asarray(obs_times, float)
    if obs.shape != (obs_times.shape[0], 2) or obs.shape[0] == 0:
        raise ValueError("observations must be an (n, 2) array matching the times")
    idx = np.searchsorted(grid, obs_times - _OBS_TOL)
    idx = np.clip(idx, 0, grid.shape[0] - 1)
    off = np.abs(grid[idx] - obs_times) > _OBS_TOL * max(1.0, abs(grid[-1]))
    if np.any(off):
        raise ValueError(f"observation time {obs_times[np.argmax(off)]} is not on the grid")
    T = grid.shape[0]
    trans = [None]
    for dt in np.diff(grid):
        Ta, Qa = ctcrw_transition(p.beta, p.sigma, dt)
        trans.append(GaussianTransition(block_diag(Ta, Ta), block_diag(Qa, Qa)))
    Z = np.array([[0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 0.0, 1.0]])
    H = p.eta ** 2 * np.eye(2)
    seq = [None] * T
    for k, z in zip(idx, obs):
        if seq[k] is not None:
            raise ValueError(f"two observations at grid index {k}")
        seq[k] = LgssObservation(Z, H, z)
    sv2 = p.sigma ** 2 / (2 * p.beta)
    m1 = np.array([0.0, obs[0, 0], 0.0, obs[0, 1]])
    P1 = np.diag([sv2, p.sigma_L ** 2, sv2, p.sigma_L ** 2])
    post = kalman_smoother(kalman_filter_lgssm(m1, P1, trans, seq))
    dts = np.append(np.diff(grid), 0.0)
    V = raster.potential().ravel()
    fpar = np.concatenate([dts, [raster.cellsize, raster.origin_x, raster.origin_y, off_value], V])
    ipar = np.array([T, raster.ncols, raster.nrows, 1, 3], dtype=np.int64)
    return FkModel.from_oracle(LinearGaussianOracle(post), pot.RASTER, fpar, ipar, grid=grid, name="ctcrwt")


def path_enters_zero_cells(raster: TerrainRaster, paths):
    """Boolean per path: does any grid location fall in a ``v = 0`` cell or off the raster?"""
    paths = np.asarray(paths, float)
    v = raster.value_at(paths[..., 1], paths[..., 3], off=0.0)
    return np.any(v == 0.0, axis=-1)
