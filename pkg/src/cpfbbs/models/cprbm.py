"""Cox process driven by a reflected Brownian motion (CP-RBM).

Events arrive with piecewise-constant intensity ``beta * exp(-alpha X_k)``
on ``[t_k, t_{k+1})``, where ``X`` is a random walk reflected into
``(a, b)``. The FK representation uses plain Gaussian random-walk proposals
and moves the reflection into the potentials as a density ratio.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import potentials as pot
from ..filters import FkModel
from ..lingauss import GaussianTransition, LinearGaussianOracle, kalman_filter_lgssm, kalman_smoother

K_TRUNC = 10
_DEDUP_TOL = 1e-12


@dataclass(frozen=True)
class CpRbmParams:
    sigma: float = 0.3
    a: float = 0.0
    b: float = 3.0
    alpha: float = 1.0
    beta: float = 0.5
    K_trunc: int = K_TRUNC

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if not self.a < self.b:
            raise ValueError("need a < b")
        if self.K_trunc < 1:
            raise ValueError("K_trunc must be at least 1")
        if self.beta <= 0:
            raise ValueError("beta must be positive")


def reflect(z, a, b):
    """Mirror ``z`` over ``a`` and ``b`` until it lies in ``(a, b)``.

    Points landing exactly on a bound (a null event) are nudged inwards by
    one ulp.
    """
    z = np.asarray(z, float)
    if a == -np.inf and b == np.inf:
        out = z.copy()
    elif b == np.inf:
        out = np.where(z < a, 2 * a - z, z)
    elif a == -np.inf:
        out = np.where(z > b, 2 * b - z, z)
    else:
        w = b - a
        y = np.mod(z - a, 2 * w)
        out = a + np.where(y > w, 2 * w - y, y)
    out = np.where(out <= a, np.nextafter(a, b), out)
    out = np.where(out >= b, np.nextafter(b, a), out)
    return out if out.ndim else float(out)


def reflected_normal_logpdf(x, mu, var, a, b, K_trunc=K_TRUNC):
    """Log-density of ``reflect(N(mu, var), a, b)`` from a truncated image sum; ``-inf`` off ``(a, b)``."""
    x = np.asarray(x, float)
    f = np.vectorize(lambda xi, mi: pot.reflected_normal_logpdf_nb(xi, mi, var, a, b, K_trunc), otypes=[float])
    out = f(x, mu)
    return out if out.ndim else float(out)


def simulate_path(params: CpRbmParams, grid, rng):
    """Draw ``X`` at the grid times from the reflected dynamics."""
    grid = np.asarray(grid, float)
    x = np.empty(grid.shape[0])
    x[0] = reflect(rng.normal(0.0, 1.0), params.a, params.b)
    sd = params.sigma * np.sqrt(np.diff(grid))
    for k in range(1, x.shape[0]):
        x[k] = reflect(x[k - 1] + sd[k - 1] * rng.standard_normal(), params.a, params.b)
    return x


def intensity(params: CpRbmParams, x):
    return params.beta * np.exp(-params.alpha * np.asarray(x, float))


def poisson_process_simulate(rates, grid, rng):
    """Event times of a Poisson process with rate ``rates[k]`` on ``[t_k, t_{k+1})``."""
    grid = np.asarray(grid, float)
    rates = np.asarray(rates, float)[: grid.shape[0] - 1]
    if np.any(rates < 0):
        raise ValueError("rates must be non-negative")
    lengths = np.diff(grid)
    counts = rng.poisson(rates * lengths)
    cells = np.repeat(np.arange(lengths.shape[0]), counts)
    times = grid[cells] + lengths[cells] * rng.random(cells.shape[0])
    return np.sort(times)


def augment_grid(grid, events):
    """Merge event times into the grid; times within 1e-12 of a grid point are not duplicated."""
    grid = np.asarray(grid, float)
    events = np.asarray(events, float)
    if events.size and (events.min() < grid[0] - _DEDUP_TOL or events.max() > grid[-1] + _DEDUP_TOL):
        raise ValueError("event times must lie within the grid span")
    merged = np.sort(np.concatenate([grid, events]))
    keep = np.ones(merged.shape[0], dtype=bool)
    keep[1:] = np.diff(merged) > _DEDUP_TOL
    return merged[keep]


def event_indicator(grid, events):
    """1 where a cell ``[t_k, t_{k+1})`` holds an event; an event at the final time counts in the last cell."""
    grid = np.asarray(grid, float)
    events = np.asarray(events, float)
    idx = np.searchsorted(grid, events + _DEDUP_TOL, side="right") - 1
    idx = np.clip(idx, 0, grid.shape[0] - 1)
    counts = np.bincount(idx, minlength=grid.shape[0])
    if np.any(counts > 1):
        k = int(np.argmax(counts > 1))
        raise ValueError(f"{counts[k]} events fall in grid cell {k}; refine the grid so each cell holds at most one")
    return counts.astype(np.int64)


def cp_rbm_fk(params: CpRbmParams, events, grid, augment=True) -> FkModel:
    """FK model with random-walk proposals and reflection/survival/event potentials.

    With ``augment`` the event times are merged into ``grid`` first; the
    model's ``grid`` attribute holds the grid actually used.
    """
    grid = np.asarray(grid, float)
    if grid.ndim != 1 or grid.shape[0] < 2 or np.any(np.diff(grid) <= 0):
        raise ValueError("grid must be strictly increasing with at least two points")
    g = augment_grid(grid, events) if augment else grid
    T = g.shape[0]
    ev = event_indicator(g, events)
    steps = np.diff(g)
    var = np.concatenate([[1.0], steps * params.sigma ** 2])
    trans = [None] + [GaussianTransition(np.eye(1), np.array([[v]])) for v in var[1:]]
    prior = kalman_smoother(kalman_filter_lgssm(np.zeros(1), np.eye(1), trans, None))
    dts = np.append(steps, 0.0)
    fpar = np.concatenate([dts, var, [params.a, params.b, params.alpha, params.beta]])
    ipar = np.concatenate([[T, params.K_trunc], ev]).astype(np.int64)
    return FkModel.from_oracle(LinearGaussianOracle(prior), pot.CPRBM, fpar, ipar, grid=g, name="cprbm")


def simulate_dataset(params: CpRbmParams, grid, rng):
    """Latent path on ``grid`` and event times generated from it."""
    x = simulate_path(params, grid, rng)
    return x, poisson_process_simulate(intensity(params, x), grid, rng)

