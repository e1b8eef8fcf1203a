"""Log-potential families evaluated inside the compiled filter kernels.

A potential is identified by an integer family code plus a float parameter
vector ``fpar`` and an integer vector ``ipar``. Every family has the call
signature ``log G_k(x_{k-1}, x_k)`` with a 0-based time index ``k``; at
``k = 0`` the previous state is ignored. Keeping the families behind one
dispatcher (rather than passing jitted callables around) lets the kernels
be cached on disk.

Layouts (``T`` is the horizon, ``d`` the state dimension)::

    NONE        G == 1
    GAUSS_OBS   ipar=[T]             fpar=[y(T), var(T), z(d)]
                log N(y_k; z.x_k, var_k), NaN y_k means missing
    QUADRATIC   ipar=[T]             fpar=[dt(T), coef(d)]
                -dt_k * sum_j coef_j x_kj^2
    CPRBM       ipar=[T, K, ev(T)]   fpar=[dt(T), var(T), a, b, alpha, beta]
                reflected/Gaussian density ratio, survival and event factor
    RASTER      ipar=[T, ncols, nrows, ix, iy]
                fpar=[dt(T), cellsize, origin_x, origin_y, off_value, V(nrows*ncols)]
                -dt_k * V(cell of (x_ix, x_iy)), V = -log v row-major from the top row;
                V = inf is a hard constraint at every k (0 * inf taken as inf)
"""

import math

import numpy as np
from numba import njit

NONE = 0
GAUSS_OBS = 1
QUADRATIC = 2
CPRBM = 3
RASTER = 4

FAMILIES = {"none": NONE, "gauss_obs": GAUSS_OBS, "quadratic": QUADRATIC, "cprbm": CPRBM, "raster": RASTER}

_LOG_2PI = math.log(2.0 * math.pi)


@njit(cache=True, inline="always")
def _normal_logpdf(x, mu, var):
    return -0.5 * (_LOG_2PI + math.log(var) + (x - mu) * (x - mu) / var)


@njit(cache=True, inline="always")
def reflected_normal_logpdf_nb(x, mu, var, a, b, kmax):
    """Truncated image sum for the normal law mirrored into ``(a, b)``."""
    if not (a < x < b):
        return -np.inf
    # one-sided or absent bounds leave at most one image
    if a == -np.inf and b == np.inf:
        return _normal_logpdf(x, mu, var)
    if b == np.inf:
        return np.logaddexp(_normal_logpdf(x, mu, var), _normal_logpdf(2 * a - x, mu, var))
    if a == -np.inf:
        return np.logaddexp(_normal_logpdf(x, mu, var), _normal_logpdf(2 * b - x, mu, var))
    # two passes over the image terms (max, then scaled sum) avoid a buffer
    m = _normal_logpdf(x, mu, var)
    for k in range(1, kmax + 1):
        sgn = -1.0 if k % 2 == 1 else 1.0
        odd = (a + b) if k % 2 == 1 else 0.0
        m = max(m, _normal_logpdf(sgn * x + k * a - k * b + odd, mu, var))
        m = max(m, _normal_logpdf(sgn * x + k * b - k * a + odd, mu, var))
    if m == -np.inf:
        return -np.inf
    s = math.exp(_normal_logpdf(x, mu, var) - m)
    for k in range(1, kmax + 1):
        sgn = -1.0 if k % 2 == 1 else 1.0
        odd = (a + b) if k % 2 == 1 else 0.0
        s += math.exp(_normal_logpdf(sgn * x + k * a - k * b + odd, mu, var) - m)
        s += math.exp(_normal_logpdf(sgn * x + k * b - k * a + odd, mu, var) - m)
    return m + math.log(s)


@njit(cache=True, inline="always")
def _raster_value(px, py, fpar, ipar, T):
    ncols = ipar[1]
    nrows = ipar[2]
    cell = fpar[T]
    ox = fpar[T + 1]
    oy = fpar[T + 2]
    col = math.floor((px - ox) / cell)
    # origin is the lower-left corner; row 0 of the grid is the top row
    row_from_bottom = math.floor((py - oy) / cell)
    if col < 0 or col >= ncols or row_from_bottom < 0 or row_from_bottom >= nrows:
        return fpar[T + 3]
    row = nrows - 1 - int(row_from_bottom)
    return fpar[T + 4 + row * ncols + int(col)]


@njit(cache=True, inline="always")
def _gauss_obs(k, x, ix, fpar, T):
    y = fpar[k]
    if math.isnan(y):
        return 0.0
    m = 0.0
    for j in range(x.shape[1]):
        m += fpar[2 * T + j] * x[ix, j]
    return _normal_logpdf(y, m, fpar[T + k])


@njit(cache=True, inline="always")
def _quadratic(k, x, ix, fpar, T):
    dt = fpar[k]
    if dt == 0.0:
        return 0.0
    s = 0.0
    for j in range(x.shape[1]):
        s += fpar[T + j] * x[ix, j] * x[ix, j]
    return -dt * s


@njit(cache=True, inline="always")
def _cprbm(k, xprev, ip, x, ix, fpar, ipar, T):
    dt = fpar[k]
    var = fpar[T + k]
    a = fpar[2 * T]
    b = fpar[2 * T + 1]
    alpha = fpar[2 * T + 2]
    beta = fpar[2 * T + 3]
    y = x[ix, 0]
    mu = 0.0 if k == 0 else xprev[ip, 0]
    lr = reflected_normal_logpdf_nb(y, mu, var, a, b, ipar[1])
    if lr == -np.inf:
        return -np.inf
    out = lr - _normal_logpdf(y, mu, var) - dt * beta * math.exp(-alpha * y)
    if ipar[2 + k] != 0:
        out += math.log(beta) - alpha * y
    return out


@njit(cache=True, inline="always")
def _raster(k, x, ix, fpar, ipar, T):
    v = _raster_value(x[ix, ipar[3]], x[ix, ipar[4]], fpar, ipar, T)
    # zero-coefficient cells are excluded at every time, even where dt == 0
    if v == np.inf:
        return -np.inf
    dt = fpar[k]
    if dt == 0.0:
        return 0.0
    return -dt * v


@njit(cache=True, inline="always")
def log_potential_rows(code, k, xprev, anc, x, sel, fpar, ipar, out):
    """``out[i] = log G_k(xprev[anc[i]], x[sel[i]])`` for every entry of ``out``.

    The family is resolved once per call rather than once per particle,
    which keeps the per-particle cost to the arithmetic itself.
    """
    n = out.shape[0]
    if code == NONE:
        for i in range(n):
            out[i] = 0.0
        return
    T = ipar[0]
    if code == GAUSS_OBS:
        for i in range(n):
            out[i] = _gauss_obs(k, x, sel[i], fpar, T)
    elif code == QUADRATIC:
        for i in range(n):
            out[i] = _quadratic(k, x, sel[i], fpar, T)
    elif code == CPRBM:
        for i in range(n):
            out[i] = _cprbm(k, xprev, anc[i], x, sel[i], fpar, ipar, T)
    elif code == RASTER:
        for i in range(n):
            out[i] = _raster(k, x, sel[i], fpar, ipar, T)
    else:
        for i in range(n):
            out[i] = np.nan


def evaluate(code, k, xprev, x, fpar, ipar):
    """Python-side evaluation; vectorised over leading rows of ``x``."""
    x = np.asarray(x, float)
    fpar = np.ascontiguousarray(fpar, dtype=np.float64)
    ipar = np.ascontiguousarray(ipar, dtype=np.int64)
    rows = np.ascontiguousarray(np.atleast_2d(x))
    n = rows.shape[0]
    xp = np.zeros_like(rows) if xprev is None else np.ascontiguousarray(np.broadcast_to(np.asarray(xprev, float), rows.shape))
    idx = np.arange(n, dtype=np.int64)
    out = np.empty(n)
    log_potential_rows(code, k, xp, idx, rows, idx, fpar, ipar, out)
    return float(out[0]) if x.ndim == 1 else out
