"""MCMC output analysis: batch-means IACT, IRE, PLU tallies and credible bands."""

from __future__ import annotations

import csv
import math

import numpy as np

__all__ = [
    "iact_batch_means",
    "batch_means_se",
    "ire",
    "empirical_plu",
    "credible_intervals",
    "write_csv",
    "read_csv",
]

MIN_LENGTH = 100


def _series(x):
    x = np.asarray(x, float).ravel()
    if x.shape[0] < MIN_LENGTH:
        raise ValueError(f"need at least {MIN_LENGTH} samples, got {x.shape[0]}")
    if not np.all(np.isfinite(x)):
        raise ValueError("series contains non-finite values")
    return x


def _batch_stats(x):
    n = x.shape[0]
    b = int(math.isqrt(n))
    m = n // b
    means = x[: m * b].reshape(m, b).mean(axis=1)
    return b, m, means


def iact_batch_means(x):
    """``b * Var(batch means) / Var(x)`` with batch size ``b = floor(sqrt(n))``."""
    x = _series(x)
    var = x.var(ddof=1)
    if not var > 0:
        raise ValueError("constant chain: the IACT is undefined")
    b, _, means = _batch_stats(x)
    return float(b * means.var(ddof=1) / var)


def batch_means_se(x):
    """Standard error of the sample mean from non-overlapping batch means."""
    x = _series(x)
    _, m, means = _batch_stats(x)
    return float(means.std(ddof=1) / math.sqrt(m))


def ire(iact, N):
    """Inverse relative efficiency: the IACT scaled by the particle count."""
    if not iact > 0:
        raise ValueError("iact must be positive")
    return float(iact * N)


def empirical_plu(changes, iterations):
    """Fraction of iterations in which each block's lower boundary moved."""
    if iterations <= 0:
        raise ValueError("iterations must be positive")
    c = np.asarray(changes, float)
    if np.any(c < 0) or np.any(c > iterations):
        raise ValueError("tallies must lie in [0, iterations]")
    return c / iterations


def credible_intervals(trace, probs=(0.025, 0.25, 0.75, 0.975)):
    """Empirical quantiles over iterations: array ``[len(probs), T]`` for ``trace[n_iter, T]``."""
    trace = np.asarray(trace, float)
    probs = np.asarray(probs, float)
    if np.any(probs <= 0) or np.any(probs >= 1):
        raise ValueError("probabilities must lie in (0, 1)")
    if trace.ndim != 2 or trace.shape[0] == 0:
        raise ValueError("trace must be a non-empty [iterations, T] array")
    return np.quantile(trace, probs, axis=0)


def write_csv(path, header, rows):
    """RFC-4180 CSV with a header row; floats written with full precision."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])


def read_csv(path):
    """``(header, rows)`` with every field as a string."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path} is empty")
    return rows[0], rows[1:]
