"""Blocking-sequence selection from estimated lower-boundary update probabilities.

A blocking sequence is a strictly increasing array of grid indices
``0 = b_0 < ... < b_L = T-1``. For each block ``(l, u)`` the probability of
lower boundary updates (PLU) is estimated from particle-filter output by
combining a density-based term (``plu_m``) and a resampling-rate term
(``plu_g``); the tuner then keeps, at each lower boundary, the block size
with the highest estimate.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .filters import FkModel, ancestor_trace, as_blocking, particle_filter
from .resampling import DegenerateWeightsError, _categorical
from .lingauss import NumericalError

__all__ = [
    "PluTable",
    "resampling_rate",
    "plu_m",
    "plu_m_alt",
    "plu_g",
    "plu_hat",
    "estimate_plu",
    "evaluate_blocking_candidates",
    "dyadic_candidate_blockings",
    "blocktime_blocking",
    "blocktime_candidates",
    "choose_blocking_from_table",
    "choose_blocking",
    "artificial_system_expected_healthy",
    "artificial_system_simulate",
]

log = logging.getLogger(__name__)


# -- scalar proxies -----------------------------------------------------------


def resampling_rate(W):
    """``p = 1/2 sum |W_i - 1/N|`` for normalised weights."""
    W = np.asarray(W, float)
    if abs(W.sum() - 1.0) > 1e-9:
        raise ValueError("resampling_rate expects normalised weights")
    return 0.5 * float(np.sum(np.abs(W - 1.0 / W.shape[0])))


def plu_m(densities, ref_index):
    """``1 - M(ref) / sum_j M(j)`` over the pool's block densities."""
    d = np.asarray(densities, float)
    if np.any(d < 0):
        raise ValueError("densities must be non-negative")
    s = d.sum()
    if not s > 0:
        raise ValueError("all block densities are zero")
    return float(1.0 - d[ref_index] / s)


def _plu_m_log(logdens, ref_index):
    lse = logsumexp(logdens)
    if not np.isfinite(lse):
        raise ValueError("all block densities are zero")
    return float(-np.expm1(logdens[ref_index] - lse))


def plu_m_alt(ref_density, typical_density, N):
    """``1 - c/(c + N - 1)`` with ``c = ref_density / typical_density``."""
    if not typical_density > 0:
        raise ValueError("typical block density must be positive")
    c = ref_density / typical_density
    return float(1.0 - c / (c + N - 1))


def _plu_m_alt_log(log_ref, log_typical, N):
    if not np.isfinite(log_typical):
        raise ValueError("typical block density must be positive")
    # 1 - c/(c+N-1) = (N-1)/(c+N-1)
    logc = log_ref - log_typical
    return float(math.exp(math.log(N - 1) - np.logaddexp(logc, math.log(N - 1)))) if N > 1 else 0.0


def plu_g(p, N, return_clamped=False):
    """``(1 - 1/N) prod_k max(0, 1 - p_k N/(N-1)^2)``.

    Factors that would be negative are clamped at zero; with
    ``return_clamped`` the number of clamped factors is also returned.
    """
    p = np.atleast_1d(np.asarray(p, float))
    if N < 2:
        out = 0.0
        return (out, 0) if return_clamped else out
    f = 1.0 - p * N / (N - 1) ** 2
    clamped = int(np.sum(f < 0))
    if clamped:
        log.debug("plu_g: %d factor(s) clamped at zero", clamped)
    out = float((1.0 - 1.0 / N) * np.prod(np.maximum(f, 0.0)))
    return (out, clamped) if return_clamped else out


def plu_hat(plu_g_val, plu_m_val, N):
    """Interpolated estimate ``plu_g * plu_m / (1 - 1/N)`` clipped to ``[0, 1]``."""
    if N < 2:
        raise ValueError("plu_hat needs N >= 2")
    return float(min(1.0, max(0.0, plu_g_val * plu_m_val / (1.0 - 1.0 / N))))


# -- estimation from particle-filter output ------------------------------------


@dataclass
class PluTable:
    """Mean PLU estimate per block for each candidate blocking."""

    candidates: list
    phi: list
    n_runs: int = 1

    def records(self):
        """``(l, b, e)`` triples; duplicate blocks (shared by several candidates) are averaged."""
        acc = {}
        for cand, ph in zip(self.candidates, self.phi):
            for l, u, e in zip(cand[:-1], cand[1:], ph):
                acc.setdefault((int(l), int(u - l)), []).append(float(e))
        return [(l, b, float(np.mean(v))) for (l, b), v in sorted(acc.items())]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["candidate", "block_lower", "block_size", "phi_plu"])
            for s, (cand, ph) in enumerate(zip(self.candidates, self.phi)):
                for l, u, e in zip(cand[:-1], cand[1:], ph):
                    w.writerow([s, int(l), int(u - l), repr(float(e))])

    @classmethod
    def from_csv(cls, path):
        rows = {}
        with open(path, newline="") as fh:
            for r in csv.DictReader(fh):
                rows.setdefault(int(r["candidate"]), []).append(
                    (int(r["block_lower"]), int(r["block_size"]), float(r["phi_plu"])))
        cands, phis = [], []
        for s in sorted(rows):
            rr = rows[s]
            cands.append(np.array([r[0] for r in rr] + [rr[-1][0] + rr[-1][1]], dtype=np.int64))
            phis.append(np.array([r[2] for r in rr]))
        return cls(cands, phis)


def _block_log_densities(model: FkModel, cand, X, x_u_idx):
    """``log M_{u|l}(X_u^(B_u) | X_l^(j))`` for every block of ``cand`` and pool member ``j``."""
    bounds, P, pc, pchol, plogdet, *_ = model.block_arrays(cand)
    ls, us = bounds[:-1], bounds[1:]
    xl = X[ls]  # (L, N, d)
    xu = X[us, x_u_idx[us]]  # (L, d)
    mean = np.einsum("lij,lnj->lni", P[us], xl) + pc[us][:, None, :]
    diff = xu[:, None, :] - mean
    Linv = np.linalg.inv(pchol[us])
    z = np.einsum("lij,lnj->lni", Linv, diff)
    d = X.shape[2]
    return -0.5 * np.sum(z * z, axis=2) - plogdet[us][:, None] - 0.5 * d * math.log(2 * math.pi)


def estimate_plu(candidates, X, logW, B, model: FkModel, N_target=None):
    """Per-block PLU estimates for each candidate from one particle system.

    ``X[T, N0, d]`` and ``logW[T, N0]`` come from a particle filter and ``B``
    is a traced reference path. When ``N_target`` differs from ``N0`` the
    density term uses the typical-density form and the resampling term is
    evaluated with ``N_target``.
    """
    X = np.asarray(X, float)
    T, N0, _ = X.shape
    N = N0 if N_target is None else int(N_target)
    if N < 2:
        raise ValueError("PLU estimation needs N >= 2")
    B = np.asarray(B, dtype=np.int64)
    lw = np.asarray(logW, float)
    W = np.exp(lw - lw.max(axis=1, keepdims=True))
    W /= W.sum(axis=1, keepdims=True)
    p = 0.5 * np.sum(np.abs(W - 1.0 / N0), axis=1)
    out = []
    for cand in candidates:
        cand = as_blocking(cand, T)
        ld = _block_log_densities(model, cand, X, B)
        phi = np.empty(cand.shape[0] - 1)
        for i, (l, u) in enumerate(zip(cand[:-1], cand[1:])):
            row = ld[i]
            ref = B[l]
            if N == N0:
                pm = _plu_m_log(row, ref)
            else:
                others = np.delete(row, ref)
                pm = _plu_m_alt_log(row[ref], logsumexp(others) - math.log(N0 - 1), N)
            pg = plu_g(p[l:u], N)
            phi[i] = plu_hat(pg, pm, N)
        out.append(phi)
    return out


def evaluate_blocking_candidates(candidates, model: FkModel, N, n, rng, N_target=None) -> PluTable:
    """Average PLU estimates over ``n`` particle filters with mean-partition systematic resampling."""
    if n < 1:
        raise ValueError("n must be positive")
    candidates = [as_blocking(c, model.T) for c in candidates]
    acc = [np.zeros(c.shape[0] - 1) for c in candidates]
    ok = 0
    for _ in range(n):
        try:
            ps = particle_filter(model, "systematic_mp", N, rng)
        except (DegenerateWeightsError, NumericalError) as exc:
            log.warning("particle filter failed during blocking evaluation: %s", exc)
            continue
        g = np.exp(ps.logW[-1] - ps.logW[-1].max())
        bT = int(_categorical(g, g.sum(), rng))
        B = np.append(ancestor_trace(ps.A, bT), bT)
        for a, phi in zip(acc, estimate_plu(candidates, ps.X, ps.logW, B, model, N_target)):
            a += phi
        ok += 1
    if ok < max(1, math.ceil(n / 2)):
        raise DegenerateWeightsError(f"only {ok} of {n} particle filters succeeded")
    return PluTable(candidates, [a / ok for a in acc], ok)


# -- candidates and selection -------------------------------------------------


def dyadic_candidate_blockings(T):
    """Blockings with constant block size ``2^(i-1)``, plus a shorter final residual block."""
    if T < 2:
        raise ValueError("need T >= 2")
    pstar = int(math.floor(math.log2(T - 1)))
    while 2 ** (pstar + 1) + 1 <= T:
        pstar += 1
    while 2 ** pstar + 1 > T:
        pstar -= 1
    out = []
    for i in range(pstar + 1):
        size = 2 ** i
        b = list(range(0, T - 1, size)) + [T - 1]
        out.append(np.array(b, dtype=np.int64))
    return out


def blocktime_blocking(grid, blocktime):
    """Boundaries at the grid indices nearest to multiples of ``blocktime``."""
    grid = np.asarray(grid, float)
    if blocktime <= 0:
        raise ValueError("blocktime must be positive")
    t0, t1 = grid[0], grid[-1]
    n = int(math.floor((t1 - t0) / blocktime + 1e-9))
    targets = t0 + blocktime * np.arange(n + 1)
    idx = np.searchsorted(grid, targets)
    idx = np.clip(idx, 0, grid.shape[0] - 1)
    left = np.clip(idx - 1, 0, grid.shape[0] - 1)
    pick = np.where(np.abs(grid[left] - targets) <= np.abs(grid[idx] - targets), left, idx)
    b = np.unique(np.concatenate([[0], pick, [grid.shape[0] - 1]]))
    return b.astype(np.int64)


def blocktime_candidates(grid, blocktimes):
    """Candidate blockings for increasing blocktimes (duplicates dropped)."""
    out = []
    for bt in sorted(blocktimes):
        b = blocktime_blocking(grid, bt)
        if not any(np.array_equal(b, c) for c in out):
            out.append(b)
    return out


def choose_blocking_from_table(table: PluTable, T):
    """Assemble a blocking from PLU records, trying the largest blocks first.

    A block ``(l, b)`` of a candidate is accepted when, among the remaining
    records with lower boundary ``l``, the largest estimate is attained at
    size ``b`` (ties favour the larger size, which is met first). Records
    whose lower boundary the block covers are then removed.
    """
    records = table.records()
    remaining = {}
    for l, b, e in records:
        remaining.setdefault(l, {})[b] = e
    covered = np.zeros(T - 1, dtype=bool)
    chosen = []
    order = sorted(range(len(table.candidates)),
                   key=lambda s: (np.max(np.diff(table.candidates[s])), s), reverse=True)
    for s in order:
        cand = as_blocking(table.candidates[s], T)
        for l, u in zip(cand[:-1], cand[1:]):
            l, b = int(l), int(u - l)
            recs = remaining.get(l)
            if not recs or b not in recs:
                continue
            best = max(recs.values())
            if recs[b] < best or covered[l:l + b].any():
                continue
            chosen.append((l, b))
            covered[l:l + b] = True
            for ll in range(l, l + b):
                remaining.pop(ll, None)
    # gaps can only arise from unaligned candidates; fill them with the
    # smallest remaining size at the gap start that fits
    pos = 0
    while pos < T - 1:
        if covered[pos]:
            pos += 1
            continue
        end = pos
        while end < T - 1 and not covered[end]:
            end += 1
        sizes = sorted(b for b in remaining.get(pos, {}) if pos + b <= end) or [1]
        b = sizes[0]
        log.warning("blocking gap at %d filled with a block of size %d", pos, b)
        chosen.append((pos, b))
        covered[pos:pos + b] = True
        pos += b
    chosen.sort()
    bounds = [0]
    for l, b in chosen:
        if l != bounds[-1]:
            raise RuntimeError("selected blocks do not tile the horizon")
        bounds.append(l + b)
    return as_blocking(bounds, T)


def choose_blocking(model: FkModel, N, n, rng, candidates=None, N_target=None):
    """Evaluate candidate blockings (dyadic by default) and pick one; returns ``(blocking, table)``."""
    if candidates is None:
        candidates = dyadic_candidate_blockings(model.T)
    table = evaluate_blocking_candidates(candidates, model, N, n, rng, N_target)
    return choose_blocking_from_table(table, model.T), table


# -- artificial particle system ----------------------------------------------


def artificial_system_expected_healthy(p_R, N):
    """``E[H_T] = (N - 1) prod_k (1 - p_R_k / (N - 1)^2)`` for ``T - 1 = len(p_R)`` steps."""
    p_R = np.asarray(p_R, float)
    if N < 2:
        return 0.0
    return float((N - 1) * np.prod(1.0 - p_R / (N - 1) ** 2))


def artificial_system_simulate(p_R, N, n_runs, rng):
    """Simulate ``H_T`` for the artificial conditional particle system.

    Particle 0 is the reference and starts the only 'ill' lineage. At step k
    a resampling event happens with probability ``p_R[k]``: a uniformly
    chosen non-reference particle dies and is replaced by a copy of a
    particle chosen uniformly among the other ``N - 1``.
    """
    p_R = np.asarray(p_R, float)
    if N < 2:
        return np.zeros(n_runs, dtype=np.int64)
    ill = np.zeros((n_runs, N), dtype=bool)
    ill[:, 0] = True
    rows = np.arange(n_runs)
    for pk in p_R:
        event = rng.random(n_runs) < pk
        dying = rng.integers(1, N, size=n_runs)
        repro = rng.integers(0, N - 1, size=n_runs)
        repro = repro + (repro >= dying)
        new = ill[rows, repro]
        ill[rows[event], dying[event]] = new[event]
    return N - ill.sum(axis=1)
