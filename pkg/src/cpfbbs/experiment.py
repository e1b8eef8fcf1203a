"""Experiment driver behind the command line: model construction, runs, tuning.

Seeding: cell ``c`` and replicate ``r`` draw from
``numpy.random.default_rng(SeedSequence(seed, spawn_key=(c, r)))``. Streams
depend only on that counter pair, so serial and parallel runs agree and
adding cells never perturbs existing ones. Simulated data use their own
``data_seed``, shared by every cell.
"""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import diagnostics as dg
from .blocking import blocktime_blocking, choose_blocking
from .config import METHODS, Cell, ConfigError, ExperimentConfig
from .filters import FkModel, dense_blocking, run_chain
from .models import cprbm as cp
from .models import ctcrwp as cw
from .models import ctcrwt as ct
from .models.terrain import TerrainRaster, two_lake_observations, two_lake_raster

log = logging.getLogger(__name__)

# traced state components per model: (index, name)
COMPONENTS = {"ctcrwp": ((1, "L"),), "cprbm": ((0, "X"),), "ctcrwt": ((1, "Lx"), (3, "Ly"))}
BAND_PROBS = (("q025", 0.025), ("q25", 0.25), ("q50", 0.5), ("q75", 0.75), ("q975", 0.975))
DIAG_HEADER = ["cell", "replicate", "series", "blocking", "blocktime", "component", "quantity", "index", "time", "value"]


def cell_rng(seed, cell, replicate):
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(cell, replicate)))


@dataclass
class ModelData:
    """A constructed model plus any simulated ground truth."""

    model: FkModel
    truth: np.ndarray | None = None
    truth_grid: np.ndarray | None = None
    events: np.ndarray | None = None


def _grid(p):
    n = int(round(p["tau"] / p["dt"]))
    return p["dt"] * np.arange(n + 1)


def _read_columns(path, names):
    header, rows = dg.read_csv(path)
    try:
        idx = [header.index(n) for n in names]
    except ValueError:
        raise ConfigError(f"{path}: expected columns {', '.join(names)}") from None
    try:
        return np.array([[float(r[i]) for i in idx] for r in rows]).reshape(len(rows), len(names))
    except ValueError:
        raise ConfigError(f"{path}: non-numeric entry") from None


def build_model(name, p) -> ModelData:
    """Construct the FK model for one parameter set; invalid values raise :class:`ConfigError`."""
    try:
        if name == "ctcrwp":
            if (p["beta_v"] is None) != (p["beta_x"] is None):
                raise ConfigError("ctcrwp: give both beta_v and beta_x, or neither")
            if p["beta_v"] is None:
                bv, bx = cw.ctcrwp_unit_stationary(p["sigma"])
            else:
                bv, bx = p["beta_v"], p["beta_x"]
            return ModelData(cw.ctcrwp_fk(cw.CtcrwpParams(bv, bx, p["sigma"], p["eta"], p["tau"], p["dt"])))
        if name == "cprbm":
            par = cp.CpRbmParams(p["sigma"], p["a"], p["b"], p["alpha"], p["beta"], int(p["K_trunc"]))
            grid = _grid(p)
            if p["events"] == "simulate":
                x, ev = cp.simulate_dataset(par, grid, np.random.default_rng(int(p["data_seed"])))
                return ModelData(cp.cp_rbm_fk(par, ev, grid), x, grid, ev)
            ev = _read_columns(p["events"], ["time"])[:, 0]
            return ModelData(cp.cp_rbm_fk(par, ev, grid), events=ev)
        if name == "ctcrwt":
            par = ct.CtcrwParams(p["beta"], p["sigma"], p["eta"], p["sigma_L"])
            raster = two_lake_raster() if p["raster"] == "two_lake" else TerrainRaster.from_csv(p["raster"])
            if p["observations"] == "two_lake":
                times, z = two_lake_observations(16, p["tau"])
            else:
                obs = _read_columns(p["observations"], ["time", "x", "y"])
                times, z = obs[:, 0], obs[:, 1:]
            return ModelData(ct.ctcrwt_fk(par, times, z, raster, _grid(p), p["off_value"]))
    except ConfigError:
        raise
    except (ValueError, OSError) as e:
        raise ConfigError(f"{name}: {e}") from None
    raise ConfigError(f"model: unknown model {name!r}")


def resolve_blocking(cfg: ExperimentConfig, cell: Cell, model, rng):
    """``(method, blocking, blocktime, plu table)`` for one cell."""
    spec = cell.blocking
    method = METHODS[cfg.method]
    dt = float(model.grid[1] - model.grid[0]) if model.grid is not None else 1.0
    if method == "cpf_at":
        return method, None, None, None
    if spec.kind == "dense":
        return "cpf_bs", dense_blocking(model.T), dt, None
    if spec.kind == "blocktime":
        return method, blocktime_blocking(model.grid, spec.blocktime), spec.blocktime, None
    b, table = choose_blocking(model, spec.N0, spec.n, rng, N_target=cell.N)
    return method, b, None, table


def _finite_mean(v):
    v = np.asarray(v, float)
    v = v[np.isfinite(v)]
    return float(v.mean()) if v.size else math.nan


def run_cell(cfg: ExperimentConfig, cell: Cell, replicate: int, data: ModelData = None):
    """One chain. Returns ``(trace rows, diagnostics rows, blocking rows)``."""
    if data is None:
        data = build_model(cfg.model, cell.params)
    model = data.model
    rng = cell_rng(cfg.seed, cell.index, replicate)
    method, blocking, blocktime, _ = resolve_blocking(cfg, cell, model, rng)
    comps = COMPONENTS[cfg.model]
    res = run_chain(model, method, cell.resampling, cell.N, cfg.iterations, rng, blocking=blocking,
                    comps=[c for c, _ in comps])
    grid = model.grid
    post = res.trace[cfg.burn_in:]
    bt = "" if blocktime is None else repr(float(blocktime))
    head = [cell.index, replicate, cell.series, cell.blocking.label if method != "cpf_at" else "at", bt]
    diag, traces = [], []
    for j, (_, cname) in enumerate(comps):
        for it in range(res.n_iter):
            traces.append([cell.index, replicate, cname, it] + res.trace[it, :, j].tolist())
        iacts = np.empty(model.T)
        for k in range(model.T):
            try:
                iacts[k] = dg.iact_batch_means(post[:, k, j])
            except ValueError:
                iacts[k] = math.nan
        bands = dg.credible_intervals(post[:, :, j], [p for _, p in BAND_PROBS])
        means = post[:, :, j].mean(axis=0)
        for k in range(model.T):
            t = repr(float(grid[k]))
            diag.append(head + [cname, "mean", k, t, float(means[k])])
            diag.append(head + [cname, "iact", k, t, float(iacts[k])])
            diag.append(head + [cname, "ire", k, t, float(iacts[k] * cell.N)])
            for (q, _), v in zip(BAND_PROBS, bands[:, k]):
                diag.append(head + [cname, q, k, t, float(v)])
        diag.append(head + [cname, "iact_mean", "", "", _finite_mean(iacts)])
        diag.append(head + [cname, "ire_mean", "", "", _finite_mean(iacts) * cell.N])
    plu = dg.empirical_plu(res.changes, res.n_iter) if res.changes.size else np.zeros(0)
    for b, v in enumerate(plu):
        diag.append(head + ["", "plu", b, repr(float(grid[res.blocking[b]])), float(v)])
    if plu.size:
        diag.append(head + ["", "plu_mean", "", "", float(plu.mean())])
    brows = []
    if cell.blocking.kind == "auto" and blocking is not None:
        brows = [[cell.index, replicate, i, int(b), repr(float(grid[b]))] for i, b in enumerate(blocking)]
    return traces, diag, brows


def _key(cell):
    return tuple(sorted(cell.params.items()))


def _task(args):
    cfg, cell, rep = args
    return run_cell(cfg, cell, rep)


def run_experiment(cfg: ExperimentConfig, outdir=None):
    """Run every (cell, replicate) and write the CSV outputs. Returns the output directory."""
    outdir = outdir or cfg.output
    cells = cfg.cells()
    # validate every cell's model before spending time on chains
    cache = {}
    for c in cells:
        if _key(c) not in cache:
            cache[_key(c)] = build_model(cfg.model, c.params)
    tasks = [(cfg, c, r) for c in cells for r in range(cfg.replicates)]
    if cfg.workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as ex:
            results = list(ex.map(_task, tasks))
    else:
        results = [run_cell(cfg, c, r, cache[_key(c)]) for _, c, r in tasks]
    os.makedirs(outdir, exist_ok=True)
    # wide rows; grids shorter than the longest are padded with empty fields
    width = max(len(res[0][0]) for res in results)
    dg.write_csv(os.path.join(outdir, "traces.csv"),
                 ["cell", "replicate", "component", "iteration"] + [f"x{k}" for k in range(width - 4)],
                 (row + [""] * (width - len(row)) for res in results for row in res[0]))
    dg.write_csv(os.path.join(outdir, "diagnostics.csv"), DIAG_HEADER, (row for res in results for row in res[1]))
    brows = [row for res in results for row in res[2]]
    if brows:
        dg.write_csv(os.path.join(outdir, "chosen_blocking.csv"),
                     ["cell", "replicate", "position", "index", "time"], brows)
    with open(os.path.join(outdir, "run_config.txt"), "w") as fh:
        fh.write(cfg.to_text())
    first = next(iter(cache.values()))
    if first.truth is not None and len(cache) == 1:
        ev = np.zeros(first.truth_grid.shape[0], dtype=int)
        if first.events.size:
            idx = np.searchsorted(first.truth_grid, first.events, side="right") - 1
            np.add.at(ev, idx, 1)
        dg.write_csv(os.path.join(outdir, "data.csv"), ["time", "x_true", "events"],
                     zip(first.truth_grid, first.truth, ev.tolist()))
    return outdir


def tune(cfg: ExperimentConfig, N0, n, outdir=None):
    """Choose a blocking for each model/N cell; writes chosen_blocking.csv and one PLU table per cell."""
    outdir = outdir or cfg.output
    os.makedirs(outdir, exist_ok=True)
    rows = []
    seen = set()
    for c in cfg.cells():
        key = (_key(c), c.N)
        if key in seen:
            continue
        seen.add(key)
        model = build_model(cfg.model, c.params).model
        b, table = choose_blocking(model, N0, n, cell_rng(cfg.seed, c.index, 0), N_target=c.N)
        table.to_csv(os.path.join(outdir, f"plu_table_cell{c.index}.csv"))
        rows += [[c.index, 0, i, int(x), repr(float(model.grid[x]))] for i, x in enumerate(b)]
    dg.write_csv(os.path.join(outdir, "chosen_blocking.csv"), ["cell", "replicate", "position", "index", "time"], rows)
    return outdir
