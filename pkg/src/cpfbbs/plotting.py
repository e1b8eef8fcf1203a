"""SVG line charts from the CSV files written by ``cpfbbs run``."""

from __future__ import annotations

import math
import os
from collections import defaultdict

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .diagnostics import read_csv  # noqa: E402

DIAG_COLUMNS = ("cell", "replicate", "series", "blocking", "blocktime", "component",
                "quantity", "index", "time", "value")

_RC = {"svg.hashsalt": "cpfbbs", "svg.fonttype": "none", "font.size": 9, "axes.grid": True, "grid.alpha": 0.3}


class PlotInputError(ValueError):
    pass


def load_diagnostics(path):
    """Rows of ``diagnostics.csv`` as dicts; checks the header."""
    if not os.path.exists(path):
        raise PlotInputError(f"{path} not found")
    header, rows = read_csv(path)
    missing = [c for c in DIAG_COLUMNS if c not in header]
    if missing:
        raise PlotInputError(f"{path} lacks column(s): {', '.join(missing)}")
    if not rows:
        raise PlotInputError(f"{path} holds no rows")
    return [dict(zip(header, r)) for r in rows]


def _save(fig, path):
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)


def _curves(rows, quantity):
    """``{(series, component): [(blocktime, mean over replicates)]}``."""
    acc = defaultdict(list)
    for r in rows:
        if r["quantity"] == quantity and r["blocktime"] != "":
            v = float(r["value"])
            if math.isfinite(v):
                acc[(r["series"], r["component"], float(r["blocktime"]))].append(v)
    out = defaultdict(list)
    for (s, c, bt), vs in sorted(acc.items()):
        out[(s, c)].append((bt, sum(vs) / len(vs)))
    return out


def plot_vs_blocktime(rows, quantity, ylabel, path, title="", log=False):
    curves = _curves(rows, quantity)
    if not curves:
        return None
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(6, 4))
        for (series, comp), pts in curves.items():
            xs = [p[0] for p in pts]
            ys = [math.log(p[1]) if log else p[1] for p in pts]
            ax.plot(xs, ys, marker="o", label=f"{series} [{comp}]")
        ax.set_xscale("log", base=2)
        ax.set_xlabel("blocktime")
        ax.set_ylabel(ylabel)
        ax.set_title(title)
        ax.legend(fontsize=7)
        fig.tight_layout()
        _save(fig, path)
    return path


def plot_bands(rows, cell, replicate, path, title="", truth=None):
    """Median with 50% and 95% bands against time for one cell and replicate."""
    band = defaultdict(dict)
    for r in rows:
        if r["cell"] == str(cell) and r["replicate"] == str(replicate) and r["quantity"] in (
                "q025", "q25", "q50", "q75", "q975"):
            band[r["component"]][(float(r["time"]), r["quantity"])] = float(r["value"])
    if not band:
        raise PlotInputError(f"no band rows for cell {cell}, replicate {replicate}")
    comps = sorted(band)
    with plt.rc_context(_RC):
        fig, axes = plt.subplots(len(comps), 1, figsize=(7, 2.6 * len(comps)), squeeze=False)
        for ax, comp in zip(axes[:, 0], comps):
            d = band[comp]
            ts = sorted({t for t, _ in d})
            q = {k: [d[(t, k)] for t in ts] for k in ("q025", "q25", "q50", "q75", "q975")}
            ax.fill_between(ts, q["q025"], q["q975"], color="C0", alpha=0.2, lw=0, label="95%")
            ax.fill_between(ts, q["q25"], q["q75"], color="C0", alpha=0.4, lw=0, label="50%")
            ax.plot(ts, q["q50"], color="C0", lw=1, label="median")
            if truth is not None and comp in truth:
                ax.plot(truth[comp][0], truth[comp][1], color="k", lw=0.8, ls="--", label="truth")
            ax.set_xlabel("time")
            ax.set_ylabel(comp)
            ax.legend(fontsize=7, loc="upper right")
        axes[0, 0].set_title(title)
        fig.tight_layout()
        _save(fig, path)
    return path


def _read_meta(outdir):
    path = os.path.join(outdir, "run_config.txt")
    meta = {}
    if os.path.exists(path):
        with open(path) as fh:
            for line in fh:
                if "=" in line and not line.startswith("["):
                    k, v = (s.strip() for s in line.split("=", 1))
                    meta.setdefault(k, v)
    return meta


def _read_truth(outdir):
    path = os.path.join(outdir, "data.csv")
    if not os.path.exists(path):
        return None
    header, rows = read_csv(path)
    if "time" not in header or "x_true" not in header:
        return None
    it, ix = header.index("time"), header.index("x_true")
    return {"X": ([float(r[it]) for r in rows], [float(r[ix]) for r in rows])}


def emit_plots(outdir, dest=None):
    """Write the SVG figures for a run directory; returns the paths written."""
    dest = dest or outdir
    os.makedirs(dest, exist_ok=True)
    rows = load_diagnostics(os.path.join(outdir, "diagnostics.csv"))
    meta = _read_meta(outdir)
    title = " ".join(f"{k}={meta[k]}" for k in ("model", "method", "iterations") if k in meta)
    written = []
    for quantity, ylabel, name, log in (("plu_mean", "mean PLU", "plu_vs_blocktime.svg", False),
                                        ("iact_mean", "log IACT (mean over time)", "log_iact_vs_blocktime.svg", True)):
        p = plot_vs_blocktime(rows, quantity, ylabel, os.path.join(dest, name), title, log)
        if p:
            written.append(p)
    truth = _read_truth(outdir)
    cells = sorted({(int(r["cell"]), r["series"], r["blocking"]) for r in rows})
    for cell, series, blocking in cells:
        p = os.path.join(dest, f"bands_cell{cell}.svg")
        written.append(plot_bands(rows, cell, 0, p, f"{title} {series} {blocking}".strip(), truth))
    return written
