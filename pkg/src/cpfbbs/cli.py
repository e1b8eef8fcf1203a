"""Command line: ``cpfbbs {run,tune,plot,selftest}``.

Exit codes: 0 on success, 2 for configuration or input errors, 3 for
numerical failures (degenerate weights, failed factorisations, failed
self-checks).
"""

from __future__ import annotations

import argparse
import glob
import logging
import math
import os
import sys
import time

import numpy as np

from .config import ConfigError, load_config
from .plotting import PlotInputError
from .resampling import DegenerateWeightsError, ReferenceWeightError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3

# command-line flags that override top-level config keys
_FLAG_KEYS = ("seed", "N", "iterations", "burn_in", "resampling", "blocking", "method",
              "replicates", "workers", "output")


def _overrides(args):
    out = {k: str(getattr(args, k)) for k in _FLAG_KEYS if getattr(args, k, None) is not None}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _add_config_flags(p):
    p.add_argument("config", help="flat key=value configuration file")
    p.add_argument("--seed", type=int)
    p.add_argument("--N", type=str, help="particle count(s), comma separated")
    p.add_argument("--iterations", type=int)
    p.add_argument("--burn-in", dest="burn_in", type=int)
    p.add_argument("--resampling", help="multinomial, killing or systematic_mp (comma separated)")
    p.add_argument("--blocking", help="dense, blocktime(x) or auto(N0, n) (';' separated)")
    p.add_argument("--method", help="at, bs or bbs")
    p.add_argument("--replicates", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--output", help="output directory")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override any key; model keys as section.key (repeatable)")


def build_parser():
    ap = argparse.ArgumentParser(prog="cpfbbs", description="Conditional particle filters with bridge backward sampling.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    _add_config_flags(sub.add_parser("run", help="run the chains of an experiment and write CSV output"))
    t = sub.add_parser("tune", help="choose a blocking sequence from PLU estimates")
    _add_config_flags(t)
    t.add_argument("--N0", type=int, default=64, help="particles in each tuning filter")
    t.add_argument("--n", dest="n_runs", type=int, default=10, help="number of tuning filters")
    p = sub.add_parser("plot", help="write SVG figures from a run directory")
    p.add_argument("rundir")
    p.add_argument("--output", help="directory for the figures (default: the run directory)")
    s = sub.add_parser("selftest", help="quick correctness checks against exact oracles")
    s.add_argument("--clear-cache", action="store_true", help="delete compiled kernels first")
    s.add_argument("--seed", type=int, default=0)
    return ap


def _cmd_run(args):
    from .experiment import run_experiment

    cfg = load_config(args.config, _overrides(args))
    out = run_experiment(cfg)
    print(f"wrote {out}")


def _cmd_tune(args):
    from .experiment import tune

    if args.N0 < 2 or args.n_runs < 1:
        raise ConfigError("--N0 must be at least 2 and --n at least 1")
    cfg = load_config(args.config, _overrides(args))
    out = tune(cfg, args.N0, args.n_runs)
    print(f"wrote {os.path.join(out, 'chosen_blocking.csv')}")


def _cmd_plot(args):
    from .plotting import emit_plots

    for p in emit_plots(args.rundir, args.output):
        print(f"wrote {p}")


def clear_kernel_cache():
    here = os.path.dirname(os.path.abspath(__file__))
    files = [f for ext in ("nbi", "nbc") for f in glob.glob(os.path.join(here, "**", f"*.{ext}"), recursive=True)]
    for f in files:
        os.remove(f)
    return len(files)


def _check(name, ok, detail=""):
    print(f"{'PASS' if ok else 'FAIL'} {name}{': ' + detail if detail else ''}")
    return ok


def selftest(seed=0):
    """Small exact-oracle checks; returns True when all pass."""
    from scipy import integrate

    from .filters import sweep_replicates
    from .lingauss import block_density, smoothed_cross_cov
    from .models.cprbm import reflected_normal_logpdf
    from .models.linear import ar1_fk
    from .resampling import CONDITIONAL_SCHEMES, cond_resample

    rng = np.random.default_rng(seed)
    ok = True

    # block density against conditioning the smoothed joint law directly
    lg = ar1_fk(T=5, rho=0.8, obs_var=0.5, rng=rng)
    sm = lg.posterior
    s11, s33 = sm.smooth_cov[1, 0, 0], sm.smooth_cov[3, 0, 0]
    s31 = smoothed_cross_cov(sm, 1, 3)[0, 0]
    a, b = 0.3, -0.2
    cond_mean = sm.smooth_mean[3, 0] + s31 / s11 * (a - sm.smooth_mean[1, 0])
    cond_var = s33 - s31 ** 2 / s11
    want = -0.5 * (math.log(2 * math.pi * cond_var) + (b - cond_mean) ** 2 / cond_var)
    got = block_density(sm, 1, 3, np.array([a]), np.array([b]))
    ok &= _check("block density vs joint conditioning", abs(got - want) < 1e-8, f"{got:.10f} vs {want:.10f}")

    # reflected normal integrates to one
    f = lambda z: math.exp(reflected_normal_logpdf(z, 2.9, 0.5, 0.0, 3.0))
    val = integrate.quad(f, 0.0, 3.0, points=[2.9], limit=200)[0]
    ok &= _check("reflected normal normalisation", abs(val - 1) < 1e-6, f"{val:.9f}")

    # conditional resamplings keep the reference
    g = rng.random(6) + 0.01
    keep = all(cond_resample(s, 2, 4, g, rng)[4] == 2 for s in CONDITIONAL_SCHEMES for _ in range(500))
    ok &= _check("conditional resampling keeps the reference", keep)

    # one sweep from exact draws stays exact
    R = 4000
    x0 = lg.exact_paths(R, rng)
    for method, blocking in (("cpf_at", None), ("cpf_bs", None), ("cpf_bbs", [0, 2, 4])):
        out, _ = sweep_replicates(lg.model, method, "killing", 4, x0, rng, blocking=blocking)
        se = np.sqrt(sm.smooth_cov[:, 0, 0] / R)
        z = np.abs(out[:, :, 0].mean(axis=0) - sm.smooth_mean[:, 0]) / se
        ok &= _check(f"{method} one-sweep invariance", bool(np.all(z < 4.5)), f"max |z| = {z.max():.2f}")
    return bool(ok)


def _cmd_selftest(args):
    if args.clear_cache:
        print(f"removed {clear_kernel_cache()} cached kernel file(s)")
    t0 = time.perf_counter()
    ok = selftest(args.seed)
    print(f"selftest {'passed' if ok else 'FAILED'} in {time.perf_counter() - t0:.1f}s")
    return EXIT_OK if ok else EXIT_NUMERICAL


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    cmd = {"run": _cmd_run, "tune": _cmd_tune, "plot": _cmd_plot, "selftest": _cmd_selftest}[args.command]
    try:
        rc = cmd(args)
    except (ConfigError, PlotInputError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DegenerateWeightsError, ReferenceWeightError, ArithmeticError, FloatingPointError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK if rc is None else rc


if __name__ == "__main__":
    sys.exit(main())
