"""Flat ``key = value`` experiment configuration.

Top-level keys describe the sampler; each model reads its parameters from a
``[model-name]`` section. Comma-separated values in a model section (and in
``N`` or ``resampling``) span a grid of cells, as does a ``;``-separated
list of blockings. Example::

    model = ctcrwp
    N = 8
    iterations = 2000
    burn_in = 200
    resampling = killing, systematic_mp
    blocking = dense; blocktime(0.25); auto(64, 10)
    seed = 1
    output = out

    [ctcrwp]
    sigma = 0.125, 0.5, 2.0
    tau = 8
    dt = 0.03125
"""

from __future__ import annotations

import itertools
import math
import re
from dataclasses import dataclass, field

from .resampling import CONDITIONAL_SCHEMES


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


MODEL_KEYS = {
    "ctcrwp": {"sigma": 0.5, "beta_v": None, "beta_x": None, "eta": 1.0, "tau": 8.0, "dt": 2.0 ** -5},
    "cprbm": {"sigma": 0.3, "a": 0.0, "b": 3.0, "alpha": 1.0, "beta": 0.5, "K_trunc": 10, "tau": 16.0,
              "dt": 2.0 ** -6, "events": "simulate", "data_seed": 0},
    "ctcrwt": {"beta": 1.0, "sigma": 300.0, "eta": 50.0, "sigma_L": 50.0, "tau": 16.0, "dt": 2.0 ** -5,
               "raster": "two_lake", "observations": "two_lake", "off_value": math.inf},
}
_STRING_KEYS = {"events", "raster", "observations"}
_INT_KEYS = {"K_trunc", "data_seed"}

TOP_KEYS = {
    "model": None, "method": "bbs", "N": "8", "iterations": "1000", "burn_in": "100",
    "resampling": "systematic_mp", "blocking": "dense", "seed": "0", "output": "out",
    "replicates": "1", "workers": "1",
}
METHODS = {"at": "cpf_at", "bs": "cpf_bs", "bbs": "cpf_bbs"}

_BLOCKING_RE = re.compile(r"^(dense|blocktime\(\s*([^)]+)\)|auto\(\s*(\d+)\s*,\s*(\d+)\s*\))$")


@dataclass(frozen=True)
class BlockingSpec:
    kind: str  # dense | blocktime | auto
    blocktime: float | None = None
    N0: int | None = None
    n: int | None = None

    @property
    def label(self):
        if self.kind == "blocktime":
            return f"blocktime({self.blocktime:g})"
        if self.kind == "auto":
            return f"auto({self.N0},{self.n})"
        return "dense"


@dataclass(frozen=True)
class Cell:
    """One point of the experiment grid."""

    index: int
    N: int
    resampling: str
    blocking: BlockingSpec
    params: dict
    varying: tuple = ()  # model keys that change across the grid

    @property
    def series(self):
        """Label without the blocking, used to group cells into curves."""
        parts = [f"{k}={v:g}" if isinstance(v, float) else f"{k}={v}" for k, v in self.params.items()
                 if k in self.varying]
        return " ".join(parts + [f"N={self.N}", self.resampling])

    @property
    def label(self):
        return f"{self.series} {self.blocking.label}"


@dataclass(frozen=True)
class ExperimentConfig:
    model: str
    method: str
    iterations: int
    burn_in: int
    seed: int
    output: str
    replicates: int
    workers: int
    N: tuple
    resampling: tuple
    blocking: tuple
    params: dict = field(default_factory=dict)  # key -> tuple of values

    def cells(self):
        keys = list(self.params)
        varying = tuple(k for k in keys if len(self.params[k]) > 1)
        out = []
        combos = itertools.product(itertools.product(*(self.params[k] for k in keys)),
                                   self.N, self.resampling, self.blocking)
        for i, (vals, N, rs, bl) in enumerate(combos):
            out.append(Cell(i, N, rs, bl, dict(zip(keys, vals)), varying))
        return out

    def to_text(self):
        """Canonical text form (written next to results)."""
        lines = [f"model = {self.model}", f"method = {self.method}", f"N = {', '.join(map(str, self.N))}",
                 f"iterations = {self.iterations}", f"burn_in = {self.burn_in}",
                 f"resampling = {', '.join(self.resampling)}",
                 f"blocking = {'; '.join(b.label for b in self.blocking)}", f"seed = {self.seed}",
                 f"replicates = {self.replicates}", f"workers = {self.workers}", f"output = {self.output}",
                 "", f"[{self.model}]"]
        for k, v in self.params.items():
            if v == (None,):
                continue
            lines.append(f"{k} = {', '.join(_fmt(x) for x in v)}")
        return "\n".join(lines) + "\n"


def _fmt(x):
    return repr(x) if isinstance(x, float) else str(x)


def parse_text(text):
    """``{section: {key: raw value}}``; top-level keys live in section ``""``."""
    sections = {"": {}}
    cur = ""
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            cur = line[1:-1].strip()
            sections.setdefault(cur, {})
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw.strip()!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        if not k:
            raise ConfigError(f"line {lineno}: empty key")
        sections[cur][k] = v
    return sections


def _int(name, s, minimum=1):
    try:
        v = int(s)
    except ValueError:
        raise ConfigError(f"{name}: expected an integer, got {s!r}") from None
    if v < minimum:
        raise ConfigError(f"{name}: must be at least {minimum}, got {v}")
    return v


def _float(name, s):
    try:
        return float(s)
    except ValueError:
        raise ConfigError(f"{name}: expected a number, got {s!r}") from None


def parse_blocking(s):
    m = _BLOCKING_RE.match(s.strip())
    if not m:
        raise ConfigError(f"blocking: expected dense, blocktime(x) or auto(N0, n), got {s.strip()!r}")
    if m.group(1) == "dense":
        return BlockingSpec("dense")
    if m.group(2) is not None:
        bt = _float("blocking", m.group(2))
        if not bt > 0:
            raise ConfigError("blocking: blocktime must be positive")
        return BlockingSpec("blocktime", blocktime=bt)
    return BlockingSpec("auto", N0=_int("blocking", m.group(3), 2), n=_int("blocking", m.group(4)))


def build_config(sections, overrides=None) -> ExperimentConfig:
    """Validate parsed sections (plus ``{key: value}`` overrides, dotted for model keys)."""
    top = dict(sections.get("", {}))
    model_sec = {k: dict(v) for k, v in sections.items() if k}
    for k, v in (overrides or {}).items():
        if "." in k:
            sec, key = k.split(".", 1)
            model_sec.setdefault(sec, {})[key] = v
        else:
            top[k] = v
    unknown = set(top) - set(TOP_KEYS)
    if unknown:
        raise ConfigError(f"unknown key(s): {', '.join(sorted(unknown))}")
    vals = {k: top.get(k, d) for k, d in TOP_KEYS.items()}
    model = vals["model"]
    if model not in MODEL_KEYS:
        raise ConfigError(f"model: expected one of {', '.join(MODEL_KEYS)}, got {model!r}")
    method = vals["method"].strip().lower()
    if method not in METHODS:
        raise ConfigError(f"method: expected one of {', '.join(METHODS)}, got {method!r}")
    iterations = _int("iterations", vals["iterations"])
    burn_in = _int("burn_in", vals["burn_in"], 0)
    if burn_in >= iterations:
        raise ConfigError("burn_in: must be smaller than iterations")
    seed = _int("seed", vals["seed"], 0)
    Ns = tuple(_int("N", s) for s in vals["N"].split(","))
    schemes = tuple(s.strip() for s in vals["resampling"].split(","))
    for s in schemes:
        if s not in CONDITIONAL_SCHEMES:
            raise ConfigError(f"resampling: expected one of {', '.join(CONDITIONAL_SCHEMES)}, got {s!r}")
    blockings = tuple(parse_blocking(s) for s in vals["blocking"].split(";") if s.strip())
    if not blockings:
        raise ConfigError("blocking: empty")
    extra = set(model_sec) - {model}
    if extra:
        raise ConfigError(f"section(s) {', '.join(sorted(extra))} do not match model {model!r}")
    sec = model_sec.get(model, {})
    defaults = MODEL_KEYS[model]
    bad = set(sec) - set(defaults)
    if bad:
        raise ConfigError(f"[{model}] unknown key(s): {', '.join(sorted(bad))}")
    params = {}
    for k, d in defaults.items():
        raw = sec.get(k)
        if raw is None:
            params[k] = (d,)
        elif k in _STRING_KEYS:
            params[k] = (raw,)
        elif k in _INT_KEYS:
            params[k] = tuple(_int(f"{model}.{k}", s, 0) for s in raw.split(","))
        else:
            params[k] = tuple(_float(f"{model}.{k}", s) for s in raw.split(","))
    for dt in params["dt"]:
        if not dt > 0:
            raise ConfigError(f"{model}.dt: must be positive")
        for tau in params["tau"]:
            r = tau / dt
            if not (tau > 0 and abs(r - round(r)) < 1e-9 * max(1.0, r)):
                raise ConfigError(f"{model}.tau: must be a positive multiple of dt")
        for b in blockings:
            if b.kind == "blocktime":
                r = b.blocktime / dt
                if abs(r - round(r)) > 1e-9 * max(1.0, r):
                    raise ConfigError(f"blocking: blocktime {b.blocktime:g} is not a multiple of dt={dt:g}")
    if method != "bbs" and any(b.kind != "dense" for b in blockings):
        raise ConfigError(f"blocking: method {method!r} only accepts dense")
    return ExperimentConfig(model, method, iterations, burn_in, seed, vals["output"],
                            _int("replicates", vals["replicates"]), _int("workers", vals["workers"]),
                            Ns, schemes, blockings, params)


def load_config(path, overrides=None) -> ExperimentConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    return build_config(parse_text(text), overrides)
