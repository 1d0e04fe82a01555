"""Experiment configuration: sectioned ``key = value`` text.

Parsing is total: every section and key is known, every value is typed,
and any problem is reported with the line and column of the offending
value.
"""
from __future__ import annotations

import configparser
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .domain import Grid, PotentialWell, ProblemParams
from .errors import ConfigError, KWLError

STAGES = ("validate", "assemble", "dirichlet", "flow", "geometry", "solve", "sweep")
METHODS = ("auto", "nehari", "mountain_pass", "linking")

# section -> {key: (kind, default)}; default None means required
SCHEMA = {
    "domain": {"dim": ("int", None), "halfwidth": ("float", None), "points": ("int", None),
               "align": ("bool", True)},
    "well": {"omega_halfwidth": ("float", None), "ramp_width": ("float", None), "cap": ("float", None),
             "floor_threshold": ("float", None), "offset": ("float", None)},
    "problem": {"p": ("float", None), "alpha": ("alpha", None), "alpha_fraction": ("float", 0.5)},
    "spectrum": {"count": ("int", 4), "m_max": ("int", 2), "flow_lambdas": ("lambdas", ())},
    "constants": {"S": ("const", "auto"), "S_p": ("const", "discrete"), "M_samples": ("int", 10_000)},
    "solve": {"lambda": ("float", None), "method": ("method", "auto"), "tol": ("float", 1e-8),
              "max_iters": ("int", 100_000), "path_nodes": ("int", 33)},
    "sweep": {"lambdas": ("lambdas", ()), "warm_start": ("bool", True), "mass_cap": ("float", 1e-2),
              "h1_cap": ("float", 0.05)},
    "output": {"directory": ("str", "out"), "emit_svg": ("bool", True), "export_matrices": ("bool", False)},
    "run": {"seed": ("int", 0), "threads": ("int", 1)},
}
OPTIONAL_SECTIONS = {"spectrum", "constants", "sweep", "output", "run"}


@dataclass
class ExperimentConfig:
    dim: int
    halfwidth: float
    points: int
    align: bool
    omega_halfwidth: float
    ramp_width: float
    cap: float
    floor_threshold: float
    offset: float
    p: float
    alpha: Optional[float]          # None: take alpha_fraction * alpha0 from the geometry stage
    alpha_fraction: float
    count: int
    m_max: int
    flow_lambdas: tuple
    S: object
    S_p: object
    M_samples: int
    solve_lambda: float
    method: str
    tol: float
    max_iters: int
    path_nodes: int
    sweep_lambdas: tuple
    warm_start: bool
    mass_cap: float
    h1_cap: float
    directory: str
    emit_svg: bool
    export_matrices: bool
    seed: int
    threads: int
    source: str = ""
    path: str = ""
    echo: dict = field(default_factory=dict)

    def grid(self) -> Grid:
        if self.align:
            return Grid.aligned(self.dim, self.points, self.omega_halfwidth, self.halfwidth)
        return Grid(self.dim, self.halfwidth, self.points)

    def well(self, lam: Optional[float] = None) -> PotentialWell:
        return PotentialWell(self.dim, self.omega_halfwidth, self.ramp_width, self.cap,
                             self.floor_threshold, self.offset,
                             self.solve_lambda if lam is None else lam)

    def params(self, alpha: Optional[float] = None) -> ProblemParams:
        a = alpha if alpha is not None else self.alpha
        return ProblemParams(self.p, 1.0 if a is None else a)


def _locate(text: str, section: str, key: Optional[str] = None, at_key: bool = False):
    """1-based (line, column) of ``key``'s value in ``section`` (or of the header).

    ``at_key`` points at the key itself instead of its value.
    """
    current = None
    for ln, raw in enumerate(text.splitlines(), start=1):
        stripped = raw.strip()
        m = re.match(r"\[([^\]]+)\]", stripped)
        if m:
            current = m.group(1).strip()
            if key is None and current == section:
                return ln, raw.index("[") + 1
            continue
        if current != section or key is None:
            continue
        m = re.match(r"\s*([^=:\s]+)\s*[=:]\s*", raw)
        if m and m.group(1).lower() == key.lower():
            return ln, (m.start(1) if at_key else m.end()) + 1
    return None, None


def _log_range(text: str):
    start, stop, count = (s.strip() for s in text.split(":"))
    a, b, n = float(start), float(stop), int(count)
    if n < 2:
        return (a,)
    la, lb = math.log10(a), math.log10(b)
    return tuple(10.0 ** (la + (lb - la) * k / (n - 1)) for k in range(n))


def _convert(kind: str, raw: str):
    raw = raw.strip()
    if kind == "int":
        return int(raw)
    if kind == "float":
        v = float(raw)
        if not math.isfinite(v):
            raise ValueError("value must be finite")
        return v
    if kind == "bool":
        low = raw.lower()
        if low in ("1", "yes", "true", "on"):
            return True
        if low in ("0", "no", "false", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if kind == "str":
        return raw
    if kind == "alpha":
        return None if raw.lower() == "auto" else float(raw)
    if kind == "const":
        low = raw.lower()
        if low in ("auto", "discrete", "talenti"):
            return low
        v = float(raw)
        if not v > 0:
            raise ValueError("constants must be positive")
        return v
    if kind == "method":
        if raw not in METHODS:
            raise ValueError(f"method must be one of {', '.join(METHODS)}")
        return raw
    if kind == "lambdas":
        if not raw:
            return ()
        vals = _log_range(raw) if ":" in raw else tuple(float(x) for x in raw.split(","))
        if any(not (v > 0 and math.isfinite(v)) for v in vals):
            raise ValueError("lambda values must be positive and finite")
        if any(b <= a for a, b in zip(vals, vals[1:])):
            raise ValueError("lambda values must be strictly increasing")
        return vals
    raise AssertionError(kind)


def parse_config(text: str, path: str = "<string>") -> ExperimentConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"), interpolation=None,
                                   strict=True)
    cp.optionxform = str
    try:
        cp.read_string(text, source=path)
    except configparser.MissingSectionHeaderError as exc:
        raise ConfigError("content before the first [section] header", exc.lineno, 1) from None
    except configparser.DuplicateSectionError as exc:
        raise ConfigError(f"duplicate section [{exc.section}]", exc.lineno, 1) from None
    except configparser.DuplicateOptionError as exc:
        raise ConfigError(f"duplicate key {exc.option!r} in [{exc.section}]", exc.lineno, 1) from None
    except configparser.ParsingError as exc:
        ln, line = exc.errors[0]
        raise ConfigError(f"cannot parse {line!r}", ln, 1) from None

    for sec in cp.sections():
        if sec not in SCHEMA:
            ln, col = _locate(text, sec)
            raise ConfigError(f"unknown section [{sec}]", ln, col)
        for key in cp[sec]:
            if key not in SCHEMA[sec]:
                ln, col = _locate(text, sec, key, at_key=True)
                raise ConfigError(f"unknown key {key!r} in [{sec}]", ln, col)

    values, echo = {}, {}
    for sec, keys in SCHEMA.items():
        if sec not in cp and sec not in OPTIONAL_SECTIONS:
            raise ConfigError(f"missing section [{sec}]", None, None)
        for key, (kind, default) in keys.items():
            raw = cp[sec].get(key) if sec in cp else None
            name = {("solve", "lambda"): "solve_lambda", ("sweep", "lambdas"): "sweep_lambdas"}.get((sec, key), key)
            if raw is None:
                if default is None:
                    ln, col = _locate(text, sec)
                    raise ConfigError(f"missing required key {key!r} in [{sec}]", ln, col)
                values[name] = default
                continue
            try:
                values[name] = _convert(kind, raw)
            except (ValueError, TypeError) as exc:
                ln, col = _locate(text, sec, key)
                raise ConfigError(f"[{sec}] {key}: cannot read {raw.strip()!r} as {kind} ({exc})", ln, col) from None
            echo[f"{sec}.{key}"] = raw.strip()
    cfg = ExperimentConfig(**values, source=text, path=path, echo=echo)
    _validate(cfg, text)
    return cfg


def _validate(cfg: ExperimentConfig, text: str) -> None:
    """Re-check module preconditions so bad values fail at parse time with a location."""
    def fail(sec, key, msg):
        ln, col = _locate(text, sec, key)
        raise ConfigError(f"[{sec}] {key}: {msg}", ln, col)

    if cfg.dim not in (1, 2, 3):
        fail("domain", "dim", "must be 1, 2 or 3")
    if cfg.points < 8:
        fail("domain", "points", "need at least 8 points per axis")
    if not cfg.halfwidth > 0:
        fail("domain", "halfwidth", "must be positive")
    if not 4.0 < cfg.p < 6.0:
        fail("problem", "p", "need 4 < p < 6")
    if cfg.alpha is not None and not cfg.alpha > 0:
        fail("problem", "alpha", "must be positive or 'auto'")
    if not cfg.alpha_fraction > 0:
        fail("problem", "alpha_fraction", "must be positive")
    if not cfg.solve_lambda > 0:
        fail("solve", "lambda", "must be positive")
    if cfg.threads < 1:
        fail("run", "threads", "must be >= 1")
    if cfg.m_max < 1:
        fail("spectrum", "m_max", "must be >= 1")
    if cfg.count < 1:
        fail("spectrum", "count", "must be >= 1")
    try:
        cfg.grid()
    except KWLError as exc:
        fail("domain", "points", str(exc))


def load_config(path: str) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    return parse_config(text, str(path))
