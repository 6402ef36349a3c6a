"""Run configuration: a single JSON document with four blocks.

Every key is optional and falls back to the default shown in
:class:`ModelConfig`, :class:`ProblemConfig`, :class:`NumericsConfig` and
:class:`OutputConfig`; unknown keys are rejected.  Overrides use dotted paths,
e.g. ``numerics.picard.tol=1e-5``.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .bsde import RegressionConfig
from .drivers import (
    LinearParams,
    WealthDriver,
    borrow_driver,
    large_investor_driver,
    linear_driver,
    tanh_price_impact,
    tax_driver,
)
from .dual import PathsConfig, ProblemSpec
from .errors import ConfigError, MvdualError
from .fbsde import PicardConfig

MODEL_TYPES = ("linear", "large_investor", "tax", "borrow")
REPORT_FORMATS = ("json", "json-compact")


@dataclass(frozen=True)
class ModelConfig:
    type: str = "linear"
    r: float = 0.0
    theta: tuple[float, ...] = (0.2,)
    sigma: float | tuple[tuple[float, ...], ...] = 1.0
    alpha: float = 0.1  # tax rate
    R: float = 0.05  # borrowing rate
    impact: float = 0.01  # price-impact scale


@dataclass(frozen=True)
class ProblemConfig:
    T: float = 1.0
    d: int = 1
    y: float = 0.95
    c: float = 1.0


@dataclass(frozen=True)
class PicardBlock:
    max_iters: int = 50
    tol: float = 1e-4
    damping: float = 1.0


@dataclass(frozen=True)
class NumericsConfig:
    n_paths: int = 100_000
    n_steps: int = 100
    seed: int = 0
    antithetic: bool = True
    basis_degree: int = 3
    n_bins: int = 32
    ridge: float = 1e-8
    state_features: str = "adjoint_state"
    picard: PicardBlock = field(default_factory=PicardBlock)


@dataclass(frozen=True)
class OutputConfig:
    report: str = "report.json"
    frontier: str = "frontier.csv"
    format: str = "json"


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    problem: ProblemConfig = field(default_factory=ProblemConfig)
    numerics: NumericsConfig = field(default_factory=NumericsConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def to_dict(self) -> dict:
        return _to_plain(dataclasses.asdict(self))

    def problem_spec(self) -> ProblemSpec:
        """Build the solver objects; module errors surface as :class:`ConfigError`."""
        try:
            return _build_spec(self)
        except ConfigError:
            raise
        except (MvdualError, ValueError) as err:
            raise ConfigError(str(err)) from err


def _to_plain(obj):
    if isinstance(obj, dict):
        return {k: _to_plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_plain(v) for v in obj]
    return obj


# --- parsing ----------------------------------------------------------------


def _number(value, key: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{key}: expected a number, got {value!r}")
    v = float(value)
    if not math.isfinite(v):
        raise ConfigError(f"{key}: must be finite")
    return v


def _integer(value, key: str) -> int:
    if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
        raise ConfigError(f"{key}: expected an integer, got {value!r}")
    return int(value)


def _boolean(value, key: str) -> bool:
    if not isinstance(value, bool):
        raise ConfigError(f"{key}: expected true or false, got {value!r}")
    return value


def _string(value, key: str) -> str:
    if not isinstance(value, str):
        raise ConfigError(f"{key}: expected a string, got {value!r}")
    return value


def _vector(value, key: str) -> tuple[float, ...]:
    if isinstance(value, (list, tuple)):
        if not value:
            raise ConfigError(f"{key}: must not be empty")
        return tuple(_number(v, f"{key}[{i}]") for i, v in enumerate(value))
    return (_number(value, key),)


def _sigma(value, key: str):
    if isinstance(value, (list, tuple)):
        rows = tuple(_vector(row, f"{key}[{i}]") for i, row in enumerate(value))
        if len({len(r) for r in rows}) != 1 or len(rows) != len(rows[0]):
            raise ConfigError(f"{key}: must be a square matrix")
        return rows
    return _number(value, key)


_FIELD_PARSERS = {
    ModelConfig: {
        "type": _string,
        "r": _number,
        "theta": _vector,
        "sigma": _sigma,
        "alpha": _number,
        "R": _number,
        "impact": _number,
    },
    ProblemConfig: {"T": _number, "d": _integer, "y": _number, "c": _number},
    PicardBlock: {"max_iters": _integer, "tol": _number, "damping": _number},
    NumericsConfig: {
        "n_paths": _integer,
        "n_steps": _integer,
        "seed": _integer,
        "antithetic": _boolean,
        "basis_degree": _integer,
        "n_bins": _integer,
        "ridge": _number,
        "state_features": _string,
    },
    OutputConfig: {"report": _string, "frontier": _string, "format": _string},
}

_NESTED = {
    RunConfig: {"model": ModelConfig, "problem": ProblemConfig, "numerics": NumericsConfig, "output": OutputConfig},
    NumericsConfig: {"picard": PicardBlock},
}


def _parse_block(cls, data, prefix: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix or 'config'}: expected an object, got {type(data).__name__}")
    parsers = _FIELD_PARSERS.get(cls, {})
    nested = _NESTED.get(cls, {})
    values = {}
    for key, raw in data.items():
        path = f"{prefix}.{key}" if prefix else key
        if key in nested:
            values[key] = _parse_block(nested[key], raw, path)
        elif key in parsers:
            values[key] = parsers[key](raw, path)
        else:
            known = sorted(list(parsers) + list(nested))
            raise ConfigError(f"unknown key {path!r}; expected one of {known}")
    return cls(**values)


def _check(cfg: RunConfig) -> None:
    m, p, n, o = cfg.model, cfg.problem, cfg.numerics, cfg.output
    if m.type not in MODEL_TYPES:
        raise ConfigError(f"model.type: expected one of {list(MODEL_TYPES)}, got {m.type!r}")
    if o.format not in REPORT_FORMATS:
        raise ConfigError(f"output.format: expected one of {list(REPORT_FORMATS)}, got {o.format!r}")
    if p.d < 1:
        raise ConfigError("problem.d: must be >= 1")
    if len(m.theta) not in (1, p.d):
        raise ConfigError(f"model.theta: expected 1 or d={p.d} entries, got {len(m.theta)}")
    if isinstance(m.sigma, tuple) and len(m.sigma) != p.d:
        raise ConfigError(f"model.sigma: expected a {p.d}x{p.d} matrix")
    for key, v in (("problem.T", p.T), ("problem.y", p.y), ("problem.c", p.c)):
        if v <= 0:
            raise ConfigError(f"{key}: must be positive, got {v}")
    if m.r < 0:
        raise ConfigError("model.r: must be >= 0")
    if not 0 <= m.alpha < 1:
        raise ConfigError("model.alpha: must lie in [0, 1)")
    if m.R < m.r:
        raise ConfigError("model.R: must be >= model.r")
    if m.impact < 0:
        raise ConfigError("model.impact: must be >= 0")
    if n.n_paths < 2 or n.n_steps < 1:
        raise ConfigError("numerics.n_paths must be >= 2 and numerics.n_steps >= 1")
    if n.antithetic and n.n_paths % 2:
        raise ConfigError("numerics.n_paths: antithetic sampling needs an even count")
    if not 0 <= n.seed < 2**64:
        raise ConfigError("numerics.seed: must be a 64-bit non-negative integer")


def parse_config(data: dict) -> RunConfig:
    cfg = _parse_block(RunConfig, data, "")
    _check(cfg)
    try:
        _regression(cfg)
        _picard(cfg)
    except ValueError as err:
        raise ConfigError(str(err)) from err
    return cfg


def load_config(path: str | Path, overrides: list[str] | None = None) -> RunConfig:
    """Read and validate a config file, then apply ``key=value`` overrides."""
    try:
        text = Path(path).read_text()
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from err
    try:
        data = json.loads(text)
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}: line {err.lineno}, column {err.colno}: {err.msg}") from err
    for item in overrides or []:
        apply_override(data, item)
    return parse_config(data)


def apply_override(data: dict, item: str) -> None:
    """Set a dotted key in the raw document; the value is read as JSON, else as a string."""
    key, sep, raw = item.partition("=")
    if not sep or not key:
        raise ConfigError(f"override {item!r}: expected key=value")
    try:
        value: Any = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    parts = key.split(".")
    node = data
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {item!r}: {part!r} is not a block")
    node[parts[-1]] = value


# --- building ---------------------------------------------------------------


def _regression(cfg: RunConfig) -> RegressionConfig:
    n = cfg.numerics
    return RegressionConfig(
        basis_degree=n.basis_degree, state_features=n.state_features, ridge=n.ridge, n_bins=n.n_bins
    )


def _picard(cfg: RunConfig) -> PicardConfig:
    p = cfg.numerics.picard
    return PicardConfig(max_iters=p.max_iters, tol=p.tol, damping=p.damping)


def build_driver(cfg: RunConfig) -> WealthDriver:
    m, d = cfg.model, cfg.problem.d
    theta = list(m.theta) * d if len(m.theta) == 1 else list(m.theta)
    sigma = [list(row) for row in m.sigma] if isinstance(m.sigma, tuple) else m.sigma
    p = LinearParams(r=m.r, theta=theta, sigma=sigma, horizon=cfg.problem.T)
    if m.type == "linear":
        return linear_driver(p)
    if m.type == "tax":
        return tax_driver(p, m.alpha)
    if m.type == "borrow":
        return borrow_driver(p, m.R)
    return large_investor_driver(p, l=tanh_price_impact(m.impact, d_hint=d))


def _build_spec(cfg: RunConfig) -> ProblemSpec:
    n = cfg.numerics
    return ProblemSpec(
        driver=build_driver(cfg),
        T=cfg.problem.T,
        y=cfg.problem.y,
        c=cfg.problem.c,
        paths=PathsConfig(n.n_paths, n.n_steps, n.seed, n.antithetic),
        rcfg=_regression(cfg),
        pcfg=_picard(cfg),
    )
