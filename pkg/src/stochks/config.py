"""Run configuration files.

Plain ``key = value`` lines, optionally grouped under ``[section]`` headers;
``[grid]`` followed by ``n_cells = 64`` is the same as ``grid.n_cells = 64``.
Initial data are expressions in ``x`` such as ``1 + 0.5*cos(pi*x)``.
"""

from __future__ import annotations

import ast
import configparser
import math
from dataclasses import dataclass, field

import numpy as np

from .conversion import CorrectionConvention
from .diagnostics import LyapunovParams
from .dynamics import ModelParams
from .field_space import GridSpec
from .harness import EnsembleConfig, ModelSetup
from .integrator import SchemeConfig
from .wiener import DEFAULT_MODE_CUTOFF, make_noise_spec

_ROOT = "__root__"

DEFAULTS = {
    "grid.n_cells": "64",
    "model.r_u": "1", "model.r_v": "1", "model.chi": "1", "model.alpha": "1", "model.beta": "1",
    "noise1.delta": "1.5", "noise1.K": str(DEFAULT_MODE_CUTOFF), "noise1.amplitude": "0.5",
    "noise2.delta": "2.5", "noise2.K": str(DEFAULT_MODE_CUTOFF), "noise2.amplitude": "0.5",
    "scheme.kind": "semi_implicit_em", "scheme.dt": "1e-3", "scheme.t_end": "1", "scheme.record_every": "10",
    "correction_convention": "half",
    "truncation.level_max": "3", "truncation.threshold_multiplier": "1",
    "ensemble.n_paths": "100", "ensemble.base_seed": "0", "ensemble.workers": "1", "ensemble.batch_size": "32",
    "output.dir": "out",
    "initial.u0": "1 + 0.5*cos(pi*x)", "initial.v0": "0",
}
OPTIONAL = {"lyapunov.rho", "lyapunov.c1", "lyapunov.c2"}
STUDY_PREFIX = "study."
# keys that describe how a run is executed, not what it computes
EXECUTION_KEYS = {"ensemble.workers", "output.dir"}


class ConfigError(ValueError):
    """Malformed or inconsistent configuration (CLI exit code 2)."""


_FUNCS = {
    "cos": np.cos, "sin": np.sin, "exp": np.exp, "log": np.log, "sqrt": np.sqrt, "abs": np.abs,
    "cosh": np.cosh, "sinh": np.sinh, "tanh": np.tanh, "minimum": np.minimum, "maximum": np.maximum,
}
_CONSTS = {"pi": math.pi, "e": math.e}
_NODES = (ast.Expression, ast.BinOp, ast.UnaryOp, ast.Call, ast.Name, ast.Load, ast.Constant,
          ast.Add, ast.Sub, ast.Mult, ast.Div, ast.Pow, ast.USub, ast.UAdd, ast.Mod)


def eval_expression(text: str, x=None):
    """Evaluate an arithmetic expression in ``x`` with a fixed set of numpy functions."""
    try:
        tree = ast.parse(text.strip(), mode="eval")
    except SyntaxError as exc:
        raise ConfigError(f"cannot parse expression {text!r}: {exc.msg}") from None
    names = dict(_CONSTS)
    names.update(_FUNCS)
    if x is not None:
        names["x"] = x
    for node in ast.walk(tree):
        if not isinstance(node, _NODES):
            raise ConfigError(f"unsupported syntax {type(node).__name__} in {text!r}")
        if isinstance(node, ast.Name) and node.id not in names:
            raise ConfigError(f"unknown name {node.id!r} in {text!r}")
        if isinstance(node, ast.Call) and not (isinstance(node.func, ast.Name) and node.func.id in _FUNCS):
            raise ConfigError(f"only {sorted(_FUNCS)} may be called in {text!r}")
    with np.errstate(all="raise"):
        try:
            return eval(compile(tree, "<config>", "eval"), {"__builtins__": {}}, names)
        except (FloatingPointError, ZeroDivisionError, TypeError, ValueError) as exc:
            raise ConfigError(f"cannot evaluate {text!r}: {exc}") from None


def parse_config_text(text: str) -> dict:
    """Flatten the file into ``{"section.key": "raw value"}``."""
    cp = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"),
                                   inline_comment_prefixes=("#",), delimiters=("=",))
    cp.optionxform = str
    try:
        cp.read_string(f"[{_ROOT}]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    flat = {}
    for sec in cp.sections():
        for key, val in cp.items(sec, raw=True):
            name = key if sec == _ROOT else f"{sec}.{key}"
            if name in flat:
                raise ConfigError(f"duplicate key {name}")
            flat[name] = val.strip()
    return flat


@dataclass(frozen=True, eq=False)
class RunConfig:
    raw: dict
    setup: ModelSetup
    ensemble: EnsembleConfig
    level_max: int
    threshold_multiplier: float
    output_dir: str
    study: dict = field(default_factory=dict)

    def echo(self) -> dict:
        """Resolved settings for reports, without execution-only keys."""
        return {k: v for k, v in sorted(self.raw.items()) if k not in EXECUTION_KEYS}

    def study_value(self, key: str, default=None):
        raw = self.study.get(key)
        if raw is None:
            return default
        return eval_expression(raw)

    def study_list(self, key: str, default=None) -> list:
        raw = self.study.get(key)
        if raw is None:
            return default
        return [eval_expression(p) if _numeric(p) else p.strip() for p in raw.split(",") if p.strip()]


def _numeric(text):
    try:
        eval_expression(text)
        return True
    except ConfigError:
        return False


def _num(flat, key, kind=float):
    raw = flat[key]
    try:
        val = eval_expression(raw)
    except ConfigError as exc:
        raise ConfigError(f"{key}: {exc}") from None
    if kind is int:
        if float(val) != int(val):
            raise ConfigError(f"{key} must be an integer, got {raw!r}")
        return int(val)
    return float(val)


def build_config(flat: dict) -> RunConfig:
    known = set(DEFAULTS) | OPTIONAL
    for key in flat:
        if key not in known and not key.startswith(STUDY_PREFIX):
            raise ConfigError(f"unknown key {key!r}")
    merged = dict(DEFAULTS)
    merged.update(flat)
    try:
        grid = GridSpec(_num(merged, "grid.n_cells", int))
        params = ModelParams(*(_num(merged, f"model.{k}") for k in ("r_u", "r_v", "chi", "alpha", "beta")))
        specs = [make_noise_spec(_num(merged, f"{s}.delta"), _num(merged, f"{s}.K", int), _num(merged, f"{s}.amplitude"))
                 for s in ("noise1", "noise2")]
        scheme = SchemeConfig(_num(merged, "scheme.dt"), merged["scheme.kind"], _num(merged, "scheme.t_end"),
                              _num(merged, "scheme.record_every", int))
        scheme.n_steps
        convention = CorrectionConvention.parse(merged["correction_convention"])
        lyap_keys = [k for k in OPTIONAL if k in merged]
        if lyap_keys and len(lyap_keys) != len(OPTIONAL):
            raise ConfigError("lyapunov needs all of rho, c1, c2")
        lyap = LyapunovParams(*(_num(merged, f"lyapunov.{k}") for k in ("rho", "c1", "c2"))) if lyap_keys else None
        x = grid.nodes
        u0 = np.broadcast_to(np.asarray(eval_expression(merged["initial.u0"], x), dtype=float), x.shape).copy()
        v0 = np.broadcast_to(np.asarray(eval_expression(merged["initial.v0"], x), dtype=float), x.shape).copy()
        if not (np.all(np.isfinite(u0)) and np.all(np.isfinite(v0))):
            raise ConfigError("initial data must be finite")
        ens = EnsembleConfig(_num(merged, "ensemble.n_paths", int), _num(merged, "ensemble.base_seed", int),
                             _num(merged, "ensemble.workers", int), "moments",
                             _num(merged, "ensemble.batch_size", int))
        level_max = _num(merged, "truncation.level_max", int)
        mult = _num(merged, "truncation.threshold_multiplier")
        if level_max < 1 or not mult > 0:
            raise ConfigError("truncation.level_max must be >= 1 and threshold_multiplier > 0")
    except ConfigError:
        raise
    except (ValueError, TypeError, KeyError) as exc:
        raise ConfigError(str(exc)) from None
    setup = ModelSetup(grid, params, specs[0], specs[1], scheme, u0, v0, convention, lyap)
    study = {k[len(STUDY_PREFIX):]: v for k, v in merged.items() if k.startswith(STUDY_PREFIX)}
    return RunConfig(merged, setup, ens, level_max, mult, merged["output.dir"], study)


def load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    return build_config(parse_config_text(text))
