"""Run configuration: a YAML file of nested sections, fully validated up front."""

from __future__ import annotations

import copy
import os
import re
from dataclasses import dataclass
from pathlib import Path

import yaml

from .convolution import kernel_shape
from .geometry import ImagingGrid, PairSchedule, WindowConfig, make_default_schedule
from .inversion import BeamformingConfig, InversionConfig
from .learning import RegularizerSpec
from .phantoms import PhantomSpec


class ConfigError(ValueError):
    """Invalid configuration; message names the offending field."""


DEFAULTS = {
    "grid": {"width_m": 0.040, "depth_m": 0.055, "nx": 32, "nz": 44},
    "schedule": {"pairs": make_default_schedule().to_list()},
    "beamforming": {"c0": 1500.0},
    "window": {"f_number": 1.0, "max_half_width": 8.0},
    "learning": {"mode": "constrained", "n_c": 21, "lambda_k": 1e-3, "lambda_f": 1e-3,
                 "relative": True, "pin_weight": 1e3, "lateral_weight": 1.0,
                 "axial_weight": 1.0, "kernel_margin": None},
    "inversion": {"lam": 3e-4, "kappa": 1.0, "max_iters": 40, "tolerance": 1e-6,
                  "eps_rel": 1.0, "eps_min_rel": 1e-3, "eps_decay_every": 3,
                  "cg_max_iters": 50, "cg_tol": 1e-10, "direct_max_unknowns": 800},
    "masking": {"near_field_rows": 0, "edge_cols": 0},
    "data": {"family": "blob", "n_train": 32, "n_val": 32, "n_test": 32,
             "noise_sigma": 5e-9, "truth_model": "window", "background_mode": "random",
             "seed": 0},
    "run": {"workers": None},
}

FULL_SCALE = {"grid": {"nx": 64, "nz": 88}}


def _merge(base: dict, over: dict, path="") -> dict:
    out = copy.deepcopy(base)
    for key, val in (over or {}).items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"{where}: unknown key")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"{where}: expected a section")
            out[key] = _merge(base[key], val, where + ".")
        else:
            out[key] = val
    return out


def parse_override(text: str) -> dict:
    """``section.key=value`` to a nested dict; the value is parsed as YAML."""
    if "=" not in text:
        raise ConfigError(f"override {text!r}: expected section.key=value")
    dotted, raw = text.split("=", 1)
    parts = dotted.strip().split(".")
    if len(parts) != 2 or not all(parts):
        raise ConfigError(f"override {text!r}: expected section.key=value")
    return {parts[0]: {parts[1]: yaml.safe_load(raw)}}


@dataclass
class RunConfig:
    raw: dict
    grid: ImagingGrid
    schedule: PairSchedule
    beamforming: BeamformingConfig
    window: WindowConfig
    regularizer: RegularizerSpec
    inversion: InversionConfig
    phantom: PhantomSpec

    @property
    def learning(self) -> dict:
        return self.raw["learning"]

    @property
    def data(self) -> dict:
        return self.raw["data"]

    @property
    def masking(self) -> dict:
        return self.raw["masking"]

    @property
    def n_c(self) -> int:
        return int(self.learning["n_c"])

    @property
    def kernel_margin(self) -> int:
        m = self.learning["kernel_margin"]
        return (self.n_c - 1) // 2 if m is None else int(m)

    @property
    def kernel_dims(self) -> tuple[int, int]:
        return kernel_shape(self.grid, self.schedule.max_abs_angle_deg, self.kernel_margin)

    @property
    def workers(self) -> int:
        w = self.raw["run"]["workers"]
        return max(1, os.cpu_count() or 1) if w is None else int(w)


def _section(raw, name, build):
    try:
        return build(raw[name])
    except ConfigError:
        raise
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"{name}: {exc}") from exc


def _num(section: dict, name: str, key: str, kind=float, minimum=None, allow_none=False):
    val = section[key]
    if val is None and allow_none:
        return None
    if isinstance(val, bool) or not isinstance(val, (int, float)):
        raise ConfigError(f"{name}.{key}: expected a number, got {val!r}")
    if kind is int and int(val) != val:
        raise ConfigError(f"{name}.{key}: expected an integer, got {val!r}")
    val = kind(val)
    if minimum is not None and val < minimum:
        raise ConfigError(f"{name}.{key}: must be >= {minimum}, got {val}")
    return val


_FLOAT_TEXT = re.compile(r"^[-+]?(\d+\.?\d*|\.\d+)[eE][-+]?\d+$")


def _coerce_numbers(node):
    # YAML 1.1 reads exponent forms without a dot (1e-4) as strings
    if isinstance(node, dict):
        return {k: _coerce_numbers(v) for k, v in node.items()}
    if isinstance(node, list):
        return [_coerce_numbers(v) for v in node]
    if isinstance(node, str) and _FLOAT_TEXT.match(node.strip()):
        return float(node)
    return node


def build_config(raw: dict) -> RunConfig:
    raw = _coerce_numbers(_merge(DEFAULTS, raw or {}))

    g = raw["grid"]
    grid = _section(raw, "grid", lambda s: ImagingGrid(
        _num(s, "grid", "width_m", minimum=0), _num(s, "grid", "depth_m", minimum=0),
        _num(s, "grid", "nx", int, 2), _num(s, "grid", "nz", int, 2)))
    schedule = _section(raw, "schedule", lambda s: PairSchedule.from_angles(s["pairs"]))
    bf = _section(raw, "beamforming", lambda s: BeamformingConfig(_num(s, "beamforming", "c0")))
    window = _section(raw, "window", lambda s: WindowConfig(
        _num(s, "window", "f_number"), _num(s, "window", "max_half_width", minimum=0)))

    lrn = raw["learning"]
    if lrn["mode"] not in ("constrained", "unconstrained"):
        raise ConfigError(f"learning.mode: expected constrained|unconstrained, got {lrn['mode']!r}")
    n_c = _num(lrn, "learning", "n_c", int, 1)
    if n_c % 2 != 1:
        raise ConfigError(f"learning.n_c: must be odd, got {n_c}")
    _num(lrn, "learning", "kernel_margin", int, 0, allow_none=True)
    if not isinstance(lrn["relative"], bool):
        raise ConfigError("learning.relative: expected true/false")
    reg = _section(raw, "learning", lambda s: RegularizerSpec(
        _num(s, "learning", "lambda_k", minimum=0), _num(s, "learning", "lambda_f", minimum=0),
        s["relative"], _num(s, "learning", "pin_weight", minimum=0),
        _num(s, "learning", "lateral_weight", minimum=0),
        _num(s, "learning", "axial_weight", minimum=0)))

    inv = raw["inversion"]
    int_keys = ("max_iters", "eps_decay_every", "cg_max_iters", "direct_max_unknowns")
    inversion = _section(raw, "inversion", lambda s: InversionConfig(**{
        k: _num(s, "inversion", k, int if k in int_keys else float) for k in s}))

    m = raw["masking"]
    _num(m, "masking", "near_field_rows", int, 0)
    _num(m, "masking", "edge_cols", int, 0)
    if m["near_field_rows"] > grid.nz or 2 * m["edge_cols"] > grid.nx:
        raise ConfigError("masking: margins exceed the grid")

    d = raw["data"]
    for key in ("n_train", "n_val", "n_test", "seed"):
        _num(d, "data", key, int, 0)
    _num(d, "data", "noise_sigma", minimum=0)
    if d["truth_model"] not in ("window", "line"):
        raise ConfigError(f"data.truth_model: expected window|line, got {d['truth_model']!r}")
    phantom = _section(raw, "data", lambda s: PhantomSpec(
        family=s["family"], grid=grid, background_mode=s["background_mode"]))
    _num(raw["run"], "run", "workers", int, 1, allow_none=True)

    return RunConfig(raw, grid, schedule, bf, window, reg, inversion, phantom)


def load_config(path=None, overrides=(), profile: str | None = None) -> RunConfig:
    raw = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        try:
            raw = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            mark = getattr(exc, "problem_mark", None)
            where = f"line {mark.line + 1}, column {mark.column + 1}" if mark else "unknown position"
            raise ConfigError(f"{path}: YAML syntax error at {where}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a mapping of sections")
    if profile == "full":
        raw = _merge(_merge(DEFAULTS, FULL_SCALE), raw)
    elif profile not in (None, "desk"):
        raise ConfigError(f"unknown profile {profile!r}")
    for text in overrides:
        raw = _merge(_merge(DEFAULTS, raw), parse_override(text))
    return build_config(raw)
