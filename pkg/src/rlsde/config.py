"""Run-config loading and validation.

A config is a TOML (or JSON) document with the blocks ``flow``,
``perturbation``, ``diffusion``, ``simulation``, ``hypothesis``,
``certification`` and ``output`` plus top-level ``epsilon`` /
``epsilon_sweep``.  Unknown keys are rejected; every default is written back
into the resolved config so the manifest records exactly what ran.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import jsonschema
import numpy as np

from .coefficients import CoefficientProcessSpec, DiffusionModel, PerturbationModel
from .errors import ConfigError, RlsdeError
from .flows import H0Flow

try:  # Python >= 3.11
    import tomllib
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

CERTIFICATES = (
    "averaged_flow",
    "mean_log",
    "event_probability",
    "moment_window",
    "lemma",
    "fluctuation",
    "contraction",
    "moment_boundedness",
    "as_lyapunov",
)

_matrix = {"type": "array", "items": {"type": "array", "items": {"type": "number"}}, "minItems": 1}
_vector = {"type": "array", "items": {"type": "number"}, "minItems": 1}
_pos = {"type": "number", "exclusiveMinimum": 0}
_int_keyed = {"type": "object", "patternProperties": {"^[0-9]+$": {"type": "number", "minimum": 0}}, "additionalProperties": False}


def _block(props: dict, required: tuple = ()) -> dict:
    return {"type": "object", "properties": props, "required": list(required), "additionalProperties": False, "default": {}}


SCHEMA: dict[str, Any] = {
    "type": "object",
    "additionalProperties": False,
    "required": ["flow", "perturbation"],
    "properties": {
        "flow": _block(
            {
                "A_inf": _matrix,
                "M": _matrix,
                "a": {"type": "number", "minimum": 0, "default": 0.0},
                "b": {**_pos, "default": 1.0},
            },
            ("A_inf",),
        ),
        "perturbation": _block(
            {
                "kind": {"enum": ["entrywise-ou", "piecewise-constant-jump", "frozen-gaussian"]},
                "sigma": _pos,
                "theta": {**_pos, "default": 1.0},
                "rate": {**_pos, "default": 1.0},
            },
            ("kind", "sigma"),
        ),
        "diffusion": _block(
            {
                "kind": {"enum": ["constant-psd", "drift-coupled"], "default": "constant-psd"},
                "B0": _matrix,
                "beta": {"type": "number", "minimum": 0, "default": 0.0},
                "gamma": {"type": "number", "minimum": 0, "default": 0.0},
            }
        ),
        "epsilon": {"type": "number", "minimum": 0, "maximum": 1, "default": 0.0},
        "epsilon_sweep": {"type": "array", "items": {"type": "number", "minimum": 0, "maximum": 1}, "default": []},
        "simulation": _block(
            {
                "dt": {**_pos, "default": 0.01},
                "horizon": {**_pos, "default": 1.0},
                "num_traj": {"type": "integer", "minimum": 1, "default": 1000},
                "seed": {"type": "integer", "minimum": 0, "default": 0},
                "method": {"enum": ["euler-maruyama", "solution-formula"], "default": "euler-maruyama"},
                "x0": {"type": "array", "items": _vector, "minItems": 1},
                "initial_cov": _matrix,
                "record_stride": {"type": "integer", "minimum": 1, "default": 10},
                "quantiles": {"type": "array", "items": {"type": "number", "minimum": 0, "maximum": 1}, "default": [0.1, 0.5, 0.9]},
                "svg_paths": {"type": "integer", "minimum": 1, "default": 20},
            }
        ),
        "hypothesis": _block(
            {
                "mode": {"enum": ["estimated", "declared"], "default": "estimated"},
                "samples": {"type": "integer", "minimum": 100, "default": 2000},
                "horizon": {**_pos, "default": 10.0},
                "points": {"type": "integer", "minimum": 2, "default": 21},
                "reference_epsilon": {"type": "number", "exclusiveMinimum": 0, "maximum": 1, "default": 1.0},
                "seed_offset": {"type": "integer", "minimum": 0, "default": 1},
                "c": _int_keyed,
                "d1": {"type": "number", "minimum": 0},
                "d2": {"type": "number", "minimum": 0},
                "eps_n": _int_keyed,
            }
        ),
        "certification": _block(
            {
                "run": {"type": "array", "items": {"enum": list(CERTIFICATES)}, "default": list(CERTIFICATES)},
                "n_list": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1, "default": [2]},
                "nu": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1, "default": 0.5},
                "samples": {"type": "integer", "minimum": 2, "default": 1000},
                "s": {"type": "number", "minimum": 0, "default": 0.0},
                "t": _pos,
                "t_list": {"type": "array", "items": _pos, "minItems": 1, "default": [1.0, 2.0, 4.0]},
                "window_points": {"type": "integer", "minimum": 2, "default": 5},
                "window_span_cap": {**_pos, "default": 5.0},
                "lemma_t_grid": {"type": "array", "items": {"type": "number", "minimum": 0.1}, "minItems": 1, "default": [0.5, 1.0, 2.0]},
                "fluctuation_eps": {"type": "array", "items": {"type": "number", "minimum": 0, "maximum": 1}},
                "lyapunov_eps": {"type": "array", "items": {"type": "number", "minimum": 0, "maximum": 1}},
                "x1": _vector,
                "x2": _vector,
                "x0": _vector,
                "h": {"type": "number", "minimum": 0},
                "dt": {**_pos, "default": 0.01},
                "tol": {**_pos, "default": 1e-9},
                "bound_scale": {"type": "number", "minimum": 0, "default": 1.0},
            }
        ),
        "output": _block(
            {
                "dir": {"type": "string", "default": "rlsde_out"},
                "svg": {"type": "boolean", "default": False},
            }
        ),
    },
}


def _fill_defaults(schema: dict, data: dict) -> None:
    for key, sub in schema.get("properties", {}).items():
        if key not in data and "default" in sub:
            data[key] = copy.deepcopy(sub["default"])
        if sub.get("type") == "object" and isinstance(data.get(key), dict):
            _fill_defaults(sub, data[key])


def load_config_file(path: str | Path) -> dict:
    """Parse a TOML or JSON config file (chosen by extension).

    Raises:
        ConfigError: unreadable file or syntax error.
    """
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        if path.suffix.lower() == ".json":
            return json.loads(raw)
        return tomllib.loads(raw.decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc


def resolve_config(data: dict) -> dict:
    """Validate against :data:`SCHEMA` and return a copy with defaults filled in."""
    data = copy.deepcopy(data)
    try:
        jsonschema.validate(data, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config error at {where}: {exc.message}") from exc
    _fill_defaults(SCHEMA, data)
    return data


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


@dataclass(frozen=True)
class RunConfig:
    raw: dict
    spec: CoefficientProcessSpec

    @property
    def simulation(self) -> dict:
        return self.raw["simulation"]

    @property
    def hypothesis(self) -> dict:
        return self.raw["hypothesis"]

    @property
    def certification(self) -> dict:
        return self.raw["certification"]

    @property
    def seed(self) -> int:
        return int(self.raw["simulation"]["seed"])

    @property
    def epsilons(self) -> list[float]:
        return list(self.raw["epsilon_sweep"]) or [float(self.raw["epsilon"])]


def build_spec(cfg: dict) -> CoefficientProcessSpec:
    """Model objects from a resolved config.

    Raises:
        ConfigError: shapes disagree or the model violates its invariants.
    """
    try:
        f = cfg["flow"]
        A_inf = np.asarray(f["A_inf"], dtype=float)
        M = np.asarray(f.get("M", np.zeros_like(A_inf)), dtype=float)
        flow = H0Flow(A_inf, M, float(f["a"]), float(f["b"]))
        p = cfg["perturbation"]
        pert = PerturbationModel(p["kind"], float(p["sigma"]), float(p["theta"]), float(p["rate"]))
        d = cfg["diffusion"]
        r = flow.dim
        B0 = np.asarray(d["B0"], dtype=float) if "B0" in d else np.zeros((r, r))
        diff = DiffusionModel(d["kind"], B0 if d["kind"] == "constant-psd" else None, float(d["beta"]), float(d["gamma"]))
        return CoefficientProcessSpec(flow, pert, diff, float(cfg["epsilon"]))
    except (RlsdeError, ValueError) as exc:
        raise ConfigError(f"invalid model: {exc}") from exc


def load_run_config(source: str | Path | dict, overrides: dict | None = None) -> RunConfig:
    data = source if isinstance(source, dict) else load_config_file(source)
    data = copy.deepcopy(data)
    for dotted, value in (overrides or {}).items():
        node = data
        *head, leaf = dotted.split(".")
        for key in head:
            node = node.setdefault(key, {})
        node[leaf] = value
    cfg = resolve_config(data)
    return RunConfig(cfg, build_spec(cfg))
