"""INI-style run configuration shared by all CLI subcommands.

Flat key = value pairs inside sections; matrices and lists are JSON inline.
Unknown sections or keys are rejected before any computation.  Precedence:
schema defaults < preset values < config file < command-line flags.  Every
command echoes its fully resolved configuration to ``effective.cfg`` in the
output directory; re-running from that file reproduces identical outputs.
"""

from __future__ import annotations

import configparser
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from drlqr.lqr import CostModel, SystemParams
from drlqr.pendulum import CemOptions
from drlqr.synthesis import DrOptions, RcOptions

__all__ = ["ConfigError", "RunConfig", "load_config", "write_effective"]


class ConfigError(ValueError):
    """Malformed configuration; the message names the failing field."""


# (type, default); "matrix" and "intlist" are JSON, scales expand to
# identity multiples sized by the system.
_SCHEMA: dict[str, dict[str, tuple[str, object]]] = {
    "run": {
        "seed": ("int", 0),
        "out": ("str", "out"),
        "threads": ("int", 0),
    },
    "system": {
        "preset": ("str", ""),
        "a": ("matrix", None),
        "b": ("matrix", None),
    },
    "cost": {
        "q": ("matrix", None),
        "q_scale": ("float", 1.0),
        "r": ("matrix", None),
        "r_scale": ("float", 1.0),
        "sigma_w": ("matrix", None),
        "sigma_w_scale": ("float", 1.0),
    },
    "data": {
        "n_traj": ("int", 100),
        "horizon": ("int", 10),
        "sigma_u": ("matrix", None),
        "sigma_u_scale": ("float", 1.0),
        "dataset": ("str", ""),
    },
    "ellipsoid": {
        "delta": ("float", 0.1),
    },
    "dr": {
        "n_scenarios": ("int", 30),
        "max_iters": ("int", 10000),
        "step_size": ("float", 0.0005),
        "grad_tol": ("float", 1e-7),
    },
    "rc": {
        "n_scenarios": ("int", 30),
        "max_iters": ("int", 600),
        "step_size": ("float", 0.5),
        "restarts": ("int", 2),
    },
    "bench": {
        "n_grid": ("intlist", [10, 22, 46, 100, 215, 464]),
        "seeds": ("int", 100),
        "methods": ("str", "ce,dr,rc"),
    },
    "pendulum": {
        "budgets": ("intlist", [8, 16, 32]),
        "seeds": ("int", 20),
        "episode_len": ("int", 40),
        "traj_horizon": ("int", 10),
        "radius_scale": ("float", 2.0),
        "dt": ("float", 0.05),
        "horizon": ("int", 20),
        "population": ("int", 64),
        "elites": ("int", 8),
        "iterations": ("int", 12),
        "init_std": ("float", 1.0),
        "model_samples": ("int", 15),
        "torque_max": ("float", 3.0),
    },
    "theory": {
        "mc_trajectories": ("int", 20000),
    },
}

# The three-state ridge system used throughout the experiments.
_PRESETS: dict[str, dict[str, dict[str, object]]] = {
    "tridiag3": {
        "system": {
            "a": [[1.01, 0.01, 0.0], [0.01, 1.01, 0.01], [0.0, 0.01, 1.01]],
            "b": [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        },
        "cost": {"q_scale": 0.001},
    },
}


def _parse_value(section: str, key: str, kind: str, raw: str):
    where = f"[{section}] {key}"
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "str":
            return raw.strip()
        if kind == "matrix":
            value = json.loads(raw)
            arr = np.array(value, dtype=float)
            if arr.ndim != 2:
                raise ValueError("expected a 2-D matrix")
            return arr.tolist()
        if kind == "intlist":
            value = json.loads(raw)
            return [int(v) for v in value]
    except (ValueError, json.JSONDecodeError) as err:
        raise ConfigError(f"{where}: cannot parse {raw!r} ({err})") from err
    raise ConfigError(f"{where}: unknown schema kind {kind}")


@dataclass
class RunConfig:
    """Resolved configuration; ``raw`` mirrors the effective INI content."""

    raw: dict[str, dict[str, object]]

    def __getitem__(self, section: str) -> dict[str, object]:
        return self.raw[section]

    # -- resolved objects ---------------------------------------------------

    def system(self) -> SystemParams:
        sec = self.raw["system"]
        if sec["a"] is None or sec["b"] is None:
            raise ConfigError("[system] a and b are required (directly or via preset)")
        return SystemParams(np.array(sec["a"]), np.array(sec["b"]))

    def _cost_matrix(self, key: str, dim: int) -> np.ndarray:
        sec = self.raw["cost"]
        if sec[key] is not None:
            return np.array(sec[key])
        return float(sec[f"{key}_scale"]) * np.eye(dim)

    def cost_model(self) -> CostModel:
        theta = self.system()
        return CostModel(
            q=self._cost_matrix("q", theta.dx),
            r=self._cost_matrix("r", theta.du),
            sigma_w=self._cost_matrix("sigma_w", theta.dx),
        )

    def sigma_u(self) -> np.ndarray:
        theta = self.system()
        sec = self.raw["data"]
        if sec["sigma_u"] is not None:
            return np.array(sec["sigma_u"])
        return float(sec["sigma_u_scale"]) * np.eye(theta.du)

    def dr_options(self) -> DrOptions:
        sec = self.raw["dr"]
        return DrOptions(
            n_scenarios=sec["n_scenarios"],
            max_iters=sec["max_iters"],
            step_size=sec["step_size"],
            grad_tol=sec["grad_tol"],
        )

    def rc_options(self) -> RcOptions:
        sec = self.raw["rc"]
        return RcOptions(
            n_scenarios=sec["n_scenarios"],
            max_iters=sec["max_iters"],
            step_size=sec["step_size"],
            restarts=sec["restarts"],
        )

    def cem_options(self) -> CemOptions:
        sec = self.raw["pendulum"]
        return CemOptions(
            horizon=sec["horizon"],
            population=sec["population"],
            elites=sec["elites"],
            iterations=sec["iterations"],
            init_std=sec["init_std"],
            model_samples=sec["model_samples"],
            torque_max=sec["torque_max"],
        )

    def bench_methods(self) -> tuple[str, ...]:
        raw = str(self.raw["bench"]["methods"])
        methods = tuple(m.strip() for m in raw.split(",") if m.strip())
        if not methods:
            raise ConfigError("[bench] methods must name at least one method")
        return methods


def load_config(path: str | Path | None, overrides: dict[str, dict[str, object]] | None = None) -> RunConfig:
    """Parse and validate a config file, applying flag overrides last."""
    resolved: dict[str, dict[str, object]] = {
        section: {key: default for key, (_, default) in keys.items()}
        for section, keys in _SCHEMA.items()
    }

    file_values: dict[str, dict[str, object]] = {}
    if path is not None:
        parser = configparser.ConfigParser()
        parser.optionxform = str  # keep key case
        read = parser.read(path)
        if not read:
            raise ConfigError(f"config file {path} not found or unreadable")
        for section in parser.sections():
            if section not in _SCHEMA:
                raise ConfigError(f"unknown section [{section}]")
            file_values[section] = {}
            for key, raw in parser.items(section):
                if key not in _SCHEMA[section]:
                    raise ConfigError(f"unknown key {key!r} in section [{section}]")
                kind = _SCHEMA[section][key][0]
                file_values[section][key] = _parse_value(section, key, kind, raw)

    preset_name = str(file_values.get("system", {}).get("preset", "") or "")
    if preset_name:
        if preset_name not in _PRESETS:
            raise ConfigError(
                f"[system] preset: unknown preset {preset_name!r} (known: {sorted(_PRESETS)})"
            )
        for section, values in _PRESETS[preset_name].items():
            for key, value in values.items():
                resolved[section][key] = value

    for section, values in file_values.items():
        resolved[section].update(values)
    if overrides:
        for section, values in overrides.items():
            if section not in _SCHEMA:
                raise ConfigError(f"unknown override section [{section}]")
            for key, value in values.items():
                if key not in _SCHEMA[section]:
                    raise ConfigError(f"unknown override key [{section}] {key}")
                resolved[section][key] = value
    return RunConfig(raw=resolved)


def _format_value(value) -> str:
    if isinstance(value, (list, tuple)):
        return json.dumps(value)
    return str(value)


def write_effective(cfg: RunConfig, path: str | Path) -> None:
    """Echo the resolved configuration as a re-runnable INI file."""
    lines = []
    for section, keys in _SCHEMA.items():
        lines.append(f"[{section}]")
        for key in keys:
            value = cfg.raw[section][key]
            if value is None or (key == "preset" and not value):
                continue
            lines.append(f"{key} = {_format_value(value)}")
        lines.append("")
    Path(path).write_text("\n".join(lines))
