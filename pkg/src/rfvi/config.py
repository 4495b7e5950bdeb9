"""Run configuration: nested JSON with documented defaults, strict keys and dotted overrides."""
from __future__ import annotations

import copy
import json
import math
import os
from dataclasses import fields
from importlib import resources
from pathlib import Path

from . import adversary as adv
from .dynamics import make_system
from .reward import make_reward
from .solver import SolverConfig
from .value_net import FitConfig

OUTPUT_ROOT_ENV = "RFVI_OUTPUT_ROOT"


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key."""


# ``None`` means "derived from the system" (or from its defaults table).
DEFAULTS: dict = {
    "system": {"name": "pendulum", "params": {}, "u_max": None, "state_domain": None},
    "reward": {"Q_diag": None, "beta": None, "transform": "half_angle"},
    "adversary": {
        "enabled": True,
        "global_scale": 1.0,
        "alpha_x": None,
        "alpha_u": None,
        "alpha_o": None,
        "model_bound": adv.DEFAULT_MODEL_BOUND,
        "sigma_w": adv.DEFAULT_SIGMA_W,
    },
    "solver": {
        "mode": "dp",
        "rho": 0.5,
        "beta_target": math.log(1e4) / 0.5,
        "dt_ctrl": 0.01,
        "iterations": 50,
        "dataset_size": 10_000,
        "fifo_rollouts": 32,
        "buffer_capacity": 100_000,
        "explore_horizon": 5.0,
        "explore_sigma": 0.5,
        "start_sigma": 0.1,
        "hidden_widths": [64, 64],
        "ensemble_size": 4,
        "chunk_size": 1024,
        "jacobians": "auto",
        "network_dtype": "float32",
        "eval_every": 5,
        "eval_rollouts": 8,
        "checkpoint_every": 10,
        "abort_fraction": 0.5,
    },
    "fit": {"epochs": 20, "batch_size": 256, "lr": 1e-3, "p": 1, "huber_delta": 1e-2, "dtype": "float32"},
    "eval": {
        "rollouts": 32,
        "duration": 10.0,
        "multipliers": [0.7, 0.85, 1.0, 1.15, 1.3],
        "parameter": None,
        "angle_tol_deg": 5.0,
        "velocity_tol": 0.5,
    },
    "seed": 0,
    "threads": 1,
}

# keys whose value is itself free-form (not checked against DEFAULTS)
_OPEN = {("system", "params")}


def _check(user, ref, path=()):
    if not isinstance(user, dict):
        raise ConfigError(f"config key '{'.'.join(path) or '<root>'}' must be an object")
    for key, val in user.items():
        here = path + (key,)
        dotted = ".".join(here)
        if key not in ref:
            raise ConfigError(f"unknown config key '{dotted}'")
        default = ref[key]
        if here in _OPEN:
            if not isinstance(val, dict):
                raise ConfigError(f"config key '{dotted}' must be an object")
            continue
        if isinstance(default, dict):
            _check(val, default, here)
        elif default is not None and val is not None:
            if isinstance(default, bool):
                ok = isinstance(val, bool)
            elif isinstance(default, (int, float)):
                ok = isinstance(val, (int, float)) and not isinstance(val, bool)
                if ok and isinstance(default, int) and not isinstance(default, bool) and isinstance(val, float):
                    ok = val.is_integer()
            elif isinstance(default, list):
                ok = isinstance(val, list)
            else:
                ok = isinstance(val, type(default))
            if not ok:
                raise ConfigError(f"config key '{dotted}' has the wrong type ({type(val).__name__})")


def _merge(base, user):
    out = copy.deepcopy(base)
    for key, val in user.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


def resolve(user: dict | None = None) -> dict:
    """Validate ``user`` against the defaults and fill in everything missing."""
    user = user or {}
    _check(user, DEFAULTS)
    cfg = _merge(DEFAULTS, user)
    build(cfg)  # semantic validation
    return cfg


def load_config(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        user = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return resolve(user)


def recipe_path(name: str) -> Path:
    """Path of a bundled recipe, e.g. ``pendulum_desk``."""
    return Path(str(resources.files("rfvi") / "recipes" / f"{name}.json"))


def parse_override(text: str) -> tuple[list[str], object]:
    if "=" not in text:
        raise ConfigError(f"override '{text}' must look like dotted.key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip().split("."), value


def apply_overrides(cfg: dict, overrides) -> dict:
    user: dict = {}
    for text in overrides or ():
        keys, value = parse_override(text)
        node = user
        for k in keys[:-1]:
            node = node.setdefault(k, {})
        node[keys[-1]] = value
    _check(user, DEFAULTS)
    return resolve(_merge(cfg, user))


def dump_config(cfg: dict, path) -> None:
    Path(path).write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


# --------------------------------------------------------------------------
# construction


def build(cfg: dict):
    """Instantiate ``(system, reward_spec, sets_or_None, solver_config)`` from a resolved config."""
    s = cfg["system"]
    try:
        system = make_system(s["name"], params=s["params"] or None, state_domain=s["state_domain"], u_max=s["u_max"])
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"config key 'system': {exc}") from None
    r = cfg["reward"]
    try:
        reward_spec = make_reward(system, r["Q_diag"], r["beta"], r["transform"])
    except ValueError as exc:
        raise ConfigError(f"config key 'reward': {exc}") from None
    a = cfg["adversary"]
    sets = None
    if a["enabled"]:
        try:
            sets = adv.default_sets(
                system, a["global_scale"], a["model_bound"], a["alpha_x"], a["alpha_u"], a["alpha_o"]
            )
        except ValueError as exc:
            raise ConfigError(f"config key 'adversary': {exc}") from None
    fit_cfg = FitConfig(**cfg["fit"], seed=0)
    names = {f.name for f in fields(SolverConfig)}
    sol = {k: v for k, v in cfg["solver"].items() if k in names}
    try:
        solver_cfg = SolverConfig(
            **sol, sigma_w=a["sigma_w"], fit=fit_cfg, seed=int(cfg["seed"]), threads=int(cfg["threads"])
        )
    except ValueError as exc:
        raise ConfigError(f"config key 'solver': {exc}") from None
    return system, reward_spec, sets, solver_cfg
