"""Experiment configuration: defaults, strict merging, dotted overrides, hashing."""

from __future__ import annotations

import copy
import hashlib
import json
import math
import subprocess
from pathlib import Path
from typing import Any

from . import __version__
from .bilevel import TrainConfig
from .diagnostics import BoundConstants
from .evaluation import DEFAULT_SEEDS, N_TEST_TASKS, DEFAULT_MN_GRID, DEFAULT_T_GRID
from .online import OnlineConfig
from .regularizers import GRID_STRATEGIES, STRATEGIES, RegularizerSpec
from .tasks import EnvironmentConfig


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


# ``None`` marks an optional field; its accepted types are listed in _OPTIONAL.
DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "output_dir": "runs/slemlab",
    "environment": {
        "amplitude_range": [0.1, 5.0],
        "frequency_range": [0.0, math.pi],
        "x_range": [-5.0, 5.0],
        "m": 5,
        "n": 5,
    },
    "train": {
        "T": 1000,
        "inner_steps": 20,
        "inner_lr": 0.01,
        "outer_lr": 0.001,
        "sizes": [1, 40, 40],
        "input_bias": True,
        "init_scheme": "uniform-fan-in",
        "sigma_log_every": 1,
    },
    "regularizer": "ReLU",
    "eval": {
        "checkpoint": None,
        "head": None,
        "n_test_tasks": N_TEST_TASKS,
        "test_m": None,
        "test_n": None,
        "lr": 0.01,
        "chunk": 100,
    },
    "grid": {
        "strategies": list(GRID_STRATEGIES),
        "T_grid": list(DEFAULT_T_GRID),
        "mn_grid": [list(mn) for mn in DEFAULT_MN_GRID],
        "seeds": list(DEFAULT_SEEDS),
    },
    "diagnostics": {
        "train_dir": None,
        "delta": 0.05,
        "R": 5.0,
        "M": None,
        "y_bound": 5.0,
        "B": None,
        "loss_lipschitz": None,
        "lipschitz_F": 1.0,
        "m_test": None,
        "n_mc": 1000,
    },
    "online": {
        "T": 100,
        "alpha": 1.0,
        "instantiation": "convex-quadratic",
        "h_init": 0.0,
        "ftl_max_epochs": 500,
        "ftl_tol": 1e-8,
        "ftl_window": 10,
        "ftl_lr": 0.001,
    },
    "gradcheck": {"points": 100, "tolerance": 1e-5},
}

_OPTIONAL = {
    "eval.checkpoint": (str,),
    "eval.head": (str,),
    "eval.test_m": (int,),
    "eval.test_n": (int,),
    "diagnostics.train_dir": (str,),
    "diagnostics.M": (int, float),
    "diagnostics.B": (int, float),
    "diagnostics.loss_lipschitz": (int, float),
    "diagnostics.m_test": (int,),
}

# sections whose values change a grid cell's result (the grid lists do not)
_CELL_SECTIONS = ("environment", "train", "eval")


def _check_type(path: str, default: Any, value: Any) -> Any:
    if default is None:
        types = _OPTIONAL.get(path, ())
        if value is None or (isinstance(value, types) and not isinstance(value, bool)):
            return value
        raise ConfigError(f"{path}: expected null or {'/'.join(t.__name__ for t in types)}, "
                          f"got {value!r}")
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
    elif isinstance(default, int):
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif isinstance(default, float):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif isinstance(default, str):
        if isinstance(value, str):
            return value
    elif isinstance(default, list):
        if isinstance(value, list):
            return value
    raise ConfigError(f"{path}: expected {type(default).__name__}, got {value!r}")


def _check_regularizer(value: Any) -> Any:
    if isinstance(value, str):
        if value not in STRATEGIES:
            raise ConfigError(f"regularizer: unknown strategy {value!r}; "
                              f"known: {sorted(STRATEGIES)}")
        return value
    if isinstance(value, dict):
        try:
            RegularizerSpec.from_dict(value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"regularizer: {exc}") from None
        return value
    raise ConfigError(f"regularizer: expected a strategy name or an object, got {value!r}")


def merge(base: dict, update: dict, prefix: str = "") -> dict:
    """Deep-merge ``update`` into a copy of ``base``; unknown keys are errors."""
    out = copy.deepcopy(base)
    for key, value in update.items():
        path = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(f"{path}: unknown key")
        default = base[key]
        if path == "regularizer":
            # replaced wholesale: a strategy name or a full spec object
            out[key] = _check_regularizer(value)
        elif isinstance(default, dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{path}: expected an object, got {value!r}")
            out[key] = merge(default, value, path + ".")
        else:
            out[key] = _check_type(path, DEFAULT_AT.get(path, default), value)
    return out


def _flatten(d: dict, prefix: str = "") -> dict[str, Any]:
    flat = {}
    for k, v in d.items():
        if isinstance(v, dict) and k != "regularizer":
            flat.update(_flatten(v, f"{prefix}{k}."))
        else:
            flat[f"{prefix}{k}"] = v
    return flat


DEFAULT_AT = _flatten(DEFAULTS)


def parse_override(item: str) -> dict:
    """``a.b=v`` to ``{"a": {"b": v}}``; ``v`` is parsed as JSON when possible."""
    if "=" not in item:
        raise ConfigError(f"--set expects key=value, got {item!r}")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    parts = key.strip().split(".")
    if not all(parts):
        raise ConfigError(f"--set: malformed key {key!r}")
    node: dict = {}
    cur = node
    for p in parts[:-1]:
        cur[p] = {}
        cur = cur[p]
    cur[parts[-1]] = value
    return node


def load(path: str | Path | None = None, overrides: list[str] = ()) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        except OSError as exc:
            raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from None
        if not isinstance(user, dict):
            raise ConfigError(f"{path}: top level must be an object")
        cfg = merge(cfg, user)
    for item in overrides:
        cfg = merge(cfg, parse_override(item))
    validate(cfg)
    return cfg


def validate(cfg: dict) -> None:
    """Build every typed config once so bad values fail before any work starts."""
    try:
        train_config(cfg)
        online_config(cfg)
        bound_constants(cfg)
        for s in cfg["grid"]["strategies"]:
            if s not in STRATEGIES:
                raise ValueError(f"grid.strategies: unknown strategy {s!r}")
        for mn in cfg["grid"]["mn_grid"]:
            if len(mn) != 2:
                raise ValueError(f"grid.mn_grid: entries must be [m, n], got {mn!r}")
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    if cfg["eval"]["head"] not in (None, "relu", "tanh"):
        raise ConfigError(f"eval.head: expected relu or tanh, got {cfg['eval']['head']!r}")
    if cfg["eval"]["n_test_tasks"] < 1:
        raise ConfigError("eval.n_test_tasks: must be >= 1")


def canonical(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(cfg: dict, sections: tuple[str, ...] | None = None) -> str:
    """sha256 of the canonical JSON, ignoring ``output_dir``."""
    body = {k: v for k, v in cfg.items() if k != "output_dir"}
    if sections is not None:
        body = {k: body[k] for k in sections}
    return hashlib.sha256(canonical(body).encode()).hexdigest()[:16]


def cell_config_hash(cfg: dict) -> str:
    return config_hash(cfg, _CELL_SECTIONS)


def build_id() -> str:
    """Package version plus ``git describe`` of the source tree when available."""
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True, text=True, timeout=5,
        )
        desc = out.stdout.strip() if out.returncode == 0 else ""
    except (OSError, subprocess.SubprocessError):
        desc = ""
    return f"{__version__}+{desc}" if desc else f"{__version__}+unknown"


def regularizer(cfg: dict) -> RegularizerSpec:
    r = cfg["regularizer"]
    return STRATEGIES[r] if isinstance(r, str) else RegularizerSpec.from_dict(r)


def environment(cfg: dict) -> EnvironmentConfig:
    e = cfg["environment"]
    return EnvironmentConfig(tuple(e["amplitude_range"]), tuple(e["frequency_range"]),
                             tuple(e["x_range"]), e["m"], e["n"], cfg["seed"])


def train_config(cfg: dict, reg: RegularizerSpec | None = None) -> TrainConfig:
    t = cfg["train"]
    if t["init_scheme"] != "uniform-fan-in":
        raise ConfigError(f"train.init_scheme: unknown scheme {t['init_scheme']!r}")
    env = environment(cfg)
    return TrainConfig(
        T=t["T"], m=env.m, n=env.n, inner_steps=t["inner_steps"], inner_lr=t["inner_lr"],
        outer_lr=t["outer_lr"], regularizer=reg or regularizer(cfg), seed=cfg["seed"],
        sizes=tuple(t["sizes"]), input_bias=t["input_bias"], environment=env,
        sigma_log_every=t["sigma_log_every"],
    )


def online_config(cfg: dict) -> OnlineConfig:
    o = cfg["online"]
    t = cfg["train"]
    return OnlineConfig(
        T=o["T"], alpha=o["alpha"], instantiation=o["instantiation"], seed=cfg["seed"],
        h_init=o["h_init"], ftl_max_epochs=o["ftl_max_epochs"], ftl_tol=o["ftl_tol"],
        ftl_window=o["ftl_window"], ftl_lr=o["ftl_lr"], sizes=tuple(t["sizes"]),
        input_bias=t["input_bias"],
    )


def bound_constants(cfg: dict) -> BoundConstants:
    d = cfg["diagnostics"]
    return BoundConstants(
        delta=d["delta"], R=d["R"], M=d["M"], y_bound=d["y_bound"], B=d["B"],
        loss_lipschitz=d["loss_lipschitz"], lipschitz_F=d["lipschitz_F"], m_test=d["m_test"],
    )
