"""Layered run configuration: file defaults, then environment, then command-line flags."""
import copy
import hashlib
import json
import os
import platform
import sys
from dataclasses import dataclass, field
from pathlib import Path

import yaml

ENV_PREFIX = "DISTFORGE_"


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "seed": 0,
    "threads": 1,
    "output_dir": "out",
    "taus": None,
    "train": {"batch_size": 8192, "lr": 3e-4, "dropout": 0.2, "patience": 2,
              "val_fraction": 0.2, "ensemble_size": 20, "epoch_constant": 3_000_000,
              "fine_tune": True, "max_epochs": None, "first_test_year": None,
              "sample_step": 5, "model": "two-stage", "width": 128},
    "features": {},
    "density": {"d_min": 1e-5, "gp": 100, "eps": 1e-4},
    "garch": {"window": 756, "paths": 10_000, "dist": "t", "rf": 0.0, "horizon": 22},
    "simulate": {"n_stocks": 100, "n_years": 20, "true_paths": 10_000},
    "evaluate": {"lags": 12, "crps": False},
    "backtest": {"n_groups": 10, "weighting": "equal", "signal": "median"},
    "study": {"reps": 3, "train_years": 10, "burn_in_days": 264, "sample_step": 5,
              "true_paths": 10_000, "garch_paths": 10_000, "batch_size": 1024,
              "ensemble_size": 5},
}


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _set_path(cfg, dotted, value):
    keys = dotted.split(".")
    node = cfg
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(f"{dotted}: {k} is not a section")
    node[keys[-1]] = value


def _parse_value(text):
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse value {text!r}") from exc


def load_file(path):
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        data = yaml.safe_load(p.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"config file {path} is not valid YAML/JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    return data


def env_overrides(environ=None):
    """``DISTFORGE_SEED``, ``DISTFORGE_THREADS`` and ``DISTFORGE__block__key`` entries."""
    environ = os.environ if environ is None else environ
    out = {}
    for name, raw in environ.items():
        if not name.startswith(ENV_PREFIX) or name == "DISTFORGE_DISABLE_NUMBA":
            continue
        key = name[len(ENV_PREFIX):]
        if key.startswith("_"):
            _set_path(out, key.strip("_").lower().replace("__", "."), _parse_value(raw))
        elif key.lower() in ("seed", "threads", "output_dir"):
            out[key.lower()] = _parse_value(raw)
    return out


@dataclass
class RunConfig:
    data: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))

    def __getitem__(self, key):
        return self.data[key]

    def get(self, key, default=None):
        return self.data.get(key, default)

    @property
    def seed(self):
        return int(self.data["seed"])

    def block(self, name):
        return dict(self.data.get(name) or {})

    def digest(self):
        blob = json.dumps(self.data, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()


def validate(cfg: dict):
    unknown = set(cfg) - set(DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown config sections {sorted(unknown)}")
    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise ConfigError("seed must be a non-negative integer")
    if not isinstance(cfg["threads"], int) or cfg["threads"] < 1:
        raise ConfigError("threads must be a positive integer")
    for name, block in cfg.items():
        if isinstance(DEFAULTS[name], dict) and not isinstance(block, dict):
            raise ConfigError(f"section {name} must be a mapping")
    if cfg["taus"] is not None:
        from .taus import tau_grid
        try:
            tau_grid(cfg["taus"])
        except ValueError as exc:
            raise ConfigError(f"invalid tau grid: {exc}") from exc


def load_config(path=None, overrides=(), environ=None) -> RunConfig:
    """Merge defaults, an optional file, environment variables and ``key=value`` flags."""
    cfg = copy.deepcopy(DEFAULTS)
    if path:
        cfg = _merge(cfg, load_file(path))
    cfg = _merge(cfg, env_overrides(environ))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        _set_path(cfg, k.strip(), _parse_value(v))
    validate(cfg)
    return RunConfig(cfg)


def versions():
    import numba
    import numpy
    import pandas
    import scipy

    from . import __version__
    from ._accel import backend
    return {"python": platform.python_version(), "numpy": numpy.__version__,
            "scipy": scipy.__version__, "pandas": pandas.__version__,
            "numba": numba.__version__, "distforge": __version__, "backend": backend()}


def write_manifest(out_dir, cfg: RunConfig, command, extra=None):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    man = {"command": command, "argv": sys.argv[1:], "seed": cfg.seed,
           "config_hash": cfg.digest(), "config": cfg.data, "versions": versions()}
    if extra:
        man.update(extra)
    (out / "manifest.json").write_text(json.dumps(man, indent=2, sort_keys=True, default=str))
    return man
