"""Run configuration: one flat namespace over model, training and path settings.

Loaded from an optional JSON file, then patched by ``--dotted.key value``
overrides. Values are parsed as JSON when possible (``--epochs 5``,
``--stage_dims [32,64,128]``) and kept as strings otherwise
(``--lsf.basis_mode abf``). Unknown keys are rejected.
"""

from __future__ import annotations

import copy
import json
from dataclasses import MISSING, asdict, fields
from pathlib import Path

from .data import AugmentPolicy
from .errors import ConfigError
from .gpm import GPMConfig
from .lsf import LSFConfig
from .model import GPSFormerConfig
from .train import TrainConfig

# shared between the model and training configs
_SHARED = ("seed", "num_points")
_TRAIN_ONLY = [f.name for f in fields(TrainConfig) if f.name not in _SHARED + ("p_clamp",)]
_PATHS = {"manifest": None, "out_dir": None, "checkpoint": None, "split": "test"}


def default_run_config():
    d = {}
    for f in fields(GPSFormerConfig):
        if f.name == "gpm":
            d["gpm"] = asdict(GPMConfig())
        elif f.name == "lsf":
            lsf = asdict(LSFConfig())
            lsf["p_clamp"] = list(lsf["p_clamp"])
            d["lsf"] = lsf
        else:
            d[f.name] = _field_default(f)
    train = TrainConfig()
    for name in _TRAIN_ONLY:
        d[name] = asdict(train.augment) if name == "augment" else getattr(train, name)
    d["augment"] = json.loads(json.dumps(d["augment"]))   # tuples -> lists
    d.update(_PATHS)
    return d


def _field_default(f):
    if f.default is not MISSING:
        return copy.deepcopy(f.default)
    if f.default_factory is not MISSING:
        return f.default_factory()
    return None


def _flat_keys(d, prefix=""):
    keys = []
    for k, v in d.items():
        keys.append(prefix + k)
        if isinstance(v, dict):
            keys.extend(_flat_keys(v, prefix + k + "."))
    return keys


def parse_value(text):
    try:
        return json.loads(text)
    except (json.JSONDecodeError, TypeError):
        return text


def _set_dotted(d, key, value):
    parts = key.split(".")
    node = d
    for i, part in enumerate(parts):
        if not isinstance(node, dict) or part not in node:
            raise ConfigError(f"unknown config key {key!r}")
        if i == len(parts) - 1:
            node[part] = value
        else:
            node = node[part]


def _merge(base, patch, prefix=""):
    for k, v in patch.items():
        key = f"{prefix}{k}"
        if k not in base:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(base[k], dict) and isinstance(v, dict):
            _merge(base[k], v, key + ".")
        else:
            base[k] = v


def parse_overrides(tokens):
    """``["--a.b", "1", "--c", "x"]`` -> ``[("a.b", 1), ("c", "x")]``."""
    out = []
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--") or len(tok) == 2:
            raise ConfigError(f"expected --key, got {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, raw = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(tokens):
                raise ConfigError(f"missing value for --{key}")
            raw = tokens[i + 1]
            i += 2
        out.append((key.replace("-", "_") if "." not in key else key, parse_value(raw)))
    return out


class RunConfig:
    """Resolved settings; ``model_config()`` / ``train_config()`` build the typed views."""

    def __init__(self, values=None):
        self.values = default_run_config()
        self.explicit = set()
        if values:
            _merge(self.values, values)
            self.explicit.update(_flat_keys(values))

    @classmethod
    def load(cls, path=None, overrides=()):
        cfg = cls()
        if path:
            try:
                data = json.loads(Path(path).read_text())
            except (OSError, json.JSONDecodeError) as e:
                raise ConfigError(f"cannot read config {path}: {e}") from e
            if not isinstance(data, dict):
                raise ConfigError(f"config {path} must hold a JSON object")
            _merge(cfg.values, data)
            cfg.explicit.update(_flat_keys(data))
        for key, value in overrides:
            _set_dotted(cfg.values, key, value)
            cfg.explicit.add(key)
        return cfg

    def set_default(self, key, value):
        """Set ``key`` unless the user gave it explicitly."""
        if key not in self.explicit:
            _set_dotted(self.values, key, value)

    def __getitem__(self, key):
        return self.values[key]

    def model_config(self):
        d = {f.name: copy.deepcopy(self.values[f.name]) for f in fields(GPSFormerConfig)}
        try:
            return GPSFormerConfig(**d).validate()
        except TypeError as e:
            raise ConfigError(f"bad model config: {e}") from e

    def train_config(self):
        d = {name: copy.deepcopy(self.values[name]) for name in _TRAIN_ONLY}
        d["seed"] = self.values["seed"]
        d["num_points"] = self.values["num_points"]
        d["p_clamp"] = tuple(self.values["lsf"]["p_clamp"])
        try:
            d["augment"] = AugmentPolicy(**d["augment"])
            return TrainConfig(**d).validate()
        except TypeError as e:
            raise ConfigError(f"bad train config: {e}") from e

    def to_dict(self):
        return copy.deepcopy(self.values)

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.values, indent=1, default=_jsonable))
        return path


def _jsonable(o):
    if hasattr(o, "__dataclass_fields__"):
        return asdict(o)
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"cannot serialise {type(o).__name__}")
