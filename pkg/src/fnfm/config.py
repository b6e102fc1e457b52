"""Run configuration: built-in defaults < profile file < dotted overrides.

A resolved configuration is a plain nested dict with four sections:

* ``train``: a :class:`~fnfm.harness.TrainConfig` (model spec and optimizer nested)
* ``data``: CSV ingestion settings
* ``synthetic``: a :class:`~fnfm.harness.SyntheticSpec`
* ``grid``: a :class:`~fnfm.harness.GridConfig`

Profiles are JSON files with any subset of that structure, or ``key=value``
text files with one dotted key per line. Shipped profiles live in
``fnfm/profiles`` and can be referred to by name.
"""

import copy
import json
from dataclasses import asdict
from importlib import resources
from pathlib import Path

from .errors import ConfigError
from .harness import GridConfig, SyntheticSpec, TrainConfig
from .models import ModelSpec

# Maps whose keys are user-defined rather than fixed by a dataclass.
FREEFORM = {"grid.fixed_dims", "grid.optimizers", "grid.model_overrides", "data.kind_hints", "data.hash_buckets"}

DATA_DEFAULTS = {
    "train": None,              # CSV paths (or encoded caches written by `prep`)
    "validation": None,
    "test": None,
    "label_column": "click",
    "ignore_columns": ["id"],
    "kind_hints": {},
    "hash_buckets": 1000,
    "hash_seed": 0,
    "day_column": "hour",
    "last_day_val_fraction": 0.5,
    "subsample": 1.0,
}


def defaults() -> dict:
    grid = asdict(GridConfig())
    grid["hidden_layouts"] = [list(h) for h in grid["hidden_layouts"]]
    grid["models"] = list(grid["models"])
    grid["embedding_dims"] = list(grid["embedding_dims"])
    return {
        "train": TrainConfig(ModelSpec("FNFM")).to_dict(),
        "data": copy.deepcopy(DATA_DEFAULTS),
        "synthetic": asdict(SyntheticSpec()),
        "grid": grid,
    }


def parse_value(text: str):
    """JSON if it parses (numbers, booleans, lists, null), else the raw string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_assignment(item: str):
    key, sep, value = item.partition("=")
    key = key.strip()
    if not sep or not key:
        raise ConfigError(f"override {item!r} is not of the form dotted.key=value")
    return key, parse_value(value.strip())


def _under_freeform(parts) -> bool:
    return any(".".join(parts[:k]) in FREEFORM for k in range(1, len(parts)))


def _set_dotted(cfg: dict, key: str, value, strict=True):
    parts = key.split(".")
    free = not strict or _under_freeform(parts)
    node = cfg
    for depth, part in enumerate(parts[:-1]):
        path = ".".join(parts[:depth + 1])
        if part not in node:
            if not (free or path in FREEFORM):
                raise ConfigError(f"unknown configuration key {key!r}")
            node[part] = {}
        if not isinstance(node[part], dict):
            raise ConfigError(f"cannot set {key!r}: {path!r} is not a section")
        node = node[part]
    if not free and parts[-1] not in node:
        raise ConfigError(f"unknown configuration key {key!r}")
    node[parts[-1]] = value


def _flatten(d: dict, prefix=""):
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict) and v and key not in FREEFORM:
            yield from _flatten(v, key + ".")
        else:
            yield key, v


def merge(cfg: dict, layer: dict) -> dict:
    """Apply a nested partial config on top of ``cfg`` (returns a new dict)."""
    out = copy.deepcopy(cfg)
    for key, value in _flatten(layer):
        _set_dotted(out, key, value)
    return out


def profile_path(name_or_path) -> Path:
    p = Path(name_or_path)
    if p.exists():
        return p
    shipped = resources.files("fnfm") / "profiles" / f"{name_or_path}.json"
    if shipped.is_file():
        return Path(str(shipped))
    raise ConfigError(f"no profile file or shipped profile named {name_or_path!r}")


def shipped_profiles() -> list:
    return sorted(p.name[:-5] for p in (resources.files("fnfm") / "profiles").iterdir()
                  if p.name.endswith(".json"))


def read_profile(name_or_path) -> dict:
    path = profile_path(name_or_path)
    text = path.read_text()
    if path.suffix == ".json":
        try:
            return json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    layer = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        try:
            key, value = parse_assignment(line)
        except ConfigError as exc:
            raise ConfigError(f"{path}:{lineno}: {exc}") from exc
        _set_dotted(layer, key, value, strict=False)
    return layer


def resolve(profile=None, overrides=()) -> dict:
    """Resolve defaults, then the profile, then ``key=value`` overrides, and validate."""
    cfg = defaults()
    name = "default"
    if profile:
        cfg = merge(cfg, read_profile(profile))
        name = Path(str(profile)).stem
    cfg["train"]["profile"] = name
    for item in overrides:
        key, value = parse_assignment(item)
        _set_dotted(cfg, key, value)
    validate(cfg)
    return cfg


def _build(factory, section, d):
    try:
        return factory(d)
    except ConfigError:
        raise
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"invalid {section} configuration: {exc}") from exc


def train_config(cfg: dict) -> TrainConfig:
    return _build(TrainConfig.from_dict, "train", cfg["train"])


def synthetic_spec(cfg: dict) -> SyntheticSpec:
    return _build(lambda d: SyntheticSpec(**d), "synthetic", cfg["synthetic"])


def grid_config(cfg: dict) -> GridConfig:
    return _build(GridConfig.from_dict, "grid", cfg["grid"])


def validate(cfg: dict):
    train_config(cfg)
    synthetic_spec(cfg)
    grid_config(cfg)
    frac = cfg["data"]["last_day_val_fraction"]
    if not 0.0 <= frac <= 1.0:
        raise ConfigError(f"data.last_day_val_fraction must be in [0, 1], got {frac}")


def write_resolved(cfg: dict, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "resolved_config.json"
    path.write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    return path
