"""Plain-text ``key = value`` configuration for training runs.

Dotted keys address the nested dataclasses, e.g. ``vit.embed_dim = 48``
or ``sched.total_steps = 200``; bare keys address top-level fields such
as ``koleo_weight``. Unknown keys and unparsable values raise
:class:`ConfigError` with the offending line number.
"""

import dataclasses

from .schedules import DinoSchedules
from .train import TrainConfig
from .vit3d import Vit3dConfig


class ConfigError(ValueError):
    pass


def parse_config_text(text, source="<config>"):
    """Return an ordered ``{dotted_key: raw_value}`` mapping."""
    mapping = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key or not value:
            raise ConfigError(f"{source}:{lineno}: empty key or value")
        mapping[key] = value
    return mapping


def _coerce(raw, kind, key):
    try:
        if kind is bool:
            lowered = raw.lower()
            if lowered in ("true", "1", "yes"):
                return True
            if lowered in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        return kind(raw)
    except ValueError:
        raise ConfigError(f"config key '{key}': cannot parse {raw!r} as {kind.__name__}")


def apply_overrides(cfg: TrainConfig, mapping) -> TrainConfig:
    """Return a new config with the mapping's dotted keys applied."""
    groups = {"vit": Vit3dConfig, "sched": DinoSchedules}
    top_fields = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    group_fields = {
        name: {f.name: f.type for f in dataclasses.fields(klass)}
        for name, klass in groups.items()
    }
    updates = {"vit": {}, "sched": {}, "top": {}}

    for key, raw in mapping.items():
        if "." in key:
            group, _, field_name = key.partition(".")
            if group not in groups:
                raise ConfigError(f"unknown config group '{group}'")
            fields = group_fields[group]
            if field_name not in fields:
                raise ConfigError(f"unknown config key '{key}'")
            updates[group][field_name] = _coerce(raw, _field_type(fields[field_name]), key)
        else:
            if key not in top_fields or key in groups:
                raise ConfigError(f"unknown config key '{key}'")
            updates["top"][key] = _coerce(raw, _field_type(top_fields[key]), key)

    vit = dataclasses.replace(cfg.vit, **updates["vit"]) if updates["vit"] else cfg.vit
    sched = (
        dataclasses.replace(cfg.sched, **updates["sched"])
        if updates["sched"]
        else cfg.sched
    )
    return dataclasses.replace(cfg, vit=vit, sched=sched, **updates["top"])


def _field_type(annotation):
    if isinstance(annotation, str):
        return {"int": int, "float": float, "bool": bool, "str": str}[annotation]
    return annotation


def load_config(path, base=None) -> TrainConfig:
    cfg = base if base is not None else TrainConfig()
    with open(path, "r", encoding="ascii") as fh:
        mapping = parse_config_text(fh.read(), source=str(path))
    cfg = apply_overrides(cfg, mapping)
    cfg.validate()
    return cfg
