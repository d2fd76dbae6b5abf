"""Structured text configuration: dotted key = value files, typed
overrides, and a flat echo of the effective settings.

File syntax, one assignment per line::

    # comment
    feature_source = mind
    convex.search_radius = 8
    convex.theta_schedule = 1,3,10

Unknown keys are rejected; later assignments override earlier ones; CLI
flags override file values.
"""

from __future__ import annotations

from dataclasses import replace

from .adam_refine import AdamConfig
from .convex import ConvexConfig
from .errors import ConfigError
from .features import MindConfig, PcaConfig
from .pipeline import RegistrationConfig
from .synth import SynthConfig

__all__ = [
    "parse_config_file",
    "build_registration_config",
    "build_synth_config",
    "config_echo",
]


def _parse_bool(raw) -> bool:
    if isinstance(raw, bool):
        return raw
    token = str(raw).strip().lower()
    if token in ("true", "1", "yes", "on"):
        return True
    if token in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _parse_floats(raw) -> tuple[float, ...]:
    if isinstance(raw, (tuple, list)):
        return tuple(float(v) for v in raw)
    return tuple(float(tok) for tok in str(raw).replace(" ", "").split(",") if tok)


def _parse_ints(raw) -> tuple[int, ...]:
    if isinstance(raw, (tuple, list)):
        return tuple(int(v) for v in raw)
    return tuple(int(tok) for tok in str(raw).replace(" ", "").split(",") if tok)


_REGISTRATION_KEYS = {
    "feature_source": str,
    "preprocessing": str,
    "feature_stride_policy": str,
    "pca.enable": _parse_bool,
    "mind.dilation": int,
    "mind.patch_radius": int,
    "mind.variance_clamp_lo": float,
    "mind.variance_clamp_hi": float,
    "pca.components": int,
    "pca.oversampling": int,
    "pca.power_iterations": int,
    "pca.sample_cap": int,
    "pca.seed": int,
    "convex.grid_stride": int,
    "convex.search_radius": int,
    "convex.search_step": int,
    "convex.theta_schedule": _parse_floats,
    "convex.smooth_radius": int,
    "convex.patch_radius": int,
    "convex.feature_l2_norm": _parse_bool,
    "adam.iterations": int,
    "adam.learning_rate": float,
    "adam.beta1": float,
    "adam.beta2": float,
    "adam.epsilon": float,
    "adam.lambda_reg": float,
    "adam.grid_stride": int,
}

_SYNTH_KEYS = {
    "synth.seed": int,
    "synth.coarse_dims": _parse_ints,
    "synth.smoothing_sigma": float,
    "synth.magnitude_cap": float,
    "synth.texture": str,
    "synth.texture_param": float,
    "synth.blob_count": int,
}


def parse_config_file(path) -> dict[str, str]:
    """Read a key = value file into a string map (no type conversion)."""
    out: dict[str, str] = {}
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
            key, _, value = stripped.partition("=")
            key = key.strip()
            if not key:
                raise ConfigError(f"{path}:{lineno}: empty key in {line!r}")
            out[key] = value.strip()
    return out


def _convert(overrides, key_table, scope: str) -> dict:
    typed = {}
    for key, raw in overrides.items():
        if key not in key_table:
            raise ConfigError(f"unknown {scope} config key {key!r}")
        try:
            typed[key] = key_table[key](raw)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"bad value for {key}: {raw!r} ({e})") from e
    return typed


def _section(typed: dict, prefix: str) -> dict:
    plen = len(prefix) + 1
    return {k[plen:]: v for k, v in typed.items() if k.startswith(prefix + ".")}


def build_registration_config(overrides) -> RegistrationConfig:
    """Construct a validated RegistrationConfig from dotted overrides.

    ``overrides`` maps dotted keys to raw strings (from a config file or
    CLI) or to already-typed values (from a config echo).
    """
    # synth.* keys live in the same files but belong to the synth builder
    typed = _convert(
        {k: v for k, v in overrides.items() if not k.startswith("synth.")},
        _REGISTRATION_KEYS,
        "registration",
    )

    mind_kwargs = _section(typed, "mind")
    clamp_lo = mind_kwargs.pop("variance_clamp_lo", None)
    clamp_hi = mind_kwargs.pop("variance_clamp_hi", None)
    mind = replace(MindConfig(), **mind_kwargs)
    if clamp_lo is not None or clamp_hi is not None:
        lo, hi = mind.variance_clamp
        mind = replace(
            mind,
            variance_clamp=(
                lo if clamp_lo is None else clamp_lo,
                hi if clamp_hi is None else clamp_hi,
            ),
        )

    pca_kwargs = _section(typed, "pca")
    pca_enable = pca_kwargs.pop("enable", None)
    cfg = RegistrationConfig(
        feature_source=typed.get("feature_source", "mind"),
        preprocessing=typed.get("preprocessing", "none"),
        feature_stride_policy=typed.get(
            "feature_stride_policy", "upsample_to_voxel"
        ),
        pca_enable=True if pca_enable is None else pca_enable,
        mind=mind,
        pca=replace(PcaConfig(), **pca_kwargs),
        convex=replace(ConvexConfig(), **_section(typed, "convex")),
        adam=replace(AdamConfig(), **_section(typed, "adam")),
    )
    cfg.validate()
    return cfg


def build_synth_config(overrides) -> SynthConfig:
    typed = _convert(
        {k: v for k, v in overrides.items() if k in _SYNTH_KEYS},
        _SYNTH_KEYS,
        "synth",
    )
    kwargs = _section(typed, "synth")
    if "coarse_dims" in kwargs:
        kwargs["coarse_dims"] = tuple(kwargs["coarse_dims"])
    cfg = replace(SynthConfig(), **kwargs)
    cfg.validate()
    return cfg


def config_echo(cfg: RegistrationConfig) -> dict[str, object]:
    """Flat dotted-key map of the effective configuration.

    Feeding the echo back into build_registration_config reproduces the
    configuration exactly.
    """
    lo, hi = cfg.mind.variance_clamp
    return {
        "feature_source": cfg.feature_source,
        "preprocessing": cfg.preprocessing,
        "feature_stride_policy": cfg.feature_stride_policy,
        "pca.enable": cfg.pca_enable,
        "mind.dilation": cfg.mind.dilation,
        "mind.patch_radius": cfg.mind.patch_radius,
        "mind.variance_clamp_lo": lo,
        "mind.variance_clamp_hi": hi,
        "pca.components": cfg.pca.components,
        "pca.oversampling": cfg.pca.oversampling,
        "pca.power_iterations": cfg.pca.power_iterations,
        "pca.sample_cap": cfg.pca.sample_cap,
        "pca.seed": cfg.pca.seed,
        "convex.grid_stride": cfg.convex.grid_stride,
        "convex.search_radius": cfg.convex.search_radius,
        "convex.search_step": cfg.convex.search_step,
        "convex.theta_schedule": list(cfg.convex.theta_schedule),
        "convex.smooth_radius": cfg.convex.smooth_radius,
        "convex.patch_radius": cfg.convex.patch_radius,
        "convex.feature_l2_norm": cfg.convex.feature_l2_norm,
        "adam.iterations": cfg.adam.iterations,
        "adam.learning_rate": cfg.adam.learning_rate,
        "adam.beta1": cfg.adam.beta1,
        "adam.beta2": cfg.adam.beta2,
        "adam.epsilon": cfg.adam.epsilon,
        "adam.lambda_reg": cfg.adam.lambda_reg,
        "adam.grid_stride": cfg.adam.grid_stride,
    }
