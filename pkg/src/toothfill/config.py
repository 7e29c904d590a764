"""INI-style run configuration with typed keys.

Files use ``[section]`` headers and ``key = value`` lines (``#`` comments).
Values from the file are overridden by ``--set section.key=value`` flags,
which are in turn overridden by dedicated command-line flags. Unknown
sections or keys are errors.
"""

from __future__ import annotations

import configparser
from pathlib import Path

from .augment import AugmentConfig
from .denoiser import UNetConfig
from .diffusion import GuidanceConfig
from .errors import ConfigError
from .geometry import SimplexNoiseParams


def _bool(v: str) -> bool:
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _ints(v: str) -> tuple:
    return tuple(int(x) for x in str(v).replace(",", " ").split())


def _paths(v: str) -> list:
    return [x.strip() for x in str(v).split(",") if x.strip()]


SCHEMA = {
    "augment": {
        "max_primitives": (int, 3),
        "size_min": (float, 0.2),
        "size_max": (float, 0.5),
        "noise_amplitude": (float, 0.06),
        "noise_frequency": (float, 2.8),
        "noise_seed": (int, 0),
        "variants_per_tooth": (int, 1),
        "resolution": (int, 32),
        "scale_jitter": (float, 0.25),
    },
    "data": {
        "arches": (_paths, []),
        "antagonists": (_paths, []),
        "phantom_seeds": (_ints, ()),
        "out_dir": (str, "dataset"),
        "master_seed": (int, 0),
    },
    "unet": {
        "base_channels": (int, 16),
        "channel_mult": (_ints, (1, 2, 4)),
        "num_res_blocks": (int, 1),
        "time_embed_dim": (int, 0),
        "projection_width": (int, 0),
        "attention_heads": (int, 1),
        "antagonist_enabled": (_bool, True),
    },
    "train": {
        "manifest": (str, "dataset/manifest.json"),
        "steps": (int, 1000),
        "batch_size": (int, 8),
        "lr": (float, 1e-4),
        "T": (int, 1000),
        "beta_start": (float, 1e-4),
        "beta_end": (float, 0.02),
        "dropout_p": (float, 0.10),
        "w": (float, 2.0),
        "seed": (int, 0),
        "checkpoint": (str, "model.tfck"),
        "log_every": (int, 50),
    },
}


def defaults() -> dict:
    return {sec: {k: d for k, (_, d) in keys.items()} for sec, keys in SCHEMA.items()}


def _coerce(section: str, key: str, value):
    if section not in SCHEMA:
        raise ConfigError(f"unknown config section [{section}]")
    if key not in SCHEMA[section]:
        raise ConfigError(f"unknown key {key!r} in [{section}]")
    conv = SCHEMA[section][key][0]
    try:
        return conv(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {key} = {value!r}: {exc}") from exc


def load_config(path=None, overrides=()) -> dict:
    """Defaults, then the file at ``path``, then ``section.key=value`` overrides.

    Relative paths in ``[data]`` and ``[train]`` resolve against the config
    file's directory.
    """
    cfg = defaults()
    base = Path(".")
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
        parser.optionxform = str
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except configparser.Error as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from exc
        base = Path(path).parent
        for section in parser.sections():
            for key, value in parser.items(section):
                cfg[section][key] = _coerce(section, key, value)
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        name, value = item.split("=", 1)
        section, key = name.strip().split(".", 1)
        cfg[section][key] = _coerce(section, key, value.strip())
    cfg["_base"] = str(base)
    return cfg


def resolve(cfg: dict, p: str) -> Path:
    path = Path(p)
    return path if path.is_absolute() else Path(cfg.get("_base", ".")) / path


def augment_config(cfg: dict) -> AugmentConfig:
    a = cfg["augment"]
    noise = SimplexNoiseParams(a["noise_amplitude"], a["noise_frequency"], a["noise_seed"])
    return AugmentConfig(a["max_primitives"], a["size_min"], a["size_max"], noise,
                         a["variants_per_tooth"], a["resolution"], a["scale_jitter"])


def unet_config(cfg: dict, resolution: int) -> UNetConfig:
    u = cfg["unet"]
    return UNetConfig(resolution=resolution, base_channels=u["base_channels"],
                      channel_mult=u["channel_mult"], num_res_blocks=u["num_res_blocks"],
                      time_embed_dim=u["time_embed_dim"], projection_width=u["projection_width"],
                      attention_heads=u["attention_heads"], antagonist_enabled=u["antagonist_enabled"])


def guidance_config(cfg: dict) -> GuidanceConfig:
    return GuidanceConfig(cfg["train"]["w"], cfg["train"]["dropout_p"])


def echo(cfg: dict) -> dict:
    """JSON-friendly copy for run records."""
    return {sec: {k: list(v) if isinstance(v, tuple) else v for k, v in vals.items()}
            for sec, vals in cfg.items() if isinstance(vals, dict)}
