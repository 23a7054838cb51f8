"""INI config files with sections {data, model, stage, optim, losses, logging},
flag overrides, and config fingerprints for reproducible reports."""

from __future__ import annotations

import configparser
import hashlib
import json
from pathlib import Path

from .errors import ConfigError
from .tokenizer_model import StagePlan
from .training import LossWeights, OptimConfig

SECTIONS = ("data", "model", "stage", "optim", "losses", "logging")


def load_config(path=None) -> dict[str, dict[str, str]]:
    """Read an INI file into {section: {key: raw string}}; None gives empty
    sections so pure-flag invocations work."""
    cfg = {section: {} for section in SECTIONS}
    if path is None:
        return cfg
    parser = configparser.ConfigParser()
    read = parser.read(Path(path))
    if not read:
        raise ConfigError(f"cannot read config file {path}")
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        cfg[section].update(dict(parser.items(section)))
    return cfg


def apply_overrides(cfg: dict, overrides: list[str]) -> dict:
    """`--set section.key=value` style overrides."""
    for item in overrides or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        dotted, value = item.split("=", 1)
        section, key = dotted.split(".", 1)
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        cfg[section][key.strip()] = value.strip()
    return cfg


def _get(cfg, section, key, default=None):
    return cfg.get(section, {}).get(key, default)


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {raw!r}")


def plan_from_config(cfg: dict, **overrides) -> StagePlan:
    model = cfg.get("model", {})
    kwargs = {}
    if "k" in model:
        kwargs["k"] = int(model["k"])
    if "spatial" in model:
        kwargs["spatial"] = int(model["spatial"])
    if "latent_channels" in model:
        kwargs["latent_channels"] = int(model["latent_channels"])
    if "widths" in model:
        kwargs["widths"] = tuple(int(w) for w in model["widths"].split(","))
    if "res_units" in model:
        kwargs["res_units"] = int(model["res_units"])
    if "mixing" in model:
        kwargs["mixing"] = _parse_bool(model["mixing"])
    if "img_channels" in model:
        kwargs["img_channels"] = int(model["img_channels"])
    kwargs.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return StagePlan(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad [model] section: {exc}") from exc


def optim_from_config(cfg: dict, steps: int | None = None,
                      batch_size: int | None = None) -> OptimConfig:
    optim = cfg.get("optim", {})
    stage = cfg.get("stage", {})
    return OptimConfig(
        lr=float(optim.get("lr", 1e-4)),
        beta1=float(optim.get("beta1", 0.9)),
        beta2=float(optim.get("beta2", 0.99)),
        weight_decay=float(optim.get("weight_decay", 1e-4)),
        batch_size=batch_size if batch_size is not None else int(stage.get("batch", 8)),
        steps=steps if steps is not None else int(stage.get("steps", 0)),
        grad_clip=float(optim.get("grad_clip", 1.0)),
    )


def losses_from_config(cfg: dict, kind: str) -> LossWeights:
    weights = LossWeights.for_kind(kind)
    losses = cfg.get("losses", {})
    if "rec" in losses:
        weights.rec = float(losses["rec"])
    if "kl" in losses:
        weights.kl = float(losses["kl"])
    if "gan" in losses:
        weights.gan = float(losses["gan"])
    if "perceptual" in losses:
        weights.perceptual = float(losses["perceptual"])
    return weights


def config_fingerprint(cfg: dict, *extra: bytes) -> str:
    digest = hashlib.sha256()
    digest.update(json.dumps(cfg, sort_keys=True).encode())
    for chunk in extra:
        digest.update(chunk)
    return digest.hexdigest()[:16]
