"""Flat `key = value` run configuration with dotted namespaces.

A config is a plain dict over the known keys below. Files and --set
overrides both go through the same typed parser; unknown keys are
rejected by name. The canonical text rendering backs the config hash
that guards resumes.
"""

from __future__ import annotations

import hashlib

from .data import SynthTaskConfig
from .encoder import EncoderConfig
from .pipeline import MODES, TrainConfig


class ConfigError(ValueError):
    pass


DEFAULTS: dict[str, object] = {
    "run.mode": "joint",                 # joint | separate | aux_loss
    "run.seed": 0,
    "run.separate_layers": 32,           # separate mode: sublayer count (4*blocks)
    "data.vocab_size": 13,
    "data.feature_dim": 20,
    "data.frames_per_symbol": (2, 4),
    "data.label_len": (3, 12),
    "data.noise_sigma": 0.3,
    "data.template_seed": 1234,
    "data.train_size": 2000,
    "data.dev_size": 200,
    "data.test_size": 200,
    "encoder.blocks": 8,
    "encoder.dim": 64,
    "encoder.ff_dim": 256,
    "encoder.heads": 4,
    "encoder.conv_kernel": 7,
    "encoder.subsample": 2,
    "pipeline.total_steps": 6000,
    "pipeline.step1_fraction": 0.6,
    "pipeline.iterations": 32,
    "pipeline.subnet_loss_scale": 0.3,
    "pipeline.sparsity_scale": 0.3,
    "pipeline.layer_dropout": 0.3,
    "pipeline.method": "simple_topk",
    "pipeline.temperature": 1.0,
    "pipeline.lr_peak": 4e-4,
    "pipeline.lr_floor": 4e-6,
    "pipeline.lr_final": 1e-7,
    "pipeline.warm_fraction": 0.45,
    "pipeline.decay_fraction": 0.45,
    "pipeline.batch_size": 4,
    "pipeline.subnet_layers": (32, 16, 8),
    "pipeline.aux_loss_scale": 0.3,
    "pipeline.checkpoint_interval": 1000,
}


def _parse_value(key: str, raw: str):
    default = DEFAULTS[key]
    raw = raw.strip()
    try:
        if isinstance(default, tuple):
            return tuple(int(part) for part in raw.split(",") if part.strip())
        if isinstance(default, bool):
            return raw.lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"invalid value for {key}: {raw!r}")
    return raw


def _render_value(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def default_config() -> dict[str, object]:
    return dict(DEFAULTS)


def parse_config_text(text: str, cfg: dict[str, object] | None = None
                      ) -> dict[str, object]:
    cfg = dict(DEFAULTS) if cfg is None else cfg
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', "
                              f"got {line.rstrip()!r}")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key: {key}")
        cfg[key] = _parse_value(key, raw)
    return cfg


def load_config(path=None) -> dict[str, object]:
    cfg = default_config()
    if path is not None:
        with open(path) as fh:
            parse_config_text(fh.read(), cfg)
    return cfg


def apply_overrides(cfg: dict[str, object],
                    pairs: list[str]) -> dict[str, object]:
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override must look like key=value, got {pair!r}")
        key, raw = (part.strip() for part in pair.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key: {key}")
        cfg[key] = _parse_value(key, raw)
    return cfg


def canonical_text(cfg: dict[str, object]) -> str:
    return "".join(f"{key} = {_render_value(cfg[key])}\n"
                   for key in sorted(cfg))


def config_hash(cfg: dict[str, object]) -> str:
    return hashlib.sha256(canonical_text(cfg).encode()).hexdigest()


def validate(cfg: dict[str, object]) -> None:
    unknown = set(cfg) - set(DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown config key: {sorted(unknown)[0]}")
    if cfg["run.mode"] not in MODES:
        raise ConfigError(f"run.mode must be one of {MODES}, "
                          f"got {cfg['run.mode']!r}")
    if cfg["run.mode"] == "separate" and cfg["run.separate_layers"] % 4 != 0:
        raise ConfigError("run.separate_layers must be a multiple of 4 "
                          "(4 sublayers per block)")


def data_config(cfg: dict[str, object]) -> SynthTaskConfig:
    return SynthTaskConfig(
        vocab_size=cfg["data.vocab_size"],
        feature_dim=cfg["data.feature_dim"],
        frames_per_symbol=cfg["data.frames_per_symbol"],
        label_len=cfg["data.label_len"],
        noise_sigma=cfg["data.noise_sigma"],
        template_seed=cfg["data.template_seed"],
        train_size=cfg["data.train_size"],
        dev_size=cfg["data.dev_size"],
        test_size=cfg["data.test_size"])


def encoder_config(cfg: dict[str, object],
                   blocks: int | None = None) -> EncoderConfig:
    return EncoderConfig(
        blocks=cfg["encoder.blocks"] if blocks is None else blocks,
        dim=cfg["encoder.dim"],
        ff_dim=cfg["encoder.ff_dim"],
        heads=cfg["encoder.heads"],
        conv_kernel=cfg["encoder.conv_kernel"],
        subsample=cfg["encoder.subsample"],
        input_dim=cfg["data.feature_dim"],
        vocab_size=cfg["data.vocab_size"])


def train_config(cfg: dict[str, object]) -> TrainConfig:
    return TrainConfig(
        total_steps=cfg["pipeline.total_steps"],
        step1_fraction=cfg["pipeline.step1_fraction"],
        iterations=cfg["pipeline.iterations"],
        subnet_loss_scale=cfg["pipeline.subnet_loss_scale"],
        sparsity_scale=cfg["pipeline.sparsity_scale"],
        layer_dropout=cfg["pipeline.layer_dropout"],
        method=cfg["pipeline.method"],
        temperature=cfg["pipeline.temperature"],
        lr_peak=cfg["pipeline.lr_peak"],
        lr_floor=cfg["pipeline.lr_floor"],
        lr_final=cfg["pipeline.lr_final"],
        warm_fraction=cfg["pipeline.warm_fraction"],
        decay_fraction=cfg["pipeline.decay_fraction"],
        batch_size=cfg["pipeline.batch_size"],
        seed=cfg["run.seed"],
        subnet_layers=cfg["pipeline.subnet_layers"],
        aux_loss_scale=cfg["pipeline.aux_loss_scale"],
        checkpoint_interval=cfg["pipeline.checkpoint_interval"])
