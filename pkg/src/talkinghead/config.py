"""Flat dotted-key configuration.

Values come from (lowest to highest priority) the compiled-in defaults, an
optional preset, a TOML file with dotted keys, and ``key=value`` overrides.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import tomli

from .losses import DICE_EPS, LossWeights
from .networks import ModelConfig
from .tcsan import TcsanConfig

DEFAULTS: dict = {
    "seed": 0,
    "data.fps": 25.0,
    "train.epochs": 20,
    "train.steps": 0,
    "train.batch_clips": 1,
    "train.lr_main": 2e-4,
    "train.beta1": 0.5,
    "train.beta2": 0.999,
    "train.lr_audio2au_ft": 1e-6,
    "train.lr_auclf_ft": 1e-7,
    "train.ckpt_every": 0,
    "train.log_every": 50,
    "pretrain.steps": 500,
    "pretrain.batch": 32,
    "pretrain.lr": 1e-3,
    "loss.rec": 1.5,
    "loss.id": 1.5,
    "loss.per": 0.07,
    "loss.au": 0.02,
    "loss.dice_eps": DICE_EPS,
    "tcsan.layers": 4,
    "tcsan.kernel": 3,
    "tcsan.heads": 4,
    "tcsan.group": 64,
    "tcsan.out": 512,
    "model.fusion": "tcsan",
    "model.audio2au": True,
    "model.id_dim": 512,
    "model.audio_dim": 512,
    "model.au_dim": 64,
    "model.enc_channels": (64, 128, 256, 512),
    "model.audio_channels": (32, 64, 128, 256, 512),
    "model.a2au_conv": 32,
    "model.a2au_hidden": 256,
    "model.a2au_fc": 128,
    "model.auclf_channels": (32, 64),
    "model.auclf_hidden": (256, 64),
    "model.per_channels": (16, 32, 64, 128),
    "model.per_seed": 1234,
    "model.per_weights": "",
}

# Reduced widths for CPU-only runs; token layout (8 identity + 8 audio + 5 AU
# groups) and every layer count stay the same as the full-size defaults.
PRESETS: dict = {
    "reference": {},
    "desk": {
        "model.id_dim": 128,
        "model.audio_dim": 128,
        "model.au_dim": 16,
        "tcsan.group": 16,
        "tcsan.out": 128,
        "model.enc_channels": (8, 16, 32, 64),
        "model.audio_channels": (8, 16, 32, 64, 128),
        "model.a2au_conv": 8,
        "model.a2au_hidden": 64,
        "model.a2au_fc": 32,
        "model.auclf_channels": (8, 16),
        "model.auclf_hidden": (64, 32),
        "model.per_channels": (8, 16, 32, 64),
    },
}


class ConfigError(ValueError):
    pass


def _coerce(key: str, value):
    default = DEFAULTS[key]
    if isinstance(default, bool):
        if isinstance(value, str):
            low = value.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ConfigError(f"{key}: expected a boolean, got {value!r}")
        return bool(value)
    if isinstance(default, tuple):
        if isinstance(value, str):
            value = [v for v in value.replace("(", "").replace(")", "").split(",") if v.strip()]
        try:
            return tuple(int(v) for v in value)
        except (TypeError, ValueError):
            raise ConfigError(f"{key}: expected a comma-separated integer list, got {value!r}") from None
    try:
        if isinstance(default, int):
            as_float = float(value)
            if as_float != int(as_float):
                raise ValueError
            return int(as_float)
        if isinstance(default, float):
            return float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: expected {type(default).__name__}, got {value!r}") from None
    return str(value)


def _check_key(key: str):
    if key not in DEFAULTS:
        valid = ", ".join(sorted(DEFAULTS))
        raise ConfigError(f"unknown config key {key!r}; valid keys: {valid}")


def _flatten(tree: dict, prefix: str = "") -> dict:
    flat = {}
    for k, v in tree.items():
        name = f"{prefix}{k}"
        if isinstance(v, dict):
            flat.update(_flatten(v, name + "."))
        else:
            flat[name] = v
    return flat


def parse_override(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, value = text.split("=", 1)
    return key.strip(), value.strip()


def resolve(path: str | Path | None = None, overrides=(), preset: str | None = None) -> dict:
    cfg = dict(DEFAULTS)
    if preset:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {', '.join(PRESETS)}")
        cfg.update(PRESETS[preset])
    if path:
        with open(path, "rb") as fh:
            tree = tomli.load(fh)
        for key, value in _flatten(tree).items():
            _check_key(key)
            cfg[key] = _coerce(key, value)
    for item in overrides:
        key, value = parse_override(item) if isinstance(item, str) else item
        _check_key(key)
        cfg[key] = _coerce(key, value)
    return cfg


def from_snapshot(snapshot: dict) -> dict:
    """Rebuild a resolved config from a checkpoint header (lists back to tuples)."""
    cfg = dict(DEFAULTS)
    for key, value in snapshot.items():
        _check_key(key)
        cfg[key] = _coerce(key, value)
    return cfg


def to_jsonable(cfg: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in sorted(cfg.items())}


def dump_toml(cfg: dict) -> str:
    lines = []
    for key, value in sorted(cfg.items()):
        if isinstance(value, bool):
            text = "true" if value else "false"
        elif isinstance(value, tuple):
            text = '"' + ",".join(str(v) for v in value) + '"'
        elif isinstance(value, str):
            text = f'"{value}"'
        else:
            text = repr(value)
        lines.append(f"{key} = {text}")
    return "\n".join(lines) + "\n"


def describe_keys() -> str:
    width = max(len(k) for k in DEFAULTS)
    rows = []
    for key, value in DEFAULTS.items():
        shown = ",".join(map(str, value)) if isinstance(value, tuple) else value
        rows.append(f"  {key:<{width}}  {shown!s}")
    return "config keys (default):\n" + "\n".join(rows)


def model_config(cfg: dict) -> ModelConfig:
    return ModelConfig(
        id_dim=cfg["model.id_dim"],
        audio_dim=cfg["model.audio_dim"],
        au_dim=cfg["model.au_dim"],
        enc_channels=cfg["model.enc_channels"],
        audio_channels=cfg["model.audio_channels"],
        a2au_conv=cfg["model.a2au_conv"],
        a2au_hidden=cfg["model.a2au_hidden"],
        a2au_fc=cfg["model.a2au_fc"],
        auclf_channels=cfg["model.auclf_channels"],
        auclf_hidden=cfg["model.auclf_hidden"],
        per_channels=cfg["model.per_channels"],
        per_seed=cfg["model.per_seed"],
        per_weights=cfg["model.per_weights"],
        fusion=cfg["model.fusion"],
        use_audio2au=cfg["model.audio2au"],
        tcsan=TcsanConfig(
            layers=cfg["tcsan.layers"],
            kernel_size=cfg["tcsan.kernel"],
            heads=cfg["tcsan.heads"],
            token_group_size=cfg["tcsan.group"],
            in_channels=cfg["model.id_dim"]
            + cfg["model.audio_dim"]
            + (5 * cfg["model.au_dim"] if cfg["model.audio2au"] else 0),
            out_channels=cfg["tcsan.out"],
        ),
    )


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    steps: int = 0
    batch_clips: int = 1
    lr_main: float = 2e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    lr_audio2au_ft: float = 1e-6
    lr_auclf_ft: float = 1e-7
    loss_weights: LossWeights = field(default_factory=LossWeights)
    dice_eps: float = DICE_EPS
    seed: int = 0
    ckpt_every: int = 0
    log_every: int = 50
    pretrain_steps: int = 500
    pretrain_batch: int = 32
    pretrain_lr: float = 1e-3

    def __post_init__(self):
        for name in ("lr_main", "lr_audio2au_ft", "lr_auclf_ft", "pretrain_lr"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("adam_beta1", "adam_beta2"):
            if not 0 < getattr(self, name) < 1:
                raise ValueError(f"{name} must lie in (0, 1)")
        if self.batch_clips < 1:
            raise ValueError("batch_clips must be >= 1")

    def total_steps(self, n_clips: int) -> int:
        if self.steps > 0:
            return self.steps
        per_epoch = -(-n_clips // self.batch_clips)
        return self.epochs * per_epoch


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(
        epochs=cfg["train.epochs"],
        steps=cfg["train.steps"],
        batch_clips=cfg["train.batch_clips"],
        lr_main=cfg["train.lr_main"],
        adam_beta1=cfg["train.beta1"],
        adam_beta2=cfg["train.beta2"],
        lr_audio2au_ft=cfg["train.lr_audio2au_ft"],
        lr_auclf_ft=cfg["train.lr_auclf_ft"],
        loss_weights=LossWeights(cfg["loss.rec"], cfg["loss.id"], cfg["loss.per"], cfg["loss.au"]),
        dice_eps=cfg["loss.dice_eps"],
        seed=cfg["seed"],
        ckpt_every=cfg["train.ckpt_every"],
        log_every=cfg["train.log_every"],
        pretrain_steps=cfg["pretrain.steps"],
        pretrain_batch=cfg["pretrain.batch"],
        pretrain_lr=cfg["pretrain.lr"],
    )


def flatten(tc: TrainConfig, mc: ModelConfig) -> dict:
    """Dotted-key view of typed configs; the inverse of train_config/model_config."""
    lam = tc.loss_weights
    t = mc.tcsan
    return {
        "seed": tc.seed,
        "train.epochs": tc.epochs,
        "train.steps": tc.steps,
        "train.batch_clips": tc.batch_clips,
        "train.lr_main": tc.lr_main,
        "train.beta1": tc.adam_beta1,
        "train.beta2": tc.adam_beta2,
        "train.lr_audio2au_ft": tc.lr_audio2au_ft,
        "train.lr_auclf_ft": tc.lr_auclf_ft,
        "train.ckpt_every": tc.ckpt_every,
        "train.log_every": tc.log_every,
        "pretrain.steps": tc.pretrain_steps,
        "pretrain.batch": tc.pretrain_batch,
        "pretrain.lr": tc.pretrain_lr,
        "loss.rec": lam.rec,
        "loss.id": lam.id,
        "loss.per": lam.per,
        "loss.au": lam.au,
        "loss.dice_eps": tc.dice_eps,
        "tcsan.layers": t.layers,
        "tcsan.kernel": t.kernel_size,
        "tcsan.heads": t.heads,
        "tcsan.group": t.token_group_size,
        "tcsan.out": t.out_channels,
        "model.fusion": mc.fusion,
        "model.audio2au": mc.use_audio2au,
        "model.id_dim": mc.id_dim,
        "model.audio_dim": mc.audio_dim,
        "model.au_dim": mc.au_dim,
        "model.enc_channels": tuple(mc.enc_channels),
        "model.audio_channels": tuple(mc.audio_channels),
        "model.a2au_conv": mc.a2au_conv,
        "model.a2au_hidden": mc.a2au_hidden,
        "model.a2au_fc": mc.a2au_fc,
        "model.auclf_channels": tuple(mc.auclf_channels),
        "model.auclf_hidden": tuple(mc.auclf_hidden),
        "model.per_channels": tuple(mc.per_channels),
        "model.per_seed": mc.per_seed,
        "model.per_weights": str(mc.per_weights),
    }
