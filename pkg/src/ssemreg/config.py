"""Flat key=value configuration shared by every CLI workflow.

Files hold one `key=value` per line with '#' comments. Precedence is
defaults < file < explicit overrides; unknown keys are rejected so typos
fail loudly instead of silently running with a default.
"""

from __future__ import annotations

from pathlib import Path

from ssemreg.autoencoder import TrainConfig
from ssemreg.registration import RegistrationConfig
from ssemreg.stackalign import StackAlignmentPlan

__all__ = ["ConfigError", "DEFAULTS", "parse_config", "config_lines",
           "train_config", "registration_config", "alignment_plan"]


class ConfigError(ValueError):
    pass


# key -> (default value, help text); value type doubles as the parse type
DEFAULTS: dict = {
    "seed": (0, "RNG seed for training, sampling, and synthetic warps"),
    "arch": ("shallow7x7", "autoencoder preset: shallow7x7 | deep3x3"),
    "patch_size": (64, "square training patch extent"),
    "batch_size": (8, "patches per training step"),
    "train_steps": (2000, "optimizer steps for autoencoder training"),
    "train_lr": (1e-3, "autoencoder learning rate"),
    "weight_decay": (1e-4, "squared-l2 penalty on autoencoder kernels"),
    "adam_beta1": (0.9, "first-moment decay"),
    "adam_beta2": (0.999, "second-moment decay"),
    "adam_eps": (1e-8, "denominator fudge factor"),
    "alpha": (0.1, "weight of the displacement-norm regularizer"),
    "beta": (1.0, "weight of the column-displacement smoothness term"),
    "gamma": (1.0, "weight of the row-displacement smoothness term"),
    "grid_spacing": (32, "pixels between displacement control points (min 4x4 grid)"),
    "iterations": (200, "registration descent iterations"),
    "reg_lr": (0.05, "registration learning rate"),
    "drop_init": (0.5, "initial fraction of highest-error positions ignored"),
    "drop_decay": (0.5, "per-iteration multiplier on the drop rate"),
    "interpolation": ("bilinear", "field upsampling: bilinear | tps"),
    "similarity": ("feature", "registration similarity: feature | pixel"),
    "window": (3, "neighbor references per section in stack alignment"),
    "neighbor_scheme": ("halving", "reference weights: halving | uniform"),
    "sigma": (8.0, "std-dev of synthetic displacement components, px"),
    "tps_points": (16, "control points of a synthetic deformation"),
    "ncc_window": (32, "heatmap window extent"),
    "ncc_stride": (16, "heatmap window stride"),
    "dice_top_k": (50, "largest labels used for the mean Dice score"),
}


def _coerce(key: str, raw, default):
    if isinstance(raw, type(default)):
        return raw
    text = str(raw).strip()
    try:
        if isinstance(default, bool):
            return text.lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        return text
    except ValueError as exc:
        raise ConfigError(f"cannot parse value {raw!r} for key {key!r}: {exc}") from exc


def _apply(cfg: dict, key: str, value) -> None:
    if key not in DEFAULTS:
        raise ConfigError(f"unknown config key {key!r}")
    cfg[key] = _coerce(key, value, DEFAULTS[key][0])


def parse_config(path=None, overrides: dict | None = None) -> dict:
    """Effective configuration: defaults, then file values, then overrides."""
    cfg = {k: v for k, (v, _) in DEFAULTS.items()}
    if path is not None:
        text = Path(path).read_text()
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, _, value = line.partition("=")
            _apply(cfg, key.strip(), value)
    for key, value in (overrides or {}).items():
        _apply(cfg, key, value)
    return cfg


def config_lines(cfg: dict) -> list:
    """Echo of the effective configuration, one `key=value` per line."""
    return [f"{k}={cfg[k]}" for k in DEFAULTS]


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(
        weight_decay=cfg["weight_decay"],
        learning_rate=cfg["train_lr"],
        beta1=cfg["adam_beta1"],
        beta2=cfg["adam_beta2"],
        eps=cfg["adam_eps"],
        batch_size=cfg["batch_size"],
        steps=cfg["train_steps"],
        patch_size=cfg["patch_size"],
        seed=cfg["seed"],
    )


def registration_config(cfg: dict, similarity: str | None = None) -> RegistrationConfig:
    return RegistrationConfig(
        alpha=cfg["alpha"],
        beta=cfg["beta"],
        gamma=cfg["gamma"],
        window=cfg["window"],
        neighbor_scheme=cfg["neighbor_scheme"],
        grid_spacing=cfg["grid_spacing"],
        iterations=cfg["iterations"],
        learning_rate=cfg["reg_lr"],
        beta1=cfg["adam_beta1"],
        beta2=cfg["adam_beta2"],
        eps=cfg["adam_eps"],
        drop_init=cfg["drop_init"],
        drop_decay=cfg["drop_decay"],
        interpolation=cfg["interpolation"],
        similarity=similarity or cfg["similarity"],
    )


def alignment_plan(cfg: dict) -> StackAlignmentPlan:
    return StackAlignmentPlan(config=registration_config(cfg), window=cfg["window"])
