"""Flat `key = value` configuration with typed defaults.

A config file is line-oriented: blank lines and `#` comments are ignored,
everything else must be `dotted.key = value`. Unknown keys are rejected and
values are coerced to the type of the corresponding default. `preset = fast`
applies a reduced-size training setup before the remaining keys override it.
"""

from __future__ import annotations

import hashlib
from pathlib import Path

from .errors import ConfigError
from .model import ModelConfig
from .synthdata import DataConfig

DEFAULTS: dict[str, object] = {
    # synthetic world
    "data.frame_px": 32,
    "data.frames": 12,
    "data.k": 4,
    "data.samples_per_frame": 64,
    "data.fps": 10,
    "data.square_size": 8,
    "data.kappa": 0.75,
    "data.pretrain_size": 2048,
    "data.control_size": 1024,
    # backbone / bypass
    # patch 4 keeps the per-token latent dim (3 * patch^2 = 48) below d_model;
    # wider patches make the video stream rank-deficient and unlearnable
    "model.patch": 4,
    "model.layers": 8,
    "model.d_model": 128,
    "model.heads": 4,
    "model.d_text": 64,
    "model.vocab": 4096,
    "model.max_text_len": 16,
    "model.k_max": 8,
    "model.ffn_mult": 4,
    "model.sigma_dim": 64,
    "model.gamma_v": 1.0,
    "model.gamma_a": 1.0,
    # optimization
    "train.steps": 4000,
    "train.batch": 8,
    "train.grad_accum": 2,
    "train.peak_lr": 1e-3,
    "train.warmup": 100,
    "train.weight_decay": 0.01,
    "train.grad_clip": 1.0,
    "train.p_text": 0.1,
    "train.p_control": 0.1,
    "train.generic_caption_p": 0.15,
    "train.log_every": 25,
    "train.ckpt_every": 0,
    "train.mixed_res": True,
    "control.steps": 1500,
    "control.peak_lr": 1e-3,
    # during control training the caption usually must NOT name color/speaker,
    # or the bypass branches never feel pressure to read the reference streams
    "control.generic_caption_p": 0.6,
    # sampling
    "sample.stage1_steps": 32,
    # re-noising to sigma0 = 0.5 and spending real steps at full resolution
    # costs ~2x per clip but sharpens fine detail (harmonic content, depth
    # edges) far beyond what a 3-step touch-up achieves
    "sample.stage2_steps": 12,
    "sample.sigma0": 0.5,
    "sample.cfg_scale": 4.0,
    "sample.k_default": 2,
    # evaluation
    "eval.scenes": 32,
}

# Reduced setup: same orderings, single-core-friendly wall clock.
FAST_OVERRIDES: dict[str, object] = {
    "data.frame_px": 16,
    "data.frames": 8,
    "data.k": 2,
    # the largest pitch-position coupling that keeps the 4th harmonic of the
    # highest pitch (4 * 78.8 Hz) under Nyquist (320 Hz) at this sample rate
    "data.kappa": 1.8,
    # 32-dim audio latents keep the same 2x headroom below d_model as the
    # default config (64 below 128); fps doubles so the sample rate (and the
    # Nyquist margin for the 4th harmonic) is unchanged
    "data.samples_per_frame": 32,
    "data.fps": 20,
    "data.pretrain_size": 512,
    "data.control_size": 384,
    "model.d_model": 64,
    "model.sigma_dim": 32,
    "train.steps": 2000,
    "train.peak_lr": 2e-3,
    "control.steps": 1200,
    "control.peak_lr": 2e-3,
    "eval.scenes": 16,
    "sample.k_default": 2,
}

PRESETS = {"default": {}, "fast": FAST_OVERRIDES}


def _coerce(key: str, raw: str, default: object):
    if isinstance(default, bool):
        low = raw.strip().lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    try:
        if isinstance(default, int):
            return int(raw, 0)
        if isinstance(default, float):
            return float(raw)
    except ValueError as e:
        raise ConfigError(f"{key}: {e}") from None
    return raw


class Config:
    def __init__(self, values: dict[str, object] | None = None):
        self.values: dict[str, object] = dict(DEFAULTS)
        for k, v in (values or {}).items():
            if k not in DEFAULTS:
                raise ConfigError(f"unknown config key {k!r}")
            self.values[k] = v

    def __getitem__(self, key: str):
        if key not in self.values:
            raise ConfigError(f"unknown config key {key!r}")
        return self.values[key]

    def resolved_text(self) -> str:
        return "".join(f"{k} = {self.values[k]}\n" for k in sorted(self.values))

    def digest(self) -> str:
        return hashlib.sha256(self.resolved_text().encode()).hexdigest()

    def data_config(self) -> DataConfig:
        return DataConfig(
            frame_px=self["data.frame_px"],
            frames=self["data.frames"],
            k=self["data.k"],
            samples_per_frame=self["data.samples_per_frame"],
            fps=self["data.fps"],
            square_size=self["data.square_size"],
            kappa=self["data.kappa"],
        )

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            patch=self["model.patch"],
            layers=self["model.layers"],
            d_model=self["model.d_model"],
            heads=self["model.heads"],
            d_text=self["model.d_text"],
            vocab=self["model.vocab"],
            max_text_len=self["model.max_text_len"],
            frames=self["data.frames"],
            frame_px=self["data.frame_px"],
            audio_dim=self["data.samples_per_frame"],
            k_max=self["model.k_max"],
            ffn_mult=self["model.ffn_mult"],
            sigma_dim=self["model.sigma_dim"],
            gamma_v=self["model.gamma_v"],
            gamma_a=self["model.gamma_a"],
        )


def parse_config_text(text: str) -> Config:
    pairs: list[tuple[str, str]] = []
    preset = "default"
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {stripped!r}")
        key, _, raw = stripped.partition("=")
        key, raw = key.strip(), raw.strip()
        if key == "preset":
            if raw not in PRESETS:
                raise ConfigError(f"line {lineno}: unknown preset {raw!r}")
            preset = raw
            continue
        if key not in DEFAULTS:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        pairs.append((key, raw))
    values = dict(PRESETS[preset])
    for key, raw in pairs:
        values[key] = _coerce(key, raw, DEFAULTS[key])
    return Config(values)


def load_config(path: str | Path | None, preset: str | None = None) -> Config:
    if path is None:
        base = PRESETS.get(preset or "default")
        if base is None:
            raise ConfigError(f"unknown preset {preset!r}")
        return Config(dict(base))
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_config_text(p.read_text())
