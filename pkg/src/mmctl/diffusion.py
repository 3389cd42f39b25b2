"""Flow matching, classifier-free guidance, Euler sampling, two-stage inference.

Convention: rectified flow. A noisy latent at level sigma in [0, 1] is
x_sigma = (1 - sigma) * x0 + sigma * eps with eps ~ N(0, I); the model
predicts the constant velocity eps - x0 and sampling integrates it with plain
Euler steps along a descending sigma schedule. Stage 1 generates at half
spatial resolution with CFG; stage 2 upsamples the video latents, re-noises
to a truncated schedule, re-encodes the control unit at full resolution, and
refines for a few steps with CFG disabled.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import torch

from .codecs import AudioCodec, VideoCodec
from .errors import ConfigError, InputError, ShapeError
from .mmcu import (
    AcousticControl,
    ControlUnit,
    VisualControl,
    apply_control_dropout,
    build_acoustic_control,
    build_visual_control,
)
from .model import BatchedUnit, JointModel, ModelConfig, stack_units, trainable_params
from .numerics import AdamW, Rng, cosine_lr
from .prompt import StructuredPrompt, encode_text
from .synthdata import DataConfig, TrainingSample


@dataclass
class NoiseSchedule:
    stage1_steps: int = 32
    stage2_steps: int = 3
    sigma0: float = 0.25

    def __post_init__(self):
        if self.stage1_steps < 1 or self.stage2_steps < 1:
            raise ConfigError("NoiseSchedule: step counts must be >= 1")
        if not 0.0 <= self.sigma0 <= 1.0:
            raise ConfigError(f"NoiseSchedule: sigma0={self.sigma0} outside [0, 1]")

    def stage1(self) -> list[float]:
        n = self.stage1_steps
        return [1.0 - i / n for i in range(n + 1)]

    def stage2(self) -> list[float]:
        n = self.stage2_steps
        return [self.sigma0 * (1.0 - i / n) for i in range(n + 1)]


@dataclass
class GuidanceParams:
    cfg_scale: float = 4.0
    gamma_v: float = 1.0
    gamma_a: float = 1.0
    stage2_cfg_scale: float = 1.0

    def __post_init__(self):
        if self.cfg_scale < 0:
            raise ConfigError(f"cfg_scale must be >= 0, got {self.cfg_scale}")
        if not (math.isfinite(self.gamma_v) and math.isfinite(self.gamma_a)):
            raise InputError("gamma values must be finite")


def noise_interpolate(clean: torch.Tensor, eps: torch.Tensor, sigma):
    """Rectified-flow interpolation: returns (noisy, target_velocity)."""
    if clean.shape != eps.shape:
        raise ShapeError(f"noise_interpolate: {tuple(clean.shape)} vs {tuple(eps.shape)}")
    s = torch.as_tensor(sigma, dtype=clean.dtype)
    if bool((s < 0).any()) or bool((s > 1).any()):
        raise InputError(f"noise_interpolate: sigma outside [0, 1]")
    while s.ndim < clean.ndim:
        s = s.unsqueeze(-1)
    return (1.0 - s) * clean + s * eps, eps - clean


def cfg_combine(v_cond: torch.Tensor, v_uncond: torch.Tensor, s: float) -> torch.Tensor:
    if v_cond.shape != v_uncond.shape:
        raise ShapeError("cfg_combine: shape mismatch")
    return v_uncond + s * (v_cond - v_uncond)


@dataclass
class TrainBatch:
    clean_v: torch.Tensor            # [B, t, tokens, video_dim]
    clean_a: torch.Tensor            # [B, t, audio_dim]
    units: list[ControlUnit]
    rng: Rng


def fm_loss(
    model: JointModel,
    batch: TrainBatch,
    grid: int,
    p_text: float = 0.1,
    p_control: float = 0.1,
) -> torch.Tensor:
    """Flow-matching MSE over both modality token sets (weights 1 and 1).

    Per sample: sigma ~ U(0, 1), independent noise per modality; control
    dropout zeroes modality latents+masks, text dropout substitutes the
    learned null-text embedding. Gradients flow into whatever parameters are
    currently trainable; the caller owns backward().
    """
    b = batch.clean_v.shape[0]
    if b == 0:
        raise InputError("fm_loss: empty batch")
    rng = batch.rng
    units = [
        apply_control_dropout(u, rng.split(f"cdrop/{i}"), p_control)
        for i, u in enumerate(batch.units)
    ]
    unit = stack_units(units)

    # per-sample text dropout -> null embedding, batched as a fresh stack
    text_tokens, text_mask = [], []
    null = model.backbone.null_text
    pad = torch.zeros(unit.text_tokens.shape[1] - 1, null.shape[1])
    for i in range(b):
        if rng.split(f"tdrop/{i}").random() < p_text:
            text_tokens.append(torch.cat([null, pad]))
            m = torch.zeros(unit.text_mask.shape[1], dtype=torch.bool)
            m[0] = True
            text_mask.append(m)
        else:
            text_tokens.append(unit.text_tokens[i])
            text_mask.append(unit.text_mask[i])
    unit = replace(
        unit, text_tokens=torch.stack(text_tokens), text_mask=torch.stack(text_mask)
    )

    sigma = rng.split("sigma").uniform((b,))
    eps_v = rng.split("eps_v").normal(batch.clean_v.shape)
    eps_a = rng.split("eps_a").normal(batch.clean_a.shape)
    noisy_v, target_v = noise_interpolate(batch.clean_v, eps_v, sigma)
    noisy_a, target_a = noise_interpolate(batch.clean_a, eps_a, sigma)

    pred_v, pred_a = model.predict_velocity(noisy_v, noisy_a, unit, sigma, grid)
    return ((pred_v - target_v) ** 2).mean() + ((pred_a - target_a) ** 2).mean()


@torch.no_grad()
def euler_sample(
    model: JointModel,
    unit: BatchedUnit,
    schedule: list[float],
    guidance: GuidanceParams,
    grid: int,
    rng: Rng,
    init: tuple[torch.Tensor, torch.Tensor] | None = None,
    cfg_scale: float | None = None,
):
    """Integrate the learned velocity field along a descending sigma schedule.

    At cfg_scale == 1 the unconditional pass is skipped entirely (identical
    result by algebra). Hints are computed once per step from the conditional
    text and reused for the unconditional velocity.
    """
    if len(schedule) < 2:
        raise InputError("euler_sample: schedule needs at least two sigma values")
    if any(b >= a for a, b in zip(schedule, schedule[1:])):
        raise InputError("euler_sample: schedule must be strictly decreasing")
    s = guidance.cfg_scale if cfg_scale is None else cfg_scale
    b = unit.text_tokens.shape[0]
    t = unit.t
    mcfg = model.cfg
    if init is not None:
        x_v, x_a = init[0].clone(), init[1].clone()
    else:
        x_v = rng.split("eps_v").normal((b, t, grid * grid, mcfg.video_dim))
        x_a = rng.split("eps_a").normal((b, t, mcfg.audio_dim))

    for sigma_i, sigma_next in zip(schedule, schedule[1:]):
        sigma = torch.full((b,), sigma_i)
        (vel_v, vel_a), hints = model.predict_velocity(
            x_v, x_a, unit, sigma, grid,
            gamma_v=guidance.gamma_v, gamma_a=guidance.gamma_a,
            return_hints=True,
        )
        if s != 1.0:
            u_v, u_a = model.predict_velocity(
                x_v, x_a, unit, sigma, grid,
                gamma_v=guidance.gamma_v, gamma_a=guidance.gamma_a,
                null_text=True, hints=hints,
            )
            vel_v = cfg_combine(vel_v, u_v, s)
            vel_a = cfg_combine(vel_a, u_a, s)
        dt = sigma_next - sigma_i
        x_v = x_v + dt * vel_v
        x_a = x_a + dt * vel_a
    return x_v, x_a


def upsample_latents(v_lat: torch.Tensor, grid_lo: int, grid_hi: int) -> torch.Tensor:
    """Nearest-neighbor replication of each spatial token to a 2x2 block."""
    if grid_hi != 2 * grid_lo:
        raise ShapeError(f"upsample_latents: expected 2x target grid, got {grid_lo}->{grid_hi}")
    b, t, ntok, dim = v_lat.shape
    if ntok != grid_lo * grid_lo:
        raise ShapeError(f"upsample_latents: {ntok} tokens != {grid_lo}^2")
    x = v_lat.reshape(b, t, grid_lo, grid_lo, dim)
    x = x.repeat_interleave(2, dim=2).repeat_interleave(2, dim=3)
    return x.reshape(b, t, grid_hi * grid_hi, dim)


def downsample_frames(frames: torch.Tensor) -> torch.Tensor:
    """2x2 block-mean over the spatial dims; accepts [..., h, w] or [..., h, w, 3]."""
    has_chan = frames.shape[-1] == 3 and frames.ndim >= 3
    x = frames if has_chan else frames.unsqueeze(-1)
    *lead, h, w, c = x.shape
    x = x.reshape(*lead, h // 2, 2, w // 2, 2, c).mean(dim=(-4, -2))
    return x if has_chan else x.squeeze(-1)


@dataclass
class GenRequest:
    """One generation task; media inputs are at full resolution."""

    prompt: StructuredPrompt
    ref_image: torch.Tensor | None = None    # [px, px, 3]
    ref_audio: torch.Tensor | None = None    # [k * spf]
    structure: torch.Tensor | None = None    # [t, px, px] or [t, px, px, 3]


@dataclass
class Pipeline:
    """Codec bundle + model(s) for two-stage generation."""

    model_lo: JointModel
    codec_hi: VideoCodec
    codec_lo: VideoCodec
    audio_codec: AudioCodec
    model_hi: JointModel | None = None
    k_default: int = 2

    @property
    def hi(self) -> JointModel:
        # missing full-resolution model falls back to the stage-1 weights
        return self.model_hi if self.model_hi is not None else self.model_lo

    def build_unit(self, req: GenRequest, res: str) -> ControlUnit:
        model = self.model_lo if res == "lo" else self.hi
        t = model.cfg.frames
        codec = self.codec_lo if res == "lo" else self.codec_hi
        ref_image, structure = req.ref_image, req.structure
        if res == "lo":
            ref_image = None if ref_image is None else downsample_frames(ref_image)
            structure = None if structure is None else downsample_frames(structure)
        with torch.no_grad():
            text = model.encode_prompt(req.prompt)
        return ControlUnit(
            text=text,
            visual=build_visual_control(ref_image, structure, t, codec),
            acoustic=build_acoustic_control(
                req.ref_audio, t, self.audio_codec, k_default=self.k_default
            ),
            t=t,
        )


@torch.no_grad()
def two_stage_generate_batch(
    pipe: Pipeline,
    requests: list[GenRequest],
    guidance: GuidanceParams,
    schedule: NoiseSchedule,
    rng: Rng,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Run the full two-stage pipeline; returns (frames[B,t,h,w,3], waves[B,n])."""
    if guidance.stage2_cfg_scale != 1.0:
        raise ConfigError("stage 2 runs with CFG disabled; stage2_cfg_scale must be 1.0")
    cfg_lo = pipe.model_lo.cfg

    units_lo = stack_units([pipe.build_unit(r, "lo") for r in requests])
    x_v, x_a = euler_sample(
        pipe.model_lo, units_lo, schedule.stage1(), guidance, cfg_lo.grid_lo,
        rng.split("stage1"),
    )

    model_hi = pipe.hi
    grid_hi = model_hi.cfg.grid_hi
    x_v = upsample_latents(x_v, cfg_lo.grid_lo, grid_hi)
    if schedule.sigma0 > 0.0:
        eps_v = rng.split("renoise_v").normal(x_v.shape)
        eps_a = rng.split("renoise_a").normal(x_a.shape)
        x_v, _ = noise_interpolate(x_v, eps_v, schedule.sigma0)
        x_a, _ = noise_interpolate(x_a, eps_a, schedule.sigma0)
        units_hi = stack_units([pipe.build_unit(r, "hi") for r in requests])
        x_v, x_a = euler_sample(
            model_hi, units_hi, schedule.stage2(), guidance, grid_hi,
            rng.split("stage2"), init=(x_v, x_a), cfg_scale=guidance.stage2_cfg_scale,
        )

    from .codecs import LatentSeq

    frames = torch.stack([pipe.codec_hi.decode(LatentSeq(v)) for v in x_v])
    waves = torch.stack(
        [pipe.audio_codec.decode(LatentSeq(a.unsqueeze(1))) for a in x_a]
    )
    return frames.clamp(0.0, 1.0), waves.clamp(-1.0, 1.0)


def two_stage_generate(
    pipe: Pipeline,
    prompt: StructuredPrompt,
    guidance: GuidanceParams,
    schedule: NoiseSchedule,
    rng: Rng,
    ref_image: torch.Tensor | None = None,
    ref_audio: torch.Tensor | None = None,
    structure: torch.Tensor | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    frames, waves = two_stage_generate_batch(
        pipe,
        [GenRequest(prompt, ref_image=ref_image, ref_audio=ref_audio, structure=structure)],
        guidance,
        schedule,
        rng,
    )
    return frames[0], waves[0]


# -- training -------------------------------------------------------------------


@dataclass
class TrainHyper:
    steps: int = 4000
    batch: int = 8
    grad_accum: int = 2
    peak_lr: float = 1e-3
    warmup: int = 100
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    p_text: float = 0.1
    p_control: float = 0.1
    generic_caption_p: float = 0.15
    log_every: int = 25
    ckpt_every: int = 0   # 0 = final checkpoint only
    mixed_res: bool = True


@dataclass
class CachedSample:
    """Pre-encoded latents and control streams for one training sample."""

    prompt: StructuredPrompt
    prompt_generic: StructuredPrompt
    clean_v: dict = field(default_factory=dict)      # res -> [t, tokens, video_dim]
    clean_a: torch.Tensor | None = None              # [t, audio_dim]
    visual: dict = field(default_factory=dict)       # res -> VisualControl
    acoustic: AcousticControl | None = None
    t: int = 0


def build_cache(
    samples: list[TrainingSample],
    codec_hi: VideoCodec,
    codec_lo: VideoCodec,
    audio_codec: AudioCodec,
) -> list[CachedSample]:
    cache = []
    for s in samples:
        c = CachedSample(prompt=s.prompt, prompt_generic=s.prompt_generic, t=s.t)
        video_lo = downsample_frames(s.video)
        c.clean_v["hi"] = codec_hi.encode(s.video).data
        c.clean_v["lo"] = codec_lo.encode(video_lo).data
        c.clean_a = audio_codec.encode(s.audio).data.squeeze(1)
        structure = s.structure
        c.visual["hi"] = build_visual_control(s.ref_image, structure, s.t, codec_hi)
        c.visual["lo"] = build_visual_control(
            downsample_frames(s.ref_image),
            None if structure is None else downsample_frames(structure),
            s.t,
            codec_lo,
        )
        c.acoustic = build_acoustic_control(s.ref_audio, s.t, audio_codec)
        cache.append(c)
    return cache


def make_batch(
    model: JointModel,
    cache: list[CachedSample],
    indices,
    res: str,
    rng: Rng,
    generic_caption_p: float = 0.0,
) -> TrainBatch:
    units, clean_v, clean_a = [], [], []
    for i, idx in enumerate(indices):
        c = cache[int(idx)]
        prompt = c.prompt
        if generic_caption_p and rng.split(f"generic/{i}").random() < generic_caption_p:
            prompt = c.prompt_generic
        text = encode_text(
            prompt, model.backbone.text_table, model.backbone.seg_table,
            model.cfg.max_text_len,
        )
        units.append(
            ControlUnit(text=text, visual=c.visual[res], acoustic=c.acoustic, t=c.t)
        )
        clean_v.append(c.clean_v[res])
        clean_a.append(c.clean_a)
    return TrainBatch(
        clean_v=torch.stack(clean_v),
        clean_a=torch.stack(clean_a),
        units=units,
        rng=rng.split("loss"),
    )


def train_loop(
    model: JointModel,
    cache: list[CachedSample],
    phase: str,
    hyper: TrainHyper,
    rng: Rng,
    out_dir,
    resume_opt: dict[str, torch.Tensor] | None = None,
    start_step: int = 0,
    quiet: bool = False,
) -> tuple[Path, list[tuple[int, float, float]]]:
    """Standard accumulate/step loop with cosine LR and line-delimited loss log.

    Returns (final checkpoint path, [(step, lr, loss), ...]). Aborts with a
    diagnostic checkpoint if the loss goes non-finite.
    """
    from .checkpoint import save_model

    if not cache:
        raise InputError("train_loop: empty dataset")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    params = trainable_params(model, phase)
    for name, p in params.items():
        p.requires_grad_(True)
    opt = AdamW(params, lr=hyper.peak_lr, weight_decay=hyper.weight_decay)
    if resume_opt:
        opt.load_state_tensors(resume_opt)
    grid_of = {"hi": model.cfg.grid_hi, "lo": model.cfg.grid_lo}

    log_path = out_dir / "loss.log"
    log_lines: list[tuple[int, float, float]] = []
    t_start = time.time()
    with open(log_path, "a") as log:
        for step in range(start_step, hyper.steps):
            lr = cosine_lr(step + 1, hyper.steps, hyper.peak_lr, hyper.warmup)
            opt.zero_grad()
            total = 0.0
            step_rng = rng.split(f"step/{step}")
            p_control = hyper.p_control if phase == "control" else 0.0
            for j in range(hyper.grad_accum):
                micro = step_rng.split(f"micro/{j}")
                idx = micro.integers(0, len(cache), (hyper.batch,))
                res = "lo" if hyper.mixed_res and (step + j) % 2 else "hi"
                batch = make_batch(
                    model, cache, idx, res, micro,
                    generic_caption_p=hyper.generic_caption_p,
                )
                loss = fm_loss(
                    model, batch, grid_of[res],
                    p_text=hyper.p_text, p_control=p_control,
                )
                (loss / hyper.grad_accum).backward()
                total += float(loss.item()) / hyper.grad_accum
            if not math.isfinite(total):
                diag = out_dir / "diagnostic.mmck"
                save_model(diag, model, phase, step, opt=opt)
                raise InputError(f"non-finite loss at step {step}; diagnostic in {diag}")
            if hyper.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(params.values(), hyper.grad_clip)
            opt.step(lr=lr)
            line = f"step={step + 1} lr={lr:.8g} loss={total:.6g}"
            log.write(line + "\n")
            log_lines.append((step + 1, lr, total))
            if not quiet and (step + 1) % hyper.log_every == 0:
                rate = (step + 1 - start_step) / max(time.time() - t_start, 1e-9)
                print(f"{line}  ({rate:.2f} steps/s)")
            if hyper.ckpt_every and (step + 1) % hyper.ckpt_every == 0:
                save_model(out_dir / f"{phase}-{step + 1:06d}.mmck", model, phase,
                           step + 1, opt=opt)

    final = out_dir / f"{phase}-final.mmck"
    save_model(final, model, phase, hyper.steps, opt=opt)
    return final, log_lines
