"""Command-line interface.

Commands: synth | pretrain | train-control | generate | eval | eval-gamma |
inspect-checkpoint. Global flags: --config, --seed, --out, --force. The
MMCTL_THREADS environment variable caps torch's intra-op thread pool.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import evalrun, metrics
from .checkpoint import file_sha256, inspect_lines, load_model, save_model
from .codecs import AudioCodec, VideoCodec
from .config import Config, load_config
from .diffusion import (
    GuidanceParams,
    NoiseSchedule,
    Pipeline,
    TrainHyper,
    build_cache,
    two_stage_generate,
    train_loop,
)
from .errors import ConfigError, MmctlError, StateError
from .mediaio import read_frames, read_ppm, read_wav, write_frames, write_wav
from .model import attach_bypass, freeze_backbone, init_backbone, set_phase
from .numerics import Rng
from .prompt import parse_prompt
from .plots import save_gamma_grid, save_loss_curve, save_metric_bars
from .synthdata import TASKS, gen_dataset, load_dataset, write_dataset


def _prepare_out(out: Path, force: bool) -> Path:
    if out.exists() and any(out.iterdir()) and not force:
        raise ConfigError(f"output directory {out} is not empty (use --force)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _codecs(cfg: Config):
    px = cfg["data.frame_px"]
    patch = cfg["model.patch"]
    dcfg = cfg.data_config()
    return (
        VideoCodec(px, px, patch=patch),
        VideoCodec(px // 2, px // 2, patch=patch),
        AudioCodec(dcfg.samples_per_frame, dcfg.sample_rate),
    )


def _pipeline(cfg: Config, ckpt: Path) -> tuple[Pipeline, dict]:
    model, meta, _ = load_model(ckpt)
    model.eval()
    codec_hi, codec_lo, audio_codec = _codecs(cfg)
    pipe = Pipeline(
        model_lo=model,
        codec_hi=codec_hi,
        codec_lo=codec_lo,
        audio_codec=audio_codec,
        k_default=cfg["sample.k_default"],
    )
    return pipe, meta


def _guidance(cfg: Config, args) -> GuidanceParams:
    return GuidanceParams(
        cfg_scale=args.cfg_scale if args.cfg_scale is not None else cfg["sample.cfg_scale"],
        gamma_v=args.gamma_v if args.gamma_v is not None else cfg["model.gamma_v"],
        gamma_a=args.gamma_a if args.gamma_a is not None else cfg["model.gamma_a"],
    )


def _schedule(cfg: Config, args) -> NoiseSchedule:
    return NoiseSchedule(
        stage1_steps=args.steps if getattr(args, "steps", None) else cfg["sample.stage1_steps"],
        stage2_steps=cfg["sample.stage2_steps"],
        sigma0=cfg["sample.sigma0"],
    )


def _hyper(cfg: Config, phase: str) -> TrainHyper:
    pfx = "train" if phase == "pretrain" else "control"
    return TrainHyper(
        steps=cfg[f"{pfx}.steps"],
        batch=cfg["train.batch"],
        grad_accum=cfg["train.grad_accum"],
        peak_lr=cfg[f"{pfx}.peak_lr"],
        warmup=cfg["train.warmup"],
        weight_decay=cfg["train.weight_decay"],
        grad_clip=cfg["train.grad_clip"],
        p_text=cfg["train.p_text"],
        p_control=cfg["train.p_control"],
        generic_caption_p=cfg[f"{pfx}.generic_caption_p"],
        log_every=cfg["train.log_every"],
        ckpt_every=cfg["train.ckpt_every"],
        mixed_res=cfg["train.mixed_res"],
    )


def _load_or_gen_dataset(cfg: Config, args, size_key: str):
    dcfg = cfg.data_config()
    if getattr(args, "data", None):
        return load_dataset(args.data, dcfg), dcfg
    return gen_dataset(args.seed, cfg[size_key], dcfg), dcfg


def _write_config(cfg: Config, out: Path):
    (out / "config.resolved").write_text(cfg.resolved_text())


# -- commands -------------------------------------------------------------------


def cmd_synth(cfg: Config, args) -> int:
    out = _prepare_out(args.out, args.force)
    dcfg = cfg.data_config()
    samples = gen_dataset(args.seed, args.count, dcfg)
    write_dataset(out, samples, dcfg)
    _write_config(cfg, out)
    print(f"wrote {len(samples)} samples to {out}")
    return 0


def cmd_pretrain(cfg: Config, args) -> int:
    out = _prepare_out(args.out, args.force)
    samples, dcfg = _load_or_gen_dataset(cfg, args, "data.pretrain_size")
    codec_hi, codec_lo, audio_codec = _codecs(cfg)
    cache = build_cache(samples, codec_hi, codec_lo, audio_codec)
    model = init_backbone(cfg.model_config(), Rng(args.seed).split("init"))
    set_phase(model, "pretrain")
    hyper = _hyper(cfg, "pretrain")
    _write_config(cfg, out)
    final, lines = train_loop(
        model, cache, "pretrain", hyper, Rng(args.seed).split("pretrain"), out
    )
    save_loss_curve(lines, out / "loss_curve.png", title="backbone pretraining loss")
    print(f"checkpoint: {final}")
    return 0


def cmd_train_control(cfg: Config, args) -> int:
    out = _prepare_out(args.out, args.force)
    base_model, base_meta, _ = load_model(args.init)
    if base_meta.get("bypass_attached"):
        raise StateError(f"{args.init}: already has control branches attached")
    start_step = 0
    resume_opt = None
    if args.resume:
        model, meta, tensors = load_model(args.resume)
        if meta["backbone_checksum"] != base_meta["backbone_checksum"]:
            raise StateError(
                "resume checkpoint was trained on a different frozen backbone"
            )
        start_step = int(meta["step"])
        resume_opt = {k: v for k, v in tensors.items() if k.startswith("opt.")}
    else:
        model = base_model
        freeze_backbone(model)
        attach_bypass(model, Rng(args.seed).split("attach"))
    set_phase(model, "control")

    samples, dcfg = _load_or_gen_dataset(cfg, args, "data.control_size")
    codec_hi, codec_lo, audio_codec = _codecs(cfg)
    cache = build_cache(samples, codec_hi, codec_lo, audio_codec)
    hyper = _hyper(cfg, "control")
    _write_config(cfg, out)
    final, lines = train_loop(
        model, cache, "control", hyper, Rng(args.seed).split("control"), out,
        resume_opt=resume_opt, start_step=start_step,
    )
    save_loss_curve(lines, out / "loss_curve.png", title="control branch training loss")
    print(f"checkpoint: {final}")
    return 0


def cmd_generate(cfg: Config, args) -> int:
    out = _prepare_out(args.out, args.force)
    pipe, meta = _pipeline(cfg, args.ckpt)
    prompt = parse_prompt(args.prompt)
    ref_image = ref_audio = structure = None
    if args.ref_image:
        ref_image = torch.from_numpy(read_ppm(args.ref_image))
    if args.ref_audio:
        wave, _ = read_wav(args.ref_audio)
        ref_audio = torch.from_numpy(wave)
    if args.structure:
        frames = read_frames(args.structure)
        structure = torch.from_numpy(frames.mean(axis=-1))
    guidance = _guidance(cfg, args)
    schedule = _schedule(cfg, args)
    frames, wave = two_stage_generate(
        pipe, prompt, guidance, schedule, Rng(args.seed).split("generate"),
        ref_image=ref_image, ref_audio=ref_audio, structure=structure,
    )
    write_frames(out / "frames", frames.numpy())
    sr = cfg.data_config().sample_rate
    write_wav(out / "audio.wav", wave.numpy(), sr)
    sidecar = {
        "seed": args.seed,
        "prompt": args.prompt,
        "gamma_v": guidance.gamma_v,
        "gamma_a": guidance.gamma_a,
        "cfg_scale": guidance.cfg_scale,
        "schedule": {
            "stage1_steps": schedule.stage1_steps,
            "stage2_steps": schedule.stage2_steps,
            "sigma0": schedule.sigma0,
        },
        "checkpoint": str(args.ckpt),
        "checkpoint_sha256": file_sha256(args.ckpt),
        "config_sha256": cfg.digest(),
        "sample_rate": sr,
    }
    (out / "generation.json").write_text(json.dumps(sidecar, indent=2) + "\n")
    print(f"wrote {frames.shape[0]} frames and audio to {out}")
    return 0


def _eval_common(cfg: Config, args):
    pipe, _ = _pipeline(cfg, args.ckpt)
    dcfg = cfg.data_config()
    samples = evalrun.make_eval_set(args.seed, cfg["eval.scenes"], dcfg, args.task)
    schedule = _schedule(cfg, args)
    return pipe, dcfg, samples, schedule


def cmd_eval(cfg: Config, args) -> int:
    out = _prepare_out(args.out, args.force)
    pipe, dcfg, samples, schedule = _eval_common(cfg, args)
    guidance = _guidance(cfg, args)
    result = evalrun.run_eval(
        pipe, samples, dcfg, guidance, schedule, Rng(args.seed).split("eval")
    )
    shuffled = evalrun.shuffled_sync_baseline(
        result, dcfg, Rng(args.seed).split("shuffle")
    )
    lines = result.report.lines() + [
        f"sync_corr_shuffled_analogue={shuffled:.6f}",
        f"task={args.task}",
        f"gamma_v={guidance.gamma_v:g}",
        f"gamma_a={guidance.gamma_a:g}",
    ]
    (out / "report.txt").write_text("\n".join(lines) + "\n")
    bars = {
        k: v for k, v in result.report.as_dict().items()
        if isinstance(v, float) and np.isfinite(v)
    }
    bars["sync_corr_shuffled_analogue"] = shuffled
    save_metric_bars(bars, out / "metrics.png", title=f"evaluation: {args.task}")
    if args.json:
        payload = result.report.as_dict()
        payload["sync_corr_shuffled_analogue"] = shuffled
        payload["task"] = args.task
        (out / "report.json").write_text(json.dumps(payload, indent=2) + "\n")
    print("\n".join(lines))
    return 0


def cmd_eval_gamma(cfg: Config, args) -> int:
    out = _prepare_out(args.out, args.force)
    pipe, dcfg, samples, schedule = _eval_common(cfg, args)
    guidance = _guidance(cfg, args)
    results = evalrun.run_gamma_grid(
        pipe, samples, dcfg, guidance, schedule, Rng(args.seed).split("gamma"),
    )
    table = {k: v.report.as_dict() for k, v in results.items()}
    lines = []
    for (gv, ga), rep in sorted(table.items()):
        for name in ("depth_mae_analogue", "identity_sim_analogue",
                     "timbre_sim_analogue", "sync_corr_analogue"):
            lines.append(f"gamma_v={gv:g} gamma_a={ga:g} {name}={rep[name]:.6f}")
    (out / "report.txt").write_text("\n".join(lines) + "\n")
    save_gamma_grid(
        table,
        ["identity_sim_analogue", "timbre_sim_analogue", "sync_corr_analogue"],
        out / "gamma_grid.png",
    )
    if args.json:
        payload = {f"{gv:g},{ga:g}": rep for (gv, ga), rep in table.items()}
        (out / "report.json").write_text(json.dumps(payload, indent=2) + "\n")
    print("\n".join(lines))
    return 0


def cmd_inspect(cfg: Config, args) -> int:
    for line in inspect_lines(args.path):
        print(line)
    return 0


# -- parser ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None, help="config file path")
    common.add_argument("--preset", default=None, choices=["default", "fast"],
                        help="built-in config preset (ignored when --config is given)")
    common.add_argument("--seed", type=int, default=0, help="master seed (u64)")
    common.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    common.add_argument("--force", action="store_true",
                        help="allow writing into a non-empty output directory")

    p = argparse.ArgumentParser(
        prog="mmctl",
        description="controllable joint audio-video diffusion on a synthetic world",
    )
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", parents=[common], help="render a synthetic dataset")
    sp.add_argument("--count", type=int, default=64)
    sp.set_defaults(fn=cmd_synth)

    sp = sub.add_parser("pretrain", parents=[common], help="train the joint backbone")
    sp.add_argument("--data", type=Path, default=None, help="dataset directory")
    sp.set_defaults(fn=cmd_pretrain)

    sp = sub.add_parser("train-control", parents=[common],
                        help="train bypass control branches on a frozen backbone")
    sp.add_argument("--init", type=Path, required=True, help="pretrained checkpoint")
    sp.add_argument("--resume", type=Path, default=None,
                    help="control checkpoint to resume (same frozen backbone)")
    sp.add_argument("--data", type=Path, default=None, help="dataset directory")
    sp.set_defaults(fn=cmd_train_control)

    sp = sub.add_parser("generate", parents=[common],
                        help="two-stage generation from a prompt and optional controls")
    sp.add_argument("--ckpt", type=Path, required=True)
    sp.add_argument("--prompt", required=True,
                    help='structured prompt: "[VISUAL]: ... [SPEECH]: ..."')
    sp.add_argument("--ref-image", type=Path, default=None, help="PPM reference image")
    sp.add_argument("--ref-audio", type=Path, default=None, help="WAV reference audio")
    sp.add_argument("--structure", type=Path, default=None,
                    help="directory of PPM frames with a depth or pose sequence")
    sp.add_argument("--gamma-v", type=float, default=None)
    sp.add_argument("--gamma-a", type=float, default=None)
    sp.add_argument("--cfg-scale", type=float, default=None)
    sp.add_argument("--steps", type=int, default=None, help="stage-1 step count")
    sp.set_defaults(fn=cmd_generate)

    eval_help = {
        "eval": "score generations on held-out scenes",
        "eval-gamma": "score a grid of control strengths on held-out scenes",
    }
    for name, fn in (("eval", cmd_eval), ("eval-gamma", cmd_eval_gamma)):
        sp = sub.add_parser(name, parents=[common], help=eval_help[name])
        sp.add_argument("--ckpt", type=Path, required=True)
        sp.add_argument("--task", default="ref+depth", choices=list(TASKS))
        sp.add_argument("--gamma-v", type=float, default=None)
        sp.add_argument("--gamma-a", type=float, default=None)
        sp.add_argument("--cfg-scale", type=float, default=None)
        sp.add_argument("--json", action="store_true", help="also write report.json")
        sp.set_defaults(fn=fn)

    sp = sub.add_parser("inspect-checkpoint", parents=[common],
                        help="print checkpoint metadata and tensor table")
    sp.add_argument("path", type=Path)
    sp.set_defaults(fn=cmd_inspect)
    return p


def main(argv=None) -> int:
    torch.set_num_threads(max(1, int(os.environ.get("MMCTL_THREADS", "1"))))
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, preset=args.preset)
        return args.fn(cfg, args)
    except MmctlError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
