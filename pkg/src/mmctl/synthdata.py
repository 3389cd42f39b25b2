"""Deterministic synthetic audio-video world with analytic ground truth.

Each scene is a colored square gliding (and bouncing) over a dark background
while a harmonic tone plays whose fundamental frequency is tied to the
square's horizontal position (f = f_base + kappa * x). That coupling is the
measurable stand-in for lip sync: pitch and position trajectories correlate
almost perfectly by construction, so synchronization of generated samples can
be scored without any pretrained model. Depth maps (two-level silhouettes)
and pose maps (a Gaussian blob at the object center) are derived from the
same trajectory.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import mediaio
from .errors import ConfigError, InputError
from .numerics import Rng
from .prompt import StructuredPrompt, render_prompt

PALETTE: dict[str, tuple[float, float, float]] = {
    "red": (0.90, 0.12, 0.12),
    "green": (0.12, 0.85, 0.12),
    "blue": (0.15, 0.25, 0.95),
    "yellow": (0.92, 0.88, 0.12),
    "magenta": (0.88, 0.12, 0.85),
    "cyan": (0.12, 0.85, 0.88),
    "orange": (0.95, 0.55, 0.10),
    "white": (0.95, 0.95, 0.95),
}

# name -> (harmonic amplitude weights for h = 1..4, base frequency Hz).
# The fundamental always carries the largest weight so peak-picking finds it;
# the energy profiles still differ enough to tell speakers apart.
SPEAKERS: dict[str, tuple[tuple[float, float, float, float], float]] = {
    "alpha": ((1.0, 0.10, 0.10, 0.10), 35.0),
    "beta": ((1.0, 0.95, 0.10, 0.10), 40.0),
    "gamma": ((1.0, 0.10, 0.95, 0.10), 45.0),
    "delta": ((1.0, 0.90, 0.90, 0.85), 50.0),
}

BACKGROUND = 0.1
DEPTH_OBJECT = 0.8
DEPTH_BACKGROUND = 0.2
POSE_SIGMA = 1.5
TASKS = ("ref+audio", "ref+depth", "ref+pose")


@dataclass
class DataConfig:
    frame_px: int = 32
    frames: int = 12            # generated/target frames t
    k: int = 4                  # reference frames (audio; frame 0 -> ref image)
    samples_per_frame: int = 64
    fps: int = 10
    square_size: int = 8
    kappa: float = 0.75         # Hz of pitch per pixel of x-position

    @property
    def sample_rate(self) -> int:
        return self.samples_per_frame * self.fps

    @property
    def total_frames(self) -> int:
        return self.frames + self.k

    def __post_init__(self):
        if self.frames < 1 or self.k < 1:
            raise ConfigError("DataConfig: frames and k must be >= 1")
        f_max = max(base for _, base in SPEAKERS.values()) + self.kappa * self.frame_px
        if 4 * f_max >= self.sample_rate / 2:
            raise ConfigError(
                f"DataConfig: 4th harmonic of f_max={f_max:.1f} Hz exceeds Nyquist "
                f"({self.sample_rate / 2} Hz)"
            )


@dataclass
class SceneSpec:
    color_name: str
    size: int
    x0: float
    y0: float
    vx: float
    vy: float
    speaker: str
    kappa: float
    total_frames: int
    seed: int

    @property
    def color(self) -> tuple[float, float, float]:
        return PALETTE[self.color_name]

    @property
    def weights(self) -> tuple[float, ...]:
        return SPEAKERS[self.speaker][0]

    @property
    def f_base(self) -> float:
        return SPEAKERS[self.speaker][1]


def gen_scene(rng: Rng, cfg: DataConfig, seed: int = 0) -> SceneSpec:
    """Uniform draw over the scene family; object stays inside the frame."""
    color = list(PALETTE)[rng.choice(len(PALETTE))]
    speaker = list(SPEAKERS)[rng.choice(len(SPEAKERS))]
    size = cfg.square_size
    lo = size / 2.0
    hi = cfg.frame_px - size / 2.0
    x0 = float(rng.uniform((), lo, hi))
    y0 = float(rng.uniform((), lo, hi))
    axis = rng.choice(4)  # 0: right, 1: left, 2: down, 3: up
    speed = float(rng.uniform((), 0.6, 1.4)) * cfg.frame_px / 32.0
    vx = speed if axis == 0 else -speed if axis == 1 else 0.0
    vy = speed if axis == 2 else -speed if axis == 3 else 0.0
    return SceneSpec(
        color_name=color,
        size=size,
        x0=x0,
        y0=y0,
        vx=vx,
        vy=vy,
        speaker=speaker,
        kappa=cfg.kappa,
        total_frames=cfg.total_frames,
        seed=seed,
    )


def trajectory(spec: SceneSpec, cfg: DataConfig) -> np.ndarray:
    """Object center per frame, [total_frames, 2] as (x, y), bounce at edges."""
    lo = spec.size / 2.0
    hi = cfg.frame_px - spec.size / 2.0
    pos = np.array([spec.x0, spec.y0], dtype=np.float64)
    vel = np.array([spec.vx, spec.vy], dtype=np.float64)
    out = np.empty((spec.total_frames, 2))
    for i in range(spec.total_frames):
        out[i] = pos
        pos = pos + vel
        for ax in range(2):
            if pos[ax] < lo:
                pos[ax] = 2 * lo - pos[ax]
                vel[ax] = -vel[ax]
            elif pos[ax] > hi:
                pos[ax] = 2 * hi - pos[ax]
                vel[ax] = -vel[ax]
    return out


def direction_word(spec: SceneSpec) -> str:
    if spec.vx == 0.0 and spec.vy == 0.0:
        return "nowhere"
    if abs(spec.vx) >= abs(spec.vy):
        return "right" if spec.vx > 0 else "left"
    return "down" if spec.vy > 0 else "up"


def pitch_track(spec: SceneSpec, cfg: DataConfig) -> np.ndarray:
    """Fundamental frequency per frame: f = f_base + kappa * x(frame)."""
    return spec.f_base + spec.kappa * trajectory(spec, cfg)[:, 0]


def render_video(spec: SceneSpec, cfg: DataConfig) -> torch.Tensor:
    traj = trajectory(spec, cfg)
    px = cfg.frame_px
    frames = np.full((spec.total_frames, px, px, 3), BACKGROUND, dtype=np.float32)
    color = np.array(spec.color, dtype=np.float32)
    half = spec.size / 2.0
    for i, (cx, cy) in enumerate(traj):
        x_lo = int(round(cx - half))
        y_lo = int(round(cy - half))
        x_lo = min(max(x_lo, 0), px - spec.size)
        y_lo = min(max(y_lo, 0), px - spec.size)
        frames[i, y_lo : y_lo + spec.size, x_lo : x_lo + spec.size] = color
    return torch.from_numpy(frames)


def render_audio(spec: SceneSpec, cfg: DataConfig) -> torch.Tensor:
    """Harmonic tone with per-frame pitch and phase-continuous synthesis."""
    freqs = pitch_track(spec, cfg)
    spf = cfg.samples_per_frame
    sr = cfg.sample_rate
    weights = np.array(spec.weights)
    scale = 0.9 / weights.sum()
    wave = np.zeros(spec.total_frames * spf, dtype=np.float64)
    phases = np.zeros(len(weights))
    for i, f in enumerate(freqs):
        steps = 2.0 * math.pi * f * np.arange(1, spf + 1) / sr
        for h, w in enumerate(weights):
            ph = phases[h] + (h + 1) * steps
            wave[i * spf : (i + 1) * spf] += w * np.sin(ph)
            phases[h] = ph[-1]
    return torch.from_numpy((wave * scale).astype(np.float32))


def derive_depth(spec: SceneSpec, cfg: DataConfig) -> torch.Tensor:
    """Two-level depth map: object pixels 0.8, background 0.2."""
    video = render_video(spec, cfg).numpy()
    is_object = video.max(axis=-1) > BACKGROUND + 1e-3
    depth = np.where(is_object, DEPTH_OBJECT, DEPTH_BACKGROUND).astype(np.float32)
    return torch.from_numpy(depth)


def derive_pose(spec: SceneSpec, cfg: DataConfig) -> torch.Tensor:
    """Gaussian keypoint heatmap centered at the object center."""
    traj = trajectory(spec, cfg)
    px = cfg.frame_px
    ys, xs = np.mgrid[0:px, 0:px].astype(np.float64)
    maps = np.empty((spec.total_frames, px, px), dtype=np.float32)
    for i, (cx, cy) in enumerate(traj):
        maps[i] = np.exp(-(((xs - cx) ** 2 + (ys - cy) ** 2) / (2 * POSE_SIGMA**2)))
    return torch.from_numpy(maps)


def caption(spec: SceneSpec) -> StructuredPrompt:
    return StructuredPrompt(
        visual=f"a {spec.color_name} square moving {direction_word(spec)}",
        speech=f"tone pattern {spec.speaker}",
    )


def caption_generic(spec: SceneSpec) -> StructuredPrompt:
    """Identity-withheld caption: motion stays, color and speaker are omitted."""
    return StructuredPrompt(
        visual=f"a square moving {direction_word(spec)}",
        speech="tone pattern",
    )


@dataclass
class TrainingSample:
    sample_id: str
    task: str
    seed: int
    t: int
    k: int
    prompt: StructuredPrompt
    prompt_generic: StructuredPrompt
    video: torch.Tensor          # [t, px, px, 3] target frames
    audio: torch.Tensor          # [t * spf] target waveform
    depth: torch.Tensor          # [t, px, px]
    pose: torch.Tensor           # [t, px, px]
    ref_image: torch.Tensor      # [px, px, 3]
    ref_audio: torch.Tensor      # [k * spf]
    spec: SceneSpec | None = None

    @property
    def structure(self) -> torch.Tensor | None:
        if self.task == "ref+depth":
            return self.depth
        if self.task == "ref+pose":
            return self.pose
        return None

    @property
    def ref_sample_range(self) -> tuple[int, int]:
        return (0, self.ref_audio.shape[0])

    @property
    def target_sample_range(self) -> tuple[int, int]:
        start = self.ref_audio.shape[0]
        return (start, start + self.audio.shape[0])


def make_sample(
    spec: SceneSpec, task: str, cfg: DataConfig, sample_id: str = "s00000"
) -> TrainingSample:
    """Split a rendered clip into reference (first k frames) and target parts."""
    if task not in TASKS:
        raise InputError(f"unknown task {task!r}; expected one of {TASKS}")
    k = cfg.k
    if spec.total_frames < k + 1:
        raise InputError(
            f"clip of {spec.total_frames} frames too short for k={k} reference frames"
        )
    t = spec.total_frames - k
    video = render_video(spec, cfg)
    audio = render_audio(spec, cfg)
    depth = derive_depth(spec, cfg)
    pose = derive_pose(spec, cfg)
    spf = cfg.samples_per_frame
    return TrainingSample(
        sample_id=sample_id,
        task=task,
        seed=spec.seed,
        t=t,
        k=k,
        prompt=caption(spec),
        prompt_generic=caption_generic(spec),
        video=video[k:],
        audio=audio[k * spf :],
        depth=depth[k:],
        pose=pose[k:],
        ref_image=video[0],
        ref_audio=audio[: k * spf],
        spec=spec,
    )


def scene_seed(dataset_seed: int, index: int) -> int:
    return (dataset_seed * 1_000_003 + index) & 0xFFFFFFFFFFFFFFFF


def gen_dataset(
    dataset_seed: int, count: int, cfg: DataConfig, tasks: tuple[str, ...] = TASKS
) -> list[TrainingSample]:
    if count < 1:
        raise InputError(f"dataset count must be >= 1, got {count}")
    samples = []
    for i in range(count):
        seed = scene_seed(dataset_seed, i)
        spec = gen_scene(Rng(seed).split("scene"), cfg, seed=seed)
        task = tasks[i % len(tasks)]
        samples.append(make_sample(spec, task, cfg, sample_id=f"s{i:05d}"))
    return samples


# -- on-disk layout -------------------------------------------------------------


def manifest_line(s: TrainingSample) -> str:
    return (
        f"id={s.sample_id} task={s.task} seed={s.seed} t={s.t} k={s.k} "
        f"prompt={render_prompt(s.prompt)}"
    )


def write_dataset(root, samples: list[TrainingSample], cfg: DataConfig):
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    sr = cfg.sample_rate
    for s in samples:
        d = root / s.sample_id
        mediaio.write_frames(d / "video", s.video.numpy())
        mediaio.write_frames(d / "depth", s.depth.unsqueeze(-1).expand(*s.depth.shape, 3).numpy())
        mediaio.write_frames(d / "pose", s.pose.unsqueeze(-1).expand(*s.pose.shape, 3).numpy())
        mediaio.write_wav(d / "audio.wav", s.audio.numpy(), sr)
        mediaio.write_ppm(d / "ref.ppm", s.ref_image.numpy())
        mediaio.write_wav(d / "ref.wav", s.ref_audio.numpy(), sr)
        (d / "prompt.txt").write_text(render_prompt(s.prompt) + "\n")
    manifest = "".join(manifest_line(s) + "\n" for s in samples)
    (root / "manifest").write_text(manifest)


def parse_manifest_line(line: str) -> dict:
    fields = {}
    rest = line.rstrip("\n")
    for key in ("id", "task", "seed", "t", "k"):
        tag = f"{key}="
        if not rest.startswith(tag):
            raise InputError(f"malformed manifest line: {line!r}")
        end = rest.index(" ")
        fields[key] = rest[len(tag) : end]
        rest = rest[end + 1 :]
    if not rest.startswith("prompt="):
        raise InputError(f"malformed manifest line: {line!r}")
    fields["prompt"] = rest[len("prompt=") :]
    return fields


def load_dataset(root, cfg: DataConfig) -> list[TrainingSample]:
    """Rebuild training samples from the on-disk layout via the manifest."""
    from .prompt import parse_prompt

    root = Path(root)
    lines = (root / "manifest").read_text().splitlines()
    samples = []
    for line in lines:
        f = parse_manifest_line(line)
        d = root / f["id"]
        video = torch.from_numpy(mediaio.read_frames(d / "video"))
        depth = torch.from_numpy(mediaio.read_frames(d / "depth")[..., 0].copy())
        pose = torch.from_numpy(mediaio.read_frames(d / "pose")[..., 0].copy())
        audio, _ = mediaio.read_wav(d / "audio.wav")
        ref_audio, _ = mediaio.read_wav(d / "ref.wav")
        ref_image = torch.from_numpy(mediaio.read_ppm(d / "ref.ppm"))
        seed = int(f["seed"])
        spec = gen_scene(Rng(seed).split("scene"), cfg, seed=seed)
        prompt = parse_prompt(f["prompt"])
        samples.append(
            TrainingSample(
                sample_id=f["id"],
                task=f["task"],
                seed=seed,
                t=int(f["t"]),
                k=int(f["k"]),
                prompt=prompt,
                prompt_generic=caption_generic(spec),
                video=video,
                audio=torch.from_numpy(audio),
                depth=depth,
                pose=pose,
                ref_image=ref_image,
                ref_audio=torch.from_numpy(ref_audio),
                spec=spec,
            )
        )
    return samples
