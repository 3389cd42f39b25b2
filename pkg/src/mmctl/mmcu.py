"""Multi-modal control unit: control latent streams, masks, and dropout.

The unit packages text embeddings with a visual control stream (reference
frame latent prepended to structural latents) and an acoustic control stream
(reference-audio latents followed by silence placeholders). Mask layouts are
fixed by (t, k) alone; absent conditions keep the layout and substitute zero
latents, so an absent control is indistinguishable from a dropped one.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import torch

from .codecs import AudioCodec, LatentSeq, VideoCodec, silence_latents
from .errors import InputError, ShapeError
from .numerics import Rng
from .prompt import TextEmbedding


@dataclass
class VisualControl:
    latents: LatentSeq  # length 1 + t
    mask: torch.Tensor  # [1 + t] float, {0, 1}
    has_ref_image: bool
    has_structure: bool


@dataclass
class AcousticControl:
    latents: LatentSeq  # length k + t
    mask: torch.Tensor  # [k + t] float, {0, 1}
    has_ref_audio: bool
    k: int


@dataclass
class ControlUnit:
    text: TextEmbedding
    visual: VisualControl
    acoustic: AcousticControl
    t: int


def visual_mask(t: int) -> torch.Tensor:
    m = torch.ones(1 + t)
    m[0] = 0.0
    return m


def acoustic_mask(k: int, t: int) -> torch.Tensor:
    return torch.cat([torch.zeros(k), torch.ones(t)])


def _as_rgb(frames: torch.Tensor) -> torch.Tensor:
    """Accept [t, h, w] single-channel structure maps or [t, h, w, 3]."""
    if frames.ndim == 3:
        return frames.unsqueeze(-1).expand(*frames.shape, 3).contiguous()
    return frames


def build_visual_control(
    ref_image: torch.Tensor | None,
    structure: torch.Tensor | None,
    t: int,
    codec: VideoCodec,
) -> VisualControl:
    """V = {z_img} ++ {z_s,1..t}; absent inputs become zero latents."""
    tokens = codec.tokens_per_frame
    dim = codec.latent_dim
    data = torch.zeros(1 + t, tokens, dim)
    if ref_image is not None:
        data[0] = codec.encode(_as_rgb(ref_image.unsqueeze(0))).data[0]
    if structure is not None:
        structure = _as_rgb(structure)
        if structure.shape[0] != t:
            raise ShapeError(
                f"build_visual_control: structure has {structure.shape[0]} frames, expected {t}"
            )
        data[1:] = codec.encode(structure).data
    return VisualControl(
        latents=LatentSeq(data),
        mask=visual_mask(t),
        has_ref_image=ref_image is not None,
        has_structure=structure is not None,
    )


def build_acoustic_control(
    ref_audio: torch.Tensor | None,
    t: int,
    codec: AudioCodec,
    k_default: int = 2,
) -> AcousticControl:
    """A = {z_aud,1..k} ++ {z_sil,1..t}; absent reference keeps k = k_default."""
    if ref_audio is not None:
        if ref_audio.numel() == 0:
            raise InputError("build_acoustic_control: present reference audio is empty")
        ref_latents = codec.encode(ref_audio)
        k = ref_latents.length
        data = torch.cat([ref_latents.data, silence_latents(t, codec).data])
    else:
        k = k_default
        data = torch.zeros(k + t, 1, codec.latent_dim)
    return AcousticControl(
        latents=LatentSeq(data),
        mask=acoustic_mask(k, t),
        has_ref_audio=ref_audio is not None,
        k=k,
    )


def build_control_unit(
    text: TextEmbedding,
    t: int,
    video_codec: VideoCodec,
    audio_codec: AudioCodec,
    ref_image: torch.Tensor | None = None,
    ref_audio: torch.Tensor | None = None,
    structure: torch.Tensor | None = None,
    k_default: int = 2,
) -> ControlUnit:
    return ControlUnit(
        text=text,
        visual=build_visual_control(ref_image, structure, t, video_codec),
        acoustic=build_acoustic_control(ref_audio, t, audio_codec, k_default=k_default),
        t=t,
    )


def drop_visual(v: VisualControl) -> VisualControl:
    return VisualControl(
        latents=LatentSeq(torch.zeros_like(v.latents.data)),
        mask=torch.zeros_like(v.mask),
        has_ref_image=False,
        has_structure=False,
    )


def drop_acoustic(a: AcousticControl) -> AcousticControl:
    return AcousticControl(
        latents=LatentSeq(torch.zeros_like(a.latents.data)),
        mask=torch.zeros_like(a.mask),
        has_ref_audio=False,
        k=a.k,
    )


def apply_control_dropout(u: ControlUnit, rng: Rng, p: float) -> ControlUnit:
    """Independently zero each modality's latents AND mask with probability p.

    Text is never dropped here; the null-text substitution used for CFG is a
    separate concern of the training loss.
    """
    if not 0.0 <= p < 1.0 and p != 1.0:
        raise InputError(f"apply_control_dropout: p={p} outside [0, 1]")
    out = u
    if rng.random() < p:
        out = replace(out, visual=drop_visual(out.visual))
    if rng.random() < p:
        out = replace(out, acoustic=drop_acoustic(out.acoustic))
    return out
