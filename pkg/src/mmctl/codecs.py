"""Exactly invertible linear latent codecs for video frames and audio.

Both codecs multiply fixed orthogonal bases against patchified media, so
encode/decode round-trips are exact up to float32 rounding and the transform
is an isometry. Video tokens are a per-frame patch grid; audio produces one
latent frame per video frame, which keeps the two modalities temporally
aligned by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ConfigError, ShapeError
from .numerics import Rng

_BASIS_SEED = 0x4D4D4354  # fixed; bases depend only on their label


def make_orthogonal(label: str, n: int) -> torch.Tensor:
    """Deterministic orthogonal [n, n] matrix derived from a string label."""
    if n < 1:
        raise ConfigError(f"make_orthogonal: n must be >= 1, got {n}")
    rng = Rng(_BASIS_SEED).split(f"orthogonal/{label}")
    raw = rng.normal((n, n)).double().numpy()
    q, r = np.linalg.qr(raw)
    # fix column signs so the factorization is unique
    q = q * np.sign(np.diag(r))[None, :]
    return torch.from_numpy(q.astype(np.float32))


@dataclass
class LatentSeq:
    """A latent sequence: data[length, tokens_per_frame, dim]."""

    data: torch.Tensor

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ShapeError(f"LatentSeq: expected rank 3, got {self.data.ndim}")

    @property
    def length(self) -> int:
        return self.data.shape[0]

    @property
    def tokens_per_frame(self) -> int:
        return self.data.shape[1]

    @property
    def dim(self) -> int:
        return self.data.shape[2]


@dataclass
class VideoCodec:
    """Patchify frames and project each flattened patch onto an orthogonal basis."""

    frame_h: int
    frame_w: int
    patch: int = 8
    label: str = "video"
    basis: torch.Tensor = field(init=False, repr=False)

    def __post_init__(self):
        if self.frame_h % self.patch or self.frame_w % self.patch:
            raise ConfigError(
                f"VideoCodec: patch {self.patch} must divide {self.frame_h}x{self.frame_w}"
            )
        self.basis = make_orthogonal(self.label, self.latent_dim)

    @property
    def latent_dim(self) -> int:
        return 3 * self.patch * self.patch

    @property
    def grid_h(self) -> int:
        return self.frame_h // self.patch

    @property
    def grid_w(self) -> int:
        return self.frame_w // self.patch

    @property
    def tokens_per_frame(self) -> int:
        return self.grid_h * self.grid_w

    def encode(self, frames: torch.Tensor) -> LatentSeq:
        """frames[t, h, w, 3] -> LatentSeq[t, grid_h*grid_w, 3*p*p]."""
        if frames.ndim != 4 or frames.shape[1:] != (self.frame_h, self.frame_w, 3):
            raise ShapeError(
                f"encode_video: expected [t, {self.frame_h}, {self.frame_w}, 3], "
                f"got {tuple(frames.shape)}"
            )
        t = frames.shape[0]
        p = self.patch
        x = frames.reshape(t, self.grid_h, p, self.grid_w, p, 3)
        x = x.permute(0, 1, 3, 2, 4, 5).reshape(t, self.tokens_per_frame, p * p * 3)
        return LatentSeq(x @ self.basis.T)

    def decode(self, latents: LatentSeq) -> torch.Tensor:
        if latents.tokens_per_frame != self.tokens_per_frame or latents.dim != self.latent_dim:
            raise ShapeError("decode_video: latent geometry mismatch")
        t = latents.length
        p = self.patch
        x = latents.data @ self.basis
        x = x.reshape(t, self.grid_h, self.grid_w, p, p, 3)
        x = x.permute(0, 1, 3, 2, 4, 5).reshape(t, self.frame_h, self.frame_w, 3)
        return x


@dataclass
class AudioCodec:
    """Per-video-frame orthogonal transform over fixed-length sample blocks."""

    frame_len: int = 64
    sample_rate: int = 640
    label: str = "audio"
    basis: torch.Tensor = field(init=False, repr=False)

    def __post_init__(self):
        if self.frame_len < 1:
            raise ConfigError("AudioCodec: frame_len must be >= 1")
        self.basis = make_orthogonal(self.label, self.frame_len)

    @property
    def latent_dim(self) -> int:
        return self.frame_len

    def encode(self, wave: torch.Tensor) -> LatentSeq:
        """wave[t * frame_len] -> LatentSeq[t, 1, frame_len]."""
        wave = wave.reshape(-1)
        if wave.shape[0] % self.frame_len:
            raise ShapeError(
                f"encode_audio: length {wave.shape[0]} not divisible by {self.frame_len}"
            )
        frames = wave.reshape(-1, self.frame_len)
        return LatentSeq((frames @ self.basis.T).unsqueeze(1))

    def decode(self, latents: LatentSeq) -> torch.Tensor:
        if latents.tokens_per_frame != 1 or latents.dim != self.frame_len:
            raise ShapeError("decode_audio: latent geometry mismatch")
        return (latents.data.squeeze(1) @ self.basis).reshape(-1)


def silence_latents(t: int, codec: AudioCodec) -> LatentSeq:
    """Latents of t frames of digital silence (all zero under a linear codec)."""
    if t < 1:
        raise ShapeError(f"silence_latents: t must be >= 1, got {t}")
    return codec.encode(torch.zeros(t * codec.frame_len))
