"""Joint audio-video diffusion transformer with dual-stream bypass branches.

The backbone is a stack of joint blocks, each holding per-modality
self-attention, bidirectional cross-modal attention, text cross-attention and
feed-forward sublayers, all modulated adaLN-style from a noise-level
embedding. Control injection happens through per-modality bypass branches:
context projectors fold the control mask into the latent channels, bypass
blocks (self-attention, text cross-attention, FFN only; no cross-modal
attention) refine the control tokens, and zero-initialized output projectors
emit hints that are added to the backbone streams at even-numbered layers,
scaled by the per-modality gains gamma_v / gamma_a.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, InputError, ShapeError, StateError
from .mmcu import ControlUnit
from .numerics import Rng, attention
from .prompt import TextEmbedding

# sublayer order inside a joint block; bypass blocks keep SELF/TEXT/FFN
SUB_SELF, SUB_CROSS, SUB_TEXT, SUB_FFN = 0, 1, 2, 3
BYPASS_SUB_OF_BACKBONE = {SUB_SELF: 0, SUB_TEXT: 1, SUB_FFN: 2}


@dataclass
class ModelConfig:
    layers: int = 8
    d_model: int = 128
    heads: int = 4
    d_text: int = 64
    vocab: int = 4096
    max_text_len: int = 16
    frames: int = 12          # generated frames t
    frame_px: int = 32        # full-resolution frame side (square)
    patch: int = 8
    audio_dim: int = 64
    k_max: int = 8            # max reference-audio latent frames (positional table)
    ffn_mult: int = 4
    sigma_dim: int = 64
    gamma_v: float = 1.0
    gamma_a: float = 1.0

    def __post_init__(self):
        if self.layers < 2 or self.layers % 2:
            raise ConfigError(f"layers must be even and >= 2, got {self.layers}")
        if self.d_model % self.heads:
            raise ConfigError(f"heads ({self.heads}) must divide d_model ({self.d_model})")
        if self.frame_px % (2 * self.patch):
            raise ConfigError(
                f"frame_px ({self.frame_px}) must be divisible by 2*patch for the "
                f"half-resolution stage"
            )

    @property
    def video_dim(self) -> int:
        return 3 * self.patch * self.patch

    @property
    def grid_hi(self) -> int:
        return self.frame_px // self.patch

    @property
    def grid_lo(self) -> int:
        return self.grid_hi // 2

    def grid(self, res: str) -> int:
        if res == "hi":
            return self.grid_hi
        if res == "lo":
            return self.grid_lo
        raise ConfigError(f"unknown resolution {res!r}")


@dataclass
class BatchedUnit:
    """Control units stacked along a batch dimension for model consumption."""

    text_tokens: torch.Tensor  # [B, n_text, d_text]
    text_mask: torch.Tensor    # [B, n_text] bool
    v_latents: torch.Tensor    # [B, 1 + t, tokens, video_dim]
    v_mask: torch.Tensor       # [B, 1 + t]
    a_latents: torch.Tensor    # [B, k + t, audio_dim]
    a_mask: torch.Tensor       # [B, k + t]
    t: int
    k: int


def stack_units(units: Sequence[ControlUnit]) -> BatchedUnit:
    t = units[0].t
    k = units[0].acoustic.k
    if any(u.t != t or u.acoustic.k != k for u in units):
        raise ShapeError("stack_units: all units must share (t, k)")
    return BatchedUnit(
        text_tokens=torch.stack([u.text.tokens for u in units]),
        text_mask=torch.stack([u.text.mask for u in units]),
        v_latents=torch.stack([u.visual.latents.data for u in units]),
        v_mask=torch.stack([u.visual.mask for u in units]),
        a_latents=torch.stack([u.acoustic.latents.data.squeeze(1) for u in units]),
        a_mask=torch.stack([u.acoustic.mask for u in units]),
        t=t,
        k=k,
    )


def _ln(x: torch.Tensor) -> torch.Tensor:
    return F.layer_norm(x, x.shape[-1:])


def sigma_features(sigma: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal features of the noise level, sigma in [0, 1]."""
    half = dim // 2
    freqs = torch.exp(torch.linspace(0.0, math.log(1000.0), half))
    ang = sigma.reshape(-1, 1) * freqs.reshape(1, -1) * math.pi
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)


class MultiheadAttention(nn.Module):
    def __init__(self, d: int, heads: int, kv_dim: int | None = None):
        super().__init__()
        kv_dim = d if kv_dim is None else kv_dim
        self.heads = heads
        self.wq = nn.Linear(d, d)
        self.wk = nn.Linear(kv_dim, d)
        self.wv = nn.Linear(kv_dim, d)
        self.wo = nn.Linear(d, d)

    def forward(self, q, kv, key_mask=None):
        out = attention(self.wq(q), self.wk(kv), self.wv(kv), self.heads, key_mask=key_mask)
        return self.wo(out)


class FeedForward(nn.Module):
    def __init__(self, d: int, mult: int):
        super().__init__()
        self.fc1 = nn.Linear(d, mult * d)
        self.fc2 = nn.Linear(mult * d, d)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


def _modulated(x, mod, idx, fn):
    """Pre-LN adaLN sublayer: x + gate * fn(ln(x) * (1 + scale) + shift)."""
    shift, scale, gate = mod[:, idx, 0], mod[:, idx, 1], mod[:, idx, 2]
    h = _ln(x) * (1.0 + scale.unsqueeze(1)) + shift.unsqueeze(1)
    return x + gate.unsqueeze(1) * fn(h)


class JointDiTBlock(nn.Module):
    """One backbone layer: two modality streams with cross-modal mixing."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d, h = cfg.d_model, cfg.heads
        self.v_self = MultiheadAttention(d, h)
        self.a_self = MultiheadAttention(d, h)
        self.v_cross = MultiheadAttention(d, h)   # video queries audio
        self.a_cross = MultiheadAttention(d, h)   # audio queries video
        self.v_text = MultiheadAttention(d, h, kv_dim=cfg.d_text)
        self.a_text = MultiheadAttention(d, h, kv_dim=cfg.d_text)
        self.v_ffn = FeedForward(d, cfg.ffn_mult)
        self.a_ffn = FeedForward(d, cfg.ffn_mult)
        self.mod_v = nn.Linear(d, 4 * 3 * d)
        self.mod_a = nn.Linear(d, 4 * 3 * d)

    def forward(self, xv, xa, text_tokens, text_mask, cond):
        b, d = xv.shape[0], xv.shape[-1]
        mv = self.mod_v(cond).view(b, 4, 3, d)
        ma = self.mod_a(cond).view(b, 4, 3, d)

        xv = _modulated(xv, mv, SUB_SELF, lambda h: self.v_self(h, h))
        xa = _modulated(xa, ma, SUB_SELF, lambda h: self.a_self(h, h))

        kv_v, kv_a = _ln(xv), _ln(xa)  # shared snapshot for both directions
        xv = _modulated(xv, mv, SUB_CROSS, lambda h: self.v_cross(h, kv_a))
        xa = _modulated(xa, ma, SUB_CROSS, lambda h: self.a_cross(h, kv_v))

        xv = _modulated(xv, mv, SUB_TEXT, lambda h: self.v_text(h, text_tokens, text_mask))
        xa = _modulated(xa, ma, SUB_TEXT, lambda h: self.a_text(h, text_tokens, text_mask))

        xv = _modulated(xv, mv, SUB_FFN, self.v_ffn)
        xa = _modulated(xa, ma, SUB_FFN, self.a_ffn)
        return xv, xa


class BypassBlock(nn.Module):
    """Single-stream block: self-attention, text cross-attention, FFN.

    Deliberately contains no cross-modal attention.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d, h = cfg.d_model, cfg.heads
        self.self_attn = MultiheadAttention(d, h)
        self.text_attn = MultiheadAttention(d, h, kv_dim=cfg.d_text)
        self.ffn = FeedForward(d, cfg.ffn_mult)
        self.mod = nn.Linear(d, 3 * 3 * d)

    def forward(self, x, text_tokens, text_mask, cond):
        b, d = x.shape[0], x.shape[-1]
        m = self.mod(cond).view(b, 3, 3, d)
        x = _modulated(x, m, 0, lambda h: self.self_attn(h, h))
        x = _modulated(x, m, 1, lambda h: self.text_attn(h, text_tokens, text_mask))
        x = _modulated(x, m, 2, self.ffn)
        return x


class ContextProjector(nn.Module):
    """Linear map over (latent channels ++ mask bit) -> d_model.

    The latent columns are inherited from the backbone embedder at attach
    time, so projecting with mask == 0 reproduces the embedder exactly.
    """

    def __init__(self, latent_dim: int, d_model: int):
        super().__init__()
        self.proj = nn.Linear(latent_dim + 1, d_model)

    def project(self, latents: torch.Tensor, maskbits: torch.Tensor) -> torch.Tensor:
        # latents: [B, frames, tokens, latent_dim]; maskbits: [B, frames]
        m = maskbits[:, :, None, None].expand(*latents.shape[:-1], 1)
        return self.proj(torch.cat([latents, m], dim=-1))


class BypassBranch(nn.Module):
    def __init__(self, cfg: ModelConfig, latent_dim: int):
        super().__init__()
        n = cfg.layers // 2
        self.ctx = ContextProjector(latent_dim, cfg.d_model)
        self.blocks = nn.ModuleList(BypassBlock(cfg) for _ in range(n))
        self.out_proj = nn.ModuleList(
            nn.Linear(cfg.d_model, cfg.d_model) for _ in range(n)
        )


class Backbone(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.d_model
        self.video_in = nn.Linear(cfg.video_dim, d)
        self.audio_in = nn.Linear(cfg.audio_dim, d)
        # positional slots: [0, frames) main/structure frames,
        # [frames, frames + k_max) audio-reference slots, last = ref-image slot
        self.frame_pos = nn.Embedding(cfg.frames + cfg.k_max + 1, d)
        self.row_pos = nn.Embedding(cfg.grid_hi, d)
        self.col_pos = nn.Embedding(cfg.grid_hi, d)
        self.mod_emb = nn.Embedding(2, d)  # 0 = video, 1 = audio
        self.text_table = nn.Parameter(torch.empty(cfg.vocab + 1, cfg.d_text))
        self.seg_table = nn.Parameter(torch.empty(2, cfg.d_text))
        self.null_text = nn.Parameter(torch.empty(1, cfg.d_text))
        self.sigma_fc1 = nn.Linear(cfg.sigma_dim, d)
        self.sigma_fc2 = nn.Linear(d, d)
        self.layer = nn.ModuleList(JointDiTBlock(cfg) for _ in range(cfg.layers))
        self.norm_v = nn.LayerNorm(d)
        self.norm_a = nn.LayerNorm(d)
        self.head_v = nn.Linear(d, cfg.video_dim)
        self.head_a = nn.Linear(d, cfg.audio_dim)

    def sigma_embed(self, sigma: torch.Tensor, dim: int) -> torch.Tensor:
        return self.sigma_fc2(F.silu(self.sigma_fc1(sigma_features(sigma, dim))))


class JointModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.backbone = Backbone(cfg)
        self.bypass: nn.ModuleDict | None = None

    # -- positional assembly -------------------------------------------------

    def _grid_indices(self, grid: int) -> torch.Tensor:
        stride = self.cfg.grid_hi // grid
        return torch.arange(grid) * stride

    def _video_pos(self, frame_ids: torch.Tensor, grid: int) -> torch.Tensor:
        """[len(frame_ids) * grid^2, d] positional embedding for video tokens."""
        bb = self.backbone
        idx = self._grid_indices(grid)
        pos = (
            bb.frame_pos(frame_ids)[:, None, None, :]
            + bb.row_pos(idx)[None, :, None, :]
            + bb.col_pos(idx)[None, None, :, :]
        )
        return pos.reshape(-1, self.cfg.d_model)

    def _main_frame_ids(self, t: int) -> torch.Tensor:
        return torch.arange(t)

    # -- stream embedding ----------------------------------------------------

    def embed_main(self, v_lat, a_lat, grid):
        """Noisy main streams -> hidden states ([B, t*tok, d], [B, t, d])."""
        bb = self.backbone
        b, t = v_lat.shape[0], v_lat.shape[1]
        frame_ids = self._main_frame_ids(t)
        xv = bb.video_in(v_lat).reshape(b, t * grid * grid, -1)
        xv = xv + self._video_pos(frame_ids, grid)[None] + bb.mod_emb.weight[0]
        xa = bb.audio_in(a_lat) + bb.frame_pos(frame_ids)[None] + bb.mod_emb.weight[1]
        return xv, xa

    def embed_ctx_visual(self, unit: BatchedUnit, grid: int) -> torch.Tensor:
        branch = self.bypass["v"]
        b = unit.v_latents.shape[0]
        t = unit.t
        x = branch.ctx.project(unit.v_latents, unit.v_mask)
        ref_slot = self.cfg.frames + self.cfg.k_max
        frame_ids = torch.cat([torch.tensor([ref_slot]), self._main_frame_ids(t)])
        x = x.reshape(b, (1 + t) * grid * grid, -1)
        x = x + self._video_pos(frame_ids, grid)[None]
        return x + self.backbone.mod_emb.weight[0]

    def embed_ctx_acoustic(self, unit: BatchedUnit) -> torch.Tensor:
        branch = self.bypass["a"]
        k, t = unit.k, unit.t
        if k > self.cfg.k_max:
            raise ShapeError(f"reference audio k={k} exceeds k_max={self.cfg.k_max}")
        x = branch.ctx.project(unit.a_latents.unsqueeze(2), unit.a_mask).squeeze(2)
        frame_ids = torch.cat(
            [self.cfg.frames + torch.arange(k), self._main_frame_ids(t)]
        )
        x = x + self.backbone.frame_pos(frame_ids)[None]
        return x + self.backbone.mod_emb.weight[1]

    # -- forward passes --------------------------------------------------------

    def bypass_forward(
        self, modality: str, ctx: torch.Tensor, text_tokens, text_mask, cond,
        drop_prefix: int,
    ) -> list[torch.Tensor]:
        """Run one bypass branch; one hint per even backbone layer.

        Hints are aligned to the main stream by dropping the reference-prefix
        positions (`drop_prefix` leading tokens) after each projection.
        """
        if self.bypass is None:
            raise StateError("bypass_forward: no bypass attached")
        branch = self.bypass[modality]
        x = ctx
        hints = []
        for block, proj in zip(branch.blocks, branch.out_proj):
            x = block(x, text_tokens, text_mask, cond)
            hints.append(proj(x)[:, drop_prefix:, :])
        return hints

    def backbone_forward(
        self,
        v_lat: torch.Tensor,        # [B, t, tokens, video_dim] noisy
        a_lat: torch.Tensor,        # [B, t, audio_dim] noisy
        text_tokens: torch.Tensor,
        text_mask: torch.Tensor,
        sigma: torch.Tensor,        # [B]
        grid: int,
        hints_v: list[torch.Tensor] | None = None,
        hints_a: list[torch.Tensor] | None = None,
        gamma_v: float = 1.0,
        gamma_a: float = 1.0,
    ):
        if not (math.isfinite(gamma_v) and math.isfinite(gamma_a)):
            raise InputError("gamma values must be finite")
        bb = self.backbone
        b, t = v_lat.shape[0], v_lat.shape[1]
        cond = bb.sigma_embed(sigma, self.cfg.sigma_dim)
        xv, xa = self.embed_main(v_lat, a_lat, grid)
        for i, block in enumerate(bb.layer):
            xv, xa = block(xv, xa, text_tokens, text_mask, cond)
            if (i + 1) % 2 == 0:
                j = (i + 1) // 2 - 1
                if hints_v is not None:
                    xv = xv + gamma_v * hints_v[j]
                if hints_a is not None:
                    xa = xa + gamma_a * hints_a[j]
        vel_v = bb.head_v(bb.norm_v(xv)).reshape(b, t, grid * grid, -1)
        vel_a = bb.head_a(bb.norm_a(xa))
        return vel_v, vel_a

    def null_text_batch(self, b: int):
        tokens = self.backbone.null_text[None].expand(b, 1, -1)
        mask = torch.ones(b, 1, dtype=torch.bool)
        return tokens, mask

    def predict_velocity(
        self,
        noisy_v: torch.Tensor,
        noisy_a: torch.Tensor,
        unit: BatchedUnit,
        sigma: torch.Tensor,
        grid: int,
        gamma_v: float = 1.0,
        gamma_a: float = 1.0,
        null_text: bool = False,
        hints: tuple[list, list] | None = None,
        return_hints: bool = False,
    ):
        """Full conditional forward: bypass hints (if attached) + backbone.

        `hints` short-circuits the bypass pass (used by CFG, which reuses the
        conditional hints for the null-text velocity). Hints are a pure
        function of (unit, text, sigma) and never see the noisy latents.
        """
        b = noisy_v.shape[0]
        if null_text:
            text_tokens, text_mask = self.null_text_batch(b)
        else:
            text_tokens, text_mask = unit.text_tokens, unit.text_mask

        hints_v = hints_a = None
        if hints is not None:
            hints_v, hints_a = hints
        elif self.bypass is not None:
            cond = self.backbone.sigma_embed(sigma, self.cfg.sigma_dim)
            ctx_v = self.embed_ctx_visual(unit, grid)
            ctx_a = self.embed_ctx_acoustic(unit)
            hints_v = self.bypass_forward(
                "v", ctx_v, text_tokens, text_mask, cond, drop_prefix=grid * grid
            )
            hints_a = self.bypass_forward(
                "a", ctx_a, text_tokens, text_mask, cond, drop_prefix=unit.k
            )

        out = self.backbone_forward(
            noisy_v, noisy_a, text_tokens, text_mask, sigma, grid,
            hints_v=hints_v, hints_a=hints_a, gamma_v=gamma_v, gamma_a=gamma_a,
        )
        if return_hints:
            return out, (hints_v, hints_a)
        return out

    def encode_prompt(self, p) -> TextEmbedding:
        from .prompt import encode_text

        return encode_text(
            p, self.backbone.text_table, self.backbone.seg_table, self.cfg.max_text_len
        )


# -- construction -------------------------------------------------------------

_ZERO_MARKERS = ("head_v", "head_a", ".mod_v.", ".mod_a.", ".mod.", "out_proj")


def _is_zero_init(name: str) -> bool:
    return any(m in name for m in _ZERO_MARKERS)


def _init_parameters(module: nn.Module, rng: Rng, prefix: str = ""):
    """Deterministic init keyed by parameter name, order-independent."""
    with torch.no_grad():
        for name, p in module.named_parameters():
            full = f"{prefix}{name}"
            if _is_zero_init(full) or full.endswith(".bias"):
                p.zero_()
            elif ".norm_" in full or "norm." in full:
                p.fill_(1.0)
            else:
                p.copy_(rng.split(f"init/{full}").normal(p.shape, std=0.02))


def init_backbone(cfg: ModelConfig, rng: Rng) -> JointModel:
    """Fresh joint model, bypass absent; zero output heads, adaLN-zero blocks."""
    model = JointModel(cfg)
    _init_parameters(model, rng)
    return model


def freeze_backbone(model: JointModel):
    for p in model.backbone.parameters():
        p.requires_grad_(False)


def attach_bypass(model: JointModel, rng: Rng) -> JointModel:
    """Attach dual bypass branches, inheriting weights from even layers.

    Bypass block j (1-based) copies the matching sublayers of backbone layer
    2j; context projectors inherit the input embedder weights with a freshly
    initialized mask column; output projectors start at zero, so the attach
    is exactly transparent. The backbone itself is never mutated.
    """
    if model.bypass is not None:
        raise StateError("attach_bypass: bypass already attached")
    if any(p.requires_grad for p in model.backbone.parameters()):
        raise StateError("attach_bypass: backbone must be frozen first")
    cfg = model.cfg
    branches = nn.ModuleDict(
        {
            "v": BypassBranch(cfg, cfg.video_dim),
            "a": BypassBranch(cfg, cfg.audio_dim),
        }
    )
    d = cfg.d_model

    def copy_mha(dst: MultiheadAttention, src: MultiheadAttention):
        dst.load_state_dict(src.state_dict())

    with torch.no_grad():
        for m, embedder in (("v", model.backbone.video_in), ("a", model.backbone.audio_in)):
            branch = branches[m]
            latent_dim = embedder.in_features
            branch.ctx.proj.weight[:, :latent_dim] = embedder.weight
            branch.ctx.proj.weight[:, latent_dim] = rng.split(
                f"attach/{m}/mask_col"
            ).normal((d,), std=0.02)
            branch.ctx.proj.bias.copy_(embedder.bias)
            for j, block in enumerate(branch.blocks):
                src = model.backbone.layer[2 * j + 1]  # backbone layer 2(j+1), 1-based
                if m == "v":
                    copy_mha(block.self_attn, src.v_self)
                    copy_mha(block.text_attn, src.v_text)
                    block.ffn.load_state_dict(src.v_ffn.state_dict())
                    src_mod = src.mod_v
                else:
                    copy_mha(block.self_attn, src.a_self)
                    copy_mha(block.text_attn, src.a_text)
                    block.ffn.load_state_dict(src.a_ffn.state_dict())
                    src_mod = src.mod_a
                src_w = src_mod.weight.view(4, 3 * d, d)
                src_b = src_mod.bias.view(4, 3 * d)
                dst_w = block.mod.weight.view(3, 3 * d, d)
                dst_b = block.mod.bias.view(3, 3 * d)
                for backbone_sub, bypass_sub in BYPASS_SUB_OF_BACKBONE.items():
                    dst_w[bypass_sub] = src_w[backbone_sub]
                    dst_b[bypass_sub] = src_b[backbone_sub]
            for proj in branch.out_proj:
                proj.weight.zero_()
                proj.bias.zero_()
    for p in branches.parameters():
        p.requires_grad_(True)
    model.bypass = branches
    return model


def trainable_params(model: JointModel, phase: str) -> dict[str, nn.Parameter]:
    """Parameter partition: 'pretrain' owns the backbone, 'control' the bypass."""
    if phase == "pretrain":
        return {f"backbone.{n}": p for n, p in model.backbone.named_parameters()}
    if phase == "control":
        if model.bypass is None:
            raise StateError("trainable_params: control phase requires attached bypass")
        return {f"bypass.{n}": p for n, p in model.bypass.named_parameters()}
    raise ConfigError(f"unknown phase {phase!r}")


def set_phase(model: JointModel, phase: str):
    """Set requires_grad flags to match the phase's trainable partition."""
    if phase == "pretrain":
        for p in model.backbone.parameters():
            p.requires_grad_(True)
        if model.bypass is not None:
            for p in model.bypass.parameters():
                p.requires_grad_(False)
    elif phase == "control":
        if model.bypass is None:
            raise StateError("set_phase: control phase requires attached bypass")
        freeze_backbone(model)
        for p in model.bypass.parameters():
            p.requires_grad_(True)
    else:
        raise ConfigError(f"unknown phase {phase!r}")
