"""Numeric foundations: deterministic RNG, attention primitives, AdamW, schedules.

The heavy lifting (dense math, autodiff) is delegated to torch on CPU in
float32; the functions here pin down the contracts the rest of the package
relies on: bitwise-reproducible random streams keyed by string labels,
64-bit accumulation where tests demand it, and an optimizer whose state can
be round-tripped through checkpoints.
"""

from __future__ import annotations

import hashlib
import math
from typing import Callable, Iterable

import numpy as np
import torch

from .errors import ConfigError, InputError, ShapeError


class Rng:
    """Counter-based splittable random stream.

    A stream is identified by (seed, label path). `split(label)` derives an
    independent child stream; the same (seed, path, draw order) produces the
    same values on every platform, independent of any global RNG state.
    """

    def __init__(self, seed: int, _path: str = ""):
        self.seed = int(seed)
        self.path = _path
        digest = hashlib.blake2b(
            f"{self.seed}|{_path}".encode(), digest_size=16
        ).digest()
        key = int.from_bytes(digest, "little")
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def split(self, label) -> "Rng":
        sep = "/" if self.path else ""
        return Rng(self.seed, f"{self.path}{sep}{label}")

    def normal(self, shape, std: float = 1.0, mean: float = 0.0) -> torch.Tensor:
        arr = self._gen.standard_normal(size=tuple(shape), dtype=np.float64)
        return torch.from_numpy((arr * std + mean).astype(np.float32))

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> torch.Tensor:
        arr = self._gen.uniform(low, high, size=tuple(shape))
        return torch.from_numpy(arr.astype(np.float32))

    def random(self) -> float:
        """One uniform draw in [0, 1)."""
        return float(self._gen.uniform(0.0, 1.0))

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        return self._gen.integers(low, high, size=tuple(shape))

    def choice(self, n: int) -> int:
        return int(self._gen.integers(0, n))

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Matrix product with 64-bit accumulation, rounded back to float32."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"matmul: inner dimensions disagree: {tuple(a.shape)} x {tuple(b.shape)}"
        )
    return (a.double() @ b.double()).float()


def softmax(x: torch.Tensor, axis: int) -> torch.Tensor:
    """Numerically stable softmax (max-subtraction) along `axis`."""
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax: axis {axis} invalid for rank {x.ndim}")
    shifted = x - x.amax(dim=axis, keepdim=True)
    e = shifted.exp()
    return e / e.sum(dim=axis, keepdim=True)


def layer_norm(
    x: torch.Tensor, gain: torch.Tensor, bias: torch.Tensor, eps: float = 1e-5
) -> torch.Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError("layer_norm: gain/bias must match the last axis")
    mu = x.mean(dim=-1, keepdim=True)
    var = x.var(dim=-1, keepdim=True, unbiased=False)
    return (x - mu) / torch.sqrt(var + eps) * gain + bias


def attention(
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    heads: int,
    key_mask: torch.Tensor | None = None,
) -> torch.Tensor:
    """Multi-head scaled dot-product attention.

    q: [..., n_q, d], k: [..., n_k, d], v: [..., n_k, d_v]; d and d_v must be
    divisible by `heads`. `key_mask` (bool, [..., n_k], True = attendable)
    masks logits before the softmax; rows with no attendable key fall back to
    attending over every key rather than producing NaN.
    """
    d = q.shape[-1]
    d_v = v.shape[-1]
    if d % heads or d_v % heads:
        raise ConfigError(f"attention: heads={heads} must divide d={d} and d_v={d_v}")
    if k.shape[-1] != d or k.shape[-2] != v.shape[-2]:
        raise ShapeError("attention: k/v geometry mismatch")

    def split(t, dim):
        return t.reshape(*t.shape[:-1], heads, dim // heads).transpose(-3, -2)

    qh, kh, vh = split(q, d), split(k, d), split(v, d_v)
    logits = qh @ kh.transpose(-1, -2) / math.sqrt(d / heads)
    if key_mask is not None:
        m = key_mask
        if not bool(m.any(dim=-1).all()):
            m = torch.where(m.any(dim=-1, keepdim=True), m, torch.ones_like(m))
        logits = logits.masked_fill(~m.unsqueeze(-2).unsqueeze(-2), -1e30)
    w = softmax(logits, axis=-1)
    out = w @ vh
    return out.transpose(-3, -2).reshape(*q.shape[:-1], d_v)


def cosine_lr(step: int, total: int, peak: float, warmup: int) -> float:
    """Linear warmup to `peak`, then half-cosine decay to 0 at `total`."""
    if warmup >= total:
        raise ConfigError(f"cosine_lr: warmup ({warmup}) must be < total ({total})")
    if not 0 <= step <= total:
        raise InputError(f"cosine_lr: step {step} outside [0, {total}]")
    if step < warmup:
        return peak * step / warmup
    return 0.5 * peak * (1.0 + math.cos(math.pi * (step - warmup) / (total - warmup)))


class AdamW:
    """AdamW with decoupled weight decay over named parameters.

    Only parameters with requires_grad=True are ever touched; moment tensors
    and the step counter are plain float32 tensors so they serialize into
    checkpoints unchanged.
    """

    def __init__(
        self,
        params: dict[str, torch.nn.Parameter],
        lr: float,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        if lr <= 0:
            raise ConfigError(f"AdamW: lr must be positive, got {lr}")
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.params = {n: p for n, p in params.items() if p.requires_grad}
        self.m = {n: torch.zeros_like(p) for n, p in self.params.items()}
        self.v = {n: torch.zeros_like(p) for n, p in self.params.items()}
        self.step_count = 0

    @torch.no_grad()
    def step(self, lr: float | None = None):
        lr = self.lr if lr is None else lr
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for name, p in self.params.items():
            # a never-touched grad is equivalent to an all-zero one; treating
            # them identically keeps resumed runs bit-compatible with
            # uninterrupted ones
            g = p.grad if p.grad is not None else torch.zeros_like(p)
            m, v = self.m[name], self.v[name]
            m.mul_(self.beta1).add_(g, alpha=1.0 - self.beta1)
            v.mul_(self.beta2).addcmul_(g, g, value=1.0 - self.beta2)
            update = (m / bc1) / ((v / bc2).sqrt() + self.eps)
            if self.weight_decay:
                p.add_(p, alpha=-lr * self.weight_decay)
            p.add_(update, alpha=-lr)

    @torch.no_grad()
    def zero_grad(self):
        for p in self.params.values():
            if p.grad is not None:
                p.grad.zero_()

    def state_tensors(self) -> dict[str, torch.Tensor]:
        out: dict[str, torch.Tensor] = {}
        for name in self.params:
            out[f"opt.m.{name}"] = self.m[name]
            out[f"opt.v.{name}"] = self.v[name]
        out["opt.step"] = torch.tensor([float(self.step_count)])
        return out

    def load_state_tensors(self, tensors: dict[str, torch.Tensor]):
        for name in self.params:
            if f"opt.m.{name}" in tensors:
                self.m[name] = tensors[f"opt.m.{name}"].clone()
                self.v[name] = tensors[f"opt.v.{name}"].clone()
        if "opt.step" in tensors:
            self.step_count = int(tensors["opt.step"].item())


def grad_check(
    f: Callable[[], torch.Tensor],
    params: Iterable[torch.Tensor],
    eps: float = 1e-4,
    max_coords: int = 200,
    rng: Rng | None = None,
) -> float:
    """Max relative error of analytic gradients vs central differences.

    `f` is re-evaluated after each perturbation, so it must be a pure function
    of `params`. Everything runs in the dtype of the parameters; callers that
    need the tight tolerance should pass float64 parameters. Coordinates are
    sampled (deterministically) when a parameter set is too large to sweep.
    """
    params = [p for p in params if p.requires_grad]
    if not params:
        raise InputError("grad_check: no differentiable parameters")
    rng = rng or Rng(0).split("grad_check")

    loss = f()
    if loss.ndim != 0:
        raise InputError("grad_check: f must be scalar-valued")
    grads = torch.autograd.grad(loss, params, allow_unused=True)

    coords: list[tuple[int, int]] = []
    for i, p in enumerate(params):
        n = p.numel()
        take = min(n, max(1, max_coords // len(params)))
        if take >= n:
            idxs = range(n)
        else:
            idxs = sorted(set(int(j) for j in rng.integers(0, n, (take,))))
        coords.extend((i, j) for j in idxs)

    worst = 0.0
    with torch.no_grad():
        for i, j in coords:
            p = params[i]
            flat = p.view(-1)
            orig = flat[j].item()
            flat[j] = orig + eps
            hi = f().item()
            flat[j] = orig - eps
            lo = f().item()
            flat[j] = orig
            if not (math.isfinite(hi) and math.isfinite(lo)):
                raise InputError("grad_check: non-finite perturbed evaluation")
            numeric = (hi - lo) / (2.0 * eps)
            analytic = 0.0 if grads[i] is None else grads[i].view(-1)[j].item()
            denom = max(abs(numeric), abs(analytic), 1e-8)
            worst = max(worst, abs(numeric - analytic) / denom)
    return worst
