"""Versioned binary checkpoint container ("MMCK") for named float32 tensors.

Layout (all integers little-endian):

    magic  b"MMCK"
    u32    format version (currently 1)
    u64    metadata length, then that many bytes of canonical UTF-8 JSON
    u32    tensor count
    per tensor, sorted by name:
        u16 name length, name bytes (UTF-8)
        u32 rank, rank * u64 shape
        u64 payload offset (bytes, relative to payload start)
    u64    payload length
    payload: concatenated float32 little-endian tensor data

Saving a loaded checkpoint reproduces the file byte for byte; version
mismatches are refused, never migrated.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from .errors import FormatError, StateError
from .model import JointModel, ModelConfig, attach_bypass, freeze_backbone
from .numerics import AdamW, Rng

MAGIC = b"MMCK"
VERSION = 1


def _canonical_meta(metadata: dict) -> bytes:
    return json.dumps(metadata, sort_keys=True, separators=(",", ":")).encode()


def save_checkpoint(path, tensors: dict[str, torch.Tensor], metadata: dict):
    names = sorted(tensors)
    meta = _canonical_meta(metadata)
    header = [MAGIC, struct.pack("<I", VERSION), struct.pack("<Q", len(meta)), meta]
    header.append(struct.pack("<I", len(names)))
    payload_parts = []
    offset = 0
    for name in names:
        arr = tensors[name].detach().to(torch.float32).contiguous().numpy()
        data = arr.astype("<f4", copy=False).tobytes()
        nb = name.encode()
        header.append(struct.pack("<H", len(nb)))
        header.append(nb)
        header.append(struct.pack("<I", arr.ndim))
        header.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        header.append(struct.pack("<Q", offset))
        payload_parts.append(data)
        offset += len(data)
    header.append(struct.pack("<Q", offset))
    Path(path).write_bytes(b"".join(header) + b"".join(payload_parts))


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw = raw
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise FormatError(f"{self.path}: truncated checkpoint")
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def u(self, fmt: str) -> int:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))[0]


def load_checkpoint(path) -> tuple[dict[str, torch.Tensor], dict]:
    r = _Reader(Path(path).read_bytes(), path)
    if r.take(4) != MAGIC:
        raise FormatError(f"{path}: bad magic, not an MMCK checkpoint")
    version = r.u("<I")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    meta_len = r.u("<Q")
    try:
        metadata = json.loads(r.take(meta_len).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt metadata block") from exc
    count = r.u("<I")
    entries = []
    for _ in range(count):
        name = r.take(r.u("<H")).decode()
        rank = r.u("<I")
        shape = struct.unpack(f"<{rank}Q", r.take(8 * rank))
        offset = r.u("<Q")
        entries.append((name, shape, offset))
    payload_len = r.u("<Q")
    payload = r.take(payload_len)
    if r.pos != len(r.raw):
        raise FormatError(f"{path}: trailing bytes after payload")

    tensors: dict[str, torch.Tensor] = {}
    spans = []
    for name, shape, offset in entries:
        nbytes = 4 * int(np.prod(shape, dtype=np.int64)) if len(shape) else 4
        if offset + nbytes > payload_len:
            raise FormatError(f"{path}: tensor {name!r} out of payload bounds")
        spans.append((offset, offset + nbytes, name))
        arr = np.frombuffer(payload, dtype="<f4", count=nbytes // 4, offset=offset)
        tensors[name] = torch.from_numpy(arr.copy().reshape(shape))
    spans.sort()
    for (s0, e0, n0), (s1, e1, n1) in zip(spans, spans[1:]):
        if s1 < e0:
            raise FormatError(f"{path}: overlapping tensors {n0!r} and {n1!r}")
    return tensors, metadata


def inspect_lines(path) -> list[str]:
    tensors, metadata = load_checkpoint(path)
    lines = [f"checkpoint {path}", f"format version {VERSION}"]
    lines += [f"meta {k} = {v}" for k, v in sorted(metadata.items())]
    total = 0
    for name in sorted(tensors):
        t = tensors[name]
        total += t.numel()
        lines.append(f"tensor {name} shape={tuple(t.shape)} numel={t.numel()}")
    lines.append(f"total parameters {total}")
    lines.append(f"backbone checksum {backbone_checksum_of(tensors)}")
    return lines


def backbone_checksum_of(tensors: dict[str, torch.Tensor]) -> str:
    """SHA-256 over the serialized backbone tensors, order-independent of dict."""
    h = hashlib.sha256()
    for name in sorted(tensors):
        if not name.startswith("backbone."):
            continue
        t = tensors[name].detach().to(torch.float32).contiguous()
        h.update(name.encode())
        h.update(struct.pack(f"<{t.ndim}Q", *t.shape) if t.ndim else b"")
        h.update(t.numpy().astype("<f4", copy=False).tobytes())
    return h.hexdigest()


def model_tensors(model: JointModel) -> dict[str, torch.Tensor]:
    return {name: p.detach() for name, p in model.named_parameters()}


def backbone_checksum(model: JointModel) -> str:
    return backbone_checksum_of(model_tensors(model))


def save_model(
    path,
    model: JointModel,
    phase: str,
    step: int,
    extra_meta: dict | None = None,
    opt: AdamW | None = None,
):
    tensors = dict(model_tensors(model))
    if opt is not None:
        tensors.update(opt.state_tensors())
    metadata = {
        "model_config": asdict(model.cfg),
        "phase": phase,
        "step": step,
        "bypass_attached": model.bypass is not None,
        "backbone_checksum": backbone_checksum_of(tensors),
    }
    if extra_meta:
        metadata.update(extra_meta)
    save_checkpoint(path, tensors, metadata)


def load_model(path) -> tuple[JointModel, dict, dict[str, torch.Tensor]]:
    """Rebuild a JointModel from a checkpoint; verifies the backbone checksum."""
    tensors, metadata = load_checkpoint(path)
    cfg = ModelConfig(**metadata["model_config"])
    model = JointModel(cfg)
    if metadata.get("bypass_attached"):
        freeze_backbone(model)
        attach_bypass(model, Rng(0).split("load_model"))
    params = dict(model.named_parameters())
    missing = sorted(set(params) - set(tensors))
    if missing:
        raise FormatError(f"{path}: missing tensors {missing[:5]}")
    with torch.no_grad():
        for name, p in params.items():
            t = tensors[name]
            if tuple(t.shape) != tuple(p.shape):
                raise FormatError(
                    f"{path}: shape mismatch for {name}: {tuple(t.shape)} vs {tuple(p.shape)}"
                )
            p.copy_(t)
    if backbone_checksum(model) != metadata["backbone_checksum"]:
        raise StateError(f"{path}: backbone checksum mismatch after load")
    return model, metadata, tensors


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
