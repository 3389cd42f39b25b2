"""Raw media dump formats: binary PPM (P6) frames and 16-bit PCM WAV."""

from __future__ import annotations

import wave
from pathlib import Path

import numpy as np

from .errors import FormatError


def write_ppm(path, frame: np.ndarray):
    """Write one [h, w, 3] float frame in [0, 1] as a binary P6 PPM."""
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim != 3 or frame.shape[2] != 3:
        raise FormatError(f"write_ppm: expected [h, w, 3], got {frame.shape}")
    h, w, _ = frame.shape
    data = np.clip(np.rint(frame * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(data.tobytes())


def read_ppm(path) -> np.ndarray:
    """Read a binary P6 PPM into an [h, w, 3] float array in [0, 1]."""
    raw = Path(path).read_bytes()
    if not raw.startswith(b"P6"):
        raise FormatError(f"{path}: not a P6 PPM")
    # header = magic, width, height, maxval; whitespace/comment separated
    fields: list[bytes] = []
    i = 2
    while len(fields) < 3:
        while i < len(raw) and raw[i : i + 1].isspace():
            i += 1
        if i < len(raw) and raw[i : i + 1] == b"#":
            while i < len(raw) and raw[i] != 0x0A:
                i += 1
            continue
        j = i
        while j < len(raw) and not raw[j : j + 1].isspace():
            j += 1
        fields.append(raw[i:j])
        i = j
    i += 1  # single whitespace after maxval
    try:
        w, h, maxval = (int(f) for f in fields)
    except ValueError as exc:
        raise FormatError(f"{path}: bad PPM header") from exc
    if maxval != 255:
        raise FormatError(f"{path}: only maxval 255 supported")
    body = raw[i : i + w * h * 3]
    if len(body) != w * h * 3:
        raise FormatError(f"{path}: truncated pixel data")
    arr = np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3)
    return arr.astype(np.float32) / 255.0


def write_frames(dir_path, frames: np.ndarray):
    """Write frames[t, h, w, 3] as <dir>/00000.ppm, 00001.ppm, ..."""
    dir_path = Path(dir_path)
    dir_path.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(frames):
        write_ppm(dir_path / f"{i:05d}.ppm", frame)


def read_frames(dir_path) -> np.ndarray:
    paths = sorted(Path(dir_path).glob("*.ppm"))
    if not paths:
        raise FormatError(f"{dir_path}: no PPM frames found")
    return np.stack([read_ppm(p) for p in paths])


def write_wav(path, wave_data: np.ndarray, sample_rate: int):
    """Write a mono float waveform in [-1, 1] as 16-bit little-endian PCM."""
    wave_data = np.asarray(wave_data, dtype=np.float64).reshape(-1)
    pcm = np.clip(np.rint(wave_data * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(sample_rate)
        fh.writeframes(pcm.tobytes())


def read_wav(path) -> tuple[np.ndarray, int]:
    with wave.open(str(path), "rb") as fh:
        if fh.getnchannels() != 1 or fh.getsampwidth() != 2:
            raise FormatError(f"{path}: expected mono 16-bit PCM")
        sr = fh.getframerate()
        pcm = np.frombuffer(fh.readframes(fh.getnframes()), dtype="<i2")
    return pcm.astype(np.float32) / 32767.0, sr
