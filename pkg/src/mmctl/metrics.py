"""Analytic evaluation oracles: pitch tracking, centroids, depth MAE, similarity.

These replace the pretrained metric models of full-scale evaluation suites
and are only valid in the synthetic square-and-tone world; every reported
name carries an "analogue" suffix in rendered reports to make that explicit.
All functions are pure: identical media in, identical numbers out.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError

SILENCE_EPS = 1e-6
SUBJECT_THRESHOLD = 0.15       # above estimated background level
DEPTH_RETHRESHOLD = 0.5        # documented constant of the depth metric
DEPTH_OBJECT = 0.8
DEPTH_BACKGROUND = 0.2
N_HARMONICS = 4
_ZERO_PAD = 8                  # DFT zero-padding factor for sub-bin peaks
FREQ_MIN = 20.0                # plausible fundamental band (Hz); peaks outside
FREQ_MAX = 120.0               # are overtones or noise by construction


def _spectrum(window: np.ndarray) -> np.ndarray:
    tapered = window * np.hanning(len(window))
    return np.abs(np.fft.rfft(tapered, n=len(window) * _ZERO_PAD))


def _peak_freq(window: np.ndarray, sr: int) -> float:
    """Fundamental frequency estimate; 0.0 = silence.

    The global magnitude peak can land on an overtone when scalloping loss
    hits the fundamental harder, so the estimate is the lowest-frequency
    local maximum whose magnitude is within a factor of the strongest peak;
    a Hann taper keeps scalloping small and a parabolic fit around the chosen
    bin recovers sub-bin precision.
    """
    if np.max(np.abs(window)) < SILENCE_EPS:
        return 0.0
    mag = _spectrum(window)
    n = len(window) * _ZERO_PAD
    lo = max(1, int(np.ceil(FREQ_MIN * n / sr)))
    hi = min(len(mag) - 1, int(np.floor(FREQ_MAX * n / sr)))
    band = mag[lo : hi + 1]
    peaks = lo + np.flatnonzero(
        (band >= mag[lo - 1 : hi]) & (band >= mag[lo + 1 : hi + 2])
        & (band >= 0.6 * band.max())
    )
    p = int(peaks[0]) if len(peaks) else lo + int(np.argmax(band))
    delta = 0.0
    if 1 <= p < len(mag) - 1:
        a, b, c = mag[p - 1], mag[p], mag[p + 1]
        denom = a - 2 * b + c
        if abs(denom) > 1e-12:
            delta = 0.5 * (a - c) / denom
    return (p + delta) * sr / n


def dominant_freq(wave: np.ndarray, sr: int, window: int, hop: int | None = None) -> np.ndarray:
    """Dominant frequency (Hz) per hop-aligned window; silent windows report 0."""
    wave = np.asarray(wave, dtype=np.float64).reshape(-1)
    hop = window if hop is None else hop
    if window > len(wave):
        raise ShapeError(f"dominant_freq: window {window} exceeds wave length {len(wave)}")
    starts = range(0, len(wave) - window + 1, hop)
    return np.array([_peak_freq(wave[s : s + window], sr) for s in starts])


def _intensity(frame: np.ndarray) -> np.ndarray:
    """Per-pixel subject intensity (max over channels; robust to hue)."""
    frame = np.asarray(frame, dtype=np.float64)
    return frame.max(axis=-1) if frame.ndim == 3 else frame


def centroid(frame: np.ndarray) -> tuple[float, float] | None:
    """Intensity-weighted subject center (x, y), or None when no subject."""
    inten = _intensity(frame)
    background = float(np.median(inten))
    excess = inten - background - SUBJECT_THRESHOLD
    mask = excess > 0
    if not mask.any():
        return None
    w = np.where(mask, inten - background, 0.0)
    ys, xs = np.mgrid[0 : inten.shape[0], 0 : inten.shape[1]]
    total = w.sum()
    return float((xs * w).sum() / total), float((ys * w).sum() / total)


def rederive_depth(frames: np.ndarray) -> np.ndarray:
    """Threshold generated frames back into the two-level depth convention."""
    inten = np.stack([_intensity(f) for f in np.asarray(frames)])
    return np.where(inten > DEPTH_RETHRESHOLD, DEPTH_OBJECT, DEPTH_BACKGROUND)


def depth_mae(d_in: np.ndarray, d_out: np.ndarray) -> float:
    d_in = np.asarray(d_in, dtype=np.float64)
    d_out = np.asarray(d_out, dtype=np.float64)
    if d_in.shape != d_out.shape:
        raise ShapeError(f"depth_mae: geometry mismatch {d_in.shape} vs {d_out.shape}")
    return float(np.abs(d_in - d_out).mean())


def _subject_rgb(frames: np.ndarray) -> np.ndarray | None:
    """Mean subject-region RGB over frames with a detectable subject."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim == 3:
        frames = frames[None]
    vecs = []
    for f in frames:
        inten = _intensity(f)
        background = float(np.median(inten))
        mask = inten - background > SUBJECT_THRESHOLD
        if mask.any():
            vecs.append(f[mask].mean(axis=0))
    if len(vecs) * 2 < len(frames):
        return None
    return np.mean(vecs, axis=0)


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < 1e-12 or nb < 1e-12:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def identity_sim(frames: np.ndarray, ref_image: np.ndarray) -> float | None:
    """Cosine similarity of mean subject-region RGB vectors, or None."""
    gen = _subject_rgb(frames)
    ref = _subject_rgb(ref_image)
    if gen is None or ref is None:
        return None
    return _cosine(gen, ref)


def harmonic_profile(wave: np.ndarray, sr: int, window: int) -> np.ndarray | None:
    """Pitch-normalized harmonic energy profile (h = 1..N_HARMONICS)."""
    wave = np.asarray(wave, dtype=np.float64).reshape(-1)
    profiles = []
    for s in range(0, len(wave) - window + 1, window):
        chunk = wave[s : s + window]
        f0 = _peak_freq(chunk, sr)
        if f0 <= 0.0:
            continue
        mag = _spectrum(chunk)
        n = window * _ZERO_PAD
        prof = []
        for h in range(1, N_HARMONICS + 1):
            b = int(round(h * f0 * n / sr))
            if b >= len(mag):
                prof.append(0.0)
            else:
                lo, hi = max(b - 1, 0), min(b + 2, len(mag))
                prof.append(float((mag[lo:hi] ** 2).sum()))
        profiles.append(prof)
    if not profiles:
        return None
    avg = np.mean(profiles, axis=0)
    norm = np.linalg.norm(avg)
    return avg / norm if norm > 1e-12 else None


def timbre_sim(wave: np.ndarray, ref_wave: np.ndarray, sr: int, window: int) -> float | None:
    """Cosine similarity of normalized harmonic profiles, or None on silence."""
    a = harmonic_profile(wave, sr, window)
    b = harmonic_profile(ref_wave, sr, window)
    if a is None or b is None:
        return None
    return _cosine(a, b)


def pearson(x: np.ndarray, y: np.ndarray) -> float | None:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    sx, sy = x.std(), y.std()
    if sx < 1e-9 or sy < 1e-9:
        return None
    return float(((x - x.mean()) * (y - y.mean())).mean() / (sx * sy))


def sync_corr(wave: np.ndarray, frames: np.ndarray, sr: int, samples_per_frame: int) -> float | None:
    """Pearson correlation of per-frame pitch and per-frame centroid x."""
    freqs = dominant_freq(wave, sr, samples_per_frame)
    xs, fs = [], []
    for i, frame in enumerate(np.asarray(frames)):
        if i >= len(freqs) or freqs[i] <= 0.0:
            continue
        c = centroid(frame)
        if c is None:
            continue
        xs.append(c[0])
        fs.append(freqs[i])
    if len(xs) < 4:
        return None
    return pearson(np.array(xs), np.array(fs))


@dataclass
class MetricReport:
    """Averaged metric suite over a set of (generated, reference) sample pairs."""

    depth_mae: float = float("nan")
    identity_sim: float = float("nan")
    timbre_sim: float = float("nan")
    sync_corr: float = float("nan")
    n_samples: int = 0
    n_unmeasurable: dict[str, int] = field(default_factory=dict)

    def lines(self) -> list[str]:
        return [
            f"depth_mae_analogue={self.depth_mae:.6f}",
            f"depth_mae_x100_analogue={self.depth_mae * 100:.4f}",
            f"identity_sim_analogue={self.identity_sim:.6f}",
            f"timbre_sim_analogue={self.timbre_sim:.6f}",
            f"sync_corr_analogue={self.sync_corr:.6f}",
            f"n_samples={self.n_samples}",
        ]

    def as_dict(self) -> dict:
        return {
            "depth_mae_analogue": self.depth_mae,
            "depth_mae_x100_analogue": self.depth_mae * 100,
            "identity_sim_analogue": self.identity_sim,
            "timbre_sim_analogue": self.timbre_sim,
            "sync_corr_analogue": self.sync_corr,
            "n_samples": self.n_samples,
            "n_unmeasurable": dict(self.n_unmeasurable),
        }


def _mean_or_nan(values: list[float]) -> float:
    return float(np.mean(values)) if values else float("nan")


def aggregate(per_sample: list[dict]) -> MetricReport:
    """Fold per-sample metric dicts (None = unmeasurable, excluded)."""
    report = MetricReport(n_samples=len(per_sample))
    for key in ("depth_mae", "identity_sim", "timbre_sim", "sync_corr"):
        values = [d[key] for d in per_sample if d.get(key) is not None]
        setattr(report, key, _mean_or_nan(values))
        missing = sum(1 for d in per_sample if d.get(key) is None)
        if missing:
            report.n_unmeasurable[key] = missing
    return report
