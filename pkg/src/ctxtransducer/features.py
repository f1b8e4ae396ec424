"""Acoustic front end: log-mel filterbank features, frame stacking, SpecAugment.

Synthetic tasks skip extraction and hand feature matrices straight to
:func:`stack_downsample` or to the model.
"""

from __future__ import annotations

import wave
from dataclasses import dataclass, field

import numpy as np

D_BASE = 64
FRAME_SHIFT_MS = 10
DOWNSAMPLE = 3
ENCODER_FRAME_MS = FRAME_SHIFT_MS * DOWNSAMPLE


class InvalidInputError(ValueError):
    pass


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if int(self.sample_rate) <= 0:
            raise InvalidInputError("sample_rate must be positive")
        self.sample_rate = int(self.sample_rate)

    @property
    def power(self) -> float:
        return float(np.sum(self.samples**2))


def read_wav(path) -> Waveform:
    """Read 16-bit signed little-endian mono PCM; samples scaled to [-1, 1)."""
    with wave.open(str(path), "rb") as fh:
        if fh.getnchannels() != 1 or fh.getsampwidth() != 2:
            raise InvalidInputError(f"{path}: expected 16-bit mono PCM")
        raw = fh.readframes(fh.getnframes())
        sr = fh.getframerate()
    return Waveform(np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0, sr)


def write_wav(path, w: Waveform) -> None:
    pcm = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(w.sample_rate)
        fh.writeframes(pcm.tobytes())


@dataclass(frozen=True)
class LogMelConfig:
    window_ms: float = 25.0
    hop_ms: float = FRAME_SHIFT_MS
    n_mels: int = D_BASE
    fmin: float = 20.0
    fmax: float | None = None  # Nyquist
    log_floor: float = 1e-10


@dataclass
class FeatureMatrix:
    frames: np.ndarray
    frame_shift_ms: float = FRAME_SHIFT_MS
    origin: str = "extracted"

    def __post_init__(self):
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise InvalidInputError("feature matrix needs at least one frame")
        if not np.all(np.isfinite(self.frames)):
            raise InvalidInputError("feature matrix has non-finite entries")
        if self.origin not in ("extracted", "synthetic"):
            raise InvalidInputError(f"unknown feature origin {self.origin!r}")


@dataclass
class StackedFeatures:
    frames: np.ndarray
    downsample_factor: int = DOWNSAMPLE
    encoder_frame_ms: float = ENCODER_FRAME_MS


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_centers(n_mels: int, fmin: float, fmax: float) -> np.ndarray:
    points = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    return points[1:-1]


def mel_filterbank(sample_rate: int, n_fft: int, n_mels: int, fmin: float, fmax: float) -> np.ndarray:
    """Triangular filters with unit peak, shape ``(n_mels, n_fft // 2 + 1)``."""
    points = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lo, center, hi = points[:-2, None], points[1:-1, None], points[2:, None]
    rising = (freqs - lo) / (center - lo)
    falling = (hi - freqs) / (hi - center)
    return np.maximum(0.0, np.minimum(rising, falling))


def _frame_params(sample_rate: int, config: LogMelConfig):
    win = int(round(sample_rate * config.window_ms / 1000.0))
    hop = int(round(sample_rate * config.hop_ms / 1000.0))
    n_fft = 1 << (win - 1).bit_length()
    return win, hop, n_fft


def frame_signal(samples: np.ndarray, win: int, hop: int) -> np.ndarray:
    n = (len(samples) - win) // hop + 1
    idx = np.arange(win)[None, :] + hop * np.arange(n)[:, None]
    return samples[idx]


def extract_logmel(w: Waveform, config: LogMelConfig = LogMelConfig()) -> FeatureMatrix:
    if w.sample_rate not in (8000, 16000):
        raise InvalidInputError(f"sample rate {w.sample_rate} unsupported (8000 or 16000)")
    win, hop, n_fft = _frame_params(w.sample_rate, config)
    if win < hop:
        raise InvalidInputError("window length must be at least the hop length")
    if len(w.samples) < win:
        raise InvalidInputError(f"waveform has {len(w.samples)} samples, shorter than one {win}-sample window")
    frames = frame_signal(w.samples, win, hop) * np.hanning(win + 2)[1:-1]
    power = np.abs(np.fft.rfft(frames, n=n_fft, axis=1)) ** 2
    fmax = config.fmax if config.fmax is not None else w.sample_rate / 2.0
    fb = mel_filterbank(w.sample_rate, n_fft, config.n_mels, config.fmin, fmax)
    return FeatureMatrix(np.log(power @ fb.T + config.log_floor), config.hop_ms, "extracted")


def stack_downsample(f: FeatureMatrix | np.ndarray, factor: int = DOWNSAMPLE) -> StackedFeatures:
    """Concatenate groups of ``factor`` frames; a short final group repeats the last frame."""
    x = f.frames if isinstance(f, FeatureMatrix) else np.asarray(f)
    if x.ndim != 2 or x.shape[0] < 1:
        raise InvalidInputError("need at least one input frame")
    T_in, D = x.shape
    T = -(-T_in // factor)
    pad = T * factor - T_in
    if pad:
        x = np.concatenate([x, np.repeat(x[-1:], pad, axis=0)], axis=0)
    shift = f.frame_shift_ms if isinstance(f, FeatureMatrix) else FRAME_SHIFT_MS
    return StackedFeatures(x.reshape(T, factor * D), factor, shift * factor)


@dataclass(frozen=True)
class AugmentPolicy:
    n_freq_masks: int = 2
    max_freq_width: int = 24
    time_mask_max_width: int = 25
    time_mask_rate: float = 0.004
    max_total_time_masked_fraction: float = 0.2
    rng_seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.max_total_time_masked_fraction <= 1.0:
            raise ValueError("max_total_time_masked_fraction must lie in [0, 1]")
        if self.time_mask_rate < 0 or self.n_freq_masks < 0 or self.max_freq_width < 0:
            raise ValueError("mask counts and widths must be non-negative")
        if self.time_mask_max_width < 1:
            raise ValueError("time_mask_max_width must be >= 1")


def n_time_masks(T: int, policy: AugmentPolicy) -> int:
    if policy.time_mask_rate == 0 or T < 2:
        return 0
    return max(1, int(np.floor(T * policy.time_mask_rate + 0.5)))


@dataclass
class AugmentResult:
    frames: np.ndarray
    time_mask: np.ndarray = field(repr=False)
    freq_bins: list


def spec_augment_frames(
    x: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator, n_stack: int = DOWNSAMPLE
) -> AugmentResult:
    """Masked copy of ``x`` with the time mask and masked base bins; fill is the per-column mean."""
    x = np.asarray(x)
    T, D = x.shape
    d_base = D // n_stack
    fill = x.mean(axis=0)
    out = x.copy()

    time_mask = np.zeros(T, dtype=bool)
    budget = int(np.floor(policy.max_total_time_masked_fraction * T))
    for _ in range(n_time_masks(T, policy)):
        width = min(int(rng.integers(1, policy.time_mask_max_width + 1)), T)
        start = int(rng.integers(0, T - width + 1))
        new = np.flatnonzero(~time_mask[start : start + width]) + start
        room = budget - int(time_mask.sum())
        time_mask[new[: max(room, 0)]] = True
    out[time_mask] = fill

    freq_bins = []
    for _ in range(policy.n_freq_masks):
        width = min(int(rng.integers(0, policy.max_freq_width + 1)), d_base)
        f0 = int(rng.integers(0, d_base - width + 1))
        bins = list(range(f0, f0 + width))
        freq_bins.extend(bins)
        cols = [c * d_base + b for c in range(n_stack) for b in bins]
        out[:, cols] = fill[cols]
    return AugmentResult(out, time_mask, sorted(set(freq_bins)))


def spec_augment(f, p: AugmentPolicy, n_stack: int = DOWNSAMPLE, seed: int | None = None):
    """Apply adaptive SpecAugment (training only). Accepts StackedFeatures or a bare matrix."""
    rng = np.random.default_rng(p.rng_seed if seed is None else seed)
    x = f.frames if isinstance(f, StackedFeatures) else f
    res = spec_augment_frames(x, p, rng, n_stack)
    if isinstance(f, StackedFeatures):
        return StackedFeatures(res.frames, f.downsample_factor, f.encoder_frame_ms)
    return res.frames
