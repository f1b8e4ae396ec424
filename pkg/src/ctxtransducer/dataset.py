"""Utterance/segment records, the on-disk manifest, and the synthetic context-cue task.

Manifest format (UTF-8 JSON lines)::

    {"format": "ctxtransducer-manifest", "version": 1, "count": N}
    {"id": ..., "features": "feats/<id>.sgt", "segments": [[t_s, t_e, labels|null], ...],
     "condition": [...], "meta": {...}, "audio": "<wav path>"}     # meta/audio optional

Segment indices are inclusive and counted in encoder frames. ``labels`` is
``null`` for an untranscribed segment and a (possibly empty) list otherwise.
Feature paths are relative to the manifest's directory.
"""

from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .container import ContainerError, load_features, save_features
from .features import ENCODER_FRAME_MS, InvalidInputError, Waveform

CONDITIONS = ("clean", "background_speech", "speaker_change", "reverb_full", "reverb_segment")
MANIFEST_FORMAT = "ctxtransducer-manifest"
MANIFEST_VERSION = 1


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class SegmentRecord:
    t_s: int
    t_e: int
    labels: tuple[int, ...] | None = None

    @property
    def labeled(self) -> bool:
        return self.labels is not None

    @property
    def n_frames(self) -> int:
        return self.t_e - self.t_s + 1


@dataclass(eq=False)
class UtteranceRecord:
    id: str
    features: np.ndarray
    segments: list[SegmentRecord]
    condition: frozenset = frozenset({"clean"})
    meta: dict = field(default_factory=dict)
    audio: str | None = None

    def __post_init__(self):
        # float32 storage; float64 input is kept as is for exact gradient checks
        x = np.asarray(self.features)
        self.features = x if x.dtype == np.float64 else x.astype(np.float32)
        self.condition = frozenset(self.condition)
        validate_record(self)

    @property
    def n_frames(self) -> int:
        return self.features.shape[0]

    def labeled_segments(self) -> list[tuple[int, SegmentRecord]]:
        return [(i, s) for i, s in enumerate(self.segments) if s.labeled]

    def __eq__(self, other):
        if not isinstance(other, UtteranceRecord):
            return NotImplemented
        return (
            self.id == other.id
            and self.features.shape == other.features.shape
            and self.features.dtype == other.features.dtype
            and self.features.tobytes() == other.features.tobytes()
            and self.segments == other.segments
            and self.condition == other.condition
            and self.meta == other.meta
            and self.audio == other.audio
        )


def validate_record(r: UtteranceRecord) -> None:
    if r.features.ndim != 2 or r.features.shape[0] < 1:
        raise ManifestError(f"utterance {r.id!r}: features must be a non-empty (T, D) matrix")
    T = r.features.shape[0]
    prev_end = -1
    for i, s in enumerate(r.segments):
        if not 0 <= s.t_s <= s.t_e:
            raise ManifestError(f"utterance {r.id!r}: segment {i} has invalid span [{s.t_s}, {s.t_e}]")
        if s.t_e >= T:
            raise ManifestError(f"utterance {r.id!r}: segment {i} end {s.t_e} out of range for T={T}")
        if s.t_s <= prev_end:
            raise ManifestError(f"utterance {r.id!r}: segment {i} overlaps or precedes segment {i - 1}")
        if s.labels is not None and any(int(y) < 1 for y in s.labels):
            raise ManifestError(f"utterance {r.id!r}: segment {i} carries blank/negative label ids")
        prev_end = s.t_e
    unknown = set(r.condition) - set(CONDITIONS)
    if unknown:
        raise ManifestError(f"utterance {r.id!r}: unknown condition tags {sorted(unknown)}")


# ---------------------------------------------------------------------------
# manifest I/O

_SAFE = re.compile(r"[^A-Za-z0-9_.-]")


def _feature_relpath(uid: str) -> str:
    return f"feats/{_SAFE.sub('_', uid)}.sgt"


def write_manifest(records: list[UtteranceRecord], path) -> None:
    path = Path(path)
    root = path.parent
    (root / "feats").mkdir(parents=True, exist_ok=True)
    seen = set()
    lines = [json.dumps({"format": MANIFEST_FORMAT, "version": MANIFEST_VERSION, "count": len(records)})]
    for r in records:
        rel = _feature_relpath(r.id)
        if rel in seen:
            raise ManifestError(f"utterance {r.id!r}: duplicate id / feature path")
        seen.add(rel)
        save_features(root / rel, r.features)
        entry = {
            "id": r.id,
            "features": rel,
            "segments": [[s.t_s, s.t_e, None if s.labels is None else list(s.labels)] for s in r.segments],
            "condition": sorted(r.condition),
        }
        if r.meta:
            entry["meta"] = r.meta
        if r.audio is not None:
            entry["audio"] = r.audio
        lines.append(json.dumps(entry, sort_keys=True))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path) -> list[UtteranceRecord]:
    path = Path(path)
    text = path.read_text(encoding="utf-8").splitlines()
    if not text:
        raise ManifestError(f"{path}: empty file, missing header")
    try:
        header = json.loads(text[0])
    except json.JSONDecodeError as err:
        raise ManifestError(f"{path}: malformed header: {err}") from None
    if not isinstance(header, dict) or header.get("format") != MANIFEST_FORMAT:
        raise ManifestError(f"{path}: malformed header (not a {MANIFEST_FORMAT} file)")
    if header.get("version") != MANIFEST_VERSION:
        raise ManifestError(f"{path}: unsupported manifest version {header.get('version')!r}")
    body = [ln for ln in text[1:] if ln.strip()]
    if header.get("count") != len(body):
        raise ManifestError(f"{path}: header announces {header.get('count')} entries, found {len(body)}")
    records = []
    for lineno, line in enumerate(body, start=2):
        try:
            e = json.loads(line)
            uid = e["id"]
        except (json.JSONDecodeError, KeyError, TypeError) as err:
            raise ManifestError(f"{path}:{lineno}: malformed entry: {err}") from None
        try:
            feats = load_features(path.parent / e["features"])
            segs = [
                SegmentRecord(int(a), int(b), None if y is None else tuple(int(v) for v in y))
                for a, b, y in e["segments"]
            ]
            records.append(
                UtteranceRecord(
                    uid, feats, segs, frozenset(e.get("condition", [])), e.get("meta", {}), e.get("audio")
                )
            )
        except ManifestError:
            raise
        except (ContainerError, OSError, KeyError, TypeError, ValueError) as err:
            raise ManifestError(f"{path}:{lineno}: utterance {uid!r}: {err}") from None
    return records


def split_eval_conditions(records: list[UtteranceRecord]) -> dict[str, list[UtteranceRecord]]:
    subsets: dict[str, list[UtteranceRecord]] = {}
    for r in records:
        for tag in sorted(r.condition):
            subsets.setdefault(tag, []).append(r)
    return subsets


# ---------------------------------------------------------------------------
# synthetic context-cue task

@dataclass(frozen=True)
class ContextCueSpec:
    prefix_len_range: tuple[int, int] = (40, 120)
    segment_len_range: tuple[int, int] = (20, 60)
    cue_code_count: int = 2
    cue_bias_magnitude: float = 1.0
    n_symbols: int = 8
    ambiguous_fraction: float = 0.5
    noise_std: float = 0.3
    rng_seed: int = 0
    feature_dim: int = 16
    vocab_size: int = 10
    symbol_frames: tuple[int, int] = (3, 5)
    gap_frames: tuple[int, int] = (1, 2)
    symbol_magnitude: float = 1.0
    channel_bias_magnitude: float = 0.0
    speaker_change_fraction: float = 0.0
    background_speech_fraction: float = 0.0
    world_seed: int = 0

    def __post_init__(self):
        if self.cue_code_count < 2:
            raise ValueError("cue_code_count must be >= 2")
        if not 0.0 <= self.ambiguous_fraction <= 1.0:
            raise ValueError("ambiguous_fraction must lie in [0, 1]")
        if self.n_symbols > self.vocab_size - 1:
            raise ValueError("n_symbols must not exceed the number of non-blank labels")
        if self.feature_dim <= self.cue_code_count:
            raise ValueError("feature_dim must exceed cue_code_count (cue and symbol subspaces are disjoint)")
        amb = self.n_ambiguous
        if 0 < amb < self.cue_code_count:
            raise ValueError("need at least cue_code_count ambiguous symbols for cue-dependent bijections")
        for name in ("prefix_len_range", "segment_len_range", "symbol_frames", "gap_frames"):
            lo, hi = getattr(self, name)
            if not 0 <= lo <= hi:
                raise ValueError(f"{name} must be an ordered non-negative range")
        if self.prefix_len_range[0] < 1 or self.symbol_frames[0] < 1:
            raise ValueError("prefix and symbols need at least one frame")
        for name in ("speaker_change_fraction", "background_speech_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")

    @property
    def n_ambiguous(self) -> int:
        return int(round(self.ambiguous_fraction * self.n_symbols))


def symbol_label(spec: ContextCueSpec, symbol: int, cue: int) -> int:
    """Target label of ``symbol`` under cue ``cue``; ambiguous symbols use a cue-shifted bijection."""
    amb = spec.n_ambiguous
    if symbol < amb:
        return 1 + (symbol + cue) % amb
    return 1 + symbol


def ambiguous_labels(spec: ContextCueSpec) -> frozenset[int]:
    return frozenset(range(1, spec.n_ambiguous + 1))


@dataclass(frozen=True)
class TaskWorld:
    cue_vectors: np.ndarray      # (K, D), orthogonal, norm = cue_bias_magnitude
    symbol_patterns: np.ndarray  # (n_symbols, D), zero on the cue dims


def task_world(spec: ContextCueSpec) -> TaskWorld:
    """Fixed cue vectors and symbol patterns shared by every split drawn from ``spec``."""
    K, D = spec.cue_code_count, spec.feature_dim
    cues = np.zeros((K, D))
    cues[np.arange(K), np.arange(K)] = spec.cue_bias_magnitude
    rng = np.random.default_rng([spec.world_seed, 0x5EED])
    pats = np.zeros((spec.n_symbols, D))
    raw = rng.normal(size=(spec.n_symbols, D - K))
    pats[:, K:] = spec.symbol_magnitude * raw / np.linalg.norm(raw, axis=1, keepdims=True)
    return TaskWorld(cues, pats)


def _channel_vector(rng: np.random.Generator, spec: ContextCueSpec, magnitude: float) -> np.ndarray:
    v = np.zeros(spec.feature_dim)
    raw = rng.normal(size=spec.feature_dim - spec.cue_code_count)
    v[spec.cue_code_count :] = magnitude * raw / np.linalg.norm(raw)
    return v


def _segment_frames(rng, spec: ContextCueSpec, world: TaskWorld):
    """Symbol sequence and clean frames for one labeled segment (leading gap, then symbol/gap pairs)."""
    target = int(rng.integers(spec.segment_len_range[0], spec.segment_len_range[1] + 1))
    rows, symbols = [], []
    rows.extend([np.zeros(spec.feature_dim)] * int(rng.integers(spec.gap_frames[0], spec.gap_frames[1] + 1)))
    while len(rows) < target or not symbols:
        s = int(rng.integers(spec.n_symbols))
        symbols.append(s)
        rows.extend([world.symbol_patterns[s]] * int(rng.integers(spec.symbol_frames[0], spec.symbol_frames[1] + 1)))
        rows.extend([np.zeros(spec.feature_dim)] * int(rng.integers(spec.gap_frames[0], spec.gap_frames[1] + 1)))
    return symbols, np.array(rows)


def generate_utterance(spec: ContextCueSpec, index: int, world: TaskWorld | None = None) -> UtteranceRecord:
    world = world or task_world(spec)
    rng = np.random.default_rng([spec.rng_seed, index])
    K = spec.cue_code_count
    cue = int(rng.integers(K))
    prefix_len = int(rng.integers(spec.prefix_len_range[0], spec.prefix_len_range[1] + 1))
    symbols, seg = _segment_frames(rng, spec, world)
    tags = set()

    seg_cue = cue
    if rng.random() < spec.speaker_change_fraction:
        seg_cue = (cue + 1 + int(rng.integers(K - 1))) % K
        seg = seg + world.cue_vectors[seg_cue]
        tags.add("speaker_change")
    if rng.random() < spec.background_speech_fraction:
        _, interferer = _segment_frames(rng, spec, world)
        n = min(len(interferer), len(seg))
        seg[:n] += 0.5 * interferer[:n]
        tags.add("background_speech")

    prefix = np.tile(world.cue_vectors[cue], (prefix_len, 1))
    x = np.concatenate([prefix, seg], axis=0)
    if spec.channel_bias_magnitude > 0:
        x = x + _channel_vector(rng, spec, spec.channel_bias_magnitude * rng.random())
    x = x + spec.noise_std * rng.normal(size=x.shape)

    labels = tuple(symbol_label(spec, s, seg_cue) for s in symbols)
    segments = [SegmentRecord(0, prefix_len - 1, None), SegmentRecord(prefix_len, len(x) - 1, labels)]
    meta = {"cue": cue, "segment_cue": seg_cue, "symbols": symbols}
    return UtteranceRecord(f"s{spec.rng_seed}-{index:05d}", x.astype(np.float32), segments, frozenset(tags or {"clean"}), meta)


def generate_context_task(spec: ContextCueSpec, n_utterances: int) -> list[UtteranceRecord]:
    world = task_world(spec)
    return [generate_utterance(spec, i, world) for i in range(n_utterances)]


# ---------------------------------------------------------------------------
# perturbations

@dataclass
class ImpulseResponse:
    taps: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.taps = np.asarray(self.taps, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(self.taps)) or not np.any(self.taps != 0):
            raise InvalidInputError("impulse response needs finite taps, at least one nonzero")


def load_impulse_response(path, sample_rate: int | None = None) -> ImpulseResponse:
    """Read taps from a WAV file, or from whitespace-separated text (needs ``sample_rate``)."""
    path = Path(path)
    if path.suffix.lower() == ".wav":
        from .features import read_wav

        w = read_wav(path)
        return ImpulseResponse(w.samples, w.sample_rate)
    if sample_rate is None:
        raise InvalidInputError(f"{path}: text impulse response needs an explicit sample rate")
    return ImpulseResponse(np.loadtxt(path, ndmin=1), sample_rate)


def segment_sample_span(seg: SegmentRecord, frame_samples: int, n_samples: int) -> tuple[int, int]:
    return seg.t_s * frame_samples, min(n_samples, (seg.t_e + 1) * frame_samples)


def apply_reverb(
    w: Waveform, ir: ImpulseResponse, scope: str, segs: list[SegmentRecord], frame_samples: int | None = None
) -> Waveform:
    """Convolve with ``ir`` over the whole signal or inside labeled segments, then restore total power."""
    if ir.sample_rate != w.sample_rate:
        raise InvalidInputError("impulse response and waveform sample rates differ")
    x = w.samples
    if scope == "full_utterance":
        y = np.convolve(x, ir.taps)[: len(x)]
    elif scope == "segments_only":
        labeled = [s for s in segs if s.labeled]
        if not labeled:
            raise InvalidInputError("segments_only reverb needs at least one labeled segment")
        frame_samples = frame_samples or int(round(w.sample_rate * ENCODER_FRAME_MS / 1000.0))
        y = x.copy()
        for s in labeled:
            a, b = segment_sample_span(s, frame_samples, len(x))
            y[a:b] = np.convolve(x[a:b], ir.taps)[: b - a]
    else:
        raise InvalidInputError(f"unknown reverb scope {scope!r}")
    p_in, p_out = np.sum(x**2), np.sum(y**2)
    if p_out > 0:
        y = y * np.sqrt(p_in / p_out)
    return Waveform(y, w.sample_rate)


def channel_bias_vector(feature_dim: int, magnitude: float, seed: int, protect_dims: int = 0) -> np.ndarray:
    """Random bias direction of the given norm; the first ``protect_dims`` dims stay zero."""
    rng = np.random.default_rng([seed, 0xB1A5])
    v = np.zeros(feature_dim)
    raw = rng.normal(size=feature_dim - protect_dims)
    v[protect_dims:] = magnitude * raw / np.linalg.norm(raw)
    return v


def apply_channel_bias(r: UtteranceRecord, bias: np.ndarray, scope: str) -> UtteranceRecord:
    """Feature-domain environment surrogate: add ``bias`` over the utterance or inside labeled segments."""
    x = r.features.astype(np.float64)
    if scope == "full_utterance":
        x = x + bias
        tag = "reverb_full"
    elif scope == "segments_only":
        labeled = [s for s in r.segments if s.labeled]
        if not labeled:
            raise InvalidInputError(f"utterance {r.id!r}: no labeled segment for segments_only scope")
        for s in labeled:
            x[s.t_s : s.t_e + 1] += bias
        tag = "reverb_segment"
    else:
        raise InvalidInputError(f"unknown perturbation scope {scope!r}")
    return replace(r, features=x.astype(r.features.dtype), condition=frozenset((set(r.condition) - {"clean"}) | {tag}))


def relative_audio_path(manifest_path, audio_path) -> str:
    return os.path.relpath(audio_path, Path(manifest_path).parent)
