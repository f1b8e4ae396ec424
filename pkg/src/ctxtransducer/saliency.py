"""Per-frame input-gradient norms of one segment's transducer loss."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import UtteranceRecord
from .features import ENCODER_FRAME_MS
from .model import ModelParams
from .training import TrainMode, objective

HEADER = ("frame", "time_s", "grad_norm", "energy", "in_segment")


@dataclass
class SaliencyTrace:
    grad_norm: np.ndarray           # g_t = ||dL/dx_t||_2, length T
    target_segment: tuple[int, int]
    energy: np.ndarray              # mean |x_t|
    frame_ms: float = ENCODER_FRAME_MS

    @property
    def in_segment(self) -> np.ndarray:
        t = np.arange(len(self.grad_norm))
        return (t >= self.target_segment[0]) & (t <= self.target_segment[1])

    def prefix_peak(self) -> float:
        g = self.grad_norm[: self.target_segment[0]]
        return float(g.max()) if g.size else 0.0

    def segment_peak(self) -> float:
        return float(self.grad_norm[self.in_segment].max())


def saliency_trace(
    params: ModelParams, u: UtteranceRecord, segment_index: int, mode: TrainMode | str = TrainMode.FULL_UTTERANCE
) -> SaliencyTrace:
    """Gradient of the chosen segment's loss w.r.t. every input frame (clean features, no augmentation)."""
    if not 0 <= segment_index < len(u.segments):
        raise IndexError(f"utterance {u.id!r} has no segment {segment_index}")
    seg = u.segments[segment_index]
    if not seg.labeled:
        raise ValueError(f"utterance {u.id!r}: segment {segment_index} is untranscribed")
    res = objective(params, [u], mode, segments=[[segment_index]])
    dx = res.input_grads[0]
    return SaliencyTrace(
        np.sqrt(np.sum(dx * dx, axis=1)),
        (seg.t_s, seg.t_e),
        np.mean(np.abs(u.features.astype(np.float64)), axis=1),
    )


def export_trace(trace: SaliencyTrace, path) -> None:
    """Tab-separated table, one row per encoder frame, with a header line."""
    rows = ["\t".join(HEADER)]
    mask = trace.in_segment
    for t, (g, e) in enumerate(zip(trace.grad_norm, trace.energy)):
        rows.append(f"{t}\t{t * trace.frame_ms / 1000.0:.3f}\t{g:.9e}\t{e:.9e}\t{int(mask[t])}")
    Path(path).write_text("\n".join(rows) + "\n", encoding="utf-8")


def read_trace(path) -> SaliencyTrace:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if tuple(lines[0].split("\t")) != HEADER:
        raise ValueError(f"{path}: unexpected trace header {lines[0]!r}")
    cols = np.array([ln.split("\t") for ln in lines[1:]], dtype=float).reshape(-1, len(HEADER))
    inside = np.flatnonzero(cols[:, 4] > 0)
    span = (int(inside[0]), int(inside[-1])) if inside.size else (0, -1)
    return SaliencyTrace(cols[:, 2], span, cols[:, 3])
