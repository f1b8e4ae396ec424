"""Segmented and full-utterance transducer objectives, Adam, and the training loop.

Segmented mode encodes every labeled segment on its own from a zero state.
Full-utterance mode encodes the whole utterance once and slices the encoder
output at each labeled segment, so the loss of a segment depends on every
input frame up to its end. The prediction network always starts fresh per
segment in both modes.
"""

from __future__ import annotations

import json
import logging
import shutil
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .dataset import UtteranceRecord
from .features import AugmentPolicy, spec_augment_frames
from .model import (
    ModelConfig,
    ModelParams,
    encoder_backward,
    encoder_forward,
    init_params,
    joint_backward,
    joint_forward,
    load_checkpoint,
    pad_batch,
    prediction_backward,
    prediction_forward,
    save_checkpoint,
)
from .rnnt_loss import rnnt_loss

log = logging.getLogger(__name__)


class TrainMode(str, Enum):
    SEGMENTED = "segmented"
    FULL_UTTERANCE = "full_utterance"

    @classmethod
    def parse(cls, value) -> "TrainMode":
        if isinstance(value, cls):
            return value
        aliases = {"full": cls.FULL_UTTERANCE, "segm": cls.SEGMENTED}
        try:
            return aliases.get(value) or cls(value)
        except ValueError:
            raise ValueError(f"unknown train mode {value!r}; use segmented or full_utterance") from None


class NonFiniteGradientError(FloatingPointError):
    pass


# ---------------------------------------------------------------------------
# objectives

@dataclass
class ObjectiveResult:
    loss: float
    grads: dict[str, np.ndarray] | None
    input_grads: list[np.ndarray] | None
    utterance_losses: list[float]
    segment_losses: list[list[float]]
    forward_ms: float = 0.0
    backward_ms: float = 0.0


def _select_segments(record: UtteranceRecord, which):
    labeled = record.labeled_segments()
    if which is None:
        chosen = labeled
    else:
        chosen = [(i, record.segments[i]) for i in which]
        if any(not s.labeled for _, s in chosen):
            raise ValueError(f"utterance {record.id!r}: selected segment is untranscribed")
    if not chosen:
        raise ValueError(f"utterance {record.id!r} has no labeled segments")
    for i, s in chosen:
        if s.t_e >= record.n_frames:
            raise ValueError(f"utterance {record.id!r}: segment {i} end {s.t_e} out of range")
    return chosen


def objective(
    params: ModelParams,
    records: list[UtteranceRecord],
    mode: TrainMode | str,
    *,
    segments: list | None = None,
    grad: bool = True,
    augment: AugmentPolicy | None = None,
    augment_seed: int = 0,
    n_stack: int = 1,
) -> ObjectiveResult:
    """Mean over ``records`` of the summed per-segment transducer losses.

    ``segments`` optionally restricts, per record, which labeled segment
    indices contribute. With ``augment``, SpecAugment is applied per training
    unit (segment in segmented mode, utterance in full mode).
    """
    mode = TrainMode.parse(mode)
    t0 = time.perf_counter()
    units = []        # encoder inputs
    unit_spans = []   # (record index, first frame) for mapping input grads back
    items = []        # (record index, unit index, start row, end row, labels)
    for r_idx, rec in enumerate(records):
        chosen = _select_segments(rec, None if segments is None else segments[r_idx])
        x = rec.features.astype(np.float64)
        if mode is TrainMode.FULL_UTTERANCE:
            unit_spans.append((r_idx, 0))
            units.append(x)
            for _, s in chosen:
                items.append((r_idx, len(units) - 1, s.t_s, s.t_e, s.labels))
        else:
            for _, s in chosen:
                unit_spans.append((r_idx, s.t_s))
                units.append(x[s.t_s : s.t_e + 1])
                items.append((r_idx, len(units) - 1, 0, s.t_e - s.t_s, s.labels))
    if augment is not None:
        for u_idx, u in enumerate(units):
            rng = np.random.default_rng([augment_seed, u_idx])
            units[u_idx] = spec_augment_frames(u, augment, rng, n_stack).frames

    X = pad_batch(units)
    h, enc_cache = encoder_forward(params, X)
    g, pred_cache = prediction_forward(params, [labels for *_, labels in items])

    n_rec = len(records)
    weight = 1.0 / n_rec
    utt_losses = [0.0] * n_rec
    seg_losses: list[list[float]] = [[] for _ in range(n_rec)]
    dh = np.zeros_like(h) if grad else None
    dg = np.zeros_like(g) if grad else None
    grads = params.zeros_like() if grad else None
    joint_work = []
    for s_idx, (r_idx, u_idx, a, b, labels) in enumerate(items):
        U1 = len(labels) + 1
        z, jcache = joint_forward(params, h[u_idx, a : b + 1], g[s_idx, :U1])
        res = rnnt_loss(z, labels)
        utt_losses[r_idx] += res.loss
        seg_losses[r_idx].append(res.loss)
        if grad:
            joint_work.append((s_idx, u_idx, a, b, U1, jcache, res.dlogits))
    forward_ms = (time.perf_counter() - t0) * 1e3

    if not grad:
        return ObjectiveResult(float(np.mean(utt_losses)), None, None, utt_losses, seg_losses, forward_ms)

    t1 = time.perf_counter()
    for s_idx, u_idx, a, b, U1, jcache, dlogits in joint_work:
        dh_seg, dg_seg = joint_backward(params, jcache, dlogits * weight, grads)
        dh[u_idx, a : b + 1] += dh_seg
        dg[s_idx, :U1] += dg_seg
    prediction_backward(params, pred_cache, dg, grads)
    dX = encoder_backward(params, enc_cache, dh, grads)

    input_grads = [np.zeros(rec.features.shape) for rec in records]
    for u_idx, (r_idx, start) in enumerate(unit_spans):
        n = len(units[u_idx])
        input_grads[r_idx][start : start + n] += dX[u_idx, :n]
    backward_ms = (time.perf_counter() - t1) * 1e3
    return ObjectiveResult(
        float(np.mean(utt_losses)), grads, input_grads, utt_losses, seg_losses, forward_ms, backward_ms
    )


@dataclass
class UtteranceLoss:
    loss: float
    grads: dict[str, np.ndarray]
    input_grad: np.ndarray
    segment_losses: list[float]


def utterance_loss(params: ModelParams, u: UtteranceRecord, mode: TrainMode | str) -> UtteranceLoss:
    """Loss and gradients (parameters and input frames) for one utterance."""
    res = objective(params, [u], mode)
    return UtteranceLoss(res.loss, res.grads, res.input_grads[0], res.segment_losses[0])


# ---------------------------------------------------------------------------
# optimizer

@dataclass(frozen=True)
class LrSchedule:
    peak_lr: float = 2e-3
    warmup_steps: int = 200
    hold_steps: int = 800
    decay_rate: float = 0.9995

    def lr(self, step: int) -> float:
        """Learning rate for the ``step``-th update (1-based)."""
        if self.warmup_steps > 0 and step <= self.warmup_steps:
            return self.peak_lr * step / self.warmup_steps
        if step <= self.warmup_steps + self.hold_steps:
            return self.peak_lr
        return self.peak_lr * self.decay_rate ** (step - self.warmup_steps - self.hold_steps)


ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class TrainState:
    params: ModelParams
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    seed: int = 0

    @classmethod
    def fresh(cls, params: ModelParams, seed: int = 0) -> "TrainState":
        return cls(params, params.zeros_like(), params.zeros_like(), 0, seed)


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


def adam_step(
    state: TrainState, gradients: dict[str, np.ndarray], schedule: LrSchedule, max_grad_norm: float | None = None
) -> TrainState:
    for name, g in gradients.items():
        if g.shape != state.params[name].shape:
            raise ValueError(f"gradient {name} has shape {g.shape}, parameter has {state.params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite values in gradient of {name} at step {state.step + 1}")
    if max_grad_norm is not None:
        gradients = {k: v.copy() for k, v in gradients.items()}
        clip_by_global_norm(gradients, max_grad_norm)
    t = state.step + 1
    lr = schedule.lr(t)
    c1 = 1.0 - ADAM_BETA1**t
    c2 = 1.0 - ADAM_BETA2**t
    params = state.params.copy()
    m, v = {}, {}
    for name in params.names():
        g = gradients[name]
        m[name] = ADAM_BETA1 * state.m[name] + (1.0 - ADAM_BETA1) * g
        v[name] = ADAM_BETA2 * state.v[name] + (1.0 - ADAM_BETA2) * g * g
        params.tensors[name] -= lr * (m[name] / c1) / (np.sqrt(v[name] / c2) + ADAM_EPS)
    return TrainState(params, m, v, t, state.seed)


# ---------------------------------------------------------------------------
# training loop

@dataclass
class CheckpointInfo:
    step: int
    path: Path
    dev_loss: float | None = None


@dataclass
class TrainResult:
    out_dir: Path
    best: CheckpointInfo
    checkpoints: list[CheckpointInfo]
    final_state: TrainState
    mean_forward_ms: float
    mean_backward_ms: float
    mean_wall_ms: float
    losses: list[float] = field(default_factory=list)


def batch_indices(n: int, batch_size: int, seed: int, step: int) -> np.ndarray:
    """Utterance indices of batch ``step``, sorted so gradient reduction order is fixed."""
    rng = np.random.default_rng([seed, step])
    return np.sort(rng.choice(n, size=min(batch_size, n), replace=False))


def dev_loss(params: ModelParams, records: list[UtteranceRecord], mode: TrainMode | str, chunk: int = 64) -> float:
    total = 0.0
    for i in range(0, len(records), chunk):
        part = records[i : i + chunk]
        total += objective(params, part, mode, grad=False).loss * len(part)
    return total / len(records)


def _ckpt_path(out_dir: Path, step: int) -> Path:
    return out_dir / f"ckpt-{step:07d}.sgck"


def latest_checkpoint(out_dir) -> Path | None:
    found = sorted(Path(out_dir).glob("ckpt-*.sgck"))
    return found[-1] if found else None


def _save_state(path: Path, state: TrainState, mode: TrainMode | None = None) -> None:
    extra = {f"adam.m.{k}": v for k, v in state.m.items()}
    extra.update({f"adam.v.{k}": v for k, v in state.v.items()})
    save_checkpoint(path, state.params, state.step, extra, {"train_mode": mode.value} if mode else None)


def load_state(path, expect: ModelConfig | None = None, seed: int = 0) -> TrainState:
    params, _, step, extra = load_checkpoint(path, expect)
    m = {k: extra.get(f"adam.m.{k}", np.zeros_like(v)) for k, v in params.tensors.items()}
    v = {k: extra.get(f"adam.v.{k}", np.zeros_like(t)) for k, t in params.tensors.items()}
    return TrainState(params, m, v, step, seed)


def train(
    records: list[UtteranceRecord],
    config: ModelConfig,
    mode: TrainMode | str,
    schedule: LrSchedule,
    batch_size: int,
    total_steps: int,
    seed: int,
    out_dir,
    *,
    dev_records: list[UtteranceRecord] | None = None,
    augment: AugmentPolicy | None = None,
    n_stack: int = 1,
    checkpoint_every: int | None = None,
    keep_last: int = 6,
    max_grad_norm: float | None = None,
    resume: bool = False,
    log_path=None,
) -> TrainResult:
    """Train and write checkpoints; the best of the last ``keep_last`` by dev loss is copied to ``best.sgck``."""
    mode = TrainMode.parse(mode)
    if not records:
        raise ValueError("cannot train on an empty manifest")
    for r in records:
        if not r.labeled_segments():
            raise ValueError(f"utterance {r.id!r} has no labeled segments")
    if dev_records is None:
        n_dev = max(1, len(records) // 10) if len(records) >= 10 else 0
        dev_records = records[-n_dev:] if n_dev else records
        records = records[:-n_dev] if n_dev else records
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = Path(log_path) if log_path else out_dir / "train.log"
    every = checkpoint_every or max(1, total_steps // 50)

    state = None
    if resume:
        last = latest_checkpoint(out_dir)
        if last is not None:
            state = load_state(last, config, seed)
            log.info("resuming from %s at step %d", last, state.step)
    if state is None:
        state = TrainState.fresh(init_params(config, seed), seed)
        if log_path.exists():
            log_path.unlink()

    def is_kept(step):
        return step % every == 0 or step == total_steps

    kept_steps = [s for s in range(1, total_steps + 1) if is_kept(s)][-keep_last:]
    checkpoints = [
        CheckpointInfo(s, _ckpt_path(out_dir, s)) for s in kept_steps if s <= state.step and _ckpt_path(out_dir, s).exists()
    ]
    fwd, bwd, wall, losses = [], [], [], []
    with open(log_path, "a", encoding="utf-8") as log_fh:
        while state.step < total_steps:
            t0 = time.perf_counter()
            idx = batch_indices(len(records), batch_size, seed, state.step)
            batch = [records[i] for i in idx]
            res = objective(
                state.params, batch, mode, augment=augment, augment_seed=seed * 1_000_003 + state.step, n_stack=n_stack
            )
            lr = schedule.lr(state.step + 1)
            state = adam_step(state, res.grads, schedule, max_grad_norm)
            wall_ms = (time.perf_counter() - t0) * 1e3
            fwd.append(res.forward_ms)
            bwd.append(res.backward_ms)
            wall.append(wall_ms)
            losses.append(res.loss)
            log_fh.write(
                json.dumps(
                    {
                        "step": state.step,
                        "mode": mode.value,
                        "loss": round(res.loss, 6),
                        "lr": lr,
                        "wall_ms": round(wall_ms, 3),
                        "forward_ms": round(res.forward_ms, 3),
                        "backward_ms": round(res.backward_ms, 3),
                    }
                )
                + "\n"
            )
            if is_kept(state.step):
                path = _ckpt_path(out_dir, state.step)
                _save_state(path, state, mode)
                if state.step in kept_steps:
                    checkpoints.append(CheckpointInfo(state.step, path))
                # outside the selection window only the newest file is kept, for --resume
                for old in out_dir.glob("ckpt-*.sgck"):
                    old_step = int(old.stem.split("-")[1])
                    if old_step not in kept_steps and old_step != state.step:
                        old.unlink()

    for info in checkpoints:
        if info.dev_loss is None:
            params, *_ = load_checkpoint(info.path, config)
            info.dev_loss = dev_loss(params, dev_records, mode)
    if not checkpoints:
        path = _ckpt_path(out_dir, state.step)
        _save_state(path, state, mode)
        checkpoints.append(CheckpointInfo(state.step, path, dev_loss(state.params, dev_records, mode)))
    best = min(checkpoints, key=lambda c: (c.dev_loss, -c.step))
    shutil.copyfile(best.path, out_dir / "best.sgck")
    summary = {
        "mode": mode.value,
        "best_step": best.step,
        "best_dev_loss": best.dev_loss,
        "checkpoints": [[c.step, c.path.name, c.dev_loss] for c in checkpoints],
    }
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return TrainResult(
        out_dir,
        best,
        checkpoints,
        state,
        float(np.mean(fwd)) if fwd else 0.0,
        float(np.mean(bwd)) if bwd else 0.0,
        float(np.mean(wall)) if wall else 0.0,
        losses,
    )
