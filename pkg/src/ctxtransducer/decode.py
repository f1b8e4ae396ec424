"""Segment-wise transducer decoding and error-rate scoring.

The encoder runs once over the whole utterance; every decoded segment reads
its slice of the encoder output and starts the prediction network afresh.
A model trained on isolated segments is instead decoded with the
``segmented`` context, one encoder pass per segment.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import kernels
from .dataset import UtteranceRecord, split_eval_conditions
from .model import ModelParams, PredictionState, encode, joint_logits_row, prediction_start, prediction_step
from .rnnt_loss import BLANK, log_softmax

log = logging.getLogger(__name__)

MAX_SYMBOLS_PER_FRAME = 5
DECODE_CONTEXTS = ("full_utterance", "segmented")


@dataclass
class Hypothesis:
    labels: tuple[int, ...]
    log_score: float
    state: PredictionState | None = field(default=None, repr=False)


class _PredictionCache:
    """Prediction-network states keyed by label prefix (shared across hypotheses)."""

    def __init__(self, params: ModelParams):
        self.params = params
        self.states = {(): prediction_start(params)}

    def __call__(self, labels: tuple[int, ...]) -> PredictionState:
        state = self.states.get(labels)
        if state is None:
            state = prediction_step(self.params, labels[-1], self(labels[:-1]))
            self.states[labels] = state
        return state


def _project_encoder(params: ModelParams, h_slice: np.ndarray) -> np.ndarray:
    h_slice = np.asarray(h_slice, dtype=np.float64)
    if h_slice.ndim != 2 or len(h_slice) == 0:
        raise ValueError("decoding needs a non-empty (T, encoder_units) slice")
    return h_slice @ params["joint.weight"][: params.config.encoder_units]


def greedy_decode(params: ModelParams, h_slice: np.ndarray, max_symbols_per_frame: int = MAX_SYMBOLS_PER_FRAME) -> list[int]:
    h_proj = _project_encoder(params, h_slice)
    state = prediction_start(params)
    out = []
    for t in range(len(h_proj)):
        for _ in range(max_symbols_per_frame):
            k = int(np.argmax(joint_logits_row(params, h_proj[t], state.output)))
            if k == BLANK:
                break
            out.append(k)
            state = prediction_step(params, k, state)
    return out


def _logaddexp(a: float, b: float) -> float:
    if a == -math.inf:
        return b
    if b == -math.inf:
        return a
    hi, lo = (a, b) if a > b else (b, a)
    return hi + math.log1p(math.exp(lo - hi))


def beam_decode(
    params: ModelParams,
    h_slice: np.ndarray,
    beam_width: int,
    max_symbols_per_frame: int = MAX_SYMBOLS_PER_FRAME,
    max_output_len: int | None = None,
) -> list[Hypothesis]:
    """Frame-synchronous beam search; returns hypotheses best first.

    Within a frame, expansion proceeds in levels (number of labels emitted in
    this frame). At each level the candidates are the blank-terminated
    hypotheses gathered so far plus all one-label extensions of the open
    frontier; the best ``beam_width`` survive. Label sequences reached by
    several alignments are merged by log-sum. Ties prefer blank, then the
    lowest token id, so width 1 reproduces :func:`greedy_decode`.
    """
    if beam_width < 1:
        raise ValueError("beam_width must be >= 1")
    h_proj = _project_encoder(params, h_slice)
    pred = _PredictionCache(params)
    V = params.config.vocab_size
    hyps: dict[tuple[int, ...], float] = {(): 0.0}
    logp_cache: dict[tuple[int, ...], np.ndarray] = {}

    for t in range(len(h_proj)):
        logp_cache.clear()
        frontier = hyps
        ended: dict[tuple[int, ...], float] = {}
        for level in range(max_symbols_per_frame + 1):
            extended: dict[tuple[int, ...], float] = {}
            for y, score in frontier.items():
                lp = logp_cache.get(y)
                if lp is None:
                    lp = log_softmax(joint_logits_row(params, h_proj[t], pred(y).output))
                    logp_cache[y] = lp
                ended[y] = _logaddexp(ended.get(y, -math.inf), score + lp[BLANK])
                if level < max_symbols_per_frame and (max_output_len is None or len(y) < max_output_len):
                    for k in range(1, V):
                        yk = y + (k,)
                        extended[yk] = _logaddexp(extended.get(yk, -math.inf), score + lp[k])
            pool = [(-s, 0, y) for y, s in ended.items()] + [(-s, 1, y) for y, s in extended.items()]
            pool.sort()
            kept = pool[:beam_width]
            ended = {y: -neg for neg, kind, y in kept if kind == 0}
            frontier = {y: -neg for neg, kind, y in kept if kind == 1}
            if not frontier:
                break
        hyps = ended

    ranked = sorted(hyps.items(), key=lambda kv: (-kv[1], kv[0]))
    return [Hypothesis(y, s, pred(y)) for y, s in ranked]


@dataclass
class DecodedSegment:
    segment_index: int
    labels: tuple[int, ...]
    log_score: float


def decode_utterance(
    params: ModelParams,
    u: UtteranceRecord,
    beam_width: int = 1,
    max_symbols_per_frame: int = MAX_SYMBOLS_PER_FRAME,
    segment_indices: list[int] | None = None,
    context: str = "full_utterance",
) -> list[DecodedSegment]:
    """Decode segments of ``u``; by default the labeled ones (the ones a transcript can score).

    With ``context="full_utterance"`` the encoder runs once over all frames and
    each segment reads its slice. ``context="segmented"`` encodes every segment
    on its own, which is how a segment-trained model sees its input.
    """
    if context not in DECODE_CONTEXTS:
        raise ValueError(f"unknown decode context {context!r}; use one of {DECODE_CONTEXTS}")
    h = encode(params, u.features).h if context == "full_utterance" else None
    if segment_indices is None:
        segment_indices = [i for i, _ in u.labeled_segments()]
    out = []
    for i in segment_indices:
        s = u.segments[i]
        h_seg = h[s.t_s : s.t_e + 1] if h is not None else encode(params, u.features[s.t_s : s.t_e + 1]).h
        best = beam_decode(params, h_seg, beam_width, max_symbols_per_frame)[0]
        out.append(DecodedSegment(i, best.labels, best.log_score))
    return out


# ---------------------------------------------------------------------------
# scoring

class EditCounts(NamedTuple):
    substitutions: int
    insertions: int
    deletions: int

    @property
    def errors(self) -> int:
        return self.substitutions + self.insertions + self.deletions


def _as_ids(seq) -> np.ndarray:
    return np.ascontiguousarray([hash(x) if not isinstance(x, (int, np.integer)) else int(x) for x in seq], dtype=np.int64)


def alignment(ref, hyp) -> list[tuple[str, int | None, int | None]]:
    """Minimum-edit alignment as ``(op, ref_index, hyp_index)`` with op in match/sub/del/ins."""
    r, h = _as_ids(ref), _as_ids(hyp)
    d = kernels.levenshtein_table(r, h)
    i, j = len(r), len(h)
    ops = []
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i, j] == d[i - 1, j - 1] + (r[i - 1] != h[j - 1]):
            ops.append(("match" if r[i - 1] == h[j - 1] else "sub", i - 1, j - 1))
            i, j = i - 1, j - 1
        elif i > 0 and d[i, j] == d[i - 1, j] + 1:
            ops.append(("del", i - 1, None))
            i -= 1
        else:
            ops.append(("ins", None, j - 1))
            j -= 1
    return ops[::-1]


def edit_distance(ref, hyp) -> EditCounts:
    ops = [op for op, _, _ in alignment(ref, hyp)]
    return EditCounts(ops.count("sub"), ops.count("ins"), ops.count("del"))


def error_rate(ref, hyp) -> float:
    """(S+I+D)/|ref|; with an empty reference every hypothesis token counts as an insertion."""
    counts = edit_distance(ref, hyp)
    return counts.errors / len(ref) if len(ref) else float(len(hyp))


def subset_token_error(pairs, subset) -> tuple[int, int]:
    """Errors and count over reference tokens in ``subset`` (substituted or deleted ones count)."""
    errors = total = 0
    for ref, hyp in pairs:
        for op, ri, _ in alignment(ref, hyp):
            if ri is not None and ref[ri] in subset:
                total += 1
                errors += op != "match"
    return errors, total


@dataclass
class ConditionScore:
    errors: int = 0
    ref_tokens: int = 0
    n_segments: int = 0

    @property
    def rate(self) -> float:
        return self.errors / self.ref_tokens if self.ref_tokens else float("nan")


@dataclass
class SystemReport:
    scores: dict[str, ConditionScore]
    unit: str = "tokens"
    pairs: dict[str, list[tuple[tuple[int, ...], tuple[int, ...]]]] = field(default_factory=dict, repr=False)

    def all_pairs(self):
        return [p for ps in self.pairs.values() for p in ps]


def evaluate(
    params: ModelParams,
    records: list[UtteranceRecord],
    beam_width: int = 1,
    unit: str = "tokens",
    threads: int = 1,
    context: str = "full_utterance",
) -> SystemReport:
    """Decode every labeled segment and tally errors overall and per condition tag."""

    def run(rec):
        decoded = decode_utterance(params, rec, beam_width, context=context)
        return rec.id, [(tuple(rec.segments[d.segment_index].labels), d.labels) for d in decoded]

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            decoded = dict(pool.map(run, records))
    else:
        decoded = dict(map(run, records))

    def tally(recs):
        score = ConditionScore()
        for rec in recs:
            for ref, hyp in decoded[rec.id]:
                score.errors += edit_distance(ref, hyp).errors
                score.ref_tokens += len(ref)
                score.n_segments += 1
        return score

    scores = {"overall": tally(records)}
    for cond, recs in split_eval_conditions(records).items():
        scores[cond] = tally(recs)
    return SystemReport(scores, unit, decoded)


@dataclass
class EvalRow:
    condition: str
    base_rate: float
    new_rate: float
    base_nwer: float
    new_nwer: float
    werr: float


@dataclass
class EvalReport:
    rows: list[EvalRow]
    unit: str = "tokens"

    def row(self, condition: str) -> EvalRow:
        for r in self.rows:
            if r.condition == condition:
                return r
        raise KeyError(condition)

    def to_table(self) -> str:
        lines = [
            f"# error unit: {self.unit}; nWER normalised to baseline overall = 1.00",
            f"{'condition':<20} {'base nWER':>10} {'new nWER':>10} {'WERR':>8}",
        ]
        for r in self.rows:
            lines.append(f"{r.condition:<20} {r.base_nwer:>10.2f} {r.new_nwer:>10.2f} {100 * r.werr:>7.1f}%")
        return "\n".join(lines)

    def to_rows(self) -> list[dict]:
        return [dict(unit=self.unit, **vars(r)) for r in self.rows]


def werr(e_base: float, e_new: float) -> float:
    if e_base == 0:
        return 0.0 if e_new == 0 else -math.inf
    return (e_base - e_new) / e_base


def compare_systems(report_base: SystemReport, report_new: SystemReport) -> EvalReport:
    """nWER per condition (normalised by the baseline's overall error) and WERR of new vs base."""
    norm = report_base.scores["overall"].rate
    rows = []
    conditions = ["overall"] + sorted(c for c in report_base.scores if c != "overall")
    for cond in conditions:
        base, new = report_base.scores.get(cond), report_new.scores.get(cond)
        if base is None or new is None or base.ref_tokens == 0 or new.ref_tokens == 0:
            log.warning("condition %r has no scored tokens in one of the systems; row omitted", cond)
            continue
        scale = norm if norm > 0 else 1.0
        rows.append(EvalRow(cond, base.rate, new.rate, base.rate / scale, new.rate / scale, werr(base.rate, new.rate)))
    return EvalReport(rows, report_base.unit)
