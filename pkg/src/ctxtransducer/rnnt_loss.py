"""Transducer negative log-likelihood over the (T x U+1) alignment lattice.

All lattice arithmetic happens in log space. Blank is token id 0 everywhere
in this package. A path starts at node ``(0, 0)``, emits labels (moving in
``u``) or blanks (moving in ``t``), and terminates with a blank emitted at
node ``(T-1, U)``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from . import kernels

BLANK = 0


class InvalidLabelError(ValueError):
    pass


@dataclass
class TransducerLattice:
    alpha: np.ndarray
    beta: np.ndarray
    log_probs: np.ndarray

    @property
    def log_likelihood(self) -> float:
        return float(self.beta[0, 0])


@dataclass
class LossResult:
    loss: float
    dlogits: np.ndarray
    lattice: TransducerLattice


def log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def check_labels(labels, vocab_size: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.size and (labels.min() < 1 or labels.max() >= vocab_size):
        bad = labels[(labels < 1) | (labels >= vocab_size)]
        raise InvalidLabelError(
            f"labels must lie in [1, {vocab_size - 1}] (blank={BLANK} is reserved); got {bad.tolist()}"
        )
    return labels


def _split_log_probs(lp: np.ndarray, labels: np.ndarray):
    U = labels.size
    lp_blank = np.ascontiguousarray(lp[:, :, BLANK])
    lp_label = np.ascontiguousarray(lp[:, np.arange(U), labels]) if U else np.zeros((lp.shape[0], 0))
    return lp_blank, lp_label


def rnnt_loss(logits: np.ndarray, labels, backend: str | None = None) -> LossResult:
    """Loss and exact gradient w.r.t. the pre-softmax joint activations.

    ``logits`` has shape ``(T, U+1, V)``; ``labels`` has length ``U``.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 3:
        raise ValueError(f"logits must be (T, U+1, V), got shape {logits.shape}")
    T, U1, V = logits.shape
    labels = check_labels(labels, V)
    if T < 1:
        raise ValueError("segment must have at least one frame")
    if U1 != labels.size + 1:
        raise ValueError(f"logits have U+1={U1} label positions but {labels.size} labels given")

    kernel = kernels.get_backend(backend) if backend else kernels
    lp = log_softmax(logits)
    lp_blank, lp_label = _split_log_probs(lp, labels)
    alpha, beta, loglik = kernel.lattice_forward_backward(lp_blank, lp_label)

    # beta one blank-step ahead; only the terminal node may exit on the last frame
    beta_next = np.full((T, U1), -np.inf)
    beta_next[:-1] = beta[1:]
    beta_next[-1, -1] = 0.0
    occ_blank = np.exp(alpha + lp_blank + beta_next - loglik)
    occ_label = np.exp(alpha[:, :-1] + lp_label + beta[:, 1:] - loglik)

    dlp = np.zeros_like(lp)
    dlp[:, :, BLANK] = -occ_blank
    if labels.size:
        dlp[:, np.arange(labels.size), labels] -= occ_label
    dlogits = dlp - np.exp(lp) * dlp.sum(axis=-1, keepdims=True)
    return LossResult(loss=-loglik, dlogits=dlogits, lattice=TransducerLattice(alpha, beta, lp))


MAX_ENUMERATION = 12


def rnnt_loss_bruteforce(logits: np.ndarray, labels) -> float:
    """Enumerate every alignment path and return ``-log`` of their total probability."""
    logits = np.asarray(logits, dtype=np.float64)
    T, U1, V = logits.shape
    labels = check_labels(labels, V)
    U = labels.size
    if U1 != U + 1:
        raise ValueError("logits/labels length mismatch")
    if T + U > MAX_ENUMERATION:
        raise ValueError(f"instance too large to enumerate: T + U = {T + U} > {MAX_ENUMERATION}")
    lp = log_softmax(logits)

    # a path is a placement of U label moves among the first T-1+U moves;
    # every other move is a blank and the final move is the terminal blank
    n_moves = T - 1 + U
    scores = []
    for label_slots in itertools.combinations(range(n_moves), U):
        slots = set(label_slots)
        t = u = 0
        score = 0.0
        for move in range(n_moves):
            if move in slots:
                score += lp[t, u, labels[u]]
                u += 1
            else:
                score += lp[t, u, BLANK]
                t += 1
        score += lp[T - 1, U, BLANK]
        scores.append(score)
    top = max(scores)
    return -(top + math.log(math.fsum(math.exp(s - top) for s in scores)))


@dataclass
class GradCheckReport:
    shape: tuple
    loss: float
    max_rel_error: float
    max_abs_row_sum: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance and self.max_abs_row_sum < 1e-10


def loss_grad_check(
    seed: int, T: int = 4, U: int = 2, V: int = 3, zero_logits: bool = False, eps: float = 1e-6
) -> GradCheckReport:
    """Compare :func:`rnnt_loss` gradients against central differences on a tiny instance."""
    rng = np.random.default_rng(seed)
    logits = np.zeros((T, U + 1, V)) if zero_logits else rng.normal(size=(T, U + 1, V))
    labels = rng.integers(1, V, size=U)
    result = rnnt_loss(logits, labels)
    numeric = np.empty_like(logits)
    for idx in np.ndindex(logits.shape):
        bumped = logits.copy()
        bumped[idx] += eps
        up = rnnt_loss(bumped, labels).loss
        bumped[idx] -= 2 * eps
        down = rnnt_loss(bumped, labels).loss
        numeric[idx] = (up - down) / (2 * eps)
    denom = np.maximum(np.abs(numeric) + np.abs(result.dlogits), 1e-8)
    rel = np.abs(numeric - result.dlogits) / denom
    return GradCheckReport(
        shape=logits.shape,
        loss=result.loss,
        max_rel_error=float(rel.max()),
        max_abs_row_sum=float(np.abs(result.dlogits.sum(axis=-1)).max()),
        tolerance=1e-6,
    )
