import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctxtransducer.rnnt_loss import (
    InvalidLabelError,
    loss_grad_check,
    rnnt_loss,
    rnnt_loss_bruteforce,
)


def uniform_closed_form(T, U, V):
    return -(math.log(math.comb(T + U - 1, U)) - (T + U) * math.log(V))


def test_single_blank_uniform(backend):
    assert rnnt_loss(np.zeros((1, 1, 3)), []).loss == pytest.approx(math.log(3), abs=1e-14)


def test_two_frames_one_label_uniform(backend):
    # frozen from the enumeration oracle: two alignments, each (1/3)^3
    loss = rnnt_loss(np.zeros((2, 2, 3)), [1]).loss
    assert loss == pytest.approx(2.6026896854443837, abs=1e-13)
    assert loss == pytest.approx(-math.log(2 / 27), abs=1e-13)
    assert rnnt_loss_bruteforce(np.zeros((2, 2, 3)), [1]) == pytest.approx(loss, abs=1e-13)


@pytest.mark.parametrize("T,U,V", [(1, 0, 2), (3, 2, 4), (5, 4, 5), (6, 6, 3)])
def test_uniform_logits_match_path_count(T, U, V):
    logits = np.zeros((T, U + 1, V))
    labels = [1] * U
    assert rnnt_loss_bruteforce(logits, labels) == pytest.approx(uniform_closed_form(T, U, V), abs=1e-12)
    assert rnnt_loss(logits, labels).loss == pytest.approx(uniform_closed_form(T, U, V), abs=1e-12)


@settings(max_examples=150, deadline=None)
@given(
    T=st.integers(1, 5),
    U=st.integers(0, 4),
    V=st.integers(2, 5),
    seed=st.integers(0, 2**31 - 1),
)
def test_matches_enumeration(T, U, V, seed):
    rng = np.random.default_rng(seed)
    logits = 2.0 * rng.normal(size=(T, U + 1, V))
    labels = rng.integers(1, V, size=U)
    res = rnnt_loss(logits, labels)
    assert abs(res.loss - rnnt_loss_bruteforce(logits, labels)) < 1e-10
    assert res.loss >= 0


def test_no_labels_is_all_blank_path():
    rng = np.random.default_rng(3)
    logits = rng.normal(size=(4, 1, 3))
    lp = logits - np.log(np.exp(logits).sum(-1, keepdims=True))
    assert rnnt_loss(logits, []).loss == pytest.approx(-lp[:, 0, 0].sum(), abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(T=st.integers(1, 8), U=st.integers(0, 6), seed=st.integers(0, 10_000))
def test_lattice_invariants(T, U, seed):
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=(T, U + 1, 4))
    res = rnnt_loss(logits, rng.integers(1, 4, size=U))
    alpha, beta = res.lattice.alpha, res.lattice.beta
    total = -res.loss
    assert alpha[0, 0] == 0.0
    assert np.all(alpha <= 1e-12) and np.all(beta <= 1e-12)
    # every path crosses each anti-diagonal exactly once
    for d in range(T + U):
        cells = [(t, d - t) for t in range(T) if 0 <= d - t <= U]
        cut = np.logaddexp.reduce([alpha[c] + beta[c] for c in cells])
        assert cut == pytest.approx(total, abs=1e-8)
    assert np.abs(res.dlogits.sum(-1)).max() < 1e-10


def test_impossible_label_blows_up_loss():
    logits = np.zeros((3, 2, 3))
    logits[:, 0, 2] = -1e9
    assert rnnt_loss(logits, [2]).loss > 100


def test_blank_label_rejected():
    with pytest.raises(InvalidLabelError):
        rnnt_loss(np.zeros((2, 2, 3)), [0])
    with pytest.raises(InvalidLabelError):
        rnnt_loss(np.zeros((2, 2, 3)), [3])


def test_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        rnnt_loss(np.zeros((2, 3, 3)), [1])


def test_bruteforce_refuses_large_instances():
    with pytest.raises(ValueError, match="too large"):
        rnnt_loss_bruteforce(np.zeros((8, 6, 3)), [1] * 5)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_grad_check_random(seed):
    report = loss_grad_check(seed, T=4, U=2, V=3)
    assert report.passed, report
    assert report == loss_grad_check(seed, T=4, U=2, V=3)


def test_grad_check_zero_logits():
    report = loss_grad_check(0, zero_logits=True)
    assert report.passed and report.max_abs_row_sum < 1e-10


def test_backends_agree_on_gradients():
    from ctxtransducer import kernels

    rng = np.random.default_rng(5)
    logits = rng.normal(size=(9, 5, 6))
    labels = rng.integers(1, 6, size=4)
    results = [rnnt_loss(logits, labels, backend=b) for b in kernels.BACKENDS]
    for r in results[1:]:
        assert abs(r.loss - results[0].loss) < 1e-12
        np.testing.assert_allclose(r.dlogits, results[0].dlogits, atol=1e-12)
