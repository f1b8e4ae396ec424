import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctxtransducer import _core_py, kernels

pytestmark = pytest.mark.skipif("cython" not in kernels.BACKENDS, reason="compiled extension not built")


@settings(max_examples=40, deadline=None)
@given(B=st.integers(1, 5), T=st.integers(1, 12), H=st.integers(1, 9), seed=st.integers(0, 1000))
def test_lstm_recurrences_match_fallback(B, T, H, seed):
    cy = kernels.get_backend("cython")
    rng = np.random.default_rng(seed)
    xw = rng.normal(size=(B, T, 4 * H))
    wh = rng.normal(size=(H, 4 * H))
    dh = rng.normal(size=(B, T, H))
    fa = cy.lstm_recurrence_forward(xw, wh)
    fb = _core_py.lstm_recurrence_forward(xw, wh)
    for a, b in zip(fa, fb):
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-13)
    da = cy.lstm_recurrence_backward(dh, fa[0], fa[1], wh)
    db = _core_py.lstm_recurrence_backward(dh, fb[0], fb[1], wh)
    np.testing.assert_allclose(da, db, rtol=0, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(T=st.integers(1, 15), U=st.integers(0, 10), seed=st.integers(0, 1000))
def test_lattice_matches_fallback(T, U, seed):
    rng = np.random.default_rng(seed)
    lp_blank = np.log(rng.uniform(0.01, 1, size=(T, U + 1)))
    lp_label = np.log(rng.uniform(0.01, 1, size=(T, U)))
    a = kernels.get_backend("cython").lattice_forward_backward(lp_blank, lp_label)
    b = _core_py.lattice_forward_backward(lp_blank, lp_label)
    np.testing.assert_allclose(a[0], b[0], atol=1e-12)
    np.testing.assert_allclose(a[1], b[1], atol=1e-12)
    assert a[2] == pytest.approx(b[2], abs=1e-12)


@settings(max_examples=80, deadline=None)
@given(st.lists(st.integers(0, 4), max_size=12), st.lists(st.integers(0, 4), max_size=12))
def test_levenshtein_matches_fallback(ref, hyp):
    r = np.array(ref, dtype=np.int64)
    h = np.array(hyp, dtype=np.int64)
    np.testing.assert_array_equal(
        kernels.get_backend("cython").levenshtein_table(r, h), _core_py.levenshtein_table(r, h)
    )


def test_empty_batch_shapes():
    cy = kernels.get_backend("cython")
    g, c, h = cy.lstm_recurrence_forward(np.zeros((0, 3, 8)), np.zeros((2, 8)))
    assert g.shape == (0, 3, 8) and c.shape == (0, 4, 2)


def test_unknown_backend_rejected():
    with pytest.raises(ValueError, match="unavailable"):
        kernels.get_backend("fortran")


def test_set_backend_round_trip():
    previous = kernels.set_backend("python")
    try:
        assert kernels.lstm_recurrence_forward is _core_py.lstm_recurrence_forward
    finally:
        kernels.set_backend(previous)
    assert kernels.BACKEND_NAME == previous
