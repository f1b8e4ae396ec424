import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctxtransducer.model import (
    CheckpointError,
    ConfigMismatchError,
    ModelConfig,
    checkpoint_info,
    encode,
    fan_in,
    init_params,
    joint,
    load_checkpoint,
    param_shapes,
    predict_labels,
    save_checkpoint,
    zero_params,
)
from ctxtransducer.rnnt_loss import rnnt_loss


def test_encode_one_frame(tiny_params):
    out = encode(tiny_params, np.ones((1, 3)))
    assert out.h.shape == (1, 4)
    assert len(out.states) == 1


def test_encode_dimension_mismatch(tiny_params):
    with pytest.raises(ValueError, match="feature dims"):
        encode(tiny_params, np.ones((4, 5)))


def test_zero_params_fixed_point(tiny_config):
    p = zero_params(tiny_config)
    assert not encode(p, np.random.default_rng(0).normal(size=(6, 3))).h.any()
    z = joint(p, np.ones((3, 4)), np.ones((2, 4)))
    assert z.shape == (3, 2, 3) and not z.any()


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 12), st.integers(0, 11), st.integers(0, 2**31))
def test_causality(T, t, seed):
    t = t % T
    params = init_params(ModelConfig(input_dim=3, encoder_layers=2, encoder_units=5), seed % 100)
    x = np.random.default_rng(seed).normal(size=(T, 3))
    y = x.copy()
    y[t] += 1.0
    a, b = encode(params, x).h, encode(params, y).h
    assert a[:t].tobytes() == b[:t].tobytes()
    assert not np.array_equal(a[t], b[t])


def test_prediction_rows(tiny_params):
    assert predict_labels(tiny_params, []).shape == (1, 4)
    g1 = predict_labels(tiny_params, [1, 2, 1])
    g2 = predict_labels(tiny_params, [1, 2, 2])
    assert g1.shape == (4, 4)
    assert g1[:3].tobytes() == g2[:3].tobytes()
    assert not np.array_equal(g1[3], g2[3])
    with pytest.raises(ValueError, match="labels"):
        predict_labels(tiny_params, [3])
    with pytest.raises(ValueError, match="labels"):
        predict_labels(tiny_params, [0])


def test_joint_is_pointwise(tiny_params):
    rng = np.random.default_rng(1)
    h, g = rng.normal(size=(4, 4)), rng.normal(size=(3, 4))
    z = joint(tiny_params, h, g)
    h2 = h.copy()
    h2[2] += 5.0
    z2 = joint(tiny_params, h2, g)
    np.testing.assert_array_equal(np.delete(z, 2, axis=0), np.delete(z2, 2, axis=0))
    assert np.isfinite(joint(tiny_params, 1e6 * h, g)).all()


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 4), st.integers(1, 6), st.integers(1, 6), st.integers(1, 6), st.integers(2, 7),
       st.integers(1, 8), st.integers(0, 4))
def test_shape_laws(layers, H, P, J, V, T, U):
    cfg = ModelConfig(input_dim=2, encoder_layers=layers, encoder_units=H, prediction_units=P,
                      joint_units=J, vocab_size=V)
    p = init_params(cfg, 0)
    h = encode(p, np.zeros((T, 2))).h
    g = predict_labels(p, [1] * U)
    assert h.shape == (T, H) and g.shape == (U + 1, P)
    assert joint(p, h, g).shape == (T, U + 1, V)


def test_init_contract():
    cfg = ModelConfig(input_dim=5, encoder_layers=2, encoder_units=6)
    a, b = init_params(cfg, 3), init_params(cfg, 3)
    assert a.equals(b) and not a.equals(init_params(cfg, 4))
    assert a.names() == list(param_shapes(cfg))
    for name, v in a.tensors.items():
        k = 1 / np.sqrt(fan_in(name, cfg))
        if name.endswith(".bias") and not name.startswith(("joint", "output")):
            units = v.shape[0] // 4
            assert (v[units : 2 * units] == 1.0).all()
            v = np.delete(v, np.s_[units : 2 * units])
        assert np.abs(v).max() <= k


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(input_dim=0)
    with pytest.raises(ValueError):
        ModelConfig(input_dim=2, vocab_size=1)


def _loss_and_grads(params, x, segments):
    """Summed transducer loss over ``segments`` of one utterance, via the objective."""
    from ctxtransducer.dataset import SegmentRecord, UtteranceRecord
    from ctxtransducer.training import objective

    rec = UtteranceRecord("u", np.asarray(x, dtype=np.float64), [SegmentRecord(a, b, y) for a, b, y in segments], frozenset({"clean"}))
    return objective(params, [rec], "full_utterance")


def test_gradient_matches_finite_differences(tiny_params):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(5, 3))
    segs = [(0, 1, None), (2, 4, (1, 2))]
    res = _loss_and_grads(tiny_params, x, segs)
    eps = 1e-6
    for name, v in tiny_params.tensors.items():
        for idx in np.ndindex(v.shape):
            p = tiny_params.copy()
            p.tensors[name][idx] += eps
            up = _loss_and_grads(p, x, segs).loss
            p.tensors[name][idx] -= 2 * eps
            down = _loss_and_grads(p, x, segs).loss
            fd = (up - down) / (2 * eps)
            an = res.grads[name][idx]
            assert abs(fd - an) <= 1e-4 * max(abs(fd), abs(an), 1e-5), (name, idx, fd, an)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += eps
        xm[idx] -= eps
        fd = (_loss_and_grads(tiny_params, xp, segs).loss - _loss_and_grads(tiny_params, xm, segs).loss) / (2 * eps)
        an = res.input_grads[0][idx]
        assert abs(fd - an) <= 1e-4 * max(abs(fd), abs(an), 1e-5), (idx, fd, an)


def test_joint_feeds_loss_consistently(tiny_params):
    # one segment, computed by hand through the public ops
    x = np.random.default_rng(2).normal(size=(3, 3))
    z = joint(tiny_params, encode(tiny_params, x).h, predict_labels(tiny_params, [2]))
    res = _loss_and_grads(tiny_params, x, [(0, 2, (2,))])
    assert res.loss == pytest.approx(rnnt_loss(z, [2]).loss, abs=1e-12)


# ---------------------------------------------------------------- checkpoints

def test_checkpoint_round_trip(tmp_path, tiny_params):
    extra = {"adam.m.x": np.arange(6.0).reshape(2, 3)}
    save_checkpoint(tmp_path / "a.sgck", tiny_params, 17, extra, info={"train_mode": "segmented"})
    params, cfg, step, ex = load_checkpoint(tmp_path / "a.sgck", expect=tiny_params.config)
    assert params.equals(tiny_params) and cfg == tiny_params.config and step == 17
    np.testing.assert_array_equal(ex["adam.m.x"], extra["adam.m.x"])
    info = checkpoint_info(tmp_path / "a.sgck")
    assert info == {"config": cfg, "step": 17, "info": {"train_mode": "segmented"}}


def test_checkpoint_errors(tmp_path, tiny_params):
    path = tmp_path / "a.sgck"
    save_checkpoint(path, tiny_params, 1)
    data = path.read_bytes()
    (tmp_path / "magic.sgck").write_bytes(b"XXXX" + data[4:])
    with pytest.raises(CheckpointError, match="not a checkpoint"):
        load_checkpoint(tmp_path / "magic.sgck")
    (tmp_path / "short.sgck").write_bytes(data[:-10])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(tmp_path / "short.sgck")
    (tmp_path / "head.sgck").write_bytes(data[:20])
    with pytest.raises(CheckpointError, match="truncated header"):
        load_checkpoint(tmp_path / "head.sgck")
    other = ModelConfig(input_dim=3, encoder_layers=1, encoder_units=5, prediction_layers=1,
                        prediction_units=4, joint_units=4, vocab_size=3)
    with pytest.raises(ConfigMismatchError, match="encoder_units"):
        load_checkpoint(path, expect=other)
