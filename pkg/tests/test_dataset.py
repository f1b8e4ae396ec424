import dataclasses
import json

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from ctxtransducer.container import ContainerError, MAGIC_F32, load_features, peek_shape, save_features
from ctxtransducer.dataset import (
    ContextCueSpec,
    ImpulseResponse,
    ManifestError,
    SegmentRecord,
    UtteranceRecord,
    ambiguous_labels,
    apply_channel_bias,
    apply_reverb,
    channel_bias_vector,
    generate_context_task,
    generate_utterance,
    load_impulse_response,
    read_manifest,
    split_eval_conditions,
    symbol_label,
    task_world,
    write_manifest,
)
from ctxtransducer.features import InvalidInputError, Waveform

from conftest import make_record


# ---------------------------------------------------------------- container

def test_feature_container_layout(tmp_path):
    x = np.arange(6, dtype=np.float32).reshape(2, 3)
    save_features(tmp_path / "f.sgt", x)
    raw = (tmp_path / "f.sgt").read_bytes()
    assert raw[:4] == MAGIC_F32
    assert raw[4:12] == (2).to_bytes(4, "little") + (3).to_bytes(4, "little")
    assert raw[12:] == x.astype("<f4").tobytes()
    assert peek_shape(tmp_path / "f.sgt") == (2, 3)
    np.testing.assert_array_equal(load_features(tmp_path / "f.sgt"), x)


def test_truncated_container_rejected(tmp_path):
    save_features(tmp_path / "f.sgt", np.ones((4, 4), dtype=np.float32))
    data = (tmp_path / "f.sgt").read_bytes()
    (tmp_path / "f.sgt").write_bytes(data[:-3])
    with pytest.raises(ContainerError, match="truncated"):
        load_features(tmp_path / "f.sgt")
    (tmp_path / "g.sgt").write_bytes(b"NOPE" + data[4:])
    with pytest.raises(ContainerError, match="magic"):
        load_features(tmp_path / "g.sgt")


# ---------------------------------------------------------------- manifest

def test_empty_manifest_round_trips(tmp_path):
    write_manifest([], tmp_path / "m.jsonl")
    assert read_manifest(tmp_path / "m.jsonl") == []


def test_absent_labels_differ_from_empty(tmp_path):
    r = make_record(10, 2, [(0, 3, None), (4, 9, ())])
    write_manifest([r], tmp_path / "m.jsonl")
    (back,) = read_manifest(tmp_path / "m.jsonl")
    assert back == r
    assert back.segments[0].labels is None and back.segments[1].labels == ()


@st.composite
def records(draw):
    n = draw(st.integers(0, 4))
    out = []
    for i in range(n):
        T = draw(st.integers(1, 30))
        D = draw(st.integers(1, 5))
        cuts = sorted(draw(st.sets(st.integers(0, T - 1), max_size=4)))
        segs, start = [], 0
        for c in cuts:
            if c >= start:
                lab = draw(st.one_of(st.none(), st.lists(st.integers(1, 9), max_size=5).map(tuple)))
                segs.append(SegmentRecord(start, c, lab))
                start = c + 1
        feats = draw(st.lists(st.floats(-1e6, 1e6, width=32), min_size=T * D, max_size=T * D))
        tags = draw(st.sets(st.sampled_from(["clean", "background_speech", "speaker_change"]), min_size=1))
        out.append(UtteranceRecord(f"utt {i}/x", np.array(feats, dtype=np.float32).reshape(T, D), segs, frozenset(tags), {"k": i}))
    return out


@settings(max_examples=40, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(records())
def test_manifest_round_trip_property(tmp_path, recs):
    path = tmp_path / "m.jsonl"
    write_manifest(recs, path)
    assert read_manifest(path) == recs


def test_out_of_range_segment_rejected_on_read(tmp_path):
    write_manifest([make_record(5, 2, [(0, 4, [1])], uid="abc")], tmp_path / "m.jsonl")
    lines = (tmp_path / "m.jsonl").read_text().splitlines()
    entry = json.loads(lines[1])
    entry["segments"] = [[0, 5, [1]]]
    (tmp_path / "m.jsonl").write_text(lines[0] + "\n" + json.dumps(entry) + "\n")
    with pytest.raises(ManifestError, match="'abc'.*out of range"):
        read_manifest(tmp_path / "m.jsonl")


def test_overlap_and_bad_header_rejected(tmp_path):
    with pytest.raises(ManifestError, match="overlaps"):
        make_record(10, 2, [(0, 5, None), (5, 9, [1])], uid="ov")
    (tmp_path / "m.jsonl").write_text('{"format": "other"}\n')
    with pytest.raises(ManifestError, match="header"):
        read_manifest(tmp_path / "m.jsonl")
    (tmp_path / "n.jsonl").write_text('{"format": "ctxtransducer-manifest", "version": 1, "count": 2}\n')
    with pytest.raises(ManifestError, match="announces 2"):
        read_manifest(tmp_path / "n.jsonl")


def test_blank_label_rejected():
    with pytest.raises(ManifestError, match="blank"):
        make_record(4, 1, [(0, 3, [0])])


def test_split_eval_conditions():
    a = make_record(3, 1, [(0, 2, [1])], uid="a")
    b = make_record(3, 1, [(0, 2, [1])], uid="b", condition=("background_speech",))
    c = make_record(3, 1, [(0, 2, [1])], uid="c", condition=("clean", "speaker_change"))
    assert list(split_eval_conditions([a])) == ["clean"]
    subsets = split_eval_conditions([a, b])
    assert {k: len(v) for k, v in subsets.items()} == {"clean": 1, "background_speech": 1}
    subsets = split_eval_conditions([a, c])
    assert [r.id for r in subsets["clean"]] == ["a", "c"] and [r.id for r in subsets["speaker_change"]] == ["c"]


# ---------------------------------------------------------------- generator

def test_generator_structure():
    spec = ContextCueSpec()
    for u in generate_context_task(spec, 30):
        prefix, seg = u.segments
        assert prefix.labels is None and seg.labels
        assert spec.prefix_len_range[0] <= prefix.n_frames <= spec.prefix_len_range[1]
        assert seg.t_s == prefix.t_e + 1 and seg.t_e == u.n_frames - 1
        assert u.condition == {"clean"}
        cue = u.meta["cue"]
        assert seg.labels == tuple(symbol_label(spec, s, cue) for s in u.meta["symbols"])


def test_generator_deterministic_and_order_independent():
    spec = ContextCueSpec(rng_seed=3)
    a = generate_context_task(spec, 8)
    assert a == generate_context_task(spec, 8)
    assert generate_utterance(spec, 5) == a[5]
    assert generate_context_task(dataclasses.replace(spec, rng_seed=4), 8) != a


def test_ambiguous_mapping_is_cue_dependent_bijection():
    spec = ContextCueSpec()
    amb = spec.n_ambiguous
    assert ambiguous_labels(spec) == frozenset(range(1, amb + 1))
    for c in range(spec.cue_code_count):
        assert sorted(symbol_label(spec, s, c) for s in range(amb)) == list(range(1, amb + 1))
    assert symbol_label(spec, 0, 0) != symbol_label(spec, 0, 1)
    assert symbol_label(spec, amb, 0) == symbol_label(spec, amb, 1)


def test_no_ambiguity_means_segment_suffices():
    spec = ContextCueSpec(ambiguous_fraction=0.0)
    for u in generate_context_task(spec, 10):
        assert u.segments[1].labels == tuple(1 + s for s in u.meta["symbols"])


def _log_post(x, templates, sigma):
    ll = np.array([-np.sum((x - m) ** 2) / (2 * sigma**2) for m in templates])
    return ll - np.logaddexp.reduce(ll)


def test_segment_only_bayes_error_is_one_half():
    """Exact posterior over the cue under the generator's Gaussian model.

    Clean templates come from regenerating with zero noise (the noise draw is
    the generator's last). For the segment alone both cue hypotheses share
    one template, so the posterior is uniform and every ambiguous token is
    a coin flip; with the prefix the posterior is near certain.
    """
    spec = ContextCueSpec(ambiguous_fraction=1.0, cue_code_count=2, n_symbols=8)
    clean = dataclasses.replace(spec, noise_std=0.0)
    world = task_world(spec)
    seg_err, full_err, n = 0.0, 0.0, 0
    for i in range(40):
        u, t = generate_utterance(spec, i, world), generate_utterance(clean, i, world)
        cue = u.meta["cue"]
        seg = u.segments[1]
        templates_full, templates_seg = [], []
        for c in range(2):
            m = t.features.astype(float).copy()
            m[: seg.t_s] += world.cue_vectors[c] - world.cue_vectors[cue]
            templates_full.append(m)
            templates_seg.append(m[seg.t_s :])
        post_seg = np.exp(_log_post(u.features[seg.t_s :].astype(float), templates_seg, spec.noise_std))
        post_full = np.exp(_log_post(u.features.astype(float), templates_full, spec.noise_std))
        np.testing.assert_allclose(post_seg, [0.5, 0.5], atol=1e-12)
        # MAP label error equals 1 - max posterior for each (all-ambiguous) token
        seg_err += (1 - post_seg.max()) * len(seg.labels)
        full_err += (1 - post_full[cue]) * len(seg.labels)
        n += len(seg.labels)
    assert seg_err / n == pytest.approx(0.5, abs=1e-12)
    assert full_err / n < 1e-6


def test_speaker_change_and_background_tags():
    spec = ContextCueSpec(speaker_change_fraction=1.0, background_speech_fraction=1.0, rng_seed=2)
    for u in generate_context_task(spec, 10):
        assert u.condition == {"speaker_change", "background_speech"}
        assert u.meta["segment_cue"] != u.meta["cue"]
        assert u.segments[1].labels == tuple(symbol_label(spec, s, u.meta["segment_cue"]) for s in u.meta["symbols"])


def test_spec_validation():
    with pytest.raises(ValueError):
        ContextCueSpec(cue_code_count=1)
    with pytest.raises(ValueError):
        ContextCueSpec(ambiguous_fraction=1.5)
    with pytest.raises(ValueError):
        ContextCueSpec(n_symbols=12)


# ---------------------------------------------------------------- perturbations

def _wave(n=4800, seed=0):
    return Waveform(np.random.default_rng(seed).normal(size=n), 16000)


def test_unit_and_scalar_impulse_are_identity():
    w = _wave()
    segs = [SegmentRecord(0, 3, None), SegmentRecord(4, 9, (1,))]
    for scope in ("full_utterance", "segments_only"):
        np.testing.assert_array_equal(apply_reverb(w, ImpulseResponse([1.0], 16000), scope, segs).samples, w.samples)
    np.testing.assert_allclose(apply_reverb(w, ImpulseResponse([0.5], 16000), "full_utterance", segs).samples, w.samples, rtol=1e-15)


def test_two_tap_echo_preserves_power():
    w = _wave()
    y = apply_reverb(w, ImpulseResponse([1.0, 0.0, 0.0, 0.6], 16000), "full_utterance", [])
    direct = float(np.sum(w.samples**2))
    assert abs(float(np.sum(y.samples**2)) - direct) / direct < 1e-6
    assert not np.allclose(y.samples, w.samples)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-2, 2), min_size=1, max_size=30).filter(lambda t: any(abs(v) > 1e-3 for v in t)),
       st.integers(0, 100))
def test_reverb_power_property(taps, seed):
    w = _wave(2400, seed)
    segs = [SegmentRecord(0, 1, None), SegmentRecord(2, 4, (1,))]
    for scope in ("full_utterance", "segments_only"):
        y = apply_reverb(w, ImpulseResponse(taps, 16000), scope, segs)
        assert abs(y.power - w.power) / w.power < 1e-6


def test_segment_scope_leaves_outside_untouched_up_to_gain():
    w = _wave()
    segs = [SegmentRecord(0, 3, None), SegmentRecord(4, 6, (1,))]
    y = apply_reverb(w, ImpulseResponse([1.0, 0.9], 16000), "segments_only", segs)
    ratio = y.samples[:1920] / w.samples[:1920]
    np.testing.assert_allclose(ratio, ratio[0])
    ratio_after = y.samples[3360:] / w.samples[3360:]
    np.testing.assert_allclose(ratio_after, ratio[0])


def test_reverb_errors(tmp_path):
    w = _wave()
    with pytest.raises(InvalidInputError):
        apply_reverb(w, ImpulseResponse([1.0], 16000), "segments_only", [SegmentRecord(0, 3, None)])
    with pytest.raises(InvalidInputError):
        apply_reverb(w, ImpulseResponse([1.0], 8000), "full_utterance", [])
    with pytest.raises(InvalidInputError):
        ImpulseResponse([0.0, 0.0], 16000)
    (tmp_path / "ir.txt").write_text("1 0.5\n")
    assert load_impulse_response(tmp_path / "ir.txt", 16000).taps.tolist() == [1.0, 0.5]
    with pytest.raises(InvalidInputError):
        load_impulse_response(tmp_path / "ir.txt")


def test_channel_bias_scopes():
    r = make_record(10, 4, [(0, 3, None), (4, 9, [1])])
    bias = channel_bias_vector(4, 2.0, 0, protect_dims=1)
    assert bias[0] == 0 and np.linalg.norm(bias) == pytest.approx(2.0)
    full = apply_channel_bias(r, bias, "full_utterance")
    seg = apply_channel_bias(r, bias, "segments_only")
    assert full.condition == {"reverb_full"} and seg.condition == {"reverb_segment"}
    np.testing.assert_allclose(full.features - r.features, np.tile(bias, (10, 1)), atol=1e-6)
    np.testing.assert_array_equal(seg.features[:4], r.features[:4])
    np.testing.assert_allclose(seg.features[4:] - r.features[4:], np.tile(bias, (6, 1)), atol=1e-6)
    assert apply_channel_bias(r, np.zeros(4), "full_utterance").features.tobytes() == r.features.tobytes()
