import numpy as np
import pytest

from ctxtransducer import kernels
from ctxtransducer.dataset import SegmentRecord, UtteranceRecord
from ctxtransducer.model import ModelConfig, init_params

BACKENDS = sorted(kernels.BACKENDS)


@pytest.fixture(params=BACKENDS)
def backend(request):
    """Run the test once per available kernel backend."""
    previous = kernels.set_backend(request.param)
    yield request.param
    kernels.set_backend(previous)


@pytest.fixture
def tiny_config():
    return ModelConfig(input_dim=3, encoder_layers=1, encoder_units=4, prediction_layers=1,
                       prediction_units=4, joint_units=4, vocab_size=3)


@pytest.fixture
def tiny_params(tiny_config):
    return init_params(tiny_config, 7)


def make_record(T, D, segments, seed=0, uid="u0", condition=("clean",), dtype=np.float32):
    rng = np.random.default_rng(seed)
    segs = [SegmentRecord(a, b, None if y is None else tuple(y)) for a, b, y in segments]
    return UtteranceRecord(uid, rng.normal(size=(T, D)).astype(dtype), segs, frozenset(condition))


def scaled(params, factor):
    """Copy of ``params`` with every tensor multiplied (sharper, less uniform outputs)."""
    out = params.copy()
    for k in out.tensors:
        out.tensors[k] = out.tensors[k] * factor
    return out


# acceptance verdicts, filled by test_acceptance and printed after the run
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
