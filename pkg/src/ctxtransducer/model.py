"""Transducer network: LSTM encoder, LSTM prediction network, feed-forward joint.

Everything is plain NumPy with hand-written backward passes. Sequences in a
batch are right-padded; padding never influences valid positions because the
recurrences are causal and the loss never reads padded rows, so the backward
pass receives exact zeros there.

Gate layout inside every LSTM weight matrix is ``[input, forget, cell, output]``
and the weight stacks the input and recurrent parts: ``W = [W_x; W_h]`` with
shape ``(in_dim + units, 4 * units)``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, fields
from typing import NamedTuple

import numpy as np

from . import kernels
from .container import MAGIC_F64, ContainerError, read_tensor, write_tensor


class ConfigMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int
    encoder_layers: int = 2
    encoder_units: int = 64
    prediction_layers: int = 1
    prediction_units: int = 64
    joint_units: int = 64
    vocab_size: int = 10

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 1:
                raise ValueError(f"ModelConfig.{f.name} must be >= 1")
        if self.vocab_size < 2:
            raise ValueError("ModelConfig.vocab_size must be >= 2 (blank plus one label)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**{k: int(v) for k, v in d.items()})


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    shapes = {}
    H = config.encoder_units
    in_dim = config.input_dim
    for layer in range(config.encoder_layers):
        shapes[f"encoder.{layer}.weight"] = (in_dim + H, 4 * H)
        shapes[f"encoder.{layer}.bias"] = (4 * H,)
        in_dim = H
    P = config.prediction_units
    shapes["prediction.embedding"] = (config.vocab_size, P)
    for layer in range(config.prediction_layers):
        shapes[f"prediction.{layer}.weight"] = (2 * P, 4 * P)
        shapes[f"prediction.{layer}.bias"] = (4 * P,)
    shapes["joint.weight"] = (H + P, config.joint_units)
    shapes["joint.bias"] = (config.joint_units,)
    shapes["output.weight"] = (config.joint_units, config.vocab_size)
    shapes["output.bias"] = (config.vocab_size,)
    return shapes


def fan_in(name: str, config: ModelConfig) -> int:
    """Fan-in used for the init bound of tensor ``name`` (embedding counts as a one-hot layer)."""
    if name == "prediction.embedding":
        return config.vocab_size
    weight = name.rsplit(".", 1)[0] + ".weight"
    return param_shapes(config)[weight][0]


@dataclass(eq=False)
class ModelParams:
    config: ModelConfig
    tensors: dict[str, np.ndarray]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(self.tensors)

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.tensors.items()}

    def equals(self, other: "ModelParams") -> bool:
        return (
            self.config == other.config
            and self.names() == other.names()
            and all(np.array_equal(self[k], other[k]) for k in self.tensors)
        )


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in param_shapes(config).items():
        k = 1.0 / np.sqrt(fan_in(name, config))
        tensors[name] = rng.uniform(-k, k, size=shape)
    for prefix, units, layers in (
        ("encoder", config.encoder_units, config.encoder_layers),
        ("prediction", config.prediction_units, config.prediction_layers),
    ):
        for layer in range(layers):
            tensors[f"{prefix}.{layer}.bias"][units : 2 * units] = 1.0
    return ModelParams(config, tensors)


def zero_params(config: ModelConfig) -> ModelParams:
    return ModelParams(config, {k: np.zeros(s) for k, s in param_shapes(config).items()})


# ---------------------------------------------------------------------------
# LSTM core

def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


class _LstmCache(NamedTuple):
    x: np.ndarray       # (B, T, D)
    gates: np.ndarray   # (B, T, 4H) post-activation i, f, g, o
    c: np.ndarray       # (B, T+1, H), c[:, 0] is the initial state
    h: np.ndarray       # (B, T+1, H)


def lstm_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray):
    B, T, D = x.shape
    xw = np.ascontiguousarray(x @ weight[:D] + bias)
    gates, c, h = kernels.lstm_recurrence_forward(xw, np.ascontiguousarray(weight[D:]))
    return h[:, 1:], _LstmCache(x, gates, c, h)


def lstm_backward(dh_out: np.ndarray, cache: _LstmCache, weight: np.ndarray):
    """Return ``(dx, dweight, dbias)`` given the gradient w.r.t. every output row."""
    x, gates, c, h = cache
    B, T, D = x.shape
    H = weight.shape[1] // 4
    dz = kernels.lstm_recurrence_backward(
        np.ascontiguousarray(dh_out, dtype=np.float64), gates, c, np.ascontiguousarray(weight[D:])
    )
    dz2 = dz.reshape(B * T, 4 * H)
    dweight = np.concatenate(
        [x.reshape(B * T, D).T @ dz2, h[:, :-1].reshape(B * T, H).T @ dz2], axis=0
    )
    dbias = dz2.sum(axis=0)
    dx = dz @ weight[:D].T
    return dx, dweight, dbias


def pad_batch(seqs: list[np.ndarray]) -> np.ndarray:
    T = max(len(s) for s in seqs)
    out = np.zeros((len(seqs), T, seqs[0].shape[1]))
    for b, s in enumerate(seqs):
        out[b, : len(s)] = s
    return out


# ---------------------------------------------------------------------------
# encoder

class EncoderOutput(NamedTuple):
    h: np.ndarray                                  # (T, encoder_units)
    states: list[tuple[np.ndarray, np.ndarray]]    # final (h, c) per layer


def encoder_forward(params: ModelParams, x: np.ndarray):
    """Batched encoder over padded input ``(B, T, D)``; returns top-layer output and cache."""
    cfg = params.config
    if x.shape[-1] != cfg.input_dim:
        raise ValueError(f"input has {x.shape[-1]} feature dims, model expects {cfg.input_dim}")
    caches = []
    out = x
    for layer in range(cfg.encoder_layers):
        out, cache = lstm_forward(out, params[f"encoder.{layer}.weight"], params[f"encoder.{layer}.bias"])
        caches.append(cache)
    return out, caches


def encoder_backward(params: ModelParams, caches, dh: np.ndarray, grads: dict):
    """Accumulate encoder parameter gradients into ``grads``; return input gradient."""
    for layer in range(params.config.encoder_layers - 1, -1, -1):
        w = params[f"encoder.{layer}.weight"]
        dh, dw, db = lstm_backward(dh, caches[layer], w)
        grads[f"encoder.{layer}.weight"] += dw
        grads[f"encoder.{layer}.bias"] += db
    return dh


def encode(params: ModelParams, x: np.ndarray) -> EncoderOutput:
    """Run the encoder over one ``(T, D)`` feature matrix from a zero initial state."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"expected a (T, D) matrix, got shape {x.shape}")
    h, caches = encoder_forward(params, x[None])
    H = params.config.encoder_units
    states = [(c.h[0, -1].copy(), c.c[0, -1].copy()) for c in caches]
    return EncoderOutput(h[0].reshape(-1, H), states)


# ---------------------------------------------------------------------------
# prediction network

def _check_pred_labels(labels, vocab_size):
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.size and (labels.min() < 1 or labels.max() >= vocab_size):
        raise ValueError(f"prediction labels must lie in [1, {vocab_size - 1}], got {labels.tolist()}")
    return labels


def prediction_forward(params: ModelParams, label_seqs: list):
    """Batched prediction network. Row 0 of each output is the start state (blank input)."""
    cfg = params.config
    seqs = [np.concatenate([[0], _check_pred_labels(y, cfg.vocab_size)]) for y in label_seqs]
    U1 = max(len(s) for s in seqs)
    ids = np.zeros((len(seqs), U1), dtype=np.int64)
    for b, s in enumerate(seqs):
        ids[b, : len(s)] = s
    out = params["prediction.embedding"][ids]
    caches = []
    for layer in range(cfg.prediction_layers):
        out, cache = lstm_forward(out, params[f"prediction.{layer}.weight"], params[f"prediction.{layer}.bias"])
        caches.append(cache)
    return out, (ids, caches)


def prediction_backward(params: ModelParams, cache, dg: np.ndarray, grads: dict) -> None:
    ids, caches = cache
    for layer in range(params.config.prediction_layers - 1, -1, -1):
        dg, dw, db = lstm_backward(dg, caches[layer], params[f"prediction.{layer}.weight"])
        grads[f"prediction.{layer}.weight"] += dw
        grads[f"prediction.{layer}.bias"] += db
    np.add.at(grads["prediction.embedding"], ids.reshape(-1), dg.reshape(-1, dg.shape[-1]))


def predict_labels(params: ModelParams, labels) -> np.ndarray:
    """``(U+1, prediction_units)`` outputs; row ``j`` conditions on ``labels[:j]``."""
    g, _ = prediction_forward(params, [labels])
    return g[0]


class PredictionState(NamedTuple):
    h: list[np.ndarray]
    c: list[np.ndarray]
    output: np.ndarray


def prediction_start(params: ModelParams) -> PredictionState:
    P = params.config.prediction_units
    L = params.config.prediction_layers
    zero = PredictionState([np.zeros(P)] * L, [np.zeros(P)] * L, np.zeros(P))
    return prediction_step(params, 0, zero)


def prediction_step(params: ModelParams, label: int, state: PredictionState) -> PredictionState:
    """Advance the prediction network by one input token (decoding path)."""
    x = params["prediction.embedding"][label]
    P = params.config.prediction_units
    hs, cs = [], []
    for layer in range(params.config.prediction_layers):
        w = params[f"prediction.{layer}.weight"]
        z = x @ w[:P] + state.h[layer] @ w[P:] + params[f"prediction.{layer}.bias"]
        i, f, o = _sigmoid(z[:P]), _sigmoid(z[P : 2 * P]), _sigmoid(z[3 * P :])
        g = np.tanh(z[2 * P : 3 * P])
        c = f * state.c[layer] + i * g
        x = o * np.tanh(c)
        hs.append(x)
        cs.append(c)
    return PredictionState(hs, cs, x)


# ---------------------------------------------------------------------------
# joint network

class _JointCache(NamedTuple):
    h: np.ndarray
    g: np.ndarray
    act: np.ndarray  # (T, U+1, J) tanh output


def joint_forward(params: ModelParams, h_rows: np.ndarray, g_rows: np.ndarray):
    """Logits ``(T, U+1, V)``: ``W_out tanh(W_j [h_t ; g_u] + b_j) + b_out``."""
    H = params.config.encoder_units
    w = params["joint.weight"]
    if h_rows.shape[-1] != H or g_rows.shape[-1] != w.shape[0] - H:
        raise ValueError("joint input dimensions do not match the model config")
    pre = (h_rows @ w[:H])[:, None, :] + (g_rows @ w[H:])[None, :, :] + params["joint.bias"]
    act = np.tanh(pre)
    z = act @ params["output.weight"] + params["output.bias"]
    return z, _JointCache(h_rows, g_rows, act)


def joint(params: ModelParams, h_rows: np.ndarray, g_rows: np.ndarray) -> np.ndarray:
    return joint_forward(params, np.asarray(h_rows, float), np.asarray(g_rows, float))[0]


def joint_backward(params: ModelParams, cache: _JointCache, dz: np.ndarray, grads: dict):
    """Accumulate joint gradients; return ``(dh_rows, dg_rows)``."""
    h, g, act = cache
    H = params.config.encoder_units
    J = act.shape[-1]
    V = dz.shape[-1]
    grads["output.weight"] += act.reshape(-1, J).T @ dz.reshape(-1, V)
    grads["output.bias"] += dz.sum(axis=(0, 1))
    dpre = (dz @ params["output.weight"].T) * (1.0 - act * act)
    grads["joint.bias"] += dpre.sum(axis=(0, 1))
    dpre_t = dpre.sum(axis=1)
    dpre_u = dpre.sum(axis=0)
    w = params["joint.weight"]
    grads["joint.weight"][:H] += h.T @ dpre_t
    grads["joint.weight"][H:] += g.T @ dpre_u
    return dpre_t @ w[:H].T, dpre_u @ w[H:].T


def joint_logits_row(params: ModelParams, h_proj: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Single-node logits given a pre-projected encoder row ``h_t @ W_j[:H]`` (decoding path)."""
    H = params.config.encoder_units
    act = np.tanh(h_proj + g @ params["joint.weight"][H:] + params["joint.bias"])
    return act @ params["output.weight"] + params["output.bias"]


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_MAGIC = b"SGCK"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(
    path, params: ModelParams, step: int, extra: dict | None = None, info: dict | None = None
) -> None:
    """Write params (and optional extra named tensors, e.g. optimizer moments).

    File: ``SGCK``, u32 version, u32 header length, JSON header (config, step,
    free-form ``info``, tensor names and shapes), then one ``SGT2`` block per
    tensor in header order.
    """
    named = dict(params.tensors)
    for k, v in (extra or {}).items():
        named[k] = v
    header = {
        "config": params.config.to_dict(),
        "step": int(step),
        "info": dict(info or {}),
        "tensors": [[k, list(v.shape)] for k, v in named.items()],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for v in named.values():
            write_tensor(fh, np.asarray(v, dtype=np.float64).reshape(v.shape[0] if v.ndim else 1, -1), MAGIC_F64)


def _read_header(fh, path) -> dict:
    magic = fh.read(4)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (magic {magic!r})")
    head = fh.read(8)
    if len(head) != 8:
        raise CheckpointError(f"{path}: truncated header")
    version, n = struct.unpack("<II", head)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    blob = fh.read(n)
    if len(blob) != n:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(blob)
        header["config"] = ModelConfig.from_dict(header["config"])
    except (ValueError, KeyError, TypeError) as err:
        raise CheckpointError(f"{path}: malformed header: {err}") from None
    return header


def checkpoint_info(path) -> dict:
    """Header fields only (config, step, info) without reading tensors."""
    with open(path, "rb") as fh:
        header = _read_header(fh, path)
    return {"config": header["config"], "step": int(header["step"]), "info": header.get("info", {})}


def load_checkpoint(path, expect: ModelConfig | None = None):
    """Return ``(params, config, step, extra)``; nothing is returned on any error."""
    with open(path, "rb") as fh:
        header = _read_header(fh, path)
        config = header["config"]
        if expect is not None and config != expect:
            diff = [f.name for f in fields(ModelConfig) if getattr(config, f.name) != getattr(expect, f.name)]
            raise ConfigMismatchError(
                f"{path}: checkpoint config differs in {', '.join(diff)}: "
                + ", ".join(f"{k}={getattr(config, k)} (expected {getattr(expect, k)})" for k in diff)
            )
        tensors = {}
        for name, shape in header["tensors"]:
            try:
                arr = read_tensor(fh, MAGIC_F64)
            except ContainerError as err:
                raise CheckpointError(f"{path}: tensor {name}: {err}") from None
            tensors[name] = arr.reshape(shape)
    shapes = param_shapes(config)
    missing = [k for k in shapes if k not in tensors]
    if missing:
        raise CheckpointError(f"{path}: missing tensors {missing}")
    for k, s in shapes.items():
        if tensors[k].shape != s:
            raise CheckpointError(f"{path}: tensor {k} has shape {tensors[k].shape}, expected {s}")
    params = ModelParams(config, {k: tensors.pop(k) for k in shapes})
    return params, config, int(header["step"]), tensors
