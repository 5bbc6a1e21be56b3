"""EEND models: Transformer encoder plus EDA or non-autoregressive attractors.

Both attractor extractors can tap intermediate encoder layers; with
self-conditioning the tapped posteriors are fed back into the embedding
stream of the following layer.
"""
from __future__ import annotations

import dataclasses
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from eend import nncore as nn
from eend.nncore import ParameterStore, Tensor

VARIANTS = ("EDA", "NA")
CHECKPOINT_MAGIC = b"EENDCKPT"
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    """Invalid or inconsistent model configuration."""


class CheckpointError(ValueError):
    """Malformed checkpoint or checkpoint/config mismatch."""


@dataclass
class ModelConfig:
    variant: str = "NA"
    num_layers: int = 4
    model_dim: int = 256
    heads: int = 4
    ff_dim: int = 2048
    num_speakers: int = 2
    input_dim: int = 345
    inter_loss: bool = False
    self_cond: bool = False
    dropout: float = 0.1
    seed: int = 0
    dtype: str = "float64"
    # layers (1-based, < num_layers) that emit intermediate labels; None = all
    tap_layers: tuple[int, ...] | None = None
    # weight of the averaged intermediate losses relative to the final loss
    mixing_ratio: float = 1.0

    def __post_init__(self):
        if self.tap_layers is not None:
            self.tap_layers = tuple(int(x) for x in self.tap_layers)
        self.validate()

    def validate(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        for name in ("num_layers", "model_dim", "heads", "ff_dim", "num_speakers", "input_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.model_dim % self.heads:
            raise ConfigError(f"model_dim {self.model_dim} is not divisible by heads {self.heads}")
        if self.self_cond and not self.inter_loss:
            raise ConfigError("self_cond requires inter_loss")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        if self.tap_layers is not None and any(
            not 1 <= l < self.num_layers for l in self.tap_layers
        ):
            raise ConfigError(f"tap layers must lie in 1..{self.num_layers - 1}")

    @property
    def taps(self) -> tuple[int, ...]:
        """Encoder layers whose output is turned into intermediate labels."""
        if not self.inter_loss:
            return ()
        if self.tap_layers is None:
            return tuple(range(1, self.num_layers))
        return tuple(sorted(set(self.tap_layers)))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["tap_layers"] = list(self.tap_layers) if self.tap_layers is not None else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ForwardOutput:
    final_posteriors: Tensor
    intermediate_posteriors: list[Tensor] = field(default_factory=list)
    # one entry per tap, then the final attractors last
    attractors: list[Tensor] = field(default_factory=list)
    existence_logits: Tensor | None = None
    embeddings: list[Tensor] | None = None

    def per_layer_posteriors(self) -> list[np.ndarray]:
        return [y.data for y in self.intermediate_posteriors] + [self.final_posteriors.data]


# ---------------------------------------------------------------- parameters


def _attention_shapes(d: int) -> dict[str, tuple]:
    return {
        "wq": (d, d), "bq": (d,), "wk": (d, d), "bk": (d,),
        "wv": (d, d), "bv": (d,), "wo": (d, d), "bo": (d,),
    }


def _lstm_shapes(d: int) -> dict[str, tuple]:
    return {"w_ih": (4 * d, d), "w_hh": (4 * d, d), "b_ih": (4 * d,), "b_hh": (4 * d,)}


def parameter_shapes(config: ModelConfig) -> dict[str, tuple]:
    """Name -> shape for every learnable tensor, in creation order."""
    d, ff = config.model_dim, config.ff_dim
    shapes = {
        "frontend.weight": (d, config.input_dim),
        "frontend.bias": (d,),
        "frontend_norm.gain": (d,),
        "frontend_norm.bias": (d,),
    }
    for l in range(1, config.num_layers + 1):
        p = f"encoder.{l}"
        for k, s in _attention_shapes(d).items():
            shapes[f"{p}.attn.{k}"] = s
        shapes.update({
            f"{p}.norm1.gain": (d,), f"{p}.norm1.bias": (d,),
            f"{p}.ff1.weight": (ff, d), f"{p}.ff1.bias": (ff,),
            f"{p}.ff2.weight": (d, ff), f"{p}.ff2.bias": (d,),
            f"{p}.norm2.gain": (d,), f"{p}.norm2.bias": (d,),
        })
    if config.variant == "EDA":
        for part in ("enc", "dec"):
            for k, s in _lstm_shapes(d).items():
                shapes[f"eda.{part}.{k}"] = s
        shapes["eda.exist.weight"] = (1, d)
        shapes["eda.exist.bias"] = (1,)
    else:
        shapes["na.queries"] = (config.num_speakers, d)
        for k, s in _attention_shapes(d).items():
            shapes[f"na.attn.{k}"] = s
    if config.self_cond:
        shapes["cond.weight"] = (d, d)
        shapes["cond.bias"] = (d,)
    return shapes


def build_params(config: ModelConfig) -> ParameterStore:
    """Instantiate parameters: Xavier-uniform matrices, zero biases, unit norm gains.

    The conditioning projection starts at zero so a fresh self-conditioned
    model computes exactly what its unconditioned counterpart does.
    """
    rng = np.random.default_rng(config.seed)
    store = ParameterStore(config.dtype)
    for name, shape in parameter_shapes(config).items():
        if name.startswith("cond."):
            value = np.zeros(shape)
        elif name.endswith(".gain"):
            value = np.ones(shape)
        elif len(shape) == 2:
            value = nn.xavier_uniform(rng, shape)
        else:
            value = np.zeros(shape)
        store.add(name, value)
    return store


def param_count(config: ModelConfig) -> int:
    """Closed-form scalar count, independent of :func:`build_params`."""
    d, ff, c = config.model_dim, config.ff_dim, config.num_speakers
    attention = 4 * (d * d + d)
    frontend = config.input_dim * d + d + 2 * d
    layer = attention + (d * ff + ff) + (ff * d + d) + 2 * 2 * d
    if config.variant == "EDA":
        lstm = 2 * 4 * d * d + 2 * 4 * d
        extractor = 2 * lstm + d + 1
    else:
        extractor = c * d + attention
    cond = d * d + d if config.self_cond else 0
    return frontend + config.num_layers * layer + extractor + cond


def check_params(config: ModelConfig, params: ParameterStore):
    shapes = parameter_shapes(config)
    if list(shapes) != params.names():
        missing = set(shapes) ^ set(params.names())
        raise ConfigError(f"parameters do not match config (differing names: {sorted(missing)[:5]})")
    for name, shape in shapes.items():
        if params[name].shape != shape:
            raise ConfigError(f"{name}: expected shape {shape}, found {params[name].shape}")


# ---------------------------------------------------------------- building blocks


def input_frontend(x_raw, params: ParameterStore) -> Tensor:
    """Project stacked features to the model dimension, then layer-normalize."""
    e = nn.linear(x_raw, params["frontend.weight"], params["frontend.bias"])
    return nn.layer_norm(e, params["frontend_norm.gain"], params["frontend_norm.bias"])


def encoder_layer_forward(e_prev, layer: dict, heads: int, dropout: float = 0.0,
                          rng=None, train: bool = False) -> Tensor:
    """Post-norm Transformer layer: self-attention then ReLU feed-forward."""
    attn = {k[5:]: v for k, v in layer.items() if k.startswith("attn.")}
    s = nn.multi_head_attention(e_prev, e_prev, e_prev, heads, attn)
    s = nn.dropout(s, dropout, rng, train)
    e = nn.layer_norm(nn.add(e_prev, s), layer["norm1.gain"], layer["norm1.bias"])
    f = nn.relu(nn.linear(e, layer["ff1.weight"], layer["ff1.bias"]))
    f = nn.dropout(f, dropout, rng, train)
    f = nn.linear(f, layer["ff2.weight"], layer["ff2.bias"])
    f = nn.dropout(f, dropout, rng, train)
    return nn.layer_norm(nn.add(e, f), layer["norm2.gain"], layer["norm2.bias"])


def _batched(e: Tensor) -> tuple[Tensor, bool]:
    if e.data.ndim == 2:
        return nn.reshape(e, (1,) + e.shape), True
    return e, False


def eda_attractors(embeddings, eda: dict, num_speakers: int) -> tuple[Tensor, Tensor]:
    """Encoder-decoder LSTM attractors.

    The encoder LSTM reads the embedding columns in time order; the decoder
    starts from its final state and is fed ``num_speakers`` zero vectors.
    Returns attractors (D x C) and existence logits (C).
    """
    e, squeeze = _batched(nn.as_tensor(embeddings))
    b, d = e.shape[0], e.shape[-2]
    dtype = e.dtype
    gates = nn.linear(e, eda["enc.w_ih"], nn.add(eda["enc.b_ih"], eda["enc.b_hh"]))
    gates = nn.transpose(gates)  # (B, T, 4D)
    zeros = np.zeros((b, d), dtype=dtype)
    _, h_last, c_last = nn.lstm_sequence(gates, eda["enc.w_hh"], zeros, zeros)
    # decoder inputs are zero vectors, so only the biases reach the gates
    dec_bias = nn.add(eda["dec.b_ih"], eda["dec.b_hh"])
    dec_gates = nn.broadcast_to(dec_bias, (b, num_speakers, 4 * d))
    attractors, _, _ = nn.lstm_sequence(dec_gates, eda["dec.w_hh"], h_last, c_last)
    attractors = nn.transpose(attractors)  # (B, D, C)
    logits = nn.linear(attractors, eda["exist.weight"], eda["exist.bias"])  # (B, 1, C)
    logits = nn.reshape(logits, (b, num_speakers))
    if squeeze:
        attractors = nn.reshape(attractors, attractors.shape[1:])
        logits = nn.reshape(logits, (num_speakers,))
    return attractors, logits


def na_attractors(embeddings, na: dict, heads: int) -> Tensor:
    """Cross-attention of learned speaker queries over the embedding frames."""
    e = nn.as_tensor(embeddings)
    queries = nn.transpose(na["queries"])  # (D, C)
    if e.data.ndim > 2:
        queries = nn.broadcast_to(queries, e.shape[:-2] + queries.shape)
    attn = {k[5:]: v for k, v in na.items() if k.startswith("attn.")}
    return nn.multi_head_attention(queries, e, e, heads, attn)


def readout(attractors, embeddings) -> Tensor:
    """Posteriors sigmoid(A^T E): one row per attractor, one column per frame."""
    return nn.sigmoid(nn.matmul(nn.transpose(attractors), embeddings))


def condition(e_l, attractors_l, posteriors_l, cond: dict) -> Tensor:
    """Add the linearly mapped, posterior-weighted attractor mix to each frame."""
    mix = nn.matmul(attractors_l, posteriors_l)  # (D, T)
    return nn.add(e_l, nn.linear(mix, cond["weight"], cond["bias"]))


# ---------------------------------------------------------------- full model


def extract_attractors(config: ModelConfig, params: ParameterStore, e) -> tuple[Tensor, Tensor | None]:
    if config.variant == "EDA":
        return eda_attractors(e, params.group("eda"), config.num_speakers)
    return na_attractors(e, params.group("na"), config.heads), None


def forward(config: ModelConfig, params: ParameterStore, x_raw, train: bool = False,
            rng: np.random.Generator | None = None, keep_embeddings: bool = False) -> ForwardOutput:
    """Run the model on ``input_dim x T`` features (leading batch axes allowed)."""
    x = np.asarray(x_raw.data if isinstance(x_raw, Tensor) else x_raw, dtype=params.dtype)
    if x.ndim < 2 or x.shape[-2] != config.input_dim:
        raise ConfigError(f"expected input of {config.input_dim} x T features, got shape {x.shape}")
    if train and config.dropout > 0 and rng is None:
        rng = np.random.default_rng(config.seed)
    taps = set(config.taps)
    cond = params.group("cond") if config.self_cond else None
    e = input_frontend(x, params)
    inter, attractors, embeddings = [], [], [] if keep_embeddings else None
    prev_tap = None
    for l in range(1, config.num_layers + 1):
        if cond is not None and prev_tap is not None:
            e = condition(e, prev_tap[0], prev_tap[1], cond)
        prev_tap = None
        e = encoder_layer_forward(e, params.group(f"encoder.{l}"), config.heads,
                                  config.dropout, rng, train)
        if embeddings is not None:
            embeddings.append(e)
        if l in taps:
            a_l, _ = extract_attractors(config, params, e)
            y_l = readout(a_l, e)
            inter.append(y_l)
            attractors.append(a_l)
            prev_tap = (a_l, y_l)
    a, exist = extract_attractors(config, params, e)
    y = readout(a, e)
    attractors.append(a)
    if not np.all(np.isfinite(y.data)):
        raise FloatingPointError("forward produced non-finite posteriors")
    return ForwardOutput(y, inter, attractors, exist, embeddings)


# ---------------------------------------------------------------- checkpoints
#
# Layout (all integers little-endian):
#   8s  magic "EENDCKPT"
#   u32 format version
#   u64 n, then n bytes of UTF-8 JSON holding the ModelConfig
#   u64 number of tensors
#   per tensor, in sorted name order:
#     u64 name length, name bytes, u64 ndim, ndim x u64 dims,
#     u64 payload length in bytes, payload as float32 little-endian


def dump_checkpoint(config: ModelConfig, params: ParameterStore | dict) -> bytes:
    state = params.state_dict() if isinstance(params, ParameterStore) else params
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    blob = json.dumps(config.to_dict(), sort_keys=True).encode()
    buf.write(struct.pack("<Q", len(blob)))
    buf.write(blob)
    buf.write(struct.pack("<Q", len(state)))
    for name in sorted(state):
        arr = np.ascontiguousarray(state[name], dtype="<f4")
        raw = name.encode()
        buf.write(struct.pack("<Q", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<Q", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        payload = arr.tobytes()
        buf.write(struct.pack("<Q", len(payload)))
        buf.write(payload)
    return buf.getvalue()


def parse_checkpoint(data: bytes) -> tuple[ModelConfig, dict[str, np.ndarray]]:
    view = memoryview(data)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError("checkpoint is truncated")
        out = view[pos:pos + n]
        pos += n
        return out

    def u64():
        return struct.unpack("<Q", take(8))[0]

    if bytes(take(8)) != CHECKPOINT_MAGIC:
        raise CheckpointError("not an EEND checkpoint (bad magic)")
    (version,) = struct.unpack("<I", take(4))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    config = ModelConfig.from_dict(json.loads(bytes(take(u64())).decode()))
    state = {}
    for _ in range(u64()):
        name = bytes(take(u64())).decode()
        ndim = u64()
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim)) if ndim else ()
        payload = take(u64())
        arr = np.frombuffer(payload, dtype="<f4").copy()
        if arr.size != int(np.prod(shape)):
            raise CheckpointError(f"{name}: payload size does not match shape {shape}")
        state[name] = arr.reshape(shape)
    if pos != len(view):
        raise CheckpointError("trailing bytes after checkpoint payload")
    return config, state


def save_checkpoint(path, config: ModelConfig, params: ParameterStore | dict):
    Path(path).write_bytes(dump_checkpoint(config, params))


def load_checkpoint(path) -> tuple[ModelConfig, ParameterStore]:
    config, state = parse_checkpoint(Path(path).read_bytes())
    params = build_params(config)
    try:
        params.load_state_dict(state)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    return config, params
