"""Hierarchical mixture of biometric experts.

The model refines a raw per-tracklet feature volume [T x K x 4d] in two
expert layers. A bank of n1 per-token experts (linear 4d->d plus GELU) feeds
a gating network whose weights mix the bank into three volumes, one per
second-layer expert. The long-term and short-term experts pool tokens and
apply a per-frame MLP, then average over frames; the temporal expert runs a
small decoder whose learnable query attends over lag-1 products of adjacent
frame tokens. A second gate fuses the three embeddings into the final vector.

``forward`` accepts optional replacement gate weights so the paired-input
conditioning path can reuse the same expert stack with its own gates.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    ConfigError,
    FormatError,
    InvariantError,
    ShapeError,
    TruncationError,
)
from .feature_store import FeatureVolume
from .numerics import MhsaParams, Tensor, concat, init_uniform, mhsa_forward, softmax_axis

GATE_SIMPLEX_TOL = 1e-6


@dataclass
class ModelConfig:
    """Dimensions and training constants for one model instance."""

    d: int = 16
    K: int = 17
    T: int = 4
    n1: int = 8
    n2: int = 3
    M: int = 4
    heads: int = 4
    num_identities: int = 8
    alpha: float = 0.5
    beta: float = 1.0
    margin: float = 4.0
    band_q: float = 20.0
    lr: float = 1e-3
    seed: int = 0
    dual_shared: bool = False  # one gate head serves both paired inputs

    def validate(self) -> None:
        if self.n2 != 3:
            raise ConfigError("the second layer holds exactly 3 experts")
        if self.n1 < 1:
            raise ConfigError("n1 must be >= 1")
        if self.M < 1:
            raise ConfigError("M must be >= 1")
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("loss weights must be >= 0")
        if self.margin <= 0:
            raise ConfigError("margin must be > 0")
        if not 0 <= self.band_q <= 100:
            raise ConfigError("band_q must lie in [0, 100]")
        if self.d < 1 or self.T < 1 or self.K < 1:
            raise ConfigError("d, T, K must be >= 1")
        if self.d % self.heads != 0:
            raise ConfigError(f"d={self.d} not divisible by heads={self.heads}")
        if self.num_identities < 1:
            raise ConfigError("num_identities must be >= 1")
        if self.lr < 0:
            raise ConfigError("lr must be >= 0")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @staticmethod
    def from_dict(row: dict) -> "ModelConfig":
        unknown = set(row) - set(ModelConfig.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        config = ModelConfig(**row)
        config.validate()
        return config


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Canonical name -> shape map; also fixes initialization order."""
    d, c_in = config.d, 4 * config.d
    shapes: dict[str, tuple[int, ...]] = {}
    for i in range(config.n1):
        shapes[f"expert1.{i}.w"] = (c_in, d)
        shapes[f"expert1.{i}.b"] = (d,)
    shapes["gate1.w1"] = (c_in, d)
    shapes["gate1.b1"] = (d,)
    shapes["gate1.w2"] = (d, config.n1 * config.n2)
    shapes["gate1.b2"] = (config.n1 * config.n2,)
    for name in ("long", "short", "temporal"):
        shapes[f"{name}.w1"] = (d, d)
        shapes[f"{name}.b1"] = (d,)
        shapes[f"{name}.w2"] = (d, d)
        shapes[f"{name}.b2"] = (d,)
    shapes["temporal.q0"] = (1, d)
    shapes["temporal.pe"] = (config.T, d)
    for i in range(config.M):
        p = f"temporal.block{i}"
        shapes[f"{p}.wt"] = (d, d)
        shapes[f"{p}.bt"] = (d,)
        for w in ("wq", "wk", "wv", "wo"):
            shapes[f"{p}.attn.{w}"] = (d, d)
        for b in ("bq", "bk", "bv", "bo"):
            shapes[f"{p}.attn.{b}"] = (d,)
        shapes[f"{p}.mlp.w1"] = (d, d)
        shapes[f"{p}.mlp.b1"] = (d,)
        shapes[f"{p}.mlp.w2"] = (d, d)
        shapes[f"{p}.mlp.b2"] = (d,)
    shapes["temporal.fc.w"] = (d, d)
    shapes["temporal.fc.b"] = (d,)
    shapes["gate2.w1"] = (config.n2 * d, d)
    shapes["gate2.b1"] = (d,)
    shapes["gate2.w2"] = (d, config.n2)
    shapes["gate2.b2"] = (config.n2,)
    shapes["classifier.w"] = (d, config.num_identities)
    shapes["classifier.b"] = (config.num_identities,)
    # Paired-input conditioning: attention halves are (c_in x c_in) blocks of
    # a swap-symmetric (2c_in x 2c_in) projection, assembled at forward time.
    for w in ("wq", "wk", "wv", "wo"):
        shapes[f"dual.attn.{w}1"] = (c_in, c_in)
        shapes[f"dual.attn.{w}2"] = (c_in, c_in)
    for b in ("bq", "bk", "bv", "bo"):
        shapes[f"dual.attn.{b}"] = (c_in,)
    for side in ("gallery", "query"):
        shapes[f"dual.{side}.gate1.w1"] = (c_in, d)
        shapes[f"dual.{side}.gate1.b1"] = (d,)
        shapes[f"dual.{side}.gate1.w2"] = (d, config.n1 * config.n2)
        shapes[f"dual.{side}.gate1.b2"] = (config.n1 * config.n2,)
        shapes[f"dual.{side}.gate2.w1"] = (c_in, d)
        shapes[f"dual.{side}.gate2.b1"] = (d,)
        shapes[f"dual.{side}.gate2.w2"] = (d, config.n2)
        shapes[f"dual.{side}.gate2.b2"] = (config.n2,)
    return shapes


def _fan_in(shape: tuple[int, ...]) -> int:
    # Weights are [in, out], so axis 0 is the fan-in; bias vectors fall back
    # to their own length.
    return shape[0]


@dataclass
class ModelParams:
    """Flat dict of named learnable tensors."""

    tensors: dict[str, Tensor] = field(default_factory=dict)

    @staticmethod
    def build(config: ModelConfig) -> "ModelParams":
        config.validate()
        rng = np.random.default_rng(np.random.SeedSequence(config.seed,
                                                           spawn_key=(0,)))
        tensors = {name: init_uniform(rng, shape, _fan_in(shape))
                   for name, shape in param_shapes(config).items()}
        # A zero starting query makes decoder attention exactly uniform on
        # the first forward pass, so early gradients see the time-averaged
        # frame dynamics instead of noise picked out by a random query.
        tensors["temporal.q0"].data[...] = 0.0
        # Tracklet-gate routing starts exactly at its prior rather than at a
        # seed-dependent point: the output layer is zeroed and the bias
        # prefers the long-term expert 3:1:1, so stable content routes long
        # by default and only training evidence moves the weights. A random
        # start lets whichever expert wins the first few steps lock the gate
        # regardless of what the data rewards; time-constant content is
        # equally expressible through the other two experts (a constant
        # offset has constant lagged products), so the default must carry
        # real weight.
        tensors["gate2.w2"].data[...] = 0.0
        tensors["gate2.b2"].data[...] = 0.0
        tensors["gate2.b2"].data[0] = math.log(3.0)
        return ModelParams(tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def attention(self, prefix: str) -> MhsaParams:
        t = self.tensors
        return MhsaParams(
            wq=t[f"{prefix}.wq"], wk=t[f"{prefix}.wk"],
            wv=t[f"{prefix}.wv"], wo=t[f"{prefix}.wo"],
            bq=t[f"{prefix}.bq"], bk=t[f"{prefix}.bk"],
            bv=t[f"{prefix}.bv"], bo=t[f"{prefix}.bo"])

    def validate(self, config: ModelConfig) -> None:
        expected = param_shapes(config)
        if set(self.tensors) != set(expected):
            missing = sorted(set(expected) - set(self.tensors))
            extra = sorted(set(self.tensors) - set(expected))
            raise ConfigError(f"parameter names mismatch: missing {missing}, "
                              f"extra {extra}")
        for name, tensor in self.tensors.items():
            if tensor.shape != expected[name]:
                raise ShapeError(f"{name}: shape {tensor.shape}, "
                                 f"expected {expected[name]}")
            if not np.all(np.isfinite(tensor.data)):
                raise InvariantError(f"{name} contains non-finite values")

    def num_parameters(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None


@dataclass
class GatingTensor1:
    """First-layer gate weights [T x K x n1 x n2], simplex over the n1 axis."""

    weights: Tensor

    def validate(self, tol: float = 1e-9) -> None:
        w = self.weights.data
        if w.ndim != 4:
            raise ShapeError(f"gate weights must be rank 4, got {w.ndim}")
        sums = w.sum(axis=2)
        if np.min(w) < -tol or np.max(np.abs(sums - 1.0)) > tol:
            raise InvariantError("first-layer gate weights leave the simplex")


@dataclass
class FrameEmbeddings:
    """Per-frame [T x d] embeddings from the three second-layer experts."""

    long: Tensor
    short: Tensor
    temporal: Tensor


@dataclass
class BiometricEmbedding:
    """All second-layer outputs plus the fused embedding for one tracklet."""

    long: Tensor
    short: Tensor
    temporal: Tensor
    fused: Tensor
    w2: Tensor
    gate1: GatingTensor1
    frames: FrameEmbeddings
    logits: Tensor

    def validate(self) -> None:
        w = self.w2.data
        if np.min(w) < -1e-9 or abs(float(w.sum()) - 1.0) > 1e-9:
            raise InvariantError("fusion weights leave the simplex")
        if not np.all(np.isfinite(self.fused.data)):
            raise InvariantError("fused embedding is non-finite")


def as_tensor(g) -> Tensor:
    return g.data if isinstance(g, FeatureVolume) else g


def linear_tokens(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Apply a linear map to the channel axis of a [T x K x c] volume."""
    t, k, c = x.shape
    out = x.reshape(t * k, c) @ w + b
    return out.reshape(t, k, w.shape[1])


def mlp_rows(x: Tensor, params: ModelParams, prefix: str) -> Tensor:
    hidden = (x @ params[f"{prefix}.w1"] + params[f"{prefix}.b1"]).gelu()
    return hidden @ params[f"{prefix}.w2"] + params[f"{prefix}.b2"]


def first_layer_forward(g, params: ModelParams,
                        config: ModelConfig) -> list[Tensor]:
    """Run every first-layer expert on the raw volume; n1 outputs [T x K x d]."""
    x = as_tensor(g)
    if x.ndim != 3 or x.shape[2] != 4 * config.d:
        raise ShapeError(f"expected [T x K x {4 * config.d}] volume, "
                         f"got {x.shape}")
    return [linear_tokens(x, params[f"expert1.{i}.w"],
                           params[f"expert1.{i}.b"]).gelu()
            for i in range(config.n1)]


def gate1_forward(g, params: ModelParams, config: ModelConfig) -> GatingTensor1:
    """Per-token gate logits -> softmax over the expert-bank axis."""
    x = as_tensor(g)
    t, k, _ = x.shape
    hidden = linear_tokens(x, params["gate1.w1"], params["gate1.b1"]).gelu()
    logits = linear_tokens(hidden, params["gate1.w2"], params["gate1.b2"])
    logits = logits.reshape(t, k, config.n1, config.n2)
    return GatingTensor1(softmax_axis(logits, axis=2))


def mix_layers(outputs: list[Tensor], gate: GatingTensor1) -> list[Tensor]:
    """Convex combination of the expert bank, one volume per second-layer expert."""
    w = gate.weights
    t, k, n1, n2 = w.shape
    if len(outputs) != n1:
        raise ShapeError(f"{len(outputs)} expert outputs for gate n1={n1}")
    sums = w.data.sum(axis=2)
    if np.min(w.data) < -GATE_SIMPLEX_TOL or \
            np.max(np.abs(sums - 1.0)) > GATE_SIMPLEX_TOL:
        raise InvariantError("gate weights violate the simplex constraint")
    mixed = []
    for j in range(n2):
        acc = w[:, :, 0, j].reshape(t, k, 1) * outputs[0]
        for i in range(1, n1):
            acc = acc + w[:, :, i, j].reshape(t, k, 1) * outputs[i]
        mixed.append(acc)
    return mixed


def _pooled_frames(volume: Tensor, params: ModelParams, prefix: str) -> Tensor:
    """Mean-pool the token axis, then a per-frame MLP; [T x K x d] -> [T x d]."""
    return mlp_rows(volume.mean(axis=1), params, prefix)


def long_term_forward(volume: Tensor, params: ModelParams) -> tuple[Tensor, Tensor]:
    frames = _pooled_frames(volume, params, "long")
    return frames, frames.mean(axis=0)


def short_term_forward(volume: Tensor, params: ModelParams) -> tuple[Tensor, Tensor]:
    frames = _pooled_frames(volume, params, "short")
    return frames, frames.mean(axis=0)


def temporal_forward(volume: Tensor, params: ModelParams, config: ModelConfig,
                     pool: bool = False) -> tuple[Tensor, Tensor]:
    """Frame tokens plus the decoder-refined video-level embedding.

    Each decoder block projects lag-1 products of adjacent frame tokens,
    adds a learned positional embedding, and lets the query token attend
    over the result. ``pool=True`` bypasses the decoder and mean-pools the
    frame tokens (ablation path).
    """
    if config.M < 1:
        raise ConfigError("temporal decoder needs M >= 1 blocks")
    tokens = _pooled_frames(volume, params, "temporal")
    if pool:
        q = tokens.mean(axis=0).reshape(1, config.d)
    else:
        q = params["temporal.q0"]
        t = tokens.shape[0]
        # Frame-to-frame dynamics: lag-1 products carry motion statistics
        # (e.g. oscillation frequency) that no per-frame map can expose; the
        # final frame pairs with itself so the row count stays T.
        lagged = concat([tokens[1:], tokens[t - 1:t]], axis=0)
        dynamics = tokens * lagged
        for i in range(config.M):
            p = f"temporal.block{i}"
            y = dynamics @ params[f"{p}.wt"] + params[f"{p}.bt"] \
                + params["temporal.pe"]
            attended = q + mhsa_forward(q, y, y, config.heads,
                                        params.attention(f"{p}.attn"))
            q = attended + mlp_rows(attended, params, f"{p}.mlp")
    final = q @ params["temporal.fc.w"] + params["temporal.fc.b"]
    return tokens, final.reshape(config.d)


def gate2_forward(mixed: list[Tensor], params: ModelParams,
                  config: ModelConfig) -> Tensor:
    """Fusion weights over the three experts from the mixed volumes."""
    if len(mixed) != config.n2:
        raise ShapeError(f"expected {config.n2} volumes, got {len(mixed)}")
    shapes = {m.shape for m in mixed}
    if len(shapes) != 1:
        raise ShapeError(f"mixed volumes disagree in shape: {shapes}")
    pooled = concat(mixed, axis=2).mean(axis=(0, 1))
    logits = mlp_rows(pooled.reshape(1, config.n2 * config.d), params, "gate2")
    return softmax_axis(logits, axis=1).reshape(config.n2)


def fuse_embedding(long: Tensor, short: Tensor, temporal: Tensor,
                   w2: Tensor) -> Tensor:
    w = w2.data
    if np.min(w) < -GATE_SIMPLEX_TOL or abs(float(w.sum()) - 1.0) > GATE_SIMPLEX_TOL:
        raise InvariantError("fusion weights violate the simplex constraint")
    return w2[0] * long + w2[1] * short + w2[2] * temporal


def forward(g, params: ModelParams, config: ModelConfig,
            gates: tuple[GatingTensor1, Tensor] | None = None,
            temporal_pool: bool = False) -> BiometricEmbedding:
    """Full single-tracklet pipeline.

    ``gates`` replaces both computed gate outputs (the paired-input path
    computes them from two tracklets jointly and re-runs the experts here).
    """
    x = as_tensor(g)
    expected = (config.T, config.K, 4 * config.d)
    if x.shape != expected:
        raise ShapeError(f"volume shape {x.shape} does not match config "
                         f"{expected}")
    bank = first_layer_forward(x, params, config)
    gate1 = gates[0] if gates is not None else gate1_forward(x, params, config)
    mixed = mix_layers(bank, gate1)
    long_frames, long_vec = long_term_forward(mixed[0], params)
    short_frames, short_vec = short_term_forward(mixed[1], params)
    temporal_tokens, temporal_vec = temporal_forward(mixed[2], params, config,
                                                     pool=temporal_pool)
    w2 = gates[1] if gates is not None else gate2_forward(mixed, params, config)
    fused = fuse_embedding(long_vec, short_vec, temporal_vec, w2)
    logits = (fused.reshape(1, config.d) @ params["classifier.w"]
              + params["classifier.b"]).reshape(config.num_identities)
    return BiometricEmbedding(
        long=long_vec, short=short_vec, temporal=temporal_vec, fused=fused,
        w2=w2, gate1=gate1,
        frames=FrameEmbeddings(long=long_frames, short=short_frames,
                               temporal=temporal_tokens),
        logits=logits)


# -- checkpoints ------------------------------------------------------------

_CKPT_MAGIC = b"HPK1"
_CKPT_HEADER = struct.Struct("<4sI")


def save_checkpoint(path: str | Path, params: ModelParams, meta: dict) -> None:
    """Write named f64 parameter blocks plus a JSON meta record."""
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_HEADER.pack(_CKPT_MAGIC, 1))
        fh.write(struct.pack("<I", len(meta_bytes)))
        fh.write(meta_bytes)
        fh.write(struct.pack("<I", len(params.tensors)))
        for name, tensor in params.tensors.items():
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", tensor.ndim))
            fh.write(struct.pack(f"<{tensor.ndim}I", *tensor.shape))
            fh.write(tensor.data.astype("<f8").tobytes())


def load_checkpoint(path: str | Path) -> tuple[ModelParams, dict]:
    raw = Path(path).read_bytes()
    if len(raw) < _CKPT_HEADER.size or raw[:4] != _CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint file")
    _, version = _CKPT_HEADER.unpack_from(raw)
    if version != 1:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    offset = _CKPT_HEADER.size

    def take(n: int) -> bytes:
        nonlocal offset
        if offset + n > len(raw):
            raise TruncationError(f"{path}: checkpoint ends mid-record")
        chunk = raw[offset:offset + n]
        offset += n
        return chunk

    (meta_len,) = struct.unpack("<I", take(4))
    meta = json.loads(take(meta_len).decode("utf-8"))
    (count,) = struct.unpack("<I", take(4))
    tensors: dict[str, Tensor] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(take(8 * size), dtype="<f8").reshape(shape)
        tensors[name] = Tensor(data.copy(), requires_grad=True)
    if offset != len(raw):
        raise FormatError(f"{path}: {len(raw) - offset} trailing bytes")
    return ModelParams(tensors), meta
