"""Toy-scale training loop: balanced sampling, Adam updates, mode alternation.

Each batch holds P identities with exactly two tracklets per identity, which
is the smallest arrangement that feeds every loss term: the paired
consistency losses need two clips of the same person, and the contrastive
term needs both positive and cross-identity pairs. Even steps run the
single-input gating path, odd steps the paired conditioning path.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dual_input import dual_condition
from .errors import DivergenceError, InvariantError, SamplingError
from .feature_store import FeatureVolume, Manifest, load_split
from .losses import PairSample, total_loss
from .moe_core import (
    BiometricEmbedding,
    ModelConfig,
    ModelParams,
    forward,
    load_checkpoint,
    save_checkpoint,
)
from .numerics import Tensor

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

MODES = ("single", "dual")

STATE_FILENAME = "state.hpk1"
MODEL_FILENAME = "ckpt.hpk1"
LOG_FILENAME = "train_log.csv"

_MOMENT_M = "adam.m."
_MOMENT_V = "adam.v."


@dataclass
class Batch:
    """P identities with exactly two tracklets each, pairs adjacent."""

    volumes: list[FeatureVolume]
    subjects: list[int]

    @property
    def num_identities(self) -> int:
        return len(self.subjects) // 2

    def validate(self) -> None:
        if len(self.volumes) != len(self.subjects):
            raise InvariantError("batch volumes and labels differ in length")
        if not self.subjects or len(self.subjects) % 2 != 0:
            raise InvariantError("batch must hold identity pairs")
        for i in range(0, len(self.subjects), 2):
            if self.subjects[i] != self.subjects[i + 1]:
                raise InvariantError(
                    f"batch positions {i},{i + 1} are not a same-identity pair")
        counts: dict[int, int] = {}
        for s in self.subjects:
            counts[s] = counts.get(s, 0) + 1
        bad = {s: n for s, n in counts.items() if n != 2}
        if bad:
            raise InvariantError(
                f"identities must contribute exactly 2 tracklets, got {bad}")


def sample_batch(volumes: list[FeatureVolume], num_identities: int,
                 rng: np.random.Generator) -> Batch:
    """Draw ``num_identities`` subjects without replacement, 2 tracklets each."""
    groups: dict[int, list[FeatureVolume]] = {}
    for volume in volumes:
        groups.setdefault(volume.subject_id, []).append(volume)
    eligible = sorted(s for s, vs in groups.items() if len(vs) >= 2)
    if num_identities < 1:
        raise SamplingError("need at least one identity per batch")
    if len(eligible) < num_identities:
        raise SamplingError(
            f"need {num_identities} identities with >=2 tracklets, "
            f"found {len(eligible)}")
    chosen = rng.choice(np.asarray(eligible), size=num_identities,
                        replace=False)
    picked_volumes: list[FeatureVolume] = []
    picked_subjects: list[int] = []
    for subject in chosen:
        pool = groups[int(subject)]
        first, second = rng.choice(len(pool), size=2, replace=False)
        picked_volumes.extend([pool[int(first)], pool[int(second)]])
        picked_subjects.extend([int(subject), int(subject)])
    batch = Batch(volumes=picked_volumes, subjects=picked_subjects)
    batch.validate()
    return batch


@dataclass
class TrainState:
    """Everything needed to reproduce the remainder of a training run."""

    config: ModelConfig
    params: ModelParams
    moments_m: dict[str, np.ndarray]
    moments_v: dict[str, np.ndarray]
    step: int
    rng: np.random.Generator
    history: list[tuple[int, str, float]] = field(default_factory=list)

    @classmethod
    def init(cls, config: ModelConfig) -> "TrainState":
        config.validate()
        params = ModelParams.build(config)
        zeros_like = {name: np.zeros_like(t.data)
                      for name, t in params.tensors.items()}
        return cls(
            config=config,
            params=params,
            moments_m=zeros_like,
            moments_v={k: v.copy() for k, v in zeros_like.items()},
            step=0,
            rng=np.random.default_rng(config.seed),
            history=[],
        )

    def save(self, path: str | Path) -> None:
        blob = dict(self.params.tensors)
        for name, value in self.moments_m.items():
            blob[_MOMENT_M + name] = Tensor(value, requires_grad=False)
        for name, value in self.moments_v.items():
            blob[_MOMENT_V + name] = Tensor(value, requires_grad=False)
        meta = {
            "kind": "train_state",
            "config": self.config.to_dict(),
            "step": self.step,
            "rng": self.rng.bit_generator.state,
            "history": [[s, m, l] for s, m, l in self.history],
        }
        save_checkpoint(path, ModelParams(tensors=blob), meta)

    @classmethod
    def load(cls, path: str | Path) -> "TrainState":
        loaded, meta = load_checkpoint(path)
        config = ModelConfig.from_dict(meta["config"])
        tensors: dict[str, Tensor] = {}
        moments_m: dict[str, np.ndarray] = {}
        moments_v: dict[str, np.ndarray] = {}
        for name, tensor in loaded.tensors.items():
            if name.startswith(_MOMENT_M):
                moments_m[name[len(_MOMENT_M):]] = tensor.data
            elif name.startswith(_MOMENT_V):
                moments_v[name[len(_MOMENT_V):]] = tensor.data
            else:
                tensors[name] = tensor
        params = ModelParams(tensors=tensors)
        params.validate(config)
        rng = np.random.default_rng(config.seed)
        rng.bit_generator.state = meta["rng"]
        history = [(int(s), str(m), float(l)) for s, m, l in meta["history"]]
        return cls(config=config, params=params, moments_m=moments_m,
                   moments_v=moments_v, step=int(meta["step"]), rng=rng,
                   history=history)


def mode_for_step(step: int, single_per_dual: int = 1) -> str:
    """Cycle of ``single_per_dual`` single-input steps, then one dual step."""
    if single_per_dual < 0:
        raise InvariantError("single_per_dual must be >= 0")
    return "single" if step % (single_per_dual + 1) < single_per_dual else "dual"


def _single_embeddings(batch: Batch, params: ModelParams,
                       config: ModelConfig) -> list[BiometricEmbedding]:
    return [forward(v.data, params, config) for v in batch.volumes]


def _dual_embeddings(batch: Batch, params: ModelParams,
                     config: ModelConfig) -> list[BiometricEmbedding]:
    # Each tracklet is conditioned against its same-identity partner, so the
    # gates see exactly the pairing the consistency losses compare.
    embeddings: list[BiometricEmbedding] = []
    for i in range(0, len(batch.volumes), 2):
        a = batch.volumes[i].data
        b = batch.volumes[i + 1].data
        cond = dual_condition(a, b, params, config)
        embeddings.append(forward(a, params, config,
                                  gates=cond.gallery_gates))
        embeddings.append(forward(b, params, config,
                                  gates=cond.query_gates))
    return embeddings


def batch_pairs(embeddings: list[BiometricEmbedding],
                subjects: list[int]) -> list[PairSample]:
    """Positive pair per identity plus a cross-identity negative rotation."""
    pairs = []
    p = len(subjects) // 2
    for i in range(p):
        pairs.append(PairSample(first=embeddings[2 * i],
                                second=embeddings[2 * i + 1],
                                first_subject=subjects[2 * i],
                                second_subject=subjects[2 * i + 1]))
    if p > 1:
        for i in range(p):
            j = (i + 1) % p
            pairs.append(PairSample(first=embeddings[2 * i],
                                    second=embeddings[2 * j],
                                    first_subject=subjects[2 * i],
                                    second_subject=subjects[2 * j]))
    return pairs


def train_step(state: TrainState, batch: Batch, mode: str) -> float:
    """One forward/backward/Adam update; advances the step counter."""
    if mode not in MODES:
        raise InvariantError(f"unknown training mode {mode!r}")
    batch.validate()
    if mode == "single":
        embeddings = _single_embeddings(batch, state.params, state.config)
    else:
        embeddings = _dual_embeddings(batch, state.params, state.config)
    samples = list(zip(embeddings, batch.subjects))
    pairs = batch_pairs(embeddings, batch.subjects)
    breakdown = total_loss(samples, pairs, state.params, state.config)
    loss = float(breakdown.total.data)
    if not np.isfinite(loss):
        raise DivergenceError(f"non-finite loss at step {state.step}",
                              step=state.step)

    state.params.zero_grad()
    breakdown.total.backward()

    t = state.step + 1
    lr = state.config.lr
    correction1 = 1.0 - ADAM_BETA1 ** t
    correction2 = 1.0 - ADAM_BETA2 ** t
    for name, tensor in state.params.tensors.items():
        grad = tensor.grad
        if grad is None:
            grad = np.zeros_like(tensor.data)
        m = state.moments_m[name]
        v = state.moments_v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * grad
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * grad * grad
        update = lr * (m / correction1) / (np.sqrt(v / correction2) + ADAM_EPS)
        tensor.data -= update
        if not np.all(np.isfinite(tensor.data)):
            raise DivergenceError(
                f"parameter {name} became non-finite at step {state.step}",
                step=state.step)

    state.step += 1
    state.history.append((state.step, mode, loss))
    return loss


def write_log(history: list[tuple[int, str, float]],
              path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "mode", "loss"])
        for step, mode, loss in history:
            writer.writerow([step, mode, repr(loss)])


def fit(config: ModelConfig, manifest: Manifest, *, steps: int,
        batch_identities: int, out_dir: str | Path,
        base_dir: Path | None = None, checkpoint_every: int | None = None,
        resume: str | Path | None = None, mode_ratio: int = 1) -> TrainState:
    """Train for ``steps`` total steps, alternating single and dual modes.

    ``mode_ratio`` is the number of single-input steps run for every
    paired-conditioning step. Writes ``ckpt.hpk1`` (model weights),
    ``state.hpk1`` (full resumable state), and ``train_log.csv`` under
    ``out_dir``. When ``resume`` points at a saved state the run continues
    from its step counter and reproduces the uninterrupted trajectory
    bit-exactly.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if resume is not None:
        state = TrainState.load(resume)
    else:
        state = TrainState.init(config)
    volumes = load_split(manifest, "train", base_dir)

    while state.step < steps:
        mode = mode_for_step(state.step, mode_ratio)
        batch = sample_batch(volumes, batch_identities, state.rng)
        train_step(state, batch, mode)
        if checkpoint_every and state.step % checkpoint_every == 0:
            state.save(out_dir / STATE_FILENAME)
            _save_model(state, out_dir / MODEL_FILENAME)

    state.save(out_dir / STATE_FILENAME)
    _save_model(state, out_dir / MODEL_FILENAME)
    write_log(state.history, out_dir / LOG_FILENAME)
    return state


def _save_model(state: TrainState, path: Path) -> None:
    meta = {"kind": "model", "config": state.config.to_dict(),
            "step": state.step}
    save_checkpoint(path, state.params, meta)
