"""Training objectives: identity CE, consistency terms, contrastive, total.

The three consistency losses act on different outputs of the expert stack:
the long-term loss compares videos and penalizes frame scatter, the
short-term loss penalizes frame scatter only, and the temporal loss compares
the decoder outputs of two same-identity videos. The contrastive loss acts
on the fused embedding of any labeled pair.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, LabelError, SamplingError
from .moe_core import BiometricEmbedding, ModelConfig, ModelParams
from .numerics import Tensor


@dataclass
class PairSample:
    """Embeddings of two tracklets plus their identity labels."""

    first: BiometricEmbedding
    second: BiometricEmbedding
    first_subject: int
    second_subject: int

    @property
    def same_identity(self) -> bool:
        return self.first_subject == self.second_subject


@dataclass
class LossBreakdown:
    """Differentiable total plus detached per-term values for logging."""

    total: Tensor
    ce: float
    lts: float
    sts: float
    ts: float
    contrastive: float


def ce_loss(fused: Tensor, subject_id: int, params: ModelParams) -> Tensor:
    """Cross-entropy of the linear classifier on the fused embedding."""
    w = params["classifier.w"]
    b = params["classifier.b"]
    num_classes = b.shape[0]
    if not 0 <= subject_id < num_classes:
        raise LabelError(f"subject id {subject_id} outside [0, {num_classes})")
    logits = (fused.reshape(1, w.shape[0]) @ w + b).reshape(num_classes)
    # Shift by the (constant) max so exp stays bounded.
    shifted = logits - float(logits.data.max())
    return shifted.exp().sum().log() - shifted[subject_id]


def _frame_scatter(frames: Tensor) -> Tensor:
    """Sum of squared distances over ordered frame pairs t1 != t2.

    Uses sum_{t1,t2} |F_t1 - F_t2|^2 = 2T * sum_t |F_t|^2 - 2 |sum_t F_t|^2
    (the diagonal contributes zero), avoiding a quadratic loop.
    """
    t = frames.shape[0]
    total_sq = (frames * frames).sum()
    col_sum = frames.sum(axis=0)
    return 2.0 * t * total_sq - 2.0 * (col_sum * col_sum).sum()


def _require_same_identity(pair: PairSample, term: str) -> None:
    if not pair.same_identity:
        raise ContractError(f"{term} applies to same-identity pairs only; "
                            f"got subjects {pair.first_subject} and "
                            f"{pair.second_subject}")


def lts_loss(pair: PairSample) -> Tensor:
    """Cross-video distance of long-term embeddings plus frame scatter."""
    _require_same_identity(pair, "long-term consistency")
    a, b = pair.first, pair.second
    if a.frames.long.shape != b.frames.long.shape:
        raise ContractError("paired tracklets must share T")
    t = a.frames.long.shape[0]
    delta = a.long - b.long
    cross = (delta * delta).sum()
    scatter = _frame_scatter(a.frames.long) + _frame_scatter(b.frames.long)
    return cross + scatter * (1.0 / (t * t))


def sts_loss(pair: PairSample) -> Tensor:
    """Within-video frame scatter of short-term embeddings (no cross term)."""
    a, b = pair.first, pair.second
    t = a.frames.short.shape[0]
    scatter = _frame_scatter(a.frames.short) + _frame_scatter(b.frames.short)
    return scatter * (1.0 / (t * t))


def ts_loss(pair: PairSample) -> Tensor:
    """Squared distance between the two temporal embeddings."""
    _require_same_identity(pair, "temporal consistency")
    delta = pair.first.temporal - pair.second.temporal
    return (delta * delta).sum()


def contrastive_loss(pair: PairSample, margin: float) -> Tensor:
    """Pull same-identity fused embeddings together, push others apart."""
    delta = pair.first.fused - pair.second.fused
    dist_sq = (delta * delta).sum()
    if pair.same_identity:
        return 0.5 * dist_sq
    hinge = (margin - dist_sq.sqrt()).relu()
    return 0.5 * hinge * hinge


def _mean(terms: list[Tensor]) -> Tensor:
    acc = terms[0]
    for term in terms[1:]:
        acc = acc + term
    return acc * (1.0 / len(terms))


def total_loss(samples: list[tuple[BiometricEmbedding, int]],
               pairs: list[PairSample], params: ModelParams,
               config: ModelConfig) -> LossBreakdown:
    """Weighted sum of batch-averaged terms.

    ``samples`` feeds the identity CE term; consistency terms average over
    the same-identity members of ``pairs``; the contrastive term averages
    over all of ``pairs``.
    """
    if not samples or not pairs:
        raise SamplingError("batch has no samples or no pairs")
    positives = [p for p in pairs if p.same_identity]
    if not positives:
        raise SamplingError("batch holds no same-identity pair")

    ce = _mean([ce_loss(emb.fused, sid, params) for emb, sid in samples])
    lts = _mean([lts_loss(p) for p in positives])
    sts = _mean([sts_loss(p) for p in positives])
    ts = _mean([ts_loss(p) for p in positives])
    contrastive = _mean([contrastive_loss(p, config.margin) for p in pairs])

    total = ce + config.alpha * (lts + sts + ts) + config.beta * contrastive
    return LossBreakdown(
        total=total,
        ce=float(ce.data), lts=float(lts.data), sts=float(sts.data),
        ts=float(ts.data), contrastive=float(contrastive.data))
