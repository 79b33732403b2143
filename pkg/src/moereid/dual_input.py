"""Paired-input gating and the central-band rescoring mechanism.

At inference a query/gallery pair whose single-input similarity falls into
the central score band is re-scored: the two raw volumes are concatenated
along channels, mixed by an attention block whose projections are built
swap-symmetric (a (2c x 2c) matrix [[W1, W2], [W2, W1]] from two learned
(c x c) halves, with an even head count), split back into per-input
conditioned volumes, and fed to per-side MLP heads that emit replacement
gate weights for both gating layers. Swapping the two inputs therefore
swaps the outputs exactly when the two heads share parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DegenerateInputError, EmptyInputError, ShapeError
from .moe_core import (
    GatingTensor1,
    ModelConfig,
    ModelParams,
    as_tensor,
    linear_tokens,
    mlp_rows,
    forward,
)
from .numerics import MhsaParams, Tensor, concat, mhsa_forward, softmax_axis

PairKey = tuple[int, int]


@dataclass
class DualConditioned:
    """Conditioned volumes plus replacement gates for one ordered pair."""

    gallery: Tensor
    query: Tensor
    gallery_gates: tuple[GatingTensor1, Tensor]
    query_gates: tuple[GatingTensor1, Tensor]


@dataclass
class ScoreBand:
    """Central band of a similarity-score multiset."""

    q: float
    lower: float
    upper: float
    selected: set[PairKey]


def cosine_sim(a, b) -> float:
    """Cosine similarity of two nonzero vectors, clipped to [-1, 1]."""
    av = np.asarray(a.data if isinstance(a, Tensor) else a, dtype=np.float64)
    bv = np.asarray(b.data if isinstance(b, Tensor) else b, dtype=np.float64)
    na = float(np.linalg.norm(av))
    nb = float(np.linalg.norm(bv))
    if na == 0.0 or nb == 0.0:
        raise DegenerateInputError("cosine similarity of a zero vector")
    return float(np.clip(float(av @ bv) / (na * nb), -1.0, 1.0))


def dual_head_count(config: ModelConfig) -> int:
    """Even head count for the paired attention over 2*c_in channels."""
    heads = config.heads + (config.heads % 2)
    if (8 * config.d) % heads != 0:
        heads = 2
    return heads


def _block_matrix(w1: Tensor, w2: Tensor) -> Tensor:
    top = concat([w1, w2], axis=1)
    bottom = concat([w2, w1], axis=1)
    return concat([top, bottom], axis=0)


def _paired_attention(params: ModelParams) -> MhsaParams:
    t = params.tensors
    return MhsaParams(
        wq=_block_matrix(t["dual.attn.wq1"], t["dual.attn.wq2"]),
        wk=_block_matrix(t["dual.attn.wk1"], t["dual.attn.wk2"]),
        wv=_block_matrix(t["dual.attn.wv1"], t["dual.attn.wv2"]),
        wo=_block_matrix(t["dual.attn.wo1"], t["dual.attn.wo2"]),
        bq=concat([t["dual.attn.bq"], t["dual.attn.bq"]], axis=0),
        bk=concat([t["dual.attn.bk"], t["dual.attn.bk"]], axis=0),
        bv=concat([t["dual.attn.bv"], t["dual.attn.bv"]], axis=0),
        bo=concat([t["dual.attn.bo"], t["dual.attn.bo"]], axis=0))


def _side_gates(conditioned: Tensor, params: ModelParams, config: ModelConfig,
                side: str) -> tuple[GatingTensor1, Tensor]:
    t, k, _ = conditioned.shape
    prefix = f"dual.{side}"
    hidden = linear_tokens(conditioned, params[f"{prefix}.gate1.w1"],
                            params[f"{prefix}.gate1.b1"]).gelu()
    logits = linear_tokens(hidden, params[f"{prefix}.gate1.w2"],
                            params[f"{prefix}.gate1.b2"])
    gate1 = GatingTensor1(softmax_axis(
        logits.reshape(t, k, config.n1, config.n2), axis=2))
    pooled = conditioned.mean(axis=(0, 1)).reshape(1, 4 * config.d)
    w2_logits = mlp_rows(pooled, params, f"{prefix}.gate2")
    w2 = softmax_axis(w2_logits, axis=1).reshape(config.n2)
    return gate1, w2


def dual_condition(gallery, query, params: ModelParams,
                   config: ModelConfig) -> DualConditioned:
    """Joint conditioning of an ordered (gallery, query) volume pair."""
    ga = as_tensor(gallery)
    qu = as_tensor(query)
    if ga.shape != qu.shape:
        raise ShapeError(f"paired volumes differ in shape: {ga.shape} vs "
                         f"{qu.shape}")
    t, k, c = ga.shape
    if c != 4 * config.d:
        raise ShapeError(f"paired volumes must have {4 * config.d} channels, "
                         f"got {c}")
    stacked = concat([ga, qu], axis=2).reshape(t * k, 2 * c)
    mixed = mhsa_forward(stacked, stacked, stacked, dual_head_count(config),
                         _paired_attention(params))
    cond_gallery = mixed[:, :c].reshape(t, k, c)
    cond_query = mixed[:, c:].reshape(t, k, c)
    query_side = "gallery" if config.dual_shared else "query"
    return DualConditioned(
        gallery=cond_gallery,
        query=cond_query,
        gallery_gates=_side_gates(cond_gallery, params, config, "gallery"),
        query_gates=_side_gates(cond_query, params, config, query_side))


def _nearest_rank(values: list[float], p: float) -> float:
    rank = math.ceil(p / 100.0 * len(values))
    rank = min(max(rank, 1), len(values))
    return values[rank - 1]


def select_band(scores: list[tuple[PairKey, float]], q: float) -> ScoreBand:
    """Pairs whose score falls in the central q% of the global distribution."""
    if not scores:
        raise EmptyInputError("cannot take percentiles of an empty score list")
    if not 0 <= q <= 100:
        raise ConfigError(f"band percentage {q} outside [0, 100]")
    values = sorted(score for _, score in scores)
    lower = _nearest_rank(values, 50.0 - q / 2.0)
    upper = _nearest_rank(values, 50.0 + q / 2.0)
    selected = {key for key, score in scores if lower <= score <= upper}
    return ScoreBand(q=q, lower=lower, upper=upper, selected=selected)


def dual_rescore(scores: list[tuple[PairKey, float]], band: ScoreBand,
                 queries, galleries, params: ModelParams,
                 config: ModelConfig) -> list[tuple[PairKey, float]]:
    """Replace in-band similarities with paired-gating scores.

    ``queries`` and ``galleries`` are indexable collections of volumes; a
    pair key is (query index, gallery index). Scores outside the band pass
    through untouched.
    """
    updated = []
    for key, score in scores:
        if key not in band.selected:
            updated.append((key, score))
            continue
        qi, gi = key
        cond = dual_condition(galleries[gi], queries[qi], params, config)
        emb_gallery = forward(galleries[gi], params, config,
                              gates=cond.gallery_gates)
        emb_query = forward(queries[qi], params, config,
                            gates=cond.query_gates)
        updated.append((key, cosine_sim(emb_query.fused, emb_gallery.fused)))
    return updated
