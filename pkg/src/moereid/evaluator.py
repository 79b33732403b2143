"""Retrieval evaluation: protocol filtering, CMC/mAP, band rescoring, heatmaps.

Scoring runs in two passes. A single-input pass embeds every tracklet on its
own and fills the full query-by-gallery cosine table; the central band of
that score distribution is then re-scored with pair-conditioned gating.
Protocol filtering decides which gallery entries may be ranked against a
query and which of those count as relevant hits.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dual_input import PairKey, cosine_sim, dual_rescore, select_band
from .errors import (
    ConfigError,
    EmptyInputError,
    InvariantError,
    MetadataError,
    ShapeError,
)
from .feature_store import FeatureVolume, Manifest, load_split
from .moe_core import ModelConfig, ModelParams, forward, gate1_forward

__all__ = [
    "EvalReport", "cosine_sim", "protocol_filter", "cmc_curve", "map_score",
    "evaluate", "export_heatmap", "PROTOCOLS",
]

PROTOCOLS = ("general", "sc", "dc")

_SIMPLEX_TOL = 1e-6


def _normalize_protocol(protocol: str) -> str:
    name = protocol.lower()
    if name not in PROTOCOLS:
        raise ConfigError(f"unknown protocol {protocol!r}; "
                          f"expected one of {PROTOCOLS}")
    return name


def protocol_filter(query: FeatureVolume, gallery: list[FeatureVolume],
                    protocol: str) -> tuple[np.ndarray, np.ndarray]:
    """Per-query gallery masks: (may be ranked, counts as relevant).

    general: drop same-subject entries seen by the query's own camera.
    sc: same ranking pool, but only same-clothes clips of the subject count
    as hits. dc: additionally remove same-subject same-clothes clips from
    the ranking pool, so only changed-clothes clips of the subject remain
    relevant.
    """
    name = _normalize_protocol(protocol)
    if name in ("sc", "dc"):
        missing = [g for g in [query] + gallery if g.clothes_id is None]
        if missing:
            raise MetadataError(
                f"protocol {name} needs clothes ids; "
                f"{len(missing)} record(s) lack one")
    ranking = np.ones(len(gallery), dtype=bool)
    relevant = np.zeros(len(gallery), dtype=bool)
    for idx, entry in enumerate(gallery):
        same_subject = entry.subject_id == query.subject_id
        same_camera = entry.camera_id == query.camera_id
        same_clothes = entry.clothes_id == query.clothes_id
        if same_subject and same_camera:
            ranking[idx] = False
            continue
        if name == "dc" and same_subject and same_clothes:
            ranking[idx] = False
            continue
        if not same_subject:
            continue
        if name == "sc":
            relevant[idx] = same_clothes
        else:
            relevant[idx] = True
    return ranking, relevant


def cmc_curve(relevance_lists: list[np.ndarray]) -> np.ndarray:
    """cmc[k-1] = fraction of queries whose first hit has rank <= k."""
    if not relevance_lists:
        raise EmptyInputError("no ranked queries")
    first_hits = []
    depth = 0
    for ranked in relevance_lists:
        ranked = np.asarray(ranked, dtype=bool)
        if ranked.size == 0 or not ranked.any():
            raise EmptyInputError("a query has no relevant ranked entry")
        first_hits.append(int(np.argmax(ranked)) + 1)
        depth = max(depth, ranked.size)
    curve = np.empty(depth)
    hits = np.asarray(first_hits)
    for k in range(1, depth + 1):
        curve[k - 1] = np.mean(hits <= k)
    return curve


def map_score(relevance_lists: list[np.ndarray]) -> float:
    """Mean over queries of average precision at each relevant rank."""
    if not relevance_lists:
        raise EmptyInputError("no ranked queries")
    ap_values = []
    for ranked in relevance_lists:
        ranked = np.asarray(ranked, dtype=bool)
        if ranked.size == 0 or not ranked.any():
            raise EmptyInputError("a query has no relevant ranked entry")
        hit_ranks = np.flatnonzero(ranked) + 1
        precisions = np.arange(1, hit_ranks.size + 1) / hit_ranks
        ap_values.append(float(precisions.mean()))
    return float(np.mean(ap_values))


@dataclass
class EvalReport:
    """Retrieval metrics plus the score table behind them."""

    protocol: str
    band_q: float
    map: float
    cmc: list[float]
    mean_w2: list[float]
    num_queries: int
    num_gallery: int
    dropped_queries: list[int]
    scores: list[list] = field(default_factory=list)

    def validate(self) -> None:
        if not 0.0 <= self.map <= 1.0 + 1e-12:
            raise InvariantError(f"mAP {self.map} outside [0, 1]")
        prev = 0.0
        for value in self.cmc:
            if not 0.0 <= value <= 1.0 + 1e-12:
                raise InvariantError(f"cmc value {value} outside [0, 1]")
            if value < prev - 1e-12:
                raise InvariantError("cmc must be nondecreasing")
            prev = value
        w2 = np.asarray(self.mean_w2)
        if w2.shape != (3,) or np.min(w2) < -_SIMPLEX_TOL \
                or abs(float(w2.sum()) - 1.0) > _SIMPLEX_TOL:
            raise InvariantError(f"mean w2 {self.mean_w2} not on the simplex")

    def to_dict(self) -> dict:
        return {
            "protocol": self.protocol,
            "band_q": self.band_q,
            "map": self.map,
            "cmc": list(self.cmc),
            "mean_w2": list(self.mean_w2),
            "num_queries": self.num_queries,
            "num_gallery": self.num_gallery,
            "dropped_queries": list(self.dropped_queries),
            "scores": [list(row) for row in self.scores],
        }

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path: str | Path) -> "EvalReport":
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
        return cls(**raw)


def rank_gallery(scores: dict[PairKey, float], query_index: int,
                 ranking_mask: np.ndarray) -> np.ndarray:
    """Gallery indices rankable for this query, best score first.

    Ties break toward the lower gallery index so rankings are deterministic.
    """
    candidates = np.flatnonzero(ranking_mask)
    values = np.array([scores[(query_index, int(g))] for g in candidates])
    order = np.argsort(-values, kind="stable")
    return candidates[order]


def evaluate(params: ModelParams, config: ModelConfig, manifest: Manifest,
             *, protocol: str = "general", band_q: float | None = None,
             base_dir: Path | None = None) -> EvalReport:
    """Score every query against the gallery and report CMC/mAP.

    ``band_q`` defaults to the config's band width; 0 disables the paired
    rescoring pass entirely so the report reflects single-input scores.
    Queries left without a relevant gallery entry by the protocol are
    dropped from metric averages and listed in the report.
    """
    name = _normalize_protocol(protocol)
    q = config.band_q if band_q is None else float(band_q)
    if not 0.0 <= q <= 100.0:
        raise ConfigError(f"band width {q} outside [0, 100]")
    queries = load_split(manifest, "query", base_dir)
    gallery = load_split(manifest, "gallery", base_dir)
    if not queries or not gallery:
        raise EmptyInputError("query and gallery splits must be nonempty")

    query_emb = [forward(v.data, params, config) for v in queries]
    gallery_emb = [forward(v.data, params, config) for v in gallery]

    scores: list[tuple[PairKey, float]] = []
    for qi, qe in enumerate(query_emb):
        for gi, ge in enumerate(gallery_emb):
            scores.append(((qi, gi), cosine_sim(qe.fused, ge.fused)))

    if q > 0.0:
        band = select_band(scores, q)
        scores = dual_rescore(scores, band,
                              [v.data for v in queries],
                              [v.data for v in gallery],
                              params, config)
    table = dict(scores)

    relevance_lists = []
    dropped = []
    for qi, query in enumerate(queries):
        ranking_mask, relevant_mask = protocol_filter(query, gallery, name)
        ranked = rank_gallery(table, qi, ranking_mask)
        hits = relevant_mask[ranked]
        if not hits.any():
            dropped.append(qi)
            continue
        relevance_lists.append(hits)
    if not relevance_lists:
        raise EmptyInputError(
            f"protocol {name} left no query with a relevant gallery entry")

    w2_rows = np.stack([e.w2.data for e in query_emb + gallery_emb])
    mean_w2 = w2_rows.mean(axis=0)

    report = EvalReport(
        protocol=name,
        band_q=q,
        map=map_score(relevance_lists),
        cmc=[float(x) for x in cmc_curve(relevance_lists)],
        mean_w2=[float(x) for x in mean_w2],
        num_queries=len(queries),
        num_gallery=len(gallery),
        dropped_queries=dropped,
        scores=[[qi, gi, float(s)] for (qi, gi), s in table.items()],
    )
    report.validate()
    return report


def export_heatmap(params: ModelParams, config: ModelConfig, volume,
                   expert: int, target: int,
                   path: str | Path) -> tuple[Path, Path]:
    """Write the frame-averaged gate map of one expert pair as CSV + PGM.

    The CLS token is dropped and the remaining tokens reshaped to the
    square patch grid, so K - 1 must be a perfect square. Returns the
    (csv_path, pgm_path) pair; the graymap is min-max normalized to 8 bits
    (a constant map renders as black).
    """
    if not 0 <= expert < config.n1:
        raise ConfigError(f"expert index {expert} outside [0, {config.n1})")
    if not 0 <= target < config.n2:
        raise ConfigError(f"target index {target} outside [0, {config.n2})")
    side = int(round((config.K - 1) ** 0.5))
    if side * side != config.K - 1:
        raise ShapeError(f"K - 1 = {config.K - 1} is not a perfect square")

    gate1 = gate1_forward(volume, params, config)
    grid = gate1.weights.data[:, 1:, expert, target].mean(axis=0)
    grid = grid.reshape(side, side)

    path = Path(path)
    csv_path = path.with_suffix(".csv")
    pgm_path = path.with_suffix(".pgm")
    with open(csv_path, "w", encoding="utf-8") as fh:
        for row in grid:
            fh.write(",".join(repr(float(x)) for x in row))
            fh.write("\n")

    lo = float(grid.min())
    hi = float(grid.max())
    if hi > lo:
        pixels = np.round((grid - lo) / (hi - lo) * 255.0)
    else:
        pixels = np.zeros_like(grid)
    payload = pixels.astype(np.uint8).tobytes()
    with open(pgm_path, "wb") as fh:
        fh.write(f"P5\n{side} {side}\n255\n".encode("ascii"))
        fh.write(payload)
    return csv_path, pgm_path
