"""Retrieval evaluation: ranking methods, mAP/CMC metrics and the
parameter-sensitivity sweep.

Protocol: every test item serves once as probe against all other test items
(single query, no camera exclusion). All shortlist-based methods share the
same skeleton — rank the gallery by feature distance, re-score the top
``shortlist_size`` items with the requested method, and keep the remaining
items in their distance order behind the shortlist. Ties are always broken
by ascending item id, so results are invariant to gallery input order.

Methods:

* ``l2``           distance-only ranking of the full gallery
* ``base``         shortlist re-scored with the pairwise classifier
* ``sggnn``        shortlist re-scored with similarity-guided fusion
* ``sggnn_wo_sg``  fusion with unsupervised compatibility edge weights
* ``random_walk``  closed-form damped propagation of the base scores
                   through the gallery-gallery edge weights
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .corpus import EmbeddingCorpus, EmbeddingItem
from .errors import ConfigError
from .graph import FusionConfig, edge_weights_sg, sggnn_forward_features
from .params import ModelParams
from .relation import bn_forward, embed_forward, sigmoid

METHODS = ("base", "l2", "sggnn", "sggnn_wo_sg", "random_walk")
CMC_RANKS = (1, 5, 10)


@dataclass(frozen=True)
class RankingResult:
    """Ranked gallery for one probe, scores aligned with the ranking."""

    probe: int
    ranked_gallery: list[int]
    scores: np.ndarray
    method_tag: str


@dataclass(frozen=True)
class Metrics:
    """Aggregate retrieval quality over all evaluated probes."""

    mAP: float
    cmc: dict[int, float]
    num_queries: int
    skipped: int = 0


@dataclass(frozen=True)
class EvalConfig:
    shortlist_size: int = 100
    fusion: FusionConfig = field(default_factory=FusionConfig)

    def __post_init__(self) -> None:
        if self.shortlist_size < 1:
            raise ConfigError("shortlist_size must be >= 1")


# ---------------------------------------------------------------------------
# ranking core


def _l2_order(
    probe_feat: np.ndarray, gal_feats: np.ndarray, gal_ids: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Gallery positions ordered by ascending distance, ties by item id."""
    dists = np.linalg.norm(gal_feats - probe_feat, axis=1)
    order = np.lexsort((gal_ids, dists))
    return order, dists


def _order_desc(scores: np.ndarray, ids: np.ndarray) -> np.ndarray:
    """Positions ordered by descending score, ties by ascending item id."""
    return np.lexsort((ids, -scores))


def _pg_scores(
    params: ModelParams, probe_feat: np.ndarray, gal_feats: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Base-model logits and sigmoid scores of one probe against features."""
    d, _ = bn_forward(params.bn, (probe_feat - gal_feats) ** 2, train=False)
    z = d @ params.clf_pg.w + params.clf_pg.b
    return z, sigmoid(z)


def _gg_logit_matrix(params: ModelParams, gal_feats: np.ndarray) -> np.ndarray:
    """Symmetric gallery-gallery logit matrix over feature rows (0 diagonal)."""
    n = gal_feats.shape[0]
    s = np.zeros((n, n))
    if n >= 2:
        ii, jj = np.triu_indices(n, k=1)
        d, _ = bn_forward(params.bn, (gal_feats[ii] - gal_feats[jj]) ** 2, train=False)
        z = d @ params.clf_gg.w + params.clf_gg.b
        s[ii, jj] = z
        s[jj, ii] = z
    return s


def _shortlist_scores(
    params: ModelParams,
    probe_feat: np.ndarray,
    short_feats: np.ndarray,
    method: str,
    cfg: EvalConfig,
) -> np.ndarray:
    """Scores in (0, 1) for the shortlist under the requested method."""
    if method == "base":
        _, scores = _pg_scores(params, probe_feat, short_feats)
        return scores
    if method in ("sggnn", "sggnn_wo_sg"):
        mode = "similarity_guided" if method == "sggnn" else "compatibility"
        fusion = replace(cfg.fusion, weight_mode=mode)
        scores, _ = sggnn_forward_features(params, probe_feat, short_feats, fusion)
        return scores
    if method == "random_walk":
        alpha = cfg.fusion.alpha
        z, _ = _pg_scores(params, probe_feat, short_feats)
        w = edge_weights_sg(_gg_logit_matrix(params, short_feats))
        # Sigmoid keeps the reported scores above the negative-distance tail
        # without changing the ranking.
        return sigmoid(random_walk_refine(z, w, alpha))
    raise ConfigError(f"unknown method {method!r}; valid methods: {', '.join(METHODS)}")


def random_walk_refine(scores: np.ndarray, w: np.ndarray, alpha: float) -> np.ndarray:
    """Damped propagation of scores through row-stochastic edge weights.

    Solves s' = (1 - alpha) * (I - alpha * W)^-1 s, the fixed point of
    s_k = (1 - alpha) s + alpha W s_{k-1}; the system is well conditioned for
    alpha < 1 because W is row-stochastic.
    """
    if not 0.0 <= alpha < 1.0:
        raise ConfigError(f"random walk needs alpha in [0, 1), got {alpha}")
    scores = np.asarray(scores, dtype=np.float64)
    return (1.0 - alpha) * np.linalg.solve(np.eye(len(scores)) - alpha * w, scores)


def _rank(
    params: ModelParams,
    probe_feat: np.ndarray,
    gal_feats: np.ndarray,
    gal_ids: np.ndarray,
    method: str,
    cfg: EvalConfig,
) -> tuple[np.ndarray, np.ndarray]:
    """Full ranking (gallery positions, aligned scores) for one probe."""
    order, dists = _l2_order(probe_feat, gal_feats, gal_ids)
    if method == "l2":
        return order, -dists[order]
    n_short = min(cfg.shortlist_size, len(order))
    short, tail = order[:n_short], order[n_short:]
    scores = _shortlist_scores(params, probe_feat, gal_feats[short], method, cfg)
    reorder = _order_desc(scores, gal_ids[short])
    ranked = np.concatenate([short[reorder], tail])
    ranked_scores = np.concatenate([scores[reorder], -dists[tail]])
    return ranked, ranked_scores


def _stack_features(params: ModelParams, probe: EmbeddingItem, gallery) -> tuple[np.ndarray, np.ndarray]:
    feats, _ = embed_forward(params.embed, np.stack([probe.raw] + [g.raw for g in gallery]))
    return feats[0], feats[1:]


def _result(
    params: ModelParams, probe: EmbeddingItem, gallery, method: str, cfg: EvalConfig
) -> RankingResult:
    if len(gallery) == 0:
        raise ValueError("gallery must not be empty")
    probe_feat, gal_feats = _stack_features(params, probe, gallery)
    gal_ids = np.array([g.item_id for g in gallery])
    ranked, scores = _rank(params, probe_feat, gal_feats, gal_ids, method, cfg)
    return RankingResult(
        probe=probe.item_id,
        ranked_gallery=[int(i) for i in gal_ids[ranked]],
        scores=scores,
        method_tag=method,
    )


def l2_rank(params: ModelParams, probe: EmbeddingItem, gallery) -> RankingResult:
    """Rank by ascending feature distance; scores are negative distances."""
    return _result(params, probe, gallery, "l2", EvalConfig())


def sggnn_rank(
    params: ModelParams,
    probe: EmbeddingItem,
    gallery,
    fusion_cfg: FusionConfig,
    shortlist_size: int = 100,
) -> RankingResult:
    """Distance shortlist re-scored with graph fusion; tail keeps its order."""
    cfg = EvalConfig(shortlist_size=shortlist_size, fusion=fusion_cfg)
    method = "sggnn" if fusion_cfg.weight_mode == "similarity_guided" else "sggnn_wo_sg"
    return _result(params, probe, gallery, method, cfg)


def random_walk_rank(
    params: ModelParams,
    probe: EmbeddingItem,
    gallery,
    alpha: float,
    shortlist_size: int = 100,
) -> RankingResult:
    """Closed-form damped score propagation over the shortlist.

    Refined scores solve s' = (1 - alpha) * (I - alpha * W)^-1 s where s are
    the base-model logits and W the gallery-gallery edge weights; equals the
    limit of iterating s_k = (1 - alpha) s + alpha W s_{k-1}.
    """
    cfg = EvalConfig(shortlist_size=shortlist_size, fusion=FusionConfig(alpha=alpha))
    return _result(params, probe, gallery, "random_walk", cfg)


# ---------------------------------------------------------------------------
# metrics


def average_precision(relevance) -> float:
    """Mean of precision@k over the relevant positions of a ranked list."""
    hits = 0
    total = 0.0
    for pos, rel in enumerate(relevance, start=1):
        if rel:
            hits += 1
            total += hits / pos
    if hits == 0:
        raise ValueError("ranking contains no relevant item")
    return total / hits


def evaluate(
    params: ModelParams, test_corpus: EmbeddingCorpus, method: str, cfg: EvalConfig
) -> Metrics:
    """Run the all-vs-rest protocol and aggregate mAP and CMC accuracies.

    Probes without a single positive in the gallery are skipped and counted.
    Items are processed in ascending item-id order, so the result does not
    depend on corpus file order.
    """
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}; valid methods: {', '.join(METHODS)}")
    items = sorted(test_corpus.items, key=lambda it: it.item_id)
    if len(items) < 2:
        raise ConfigError("evaluation needs at least two items")
    feats, _ = embed_forward(params.embed, np.stack([it.raw for it in items]))
    ids = np.array([it.item_id for it in items])
    idents = np.array([it.identity_id for it in items])
    n = len(items)

    aps: list[float] = []
    first_ranks: list[int] = []
    skipped = 0
    for p in range(n):
        gal = np.concatenate([np.arange(p), np.arange(p + 1, n)])
        positive = idents[gal] == idents[p]
        if not positive.any():
            skipped += 1
            continue
        ranked, _ = _rank(params, feats[p], feats[gal], ids[gal], method, cfg)
        rel = positive[ranked]
        aps.append(average_precision(rel))
        first_ranks.append(int(np.argmax(rel)) + 1)

    if not aps:
        raise ConfigError("no probe had a positive match in the gallery")
    ranks = np.array(first_ranks)
    return Metrics(
        mAP=float(np.mean(aps)),
        cmc={k: float((ranks <= k).mean()) for k in CMC_RANKS},
        num_queries=len(aps),
        skipped=skipped,
    )


# ---------------------------------------------------------------------------
# sensitivity sweep


@dataclass(frozen=True)
class SweepPoint:
    shortlist_size: int
    k: int
    alpha: float
    iterations: int


@dataclass(frozen=True)
class SweepRow:
    point: SweepPoint
    mAP: float | None = None
    top1: float | None = None
    error: str | None = None


def default_sweep_grid(k: int = 4) -> list[SweepPoint]:
    """The standard nine-row grid: K and shortlist variations around the
    operating point (shortlist 100, K, alpha 0.9, one iteration)."""
    rows = [
        SweepPoint(100, k, 0.9, 1),
        SweepPoint(100, max(k - 1, 2), 0.9, 1),
        SweepPoint(100, k + 1, 0.9, 1),
        SweepPoint(50, k, 0.9, 1),
        SweepPoint(150, k, 0.9, 1),
        SweepPoint(100, k, 0.9, 2),
        SweepPoint(100, k, 0.9, 3),
        SweepPoint(100, k, 0.5, 1),
        SweepPoint(100, k, 0.95, 1),
    ]
    return rows


def sensitivity_sweep(
    checkpoints: dict[int, ModelParams],
    test_corpus: EmbeddingCorpus,
    grid: list[SweepPoint],
    weight_mode: str = "similarity_guided",
    strict: bool = True,
) -> list[SweepRow]:
    """Evaluate the fusion method across a grid of (shortlist, K, alpha, t).

    ``checkpoints`` maps each K that occurs in the grid to the parameters
    trained with that K. A missing K raises when ``strict`` else produces an
    error row.
    """
    rows: list[SweepRow] = []
    for point in grid:
        if point.k not in checkpoints:
            msg = f"no checkpoint for K={point.k}"
            if strict:
                raise ConfigError(msg)
            rows.append(SweepRow(point=point, error=msg))
            continue
        cfg = EvalConfig(
            shortlist_size=point.shortlist_size,
            fusion=FusionConfig(
                alpha=point.alpha, iterations=point.iterations, weight_mode=weight_mode
            ),
        )
        method = "sggnn" if weight_mode == "similarity_guided" else "sggnn_wo_sg"
        metrics = evaluate(checkpoints[point.k], test_corpus, method, cfg)
        rows.append(SweepRow(point=point, mAP=metrics.mAP, top1=metrics.cmc[1]))
    return rows
