"""Similarity-guided message passing over a probe-gallery node graph.

Each node is one probe-gallery pair, carrying its relation feature. Edge
weights between nodes i and j come from the gallery-gallery similarity of
their gallery items: a row-softmax over similarity logits with a zero
diagonal (no self-enhancement). A label-free "compatibility" variant derives
the weights from a scaled inner product of projected node features instead,
so they receive no direct supervision. Deep messages from a two-layer
network are fused into each node feature as a convex combination controlled
by ``alpha``, optionally for several iterations with messages recomputed
from the refreshed features each round.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .params import CompatParams, MessageNetParams, ModelParams
from .relation import bn_backward, bn_forward, embed_forward, sigmoid

WEIGHT_MODES = ("similarity_guided", "compatibility")


@dataclass(frozen=True)
class FusionConfig:
    """Fusion balance, iteration count and edge-weight source."""

    alpha: float = 0.9
    iterations: int = 1
    weight_mode: str = "similarity_guided"

    def __post_init__(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if self.weight_mode not in WEIGHT_MODES:
            raise ValueError(f"weight_mode must be one of {WEIGHT_MODES}, got {self.weight_mode!r}")


@dataclass
class BatchGraph:
    """Populated graph state for one probe: inputs, weights and refined features."""

    probe: int
    gallery: list[int]
    node_features: np.ndarray  # (N, d_feat) input relation features
    gallery_scores: np.ndarray  # (N, N) gallery-gallery similarity logits, 0 diagonal
    edge_weights: np.ndarray  # (N, N) row-stochastic, 0 diagonal
    messages: np.ndarray  # (N, d_feat) first-round deep messages
    refined: np.ndarray  # (N, d_feat) fused features after all iterations


# ---------------------------------------------------------------------------
# edge weights


def edge_weights_sg(gallery_scores: np.ndarray) -> np.ndarray:
    """Row-softmax of gallery-gallery similarity logits with zero diagonal.

    Rows sum to 1 for N >= 2; a single-node graph yields [[0]] so downstream
    fusion receives no message mass. Stabilized by row-max subtraction.
    """
    s = np.asarray(gallery_scores, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise ValueError(f"gallery score matrix must be square, got {s.shape}")
    n = s.shape[0]
    if n == 1:
        return np.zeros((1, 1))
    a = s.copy()
    np.fill_diagonal(a, -np.inf)
    e = np.exp(a - a.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows_backward(w: np.ndarray, dw: np.ndarray) -> np.ndarray:
    """Gradient of the zero-diagonal row softmax; the diagonal of dw is ignored."""
    g = dw.copy()
    np.fill_diagonal(g, 0.0)
    # w already has a zero diagonal, which zeroes the diagonal of the result.
    return w * (g - (g * w).sum(axis=1, keepdims=True))


class CompatCache(NamedTuple):
    d: np.ndarray
    v: np.ndarray
    w: np.ndarray
    scale: float


def compat_forward(compat: CompatParams, node_features: np.ndarray) -> tuple[np.ndarray, CompatCache]:
    """Label-free edge weights: scaled inner product of projected features.

    h_ij = (P d_i) . (P d_j) / sqrt(d_feat), row-softmaxed with zero diagonal.
    """
    d = np.asarray(node_features, dtype=np.float64)
    scale = 1.0 / np.sqrt(d.shape[1])
    v = d @ compat.proj.T
    h = (v @ v.T) * scale
    w = edge_weights_sg(h)
    return w, CompatCache(d=d, v=v, w=w, scale=scale)


def compat_backward(
    compat: CompatParams, cache: CompatCache, dw: np.ndarray, grads: dict[str, np.ndarray]
) -> np.ndarray:
    """Backprop through compatibility weights; returns d(node_features)."""
    dh = softmax_rows_backward(cache.w, dw)
    dv = (dh + dh.T) @ cache.v * cache.scale
    grads["compat.proj"] += dv.T @ cache.d
    return dv @ compat.proj


def edge_weights_compat(node_features: np.ndarray, compat: CompatParams) -> np.ndarray:
    w, _ = compat_forward(compat, node_features)
    return w


# ---------------------------------------------------------------------------
# message network


class MsgCache(NamedTuple):
    x: np.ndarray
    bn1cache: object
    n1: np.ndarray
    h1: np.ndarray
    bn2cache: object
    n2: np.ndarray
    train: bool


def msgnet_forward(
    msg: MessageNetParams, x: np.ndarray, train: bool, update_running: bool = True
) -> tuple[np.ndarray, MsgCache]:
    """Two rounds of affine -> batch-norm -> ReLU over rows of ``x``."""
    pre1 = x @ msg.w1 + msg.b1
    n1, c1 = bn_forward(msg.bn1, pre1, train, update_running)
    h1 = np.maximum(n1, 0.0)
    pre2 = h1 @ msg.w2 + msg.b2
    n2, c2 = bn_forward(msg.bn2, pre2, train, update_running)
    out = np.maximum(n2, 0.0)
    return out, MsgCache(x=x, bn1cache=c1, n1=n1, h1=h1, bn2cache=c2, n2=n2, train=train)


def msgnet_backward(
    msg: MessageNetParams, cache: MsgCache, dout: np.ndarray, grads: dict[str, np.ndarray]
) -> np.ndarray:
    """Accumulate message-network gradients; returns d(input)."""
    dn2 = dout * (cache.n2 > 0.0)
    dpre2 = bn_backward(msg.bn2, cache.bn2cache, dn2, grads, cache.train, prefix="msg.bn2")
    grads["msg.w2"] += cache.h1.T @ dpre2
    grads["msg.b2"] += dpre2.sum(axis=0)
    dh1 = dpre2 @ msg.w2.T
    dn1 = dh1 * (cache.n1 > 0.0)
    dpre1 = bn_backward(msg.bn1, cache.bn1cache, dn1, grads, cache.train, prefix="msg.bn1")
    grads["msg.w1"] += cache.x.T @ dpre1
    grads["msg.b1"] += dpre1.sum(axis=0)
    return dpre1 @ msg.w1.T


def compute_messages(
    net: MessageNetParams, node_features: np.ndarray, mode: str = "eval"
) -> np.ndarray:
    """Row-wise deep messages t_i for each node feature."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    out, _ = msgnet_forward(net, np.asarray(node_features, dtype=np.float64), train=(mode == "train"))
    return out


# ---------------------------------------------------------------------------
# fusion


def fuse(
    node_features: np.ndarray,
    messages: np.ndarray,
    w: np.ndarray,
    cfg: FusionConfig,
    msgnet: MessageNetParams | None = None,
    mode: str = "eval",
) -> np.ndarray:
    """Convex fusion of node features with weighted message sums.

    One iteration computes (1 - alpha) * d + alpha * (W @ t). Further
    iterations recompute messages from the refreshed features of the previous
    round, which requires ``msgnet``. ``alpha`` = 0 returns the node features
    unchanged.
    """
    d = np.asarray(node_features, dtype=np.float64)
    t = np.asarray(messages, dtype=np.float64)
    if d.shape != t.shape or w.shape != (d.shape[0], d.shape[0]):
        raise ValueError(
            f"inconsistent shapes: features {d.shape}, messages {t.shape}, weights {w.shape}"
        )
    if cfg.alpha == 0.0:
        return d.copy()
    if cfg.iterations > 1 and msgnet is None:
        raise ValueError("iterations > 1 requires the message network to recompute messages")
    refined = (1.0 - cfg.alpha) * d + cfg.alpha * (w @ t)
    for _ in range(cfg.iterations - 1):
        t = compute_messages(msgnet, refined, mode)
        refined = (1.0 - cfg.alpha) * refined + cfg.alpha * (w @ t)
    return refined


# ---------------------------------------------------------------------------
# full pipeline for one probe


def _pair_index_upper(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Row/column indices of the strict upper triangle of an n x n matrix."""
    return np.triu_indices(n, k=1)


def gallery_logit_matrix(params: ModelParams, gal_feats: np.ndarray, d_gg: np.ndarray) -> np.ndarray:
    """Symmetric gallery-gallery logit matrix from per-pair relation features."""
    n = gal_feats.shape[0]
    s = np.zeros((n, n))
    if n >= 2:
        ii, jj = _pair_index_upper(n)
        z = d_gg @ params.clf_gg.w + params.clf_gg.b
        s[ii, jj] = z
        s[jj, ii] = z
    return s


def sggnn_forward_features(
    params: ModelParams,
    probe_feat: np.ndarray,
    gal_feats: np.ndarray,
    cfg: FusionConfig,
    mode: str = "eval",
    probe_id: int = -1,
    gallery_ids: list[int] | None = None,
) -> tuple[np.ndarray, BatchGraph]:
    """Graph pipeline over already-embedded features (see ``sggnn_forward``)."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    n = gal_feats.shape[0]
    if n < 1:
        raise ValueError("gallery must contain at least one item")
    train = mode == "train"

    q_pg = (probe_feat - gal_feats) ** 2
    ii, jj = _pair_index_upper(n)
    q_gg = (gal_feats[ii] - gal_feats[jj]) ** 2
    d_all, _ = bn_forward(params.bn, np.concatenate([q_pg, q_gg], axis=0), train=train)
    d_pg, d_gg = d_all[:n], d_all[n:]

    scores_gg = gallery_logit_matrix(params, gal_feats, d_gg)
    if cfg.weight_mode == "similarity_guided":
        w = edge_weights_sg(scores_gg)
    else:
        w = edge_weights_compat(d_pg, params.compat)

    messages = compute_messages(params.msg, d_pg, mode)
    refined = fuse(d_pg, messages, w, cfg, msgnet=params.msg, mode=mode)
    scores = sigmoid(refined @ params.clf_pg.w + params.clf_pg.b)

    graph = BatchGraph(
        probe=probe_id,
        gallery=list(gallery_ids) if gallery_ids is not None else list(range(n)),
        node_features=d_pg,
        gallery_scores=scores_gg,
        edge_weights=w,
        messages=messages,
        refined=refined,
    )
    return scores, graph


def sggnn_forward(
    params: ModelParams,
    probe,
    gallery,
    cfg: FusionConfig,
    mode: str = "eval",
) -> tuple[np.ndarray, BatchGraph]:
    """Score one probe against a gallery with similarity-guided fusion.

    Pipeline: embed all items, build probe-gallery relation features (graph
    nodes) and gallery-gallery relation features, score the gallery pairs
    with the gallery classifier, derive edge weights per
    ``cfg.weight_mode``, compute deep messages, fuse, then score the refined
    features with the probe-gallery classifier. Returns the score vector and
    the populated graph. With ``alpha`` = 0 the scores equal the base model's
    ``pairwise_scores`` exactly.
    """
    if len(gallery) < 1:
        raise ValueError("gallery must contain at least one item")
    feats, _ = embed_forward(params.embed, np.stack([probe.raw] + [g.raw for g in gallery]))
    return sggnn_forward_features(
        params,
        feats[0],
        feats[1:],
        cfg,
        mode=mode,
        probe_id=probe.item_id,
        gallery_ids=[g.item_id for g in gallery],
    )


def dump_graph(graph: BatchGraph, base_scores: np.ndarray, refined_scores: np.ndarray) -> str:
    """Human-readable diagnostic dump: edge-weight rows and per-node score deltas."""
    lines = [f"probe {graph.probe}  nodes {len(graph.gallery)}"]
    lines.append("node  gallery_item  base_score  refined_score  delta")
    for k, gid in enumerate(graph.gallery):
        delta = refined_scores[k] - base_scores[k]
        lines.append(
            f"{k:4d}  {gid:12d}  {base_scores[k]:.6f}    {refined_scores[k]:.6f}       {delta:+.6f}"
        )
    lines.append("edge weights (rows):")
    for k in range(len(graph.gallery)):
        row = " ".join(f"{v:.6f}" for v in graph.edge_weights[k])
        lines.append(f"{k:4d}  {row}")
    return "\n".join(lines) + "\n"
