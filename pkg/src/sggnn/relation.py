"""Pairwise relation scoring: embedding head, squared-difference features,
batch normalization and the sigmoid pair classifier.

Forward functions come in two flavors: the public operations (``embed``,
``relation_feature``, ``score``, ``bce_loss``, ``pairwise_scores``) and
cached ``*_forward``/``*_backward`` pairs used by the trainer for manual
backpropagation. Eval-mode scoring is pure given the parameters; train-mode
batch normalization mutates running statistics and must be serialized per
parameter set.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .params import BatchNormParams, ClassifierParams, EmbedHeadParams

EPS_CLAMP = 1e-7  # sigmoid outputs are clamped to [EPS_CLAMP, 1 - EPS_CLAMP] before log


def sigmoid(z: np.ndarray | float) -> np.ndarray:
    """Numerically stable logistic function."""
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


# ---------------------------------------------------------------------------
# embedding head


class EmbedCache(NamedTuple):
    x: np.ndarray
    pre1: np.ndarray
    hidden: np.ndarray


def embed_forward(head: EmbedHeadParams, x: np.ndarray) -> tuple[np.ndarray, EmbedCache]:
    """Affine -> ReLU -> affine over rows of ``x`` (shape (B, d_raw))."""
    if x.ndim != 2 or x.shape[1] != head.w1.shape[0]:
        raise ValueError(
            f"embed input must be (B, {head.w1.shape[0]}), got {x.shape}"
        )
    pre1 = x @ head.w1 + head.b1
    hidden = np.maximum(pre1, 0.0)
    out = hidden @ head.w2 + head.b2
    return out, EmbedCache(x=x, pre1=pre1, hidden=hidden)


def embed_backward(
    head: EmbedHeadParams, cache: EmbedCache, dout: np.ndarray, grads: dict[str, np.ndarray]
) -> np.ndarray:
    """Accumulate head gradients into ``grads`` and return d(input)."""
    grads["embed.w2"] += cache.hidden.T @ dout
    grads["embed.b2"] += dout.sum(axis=0)
    dhidden = dout @ head.w2.T
    dpre1 = dhidden * (cache.pre1 > 0.0)
    grads["embed.w1"] += cache.x.T @ dpre1
    grads["embed.b1"] += dpre1.sum(axis=0)
    return dpre1 @ head.w1.T


def embed(head: EmbedHeadParams, raw: np.ndarray) -> np.ndarray:
    """Map raw vectors to feature space; accepts a single vector or a batch."""
    raw = np.asarray(raw, dtype=np.float64)
    single = raw.ndim == 1
    out, _ = embed_forward(head, raw[None, :] if single else raw)
    return out[0] if single else out


# ---------------------------------------------------------------------------
# batch normalization


class BNCache(NamedTuple):
    xhat: np.ndarray
    inv_std: np.ndarray


def bn_forward(
    bn: BatchNormParams, x: np.ndarray, train: bool, update_running: bool = True
) -> tuple[np.ndarray, BNCache | None]:
    """Normalize rows of ``x``; train mode uses batch statistics.

    Train mode requires batch size >= 2 and, unless ``update_running`` is
    False, folds the batch statistics into the running ones with the
    configured momentum (unbiased variance for the running update).
    """
    if x.ndim != 2 or x.shape[1] != bn.gamma.shape[0]:
        raise ValueError(f"batch-norm input must be (B, {bn.gamma.shape[0]}), got {x.shape}")
    if train:
        b = x.shape[0]
        if b < 2:
            raise ValueError("train-mode batch normalization needs a batch of size >= 2")
        mean = x.mean(axis=0)
        var = x.var(axis=0)
        inv_std = 1.0 / np.sqrt(var + bn.eps)
        xhat = (x - mean) * inv_std
        if update_running:
            m = bn.momentum
            bn.running_mean[...] = (1.0 - m) * bn.running_mean + m * mean
            bn.running_var[...] = (1.0 - m) * bn.running_var + m * var * b / (b - 1)
        return bn.gamma * xhat + bn.beta, BNCache(xhat=xhat, inv_std=inv_std)
    inv_std = 1.0 / np.sqrt(bn.running_var + bn.eps)
    xhat = (x - bn.running_mean) * inv_std
    return bn.gamma * xhat + bn.beta, BNCache(xhat=xhat, inv_std=inv_std)


def bn_backward(
    bn: BatchNormParams,
    cache: BNCache,
    dout: np.ndarray,
    grads: dict[str, np.ndarray],
    train: bool,
    prefix: str = "bn",
) -> np.ndarray:
    """Backprop through batch normalization; returns d(input)."""
    grads[f"{prefix}.gamma"] += (dout * cache.xhat).sum(axis=0)
    grads[f"{prefix}.beta"] += dout.sum(axis=0)
    dxhat = dout * bn.gamma
    if not train:
        return dxhat * cache.inv_std
    b = dout.shape[0]
    return (
        cache.inv_std
        / b
        * (b * dxhat - dxhat.sum(axis=0) - cache.xhat * (dxhat * cache.xhat).sum(axis=0))
    )


def relation_feature(
    a: np.ndarray, b: np.ndarray, bn: BatchNormParams, mode: str = "eval"
) -> np.ndarray:
    """Batch-normalized element-wise squared difference BN((a - b) ** 2).

    Symmetric in (a, b). In train mode ``a`` and ``b`` must be (B, D) batches
    with B >= 2; batch statistics are used and running statistics updated.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    single = a.ndim == 1
    q = (a - b) ** 2
    if single:
        q = q[None, :]
    out, _ = bn_forward(bn, q, train=(mode == "train"))
    return out[0] if single else out


# ---------------------------------------------------------------------------
# classifier and loss


def logits(clf: ClassifierParams, d: np.ndarray) -> np.ndarray:
    """Pre-sigmoid score w . d + b, row-wise for 2-D input."""
    return d @ clf.w + clf.b


def score(clf: ClassifierParams, d: np.ndarray) -> np.ndarray:
    """Pair similarity in (0, 1): sigmoid of the linear score."""
    return sigmoid(logits(clf, np.asarray(d, dtype=np.float64)))


def bce_loss(preds: np.ndarray, labels: np.ndarray) -> float:
    """Sum-reduced binary cross-entropy with clamped predictions."""
    preds = np.asarray(preds, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if preds.shape != labels.shape:
        raise ValueError(f"preds shape {preds.shape} != labels shape {labels.shape}")
    p = np.clip(preds, EPS_CLAMP, 1.0 - EPS_CLAMP)
    return float(-(labels * np.log(p) + (1.0 - labels) * np.log1p(-p)).sum())


def pair_scores_eval(
    params_bn: BatchNormParams,
    clf: ClassifierParams,
    feat_a: np.ndarray,
    feat_b: np.ndarray,
) -> np.ndarray:
    """Eval-mode pair scores for aligned feature rows (the shared score path)."""
    d, _ = bn_forward(params_bn, (feat_a - feat_b) ** 2, train=False)
    return sigmoid(d @ clf.w + clf.b)


@dataclass(frozen=True)
class RelationFeature:
    """Node payload for one probe-gallery pair: feature, label and item ids."""

    d: np.ndarray
    label: int
    probe_item: int
    gallery_item: int


def pairwise_scores(params, probe, gallery) -> np.ndarray:
    """Base-model scores of one probe against a gallery list (eval mode).

    ``params`` is a ``ModelParams``; ``probe`` an ``EmbeddingItem`` and
    ``gallery`` a sequence of them. Composes embed -> relation_feature ->
    score with the probe-gallery classifier.
    """
    if len(gallery) == 0:
        return np.zeros(0)
    feats = embed(params.embed, np.stack([probe.raw] + [g.raw for g in gallery]))
    probe_feat, gal_feats = feats[0], feats[1:]
    return pair_scores_eval(
        params.bn, params.clf_pg, np.broadcast_to(probe_feat, gal_feats.shape), gal_feats
    )


def relation_feature_record(params, probe, gallery_item) -> RelationFeature:
    """Eval-mode ``RelationFeature`` for a single probe-gallery item pair."""
    feats = embed(params.embed, np.stack([probe.raw, gallery_item.raw]))
    d = relation_feature(feats[0], feats[1], params.bn, mode="eval")
    return RelationFeature(
        d=d,
        label=int(probe.identity_id == gallery_item.identity_id),
        probe_item=probe.item_id,
        gallery_item=gallery_item.item_id,
    )
