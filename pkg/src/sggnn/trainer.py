"""Mini-batch sampling, the two training losses with manual backpropagation,
Adam updates and the two-stage optimization schedule.

Stage 1 fits the base pairwise model (embedding head, relation batch-norm,
probe-gallery classifier) with sum-reduced binary cross-entropy over
probe-gallery pairs. Stage 2 finetunes the whole scoring graph end-to-end:
the probe-gallery loss flows back through fusion, edge weights and messages,
and the gallery-gallery pair labels supervise the gallery classifier
directly (weighted by ``lambda_gg``).

Batches follow the K-images-per-identity scheme: M identities, K images
each; K of the identities contribute one probe image each, and every probe
is scored against all other items in the batch. All randomness derives from
the sampler seed, so training is bit-deterministic given (seed, schedule,
corpus).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .corpus import EmbeddingCorpus
from .errors import ConfigError, NumericError
from .graph import (
    FusionConfig,
    compat_backward,
    compat_forward,
    edge_weights_sg,
    msgnet_backward,
    msgnet_forward,
    softmax_rows_backward,
)
from .params import ModelParams, zero_grads
from .relation import bce_loss, bn_backward, bn_forward, embed_backward, embed_forward, sigmoid


# ---------------------------------------------------------------------------
# sampling


@dataclass(frozen=True)
class SamplerConfig:
    """K images per identity, M identities per batch."""

    k: int = 4
    m: int = 48
    seed: int = 0

    def __post_init__(self) -> None:
        if self.k < 2:
            raise ConfigError("k must be >= 2 (each identity needs a probe and a gallery image)")
        if self.m < 2:
            raise ConfigError("m must be >= 2")
        if self.k > self.m:
            raise ConfigError("k probe identities must fit in the m identities of a batch")


@dataclass(frozen=True)
class MiniBatch:
    """One training batch: K probes, the shared gallery pool and pair labels.

    ``raw`` holds the K*M item vectors; ``probe_rows[k]`` indexes the k-th
    probe and ``gallery_rows[k]`` every other row of the batch, so each probe
    is scored against K*M - 1 items. ``gg_i``/``gg_j`` enumerate all
    unordered item pairs for gallery-gallery supervision.
    """

    probes: list[int]
    gallery: list[int]
    raw: np.ndarray
    item_ids: np.ndarray
    identity_ids: np.ndarray
    probe_rows: np.ndarray
    gallery_rows: list[np.ndarray]
    pg_labels: list[np.ndarray]
    gg_i: np.ndarray
    gg_j: np.ndarray
    gg_labels: np.ndarray

    def __len__(self) -> int:
        return self.raw.shape[0]


class BatchSampler:
    """Deterministic identity-balanced batch sampler.

    Every epoch shuffles the identity list with a seed derived from
    (seed, epoch) and walks it in chunks of M, topping the last chunk up from
    the front of the permutation, so each epoch visits every identity.
    """

    def __init__(self, corpus: EmbeddingCorpus, cfg: SamplerConfig):
        if len(corpus.identities) < cfg.m:
            raise ConfigError(
                f"corpus has {len(corpus.identities)} identities, batch needs m={cfg.m}"
            )
        self.cfg = cfg
        self.identities = np.array(corpus.identities)
        pos_by_item = {it.item_id: i for i, it in enumerate(corpus.items)}
        self.rows_by_identity = {
            ident: np.array([pos_by_item[i] for i in sorted(corpus.identity_index[ident])])
            for ident in corpus.identities
        }
        self.item_ids = np.array([it.item_id for it in corpus.items])
        self.identity_ids = np.array([it.identity_id for it in corpus.items])
        self.raw = corpus.raw_matrix()

    @property
    def steps_per_epoch(self) -> int:
        return math.ceil(len(self.identities) / self.cfg.m)

    def _identity_groups(self, epoch: int) -> list[np.ndarray]:
        rng = np.random.default_rng([self.cfg.seed, epoch])
        perm = self.identities[rng.permutation(len(self.identities))]
        m = self.cfg.m
        groups = [perm[i : i + m] for i in range(0, len(perm), m)]
        if len(groups[-1]) < m:
            tail = set(groups[-1].tolist())
            fill = np.array([x for x in perm if x not in tail][: m - len(groups[-1])])
            groups[-1] = np.concatenate([groups[-1], fill])
        return groups

    def sample(self, epoch: int, step: int) -> MiniBatch:
        """Batch for (epoch, step); identical inputs yield identical batches."""
        groups = self._identity_groups(epoch)
        group = groups[step % len(groups)]
        k, m = self.cfg.k, self.cfg.m
        rng = np.random.default_rng([self.cfg.seed, epoch, step])

        rows = []
        for ident in group:
            pool = self.rows_by_identity[int(ident)]
            replace = len(pool) < k
            rows.append(pool[rng.choice(len(pool), size=k, replace=replace)])
        rows = np.concatenate(rows)  # batch rows into the corpus, K per identity

        # K of the M identities contribute a probe: the first image drawn for
        # each (draw order is already random).
        probe_identity_slots = np.sort(rng.choice(m, size=k, replace=False))
        probe_rows = probe_identity_slots * k

        raw = self.raw[rows]
        item_ids = self.item_ids[rows]
        identity_ids = self.identity_ids[rows]
        n = len(rows)

        gallery_rows = [np.delete(np.arange(n), p) for p in probe_rows]
        pg_labels = [
            (identity_ids[g] == identity_ids[p]).astype(np.float64)
            for p, g in zip(probe_rows, gallery_rows)
        ]
        gg_i, gg_j = np.triu_indices(n, k=1)
        gg_labels = (identity_ids[gg_i] == identity_ids[gg_j]).astype(np.float64)

        probe_items = [int(item_ids[p]) for p in probe_rows]
        gallery_items = [int(i) for i in np.delete(item_ids, probe_rows)]
        return MiniBatch(
            probes=probe_items,
            gallery=gallery_items,
            raw=raw,
            item_ids=item_ids,
            identity_ids=identity_ids,
            probe_rows=probe_rows,
            gallery_rows=gallery_rows,
            pg_labels=pg_labels,
            gg_i=gg_i,
            gg_j=gg_j,
            gg_labels=gg_labels,
        )


def sample_batch(
    train_corpus: EmbeddingCorpus, cfg: SamplerConfig, epoch_state: tuple[int, int]
) -> MiniBatch:
    """One-shot sampling entry point; ``epoch_state`` is (epoch, step)."""
    epoch, step = epoch_state
    return BatchSampler(train_corpus, cfg).sample(epoch, step)


# ---------------------------------------------------------------------------
# losses with gradients


def base_loss_and_grads(
    params: ModelParams, batch: MiniBatch, train: bool = True
) -> tuple[float, dict[str, np.ndarray], dict[str, float]]:
    """Sum-reduced BCE over all probe-gallery pairs, no graph fusion.

    Returns (loss, gradients, stats) where stats carries the pair count and
    the fraction of pairs classified correctly at threshold 0.5.
    """
    grads = zero_grads(params)
    x, ecache = embed_forward(params.embed, batch.raw)

    pa = np.concatenate(
        [np.full(len(g), p) for p, g in zip(batch.probe_rows, batch.gallery_rows)]
    )
    pb = np.concatenate(batch.gallery_rows)
    labels = np.concatenate(batch.pg_labels)

    diffs = x[pa] - x[pb]
    q = diffs**2
    d, bncache = bn_forward(params.bn, q, train=train)
    z = d @ params.clf_pg.w + params.clf_pg.b
    preds = sigmoid(z)
    loss = bce_loss(preds, labels)

    dz = preds - labels
    grads["clf_pg.w"] += d.T @ dz
    grads["clf_pg.b"] += dz.sum()
    dd = np.outer(dz, params.clf_pg.w)
    dq = bn_backward(params.bn, bncache, dd, grads, train=train)
    ddiffs = dq * 2.0 * diffs
    dx = np.zeros_like(x)
    np.add.at(dx, pa, ddiffs)
    np.add.at(dx, pb, -ddiffs)
    embed_backward(params.embed, ecache, dx, grads)

    stats = {
        "pairs": float(len(labels)),
        "accuracy": float(((preds >= 0.5) == (labels >= 0.5)).mean()),
    }
    return loss, grads, stats


def sggnn_loss_and_grads(
    params: ModelParams,
    batch: MiniBatch,
    fusion_cfg: FusionConfig,
    lambda_gg: float = 1.0,
    train: bool = True,
) -> tuple[float, dict[str, np.ndarray], dict[str, float]]:
    """End-to-end loss: BCE on refined probe-gallery scores plus, weighted by
    ``lambda_gg``, BCE on the gallery-gallery pair scores that guide fusion.

    In similarity-guided mode the probe-gallery loss also backpropagates
    through the softmax edge weights into the gallery classifier; in
    compatibility mode the weights only learn through the final loss.
    """
    grads = zero_grads(params)
    sg_mode = fusion_cfg.weight_mode == "similarity_guided"
    need_gg = sg_mode or lambda_gg > 0.0
    alpha = fusion_cfg.alpha
    n_items = len(batch)
    k = len(batch.probe_rows)

    x, ecache = embed_forward(params.embed, batch.raw)

    pa = np.concatenate(
        [np.full(len(g), p) for p, g in zip(batch.probe_rows, batch.gallery_rows)]
    )
    pb = np.concatenate(batch.gallery_rows)
    pg_labels = np.concatenate(batch.pg_labels)
    sizes = [len(g) for g in batch.gallery_rows]
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    diffs_pg = x[pa] - x[pb]
    q_pg = diffs_pg**2
    diffs_gg = x[batch.gg_i] - x[batch.gg_j]
    q_gg = diffs_gg**2
    n_pg = q_pg.shape[0]

    # One shared batch-norm pass over every pair feature used this step.
    d_all, bncache = bn_forward(params.bn, np.concatenate([q_pg, q_gg], axis=0), train=train)
    d_pg_flat, d_gg = d_all[:n_pg], d_all[n_pg:]
    d0 = [d_pg_flat[offsets[i] : offsets[i + 1]] for i in range(k)]

    # Gallery-gallery logits and their symmetric lookup over batch items.
    z_gg = np.zeros(0)
    s_items = None
    if need_gg:
        z_gg = d_gg @ params.clf_gg.w + params.clf_gg.b
        s_items = np.zeros((n_items, n_items))
        s_items[batch.gg_i, batch.gg_j] = z_gg
        s_items[batch.gg_j, batch.gg_i] = z_gg

    w_per_probe = []
    compat_caches = []
    for i in range(k):
        gal = batch.gallery_rows[i]
        if sg_mode:
            w_per_probe.append(edge_weights_sg(s_items[np.ix_(gal, gal)]))
            compat_caches.append(None)
        else:
            w, ccache = compat_forward(params.compat, d0[i])
            w_per_probe.append(w)
            compat_caches.append(ccache)

    # Fusion, messages recomputed per iteration over all probes' features.
    d_cur = d0
    iter_caches = []
    if alpha > 0.0:
        for _ in range(fusion_cfg.iterations):
            t_all, mcache = msgnet_forward(params.msg, np.concatenate(d_cur, axis=0), train=train)
            t_split = [t_all[offsets[i] : offsets[i + 1]] for i in range(k)]
            d_next = [
                (1.0 - alpha) * d_cur[i] + alpha * (w_per_probe[i] @ t_split[i]) for i in range(k)
            ]
            iter_caches.append((d_cur, t_split, mcache))
            d_cur = d_next

    d_final = np.concatenate(d_cur, axis=0)
    z_pg = d_final @ params.clf_pg.w + params.clf_pg.b
    preds = sigmoid(z_pg)
    loss_pg = bce_loss(preds, pg_labels)
    loss_gg = bce_loss(sigmoid(z_gg), batch.gg_labels) if lambda_gg > 0.0 else 0.0
    loss = loss_pg + lambda_gg * loss_gg

    # ---- backward ----
    dz_pg = preds - pg_labels
    grads["clf_pg.w"] += d_final.T @ dz_pg
    grads["clf_pg.b"] += dz_pg.sum()
    dd_flat = np.outer(dz_pg, params.clf_pg.w)
    dd = [dd_flat[offsets[i] : offsets[i + 1]].copy() for i in range(k)]

    dw_per_probe = [np.zeros_like(w) for w in w_per_probe]
    if alpha > 0.0:
        for d_prev, t_split, mcache in reversed(iter_caches):
            dt = []
            for i in range(k):
                dt.append(alpha * (w_per_probe[i].T @ dd[i]))
                dw_per_probe[i] += alpha * (dd[i] @ t_split[i].T)
                dd[i] = (1.0 - alpha) * dd[i]
            dmsg_in = msgnet_backward(params.msg, mcache, np.concatenate(dt, axis=0), grads)
            for i in range(k):
                dd[i] += dmsg_in[offsets[i] : offsets[i + 1]]

    ds_items = np.zeros((n_items, n_items)) if sg_mode else None
    for i in range(k):
        gal = batch.gallery_rows[i]
        if sg_mode:
            ds = softmax_rows_backward(w_per_probe[i], dw_per_probe[i])
            ds_items[np.ix_(gal, gal)] += ds
        else:
            dd[i] += compat_backward(params.compat, compat_caches[i], dw_per_probe[i], grads)

    dd_gg = np.zeros_like(d_gg)
    if need_gg:
        dz_gg = np.zeros_like(z_gg)
        if lambda_gg > 0.0:
            dz_gg += lambda_gg * (sigmoid(z_gg) - batch.gg_labels)
        if sg_mode:
            dz_gg += ds_items[batch.gg_i, batch.gg_j] + ds_items[batch.gg_j, batch.gg_i]
        grads["clf_gg.w"] += d_gg.T @ dz_gg
        grads["clf_gg.b"] += dz_gg.sum()
        dd_gg = np.outer(dz_gg, params.clf_gg.w)

    d_all_grad = np.concatenate([np.concatenate(dd, axis=0), dd_gg], axis=0)
    dq_all = bn_backward(params.bn, bncache, d_all_grad, grads, train=train)
    dq_pg, dq_gg = dq_all[:n_pg], dq_all[n_pg:]

    dx = np.zeros_like(x)
    dd_pg = dq_pg * 2.0 * diffs_pg
    np.add.at(dx, pa, dd_pg)
    np.add.at(dx, pb, -dd_pg)
    dd_ggdiff = dq_gg * 2.0 * diffs_gg
    np.add.at(dx, batch.gg_i, dd_ggdiff)
    np.add.at(dx, batch.gg_j, -dd_ggdiff)
    embed_backward(params.embed, ecache, dx, grads)

    stats = {
        "pairs": float(len(pg_labels)),
        "accuracy": float(((preds >= 0.5) == (pg_labels >= 0.5)).mean()),
        "loss_pg": float(loss_pg),
        "loss_gg": float(loss_gg),
    }
    return loss, grads, stats


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    """Adam accumulators, one slot per trainable tensor."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_optimizer(params: ModelParams, lr: float) -> OptimizerState:
    return OptimizerState(
        m={name: np.zeros_like(arr) for name, arr in params.named_parameters()},
        v={name: np.zeros_like(arr) for name, arr in params.named_parameters()},
        lr=lr,
    )


def adam_step(
    state: OptimizerState, params: ModelParams, grads: dict[str, np.ndarray]
) -> tuple[ModelParams, OptimizerState]:
    """Bias-corrected Adam update, applied in place."""
    state.step += 1
    bc1 = 1.0 - state.beta1**state.step
    bc2 = 1.0 - state.beta2**state.step
    for name, arr in params.named_parameters():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name}")
        m = state.m[name]
        v = state.v[name]
        m[...] = state.beta1 * m + (1.0 - state.beta1) * g
        v[...] = state.beta2 * v + (1.0 - state.beta2) * g**2
        arr[...] = arr - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params, state


# ---------------------------------------------------------------------------
# schedules and stages


@dataclass(frozen=True)
class TrainSchedule:
    """Learning rates and epoch counts for the two training stages."""

    stage1_lr: float = 0.01
    stage1_epochs_before_decay: int = 50
    stage1_decay_factor: float = 10.0
    stage1_epochs_after: int = 50
    stage2_lr: float = 1e-4
    stage2_epochs: int = 50
    alpha: float = 0.9
    lambda_gg: float = 1.0

    def __post_init__(self) -> None:
        if self.stage1_lr < 0 or self.stage2_lr < 0:
            raise ConfigError("learning rates must be non-negative")
        if self.stage1_epochs_before_decay < 0 or self.stage1_epochs_after < 0:
            raise ConfigError("epoch counts must be non-negative")
        if self.stage2_epochs < 0:
            raise ConfigError("stage2_epochs must be non-negative")
        if self.stage1_decay_factor <= 0:
            raise ConfigError("stage1_decay_factor must be positive")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("alpha must lie in [0, 1]")
        if self.lambda_gg < 0:
            raise ConfigError("lambda_gg must be non-negative")

    @property
    def stage1_epochs(self) -> int:
        return self.stage1_epochs_before_decay + self.stage1_epochs_after

    def stage1_lr_at(self, epoch: int) -> float:
        """Learning rate for 0-based stage-1 epoch, with the step decay applied."""
        if epoch < self.stage1_epochs_before_decay:
            return self.stage1_lr
        return self.stage1_lr / self.stage1_decay_factor


@dataclass(frozen=True)
class EpochLog:
    epoch: int
    stage: int
    lr: float
    loss: float  # mean per-pair BCE over the epoch's steps
    accuracy: float


def stage1_train(
    params: ModelParams,
    train_corpus: EmbeddingCorpus,
    schedule: TrainSchedule,
    sampler: BatchSampler | SamplerConfig,
    epoch_callback=None,
) -> tuple[ModelParams, list[EpochLog]]:
    """Pretrain the base pairwise model; ends by copying the trained
    probe-gallery classifier into the gallery-gallery one."""
    if isinstance(sampler, SamplerConfig):
        sampler = BatchSampler(train_corpus, sampler)
    curve: list[EpochLog] = []
    opt = init_optimizer(params, schedule.stage1_lr)
    for epoch in range(schedule.stage1_epochs):
        opt.lr = schedule.stage1_lr_at(epoch)
        losses, accs = [], []
        for step in range(sampler.steps_per_epoch):
            batch = sampler.sample(epoch, step)
            loss, grads, stats = base_loss_and_grads(params, batch)
            if not np.isfinite(loss):
                raise NumericError(f"stage-1 loss diverged at epoch {epoch}, step {step}")
            adam_step(opt, params, grads)
            losses.append(loss / stats["pairs"])
            accs.append(stats["accuracy"])
        curve.append(
            EpochLog(
                epoch=epoch + 1,
                stage=1,
                lr=opt.lr,
                loss=float(np.mean(losses)),
                accuracy=float(np.mean(accs)),
            )
        )
        if epoch_callback is not None:
            epoch_callback(epoch + 1, params)
    params.sync_gallery_classifier()
    return params, curve


def stage2_train(
    params: ModelParams,
    train_corpus: EmbeddingCorpus,
    schedule: TrainSchedule,
    sampler: BatchSampler | SamplerConfig,
    fusion_cfg: FusionConfig | None = None,
    epoch_callback=None,
) -> tuple[ModelParams, list[EpochLog]]:
    """Finetune the full scoring graph end-to-end from stage-1 parameters.

    Expects ``params`` to come out of ``stage1_train`` (which seeds the
    gallery classifier). The fusion config defaults to the schedule's alpha in
    similarity-guided mode.
    """
    if isinstance(sampler, SamplerConfig):
        sampler = BatchSampler(train_corpus, sampler)
    if fusion_cfg is None:
        fusion_cfg = FusionConfig(alpha=schedule.alpha)
    curve: list[EpochLog] = []
    opt = init_optimizer(params, schedule.stage2_lr)
    for epoch in range(schedule.stage2_epochs):
        losses, accs = [], []
        for step in range(sampler.steps_per_epoch):
            batch = sampler.sample(epoch, step)
            loss, grads, stats = sggnn_loss_and_grads(
                params, batch, fusion_cfg, lambda_gg=schedule.lambda_gg
            )
            if not np.isfinite(loss):
                raise NumericError(f"stage-2 loss diverged at epoch {epoch}, step {step}")
            adam_step(opt, params, grads)
            losses.append(loss / stats["pairs"])
            accs.append(stats["accuracy"])
        curve.append(
            EpochLog(
                epoch=epoch + 1,
                stage=2,
                lr=opt.lr,
                loss=float(np.mean(losses)),
                accuracy=float(np.mean(accs)),
            )
        )
        if epoch_callback is not None:
            epoch_callback(epoch + 1, params)
    return params, curve
