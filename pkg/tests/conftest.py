"""Shared fixtures: small corpora, parameter sets and a gradient checker."""
from __future__ import annotations

import numpy as np
import pytest

from sggnn.corpus import SynthConfig, generate_synthetic
from sggnn.params import ModelParams
from sggnn.trainer import BatchSampler, SamplerConfig


def relative_grad_error(analytic: np.ndarray, numeric: np.ndarray, zero_floor: float = 1e-7) -> float:
    """Norm-level relative error; gradients that are both at the finite-
    difference noise floor count as matching."""
    na, nf = np.linalg.norm(analytic), np.linalg.norm(numeric)
    if max(na, nf) < zero_floor:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / max(na, nf))


def finite_difference_grads(loss_fn, params: ModelParams, h: float = 1e-5) -> dict[str, np.ndarray]:
    """Central differences of ``loss_fn(params)`` for every trainable tensor.

    ``loss_fn`` must be a pure function of the parameter values; it receives
    a fresh deep copy per evaluation so batch-norm side effects are discarded.
    """
    out: dict[str, np.ndarray] = {}
    for name, arr in params.named_parameters():
        g = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape) if arr.ndim else [()]:
            plus = params.copy()
            plus.array(name)[idx] += h
            minus = params.copy()
            minus.array(name)[idx] -= h
            g[idx] = (loss_fn(plus) - loss_fn(minus)) / (2.0 * h)
        out[name] = g
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_corpus():
    """4 identities x 2 images in 5 dimensions; enough for small batches."""
    return generate_synthetic(
        SynthConfig(num_identities=4, images_per_identity=2, dim=5, noise_sigma=0.5, seed=11)
    )


@pytest.fixture
def tiny_batch(tiny_corpus):
    sampler = BatchSampler(tiny_corpus, SamplerConfig(k=2, m=3, seed=2))
    return sampler.sample(0, 0)


@pytest.fixture
def tiny_params():
    return ModelParams.init(d_raw=5, d_feat=6, hidden=4, seed=9)


@pytest.fixture(scope="session")
def trained_small():
    """A small model trained through both stages on a clustered corpus.

    Deterministic; shared across tests that need meaningful (not random)
    scores. Tests must not mutate the returned parameters.
    """
    from sggnn.graph import FusionConfig
    from sggnn.trainer import TrainSchedule, stage1_train, stage2_train

    cfg = SynthConfig(
        num_identities=30, images_per_identity=6, dim=16, center_scale=1.0,
        noise_sigma=0.35, hard_fraction=0.25, hard_shift=0.5, seed=3,
    )
    corpus = generate_synthetic(cfg)
    schedule = TrainSchedule(
        stage1_lr=0.01, stage1_epochs_before_decay=40, stage1_epochs_after=15,
        stage2_lr=2e-3, stage2_epochs=30,
    )
    params = ModelParams.init(d_raw=16, d_feat=16, seed=5)
    sampler = SamplerConfig(k=4, m=8, seed=8)
    params, _ = stage1_train(params, corpus, schedule, sampler)
    params, _ = stage2_train(params, corpus, schedule, sampler, FusionConfig(alpha=0.9))
    return params, corpus
