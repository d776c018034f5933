"""Edge weights, deep messages, fusion and the single-probe graph pipeline."""
from __future__ import annotations

import math

import numpy as np
import pytest

from sggnn.graph import (
    FusionConfig,
    compute_messages,
    edge_weights_compat,
    edge_weights_sg,
    fuse,
    sggnn_forward,
)
from sggnn.params import CompatParams, MessageNetParams, init_batchnorm
from sggnn.relation import pairwise_scores


def check_edge_weight_contract(w: np.ndarray) -> None:
    n = w.shape[0]
    assert np.all(np.diag(w) == 0.0)
    assert np.all(w >= 0.0)
    if n >= 2:
        np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-9)


class TestEdgeWeightsSG:
    def test_equal_scores_split_evenly(self):
        s = np.zeros((3, 3))
        w = edge_weights_sg(s)
        np.testing.assert_allclose(w[0], [0.0, 0.5, 0.5])

    def test_log3_ratio(self):
        s = np.zeros((3, 3))
        s[0, 1] = math.log(3.0)
        w = edge_weights_sg(s)
        np.testing.assert_allclose(w[0], [0.0, 0.75, 0.25], rtol=1e-12)

    def test_row_shift_invariance(self, rng):
        s = rng.standard_normal((5, 5))
        shifted = s + rng.standard_normal((5, 1))
        np.testing.assert_allclose(edge_weights_sg(s), edge_weights_sg(shifted), atol=1e-12)

    def test_contract_on_random_matrices(self, rng):
        for _ in range(100):
            n = int(rng.integers(2, 9))
            check_edge_weight_contract(edge_weights_sg(rng.standard_normal((n, n)) * 10.0))

    def test_single_node(self):
        np.testing.assert_array_equal(edge_weights_sg(np.array([[3.0]])), [[0.0]])

    def test_non_square_rejected(self):
        with pytest.raises(ValueError):
            edge_weights_sg(np.zeros((2, 3)))


class TestEdgeWeightsCompat:
    def test_equal_features_uniform(self, rng):
        compat = CompatParams(proj=rng.standard_normal((4, 4)))
        d = np.tile(rng.standard_normal(4), (5, 1))
        w = edge_weights_compat(d, compat)
        check_edge_weight_contract(w)
        np.testing.assert_allclose(w[w > 0], 0.25, rtol=1e-12)

    def test_zero_projection_uniform(self, rng):
        compat = CompatParams(proj=np.zeros((4, 4)))
        w = edge_weights_compat(rng.standard_normal((3, 4)), compat)
        np.testing.assert_allclose(w[0], [0.0, 0.5, 0.5])

    def test_contract_on_random_inputs(self, rng):
        compat = CompatParams(proj=rng.standard_normal((6, 6)))
        for _ in range(20):
            n = int(rng.integers(2, 7))
            check_edge_weight_contract(edge_weights_compat(rng.standard_normal((n, 6)), compat))


def identity_msgnet(d: int, eps: float = 1e-12) -> MessageNetParams:
    return MessageNetParams(
        w1=np.eye(d), b1=np.zeros(d), bn1=init_batchnorm(d, eps=eps),
        w2=np.eye(d), b2=np.zeros(d), bn2=init_batchnorm(d, eps=eps),
    )


def random_msgnet(d: int, rng) -> MessageNetParams:
    return MessageNetParams(
        w1=rng.standard_normal((d, d)), b1=rng.standard_normal(d), bn1=init_batchnorm(d),
        w2=rng.standard_normal((d, d)), b2=rng.standard_normal(d), bn2=init_batchnorm(d),
    )


class TestComputeMessages:
    def test_identity_init_double_rectification(self, rng):
        net = identity_msgnet(5)
        d = rng.standard_normal((4, 5))
        np.testing.assert_allclose(compute_messages(net, d, "eval"), np.maximum(d, 0.0), rtol=1e-9)

    def test_row_permutation_equivariance(self, rng):
        net = random_msgnet(4, rng)
        d = rng.standard_normal((6, 4))
        perm = rng.permutation(6)
        np.testing.assert_allclose(
            compute_messages(net, d, "eval")[perm], compute_messages(net, d[perm], "eval"), rtol=1e-12
        )

    def test_matches_independent_two_layer_oracle(self, rng):
        # Re-implementation oracle written from scratch against the layer stack.
        net = random_msgnet(5, rng)
        d = rng.standard_normal((7, 5))

        def oracle(x):
            def bn_eval(bn, v):
                return bn.gamma * (v - bn.running_mean) / np.sqrt(bn.running_var + bn.eps) + bn.beta

            h = np.maximum(bn_eval(net.bn1, x @ net.w1 + net.b1), 0.0)
            return np.maximum(bn_eval(net.bn2, h @ net.w2 + net.b2), 0.0)

        np.testing.assert_allclose(compute_messages(net, d, "eval"), oracle(d), atol=1e-12)

    def test_train_mode_single_row_rejected(self, rng):
        with pytest.raises(ValueError):
            compute_messages(random_msgnet(3, rng), rng.standard_normal((1, 3)), "train")


class TestFuse:
    def test_alpha_zero_identity(self, rng):
        d = rng.standard_normal((4, 3))
        t = rng.standard_normal((4, 3))
        w = edge_weights_sg(rng.standard_normal((4, 4)))
        out = fuse(d, t, w, FusionConfig(alpha=0.0))
        np.testing.assert_array_equal(out, d)

    def test_hand_evaluated_two_nodes(self):
        d = np.array([[1.0, 0.0], [0.0, 0.0]])
        t = np.array([[0.0, 0.0], [0.0, 2.0]])
        w = np.array([[0.0, 1.0], [1.0, 0.0]])
        out = fuse(d, t, w, FusionConfig(alpha=0.9))
        np.testing.assert_allclose(out[0], [0.1, 1.8], rtol=1e-12)

    def test_single_iteration_matches_direct_formula_bitwise(self, rng):
        d = rng.standard_normal((5, 4))
        t = rng.standard_normal((5, 4))
        w = edge_weights_sg(rng.standard_normal((5, 5)))
        alpha = 0.9
        direct = (1.0 - alpha) * d + alpha * (w @ t)
        out = fuse(d, t, w, FusionConfig(alpha=alpha, iterations=1))
        np.testing.assert_array_equal(out, direct)

    def test_linear_in_features_and_messages(self, rng):
        d = rng.standard_normal((4, 3))
        t = rng.standard_normal((4, 3))
        w = edge_weights_sg(rng.standard_normal((4, 4)))
        cfg = FusionConfig(alpha=0.7)
        np.testing.assert_allclose(
            fuse(3.0 * d, 3.0 * t, w, cfg), 3.0 * fuse(d, t, w, cfg), rtol=1e-12
        )

    def test_multiple_iterations_need_msgnet(self, rng):
        d = rng.standard_normal((3, 2))
        with pytest.raises(ValueError):
            fuse(d, d, edge_weights_sg(np.zeros((3, 3))), FusionConfig(alpha=0.5, iterations=2))

    def test_frozen_message_iterates_contract(self, rng):
        # With row-stochastic weights and alpha < 1, repeatedly applying the
        # single-step update with fixed messages converges geometrically.
        n, d = 6, 4
        feats = rng.standard_normal((n, d))
        msgs = rng.standard_normal((n, d))
        w = edge_weights_sg(rng.standard_normal((n, n)))
        cfg = FusionConfig(alpha=0.9, iterations=1)
        cur = feats
        diffs = []
        for _ in range(60):
            nxt = fuse(cur, msgs, w, cfg)
            diffs.append(np.linalg.norm(nxt - cur))
            cur = nxt
        assert diffs[-1] < 1e-8
        fixed_point = w @ msgs  # solves d = (1-a) d + a W t
        np.testing.assert_allclose(cur, fixed_point, atol=1e-7)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            FusionConfig(alpha=1.5)
        with pytest.raises(ValueError):
            FusionConfig(iterations=0)
        with pytest.raises(ValueError):
            FusionConfig(weight_mode="other")


class TestSggnnForward:
    def test_alpha_zero_equals_pairwise_scores_zero_ulp(self, tiny_params, tiny_corpus):
        probe, gallery = tiny_corpus.items[0], tiny_corpus.items[1:7]
        scores, _ = sggnn_forward(tiny_params, probe, gallery, FusionConfig(alpha=0.0))
        base = pairwise_scores(tiny_params, probe, gallery)
        np.testing.assert_array_equal(scores, base)

    def test_gallery_permutation_equivariance(self, tiny_params, tiny_corpus, rng):
        probe, gallery = tiny_corpus.items[0], tiny_corpus.items[1:7]
        scores, _ = sggnn_forward(tiny_params, probe, gallery, FusionConfig(alpha=0.9))
        perm = rng.permutation(len(gallery))
        permuted, _ = sggnn_forward(
            tiny_params, probe, [gallery[i] for i in perm], FusionConfig(alpha=0.9)
        )
        np.testing.assert_allclose(permuted, scores[perm], rtol=1e-9)

    def test_batch_graph_invariants(self, tiny_params, tiny_corpus):
        probe, gallery = tiny_corpus.items[0], tiny_corpus.items[1:6]
        for mode in ("similarity_guided", "compatibility"):
            scores, graph = sggnn_forward(
                tiny_params, probe, gallery, FusionConfig(alpha=0.9, weight_mode=mode)
            )
            check_edge_weight_contract(graph.edge_weights)
            assert graph.probe == probe.item_id
            assert graph.gallery == [g.item_id for g in gallery]
            assert graph.node_features.shape == graph.refined.shape
            assert np.all(np.diag(graph.gallery_scores) == 0.0)
            np.testing.assert_allclose(graph.gallery_scores, graph.gallery_scores.T)
            assert scores.shape == (5,)
            assert np.all((scores > 0.0) & (scores < 1.0))

    def test_single_item_gallery_degenerates(self, tiny_params, tiny_corpus):
        probe, gallery = tiny_corpus.items[0], tiny_corpus.items[1:2]
        scores, graph = sggnn_forward(tiny_params, probe, gallery, FusionConfig(alpha=0.9))
        np.testing.assert_array_equal(graph.edge_weights, [[0.0]])
        np.testing.assert_allclose(graph.refined, 0.1 * graph.node_features, rtol=1e-12)

    def test_empty_gallery_rejected(self, tiny_params, tiny_corpus):
        with pytest.raises(ValueError):
            sggnn_forward(tiny_params, tiny_corpus.items[0], [], FusionConfig())

    def test_iterations_two_changes_scores(self, tiny_params, tiny_corpus):
        probe, gallery = tiny_corpus.items[0], tiny_corpus.items[1:7]
        s1, _ = sggnn_forward(tiny_params, probe, gallery, FusionConfig(alpha=0.9, iterations=1))
        s2, _ = sggnn_forward(tiny_params, probe, gallery, FusionConfig(alpha=0.9, iterations=2))
        assert not np.array_equal(s1, s2)

    def test_hard_positive_rescued_by_gallery_neighbor(self, trained_small):
        # Constructed instance: probe p and hard positive g_i sit on opposite
        # sides of their identity's center, with easy positive g_j at the
        # center, so (p, g_j) and (g_i, g_j) are confident pairs while
        # (p, g_i) is not. Message passing through the strong (g_i, g_j)
        # edge must raise the hard pair's score above its no-fusion value.
        from sggnn.corpus import EmbeddingItem
        from sggnn.relation import pairwise_scores

        params, _ = trained_small
        rng = np.random.default_rng(99)
        center = rng.standard_normal(16)
        u = rng.standard_normal(16)
        u /= np.linalg.norm(u)
        r = 2.0
        probe = EmbeddingItem(item_id=0, identity_id=0, camera_id=0, raw=center + r * u)
        gallery = [
            EmbeddingItem(item_id=1, identity_id=0, camera_id=0, raw=center - r * u),
            EmbeddingItem(item_id=2, identity_id=0, camera_id=0, raw=center.copy()),
        ] + [
            EmbeddingItem(item_id=3 + t, identity_id=10 + t, camera_id=0,
                          raw=rng.standard_normal(16) * 4.0)
            for t in range(6)
        ]

        base = pairwise_scores(params, probe, gallery)
        fused, graph = sggnn_forward(params, probe, gallery, FusionConfig(alpha=0.9))
        # scenario preconditions: (p, g_i) hard, (p, g_j) and (g_i, g_j) easy
        assert base[0] < 0.5
        assert base[1] > 0.7
        assert graph.gallery_scores[0, 1] > 0.0
        assert graph.edge_weights[0, 1] > 0.9
        # the rescue
        assert fused[0] > base[0]
