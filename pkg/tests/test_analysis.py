"""Tests for the specialization diagnostics."""

import math

import numpy as np
import pytest

from clusterup.analysis import (
    analysis_csv_rows,
    analyze_model,
    expert_utilization,
    expert_weight_similarity,
    mean_offdiagonal,
    relative_compactness,
    routing_entropy,
)
from clusterup.errors import InsufficientTokens, ZeroWeights
from clusterup.moe import DenseFfn, MoeLayer, RoutingRecord
from clusterup.train import make_dense_model, make_synthetic_dataset, run_training
from clusterup.upcycle import capture_activations, upcycle_model


def record_from_probs(probs, topk, dropped=None):
    t, k = topk.shape
    n_e = probs.shape[1]
    if dropped is None:
        dropped = np.zeros((t, k), dtype=bool)
    counts = np.bincount(topk.ravel(), minlength=n_e)
    sel = np.take_along_axis(probs, topk, axis=1)
    gates = sel / sel.sum(axis=1, keepdims=True)
    return RoutingRecord(
        probs=probs, topk_indices=topk, gates=gates, dropped=dropped,
        per_expert_fraction=counts / (t * k),
        per_expert_mean_prob=probs.mean(axis=0),
    )


class TestRelativeCompactness:
    def test_identity_covariances_give_dimension(self):
        d = 4
        scale = math.sqrt(d)
        # 2d experts with means +-sqrt(d) e_a: between covariance is I.
        means = np.concatenate([scale * np.eye(d), -scale * np.eye(d)], axis=1)
        outputs = []
        for m in means.T:
            tokens = [m + scale * e for e in np.eye(d)]
            tokens += [m - scale * e for e in np.eye(d)]
            outputs.append(np.stack(tokens, axis=1))
        rc = relative_compactness(outputs)
        assert abs(rc - d) < 1e-8

    def test_orthogonal_subspaces_give_zero(self):
        # Within variance along axis 0, means varying along axis 1.
        e0 = np.array([1.0, 0.0, 0.0])
        outputs = []
        for mean_shift in (-2.0, 0.0, 2.0):
            m = np.array([0.0, mean_shift, 0.0])
            outputs.append(np.stack([m + e0, m - e0], axis=1))
        rc = relative_compactness(outputs)
        assert abs(rc) < 1e-8

    def test_identical_constant_outputs_undefined(self):
        const = np.ones((3, 4))
        assert relative_compactness([const, const.copy()]) is None

    def test_insufficient_tokens(self):
        with pytest.raises(InsufficientTokens):
            relative_compactness([np.ones((3, 1)), np.ones((3, 5))])
        with pytest.raises(InsufficientTokens):
            relative_compactness([np.ones((3, 5))])

    def test_rotation_invariance(self):
        rng = np.random.default_rng(0)
        outputs = [rng.standard_normal((5, 12)) + rng.standard_normal((5, 1))
                   for _ in range(4)]
        rc = relative_compactness(outputs)
        rot = np.linalg.qr(rng.standard_normal((5, 5)))[0]
        rc_rot = relative_compactness([rot @ m for m in outputs])
        assert abs(rc - rc_rot) < 1e-6


class TestExpertSimilarity:
    def layer_from_w1s(self, w1s, zero_rest=True):
        experts = []
        for w1 in w1s:
            h, d = w1.shape
            experts.append(DenseFfn(w1, np.zeros(h), np.zeros((d, h)), np.zeros(d)))
        return MoeLayer(experts, np.zeros((len(experts), w1s[0].shape[1])) + 0.1,
                        k=1, capacity_factor=1.0)

    def test_copies_score_exactly_one(self):
        rng = np.random.default_rng(1)
        w1 = rng.standard_normal((4, 3))
        layer = self.layer_from_w1s([w1.copy() for _ in range(3)])
        sim = expert_weight_similarity(layer)
        assert (sim == 1.0).all()
        assert mean_offdiagonal(sim) == 1.0

    def test_orthogonal_w1_scores_zero(self):
        a = np.zeros((2, 2))
        a[0, 0] = 1.0
        b = np.zeros((2, 2))
        b[1, 1] = 1.0
        layer = self.layer_from_w1s([a, b])
        sim = expert_weight_similarity(layer)
        assert abs(sim[0, 1]) < 1e-12

    def test_positive_scaling_invariance(self):
        rng = np.random.default_rng(2)
        w1 = rng.standard_normal((4, 3))
        layer = self.layer_from_w1s([w1, 2.0 * w1])
        sim = expert_weight_similarity(layer)
        assert abs(sim[0, 1] - 1.0) < 1e-12

    def test_zero_weights_raise(self):
        a = np.ones((2, 2))
        layer = self.layer_from_w1s([a, np.zeros((2, 2))])
        with pytest.raises(ZeroWeights):
            expert_weight_similarity(layer)

    def test_symmetric_unit_diagonal(self):
        rng = np.random.default_rng(3)
        layer = self.layer_from_w1s([rng.standard_normal((4, 3)) for _ in range(4)])
        sim = expert_weight_similarity(layer)
        np.testing.assert_allclose(sim, sim.T, atol=0)
        np.testing.assert_allclose(np.diag(sim), 1.0, atol=1e-8)


class TestRoutingEntropy:
    def test_uniform_maximal(self):
        probs = np.full((10, 8), 1 / 8)
        assert abs(routing_entropy(probs) - math.log(8)) < 1e-12

    def test_one_hot_zero(self):
        probs = np.zeros((5, 4))
        probs[:, 2] = 1.0
        assert routing_entropy(probs) == 0.0

    def test_closed_form_two_way(self):
        probs = np.array([[0.75, 0.25]])
        expected = -(0.75 * math.log(0.75) + 0.25 * math.log(0.25))
        assert abs(routing_entropy(probs) - expected) < 1e-12
        assert abs(expected - 0.5623) < 1e-4

    def test_bounded_by_log_n(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            raw = rng.uniform(0.01, 1.0, size=(6, 5))
            probs = raw / raw.sum(axis=1, keepdims=True)
            h = routing_entropy(probs)
            assert h <= math.log(5) + 1e-12
            assert h < math.log(5) - 1e-9  # non-uniform rows stay strictly below

    def test_rejects_unnormalized(self):
        with pytest.raises(ValueError):
            routing_entropy(np.array([[0.5, 0.6]]))


class TestExpertUtilization:
    def test_concentrated(self):
        probs = np.full((6, 4), 0.25)
        topk = np.zeros((6, 1), dtype=int)
        util = expert_utilization(record_from_probs(probs, topk))
        np.testing.assert_allclose(util, [1.0, 0.0, 0.0, 0.0])

    def test_balanced_top2(self):
        probs = np.full((8, 8), 1 / 8)
        topk = np.stack([np.arange(8), (np.arange(8) + 1) % 8], axis=1)
        util = expert_utilization(record_from_probs(probs, topk))
        np.testing.assert_allclose(util, np.full(8, 0.125))

    def test_hand_counted_slots(self):
        probs = np.full((4, 4), 0.25)
        topk = np.array([[0, 1], [0, 1], [2, 3], [2, 3]])
        util = expert_utilization(record_from_probs(probs, topk))
        np.testing.assert_allclose(util, [0.25, 0.25, 0.25, 0.25])

    def test_includes_dropped_slots(self):
        probs = np.full((4, 2), 0.5)
        topk = np.zeros((4, 1), dtype=int)
        dropped = np.array([[False], [True], [True], [True]])
        util = expert_utilization(record_from_probs(probs, topk, dropped))
        np.testing.assert_allclose(util, [1.0, 0.0])


class TestAnalyzeModel:
    def build(self, method, seed=0):
        dense = make_dense_model(8, 12, 4, 2, seed=seed)
        ds = make_synthetic_dataset(8, 2, 4, 512, 3.0, seed=seed + 1)
        run_training(dense, None, ds, steps=50, batch_size=64, lr=0.05, seed=seed + 2)
        bank = capture_activations(dense, ds.inputs, [1, 3], 400, seed=seed + 3)
        moe, _, _ = upcycle_model(dense, method, n_experts=4, k=2,
                                  capacity_factor=2.0, seed=seed + 4, bank=bank)
        return moe, ds

    def test_sparse_layer_similarity_one(self):
        moe, ds = self.build("sparse")
        report = analyze_model(moe, ds.inputs[:, :256], 2.0)
        for site in report.per_site.values():
            assert site.mean_pairwise_similarity == 1.0

    def test_cluster_breaks_symmetry_and_lowers_entropy(self):
        moe_c, ds = self.build("cluster")
        moe_s, _ = self.build("sparse")
        rep_c = analyze_model(moe_c, ds.inputs[:, :256], 2.0)
        rep_s = analyze_model(moe_s, ds.inputs[:, :256], 2.0)
        for b in rep_c.per_site:
            assert rep_c.per_site[b].mean_pairwise_similarity < 1 - 1e-3
            assert rep_c.per_site[b].mean_routing_entropy < rep_s.per_site[b].mean_routing_entropy

    def test_report_invariants(self):
        moe, ds = self.build("drop")
        report = analyze_model(moe, ds.inputs[:, :256], 2.0)
        for site in report.per_site.values():
            sim = site.similarity_matrix
            np.testing.assert_allclose(sim, sim.T, atol=0)
            np.testing.assert_allclose(np.diag(sim), 1.0, atol=1e-8)
            np.testing.assert_allclose(site.utilization.sum(), 1.0, atol=1e-8)
            assert 0.0 <= site.mean_routing_entropy <= math.log(4) + 1e-12

    def test_csv_rows_schema(self):
        moe, ds = self.build("sparse", seed=10)
        report = analyze_model(moe, ds.inputs[:, :128], 2.0)
        rows = analysis_csv_rows(report)
        sites = {r[0] for r in rows}
        assert sites == {1, 3}
        metrics = {r[1] for r in rows}
        assert metrics == {
            "rc", "mean_pairwise_similarity", "mean_pairwise_similarity_w1",
            "mean_routing_entropy", "utilization",
        }
        util_rows = [r for r in rows if r[1] == "utilization"]
        assert len(util_rows) == 2 * 4
