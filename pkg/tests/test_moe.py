"""Tests for the MoE layer: FFN, routing, gating, capacity, ensemble, loss."""

import math

import numpy as np
import pytest

from clusterup.errors import ShapeMismatch
from clusterup.moe import (
    DenseFfn,
    MoeLayer,
    dense_ensemble_forward,
    expert_capacity,
    ffn_forward,
    load_balance_loss,
    moe_forward,
    router_probs,
    top_k_gates,
)


def random_ffn(rng, d=4, h=6, scale=1.0):
    return DenseFfn(
        w1=scale * rng.standard_normal((h, d)),
        b1=scale * rng.standard_normal(h),
        w2=scale * rng.standard_normal((d, h)),
        b2=scale * rng.standard_normal(d),
    )


def random_layer(rng, n_experts=4, d=4, h=6, k=2, capacity_factor=1e9):
    return MoeLayer(
        experts=[random_ffn(rng, d, h) for _ in range(n_experts)],
        router=rng.standard_normal((n_experts, d)),
        k=k,
        capacity_factor=capacity_factor,
    )


class TestFfnForward:
    def test_identity_on_positive_orthant(self):
        ffn = DenseFfn(np.eye(3), np.zeros(3), np.eye(3), np.zeros(3))
        x = np.abs(np.random.default_rng(0).standard_normal((3, 5))) + 0.1
        np.testing.assert_allclose(ffn_forward(ffn, x), x)

    def test_bias_passthrough(self):
        c = np.array([1.0, -2.0, 3.0])
        ffn = DenseFfn(np.ones((4, 3)), np.zeros(4), np.ones((3, 4)), c)
        y = ffn_forward(ffn, np.zeros((3, 6)))
        np.testing.assert_allclose(y, np.tile(c[:, None], (1, 6)))

    def test_matches_naive_loops(self):
        rng = np.random.default_rng(1)
        ffn = random_ffn(rng)
        x = rng.standard_normal((4, 3))
        y = ffn_forward(ffn, x)
        for t in range(3):
            hidden = np.zeros(6)
            for i in range(6):
                for j in range(4):
                    hidden[i] += ffn.w1[i, j] * x[j, t]
                hidden[i] = max(hidden[i] + ffn.b1[i], 0.0)
            out = np.zeros(4)
            for i in range(4):
                for j in range(6):
                    out[i] += ffn.w2[i, j] * hidden[j]
                out[i] += ffn.b2[i]
            np.testing.assert_allclose(y[:, t], out, atol=1e-10)

    def test_shape_mismatch(self):
        ffn = random_ffn(np.random.default_rng(2))
        with pytest.raises(ShapeMismatch):
            ffn_forward(ffn, np.zeros((5, 2)))


class TestRouterProbs:
    def test_zero_router_is_uniform(self):
        probs = router_probs(np.zeros((8, 4)), np.random.default_rng(3).standard_normal((4, 5)))
        np.testing.assert_allclose(probs, np.full((5, 8), 1 / 8))

    def test_closed_form_softmax(self):
        # logits (ln 3, 0) for a single token
        router = np.array([[math.log(3.0)], [0.0]])
        probs = router_probs(router, np.array([[1.0]]))
        np.testing.assert_allclose(probs, [[0.75, 0.25]], atol=1e-12)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(4)
        probs = router_probs(rng.standard_normal((6, 5)) * 10, rng.standard_normal((5, 40)))
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-8)


class TestTopKGates:
    def test_renormalization(self):
        idx, gates = top_k_gates(np.array([0.5, 0.3, 0.2]), 2)
        np.testing.assert_array_equal(idx, [0, 1])
        np.testing.assert_allclose(gates, [0.625, 0.375])

    def test_tie_to_lowest_index(self):
        idx, gates = top_k_gates(np.array([0.4, 0.4, 0.2]), 1)
        assert idx[0] == 0
        np.testing.assert_allclose(gates, [1.0])

    def test_full_selection_equals_probs(self):
        rng = np.random.default_rng(5)
        p = rng.uniform(0.1, 1.0, size=6)
        p /= p.sum()
        idx, gates = top_k_gates(p, 6)
        np.testing.assert_allclose(np.sort(gates), np.sort(p), atol=1e-12)
        np.testing.assert_allclose(gates, p[idx], atol=1e-12)


class TestCapacity:
    def test_exact_quotients(self):
        assert expert_capacity(0.5, 4, 1, 2) == 1
        assert expert_capacity(1.5, 128, 2, 8) == 48
        assert expert_capacity(2.0, 1000, 1, 8) == 250

    def test_rounds_up(self):
        assert expert_capacity(1.0, 5, 1, 2) == 3


class TestMoeForward:
    def test_identical_experts_equal_dense(self):
        rng = np.random.default_rng(6)
        base = random_ffn(rng)
        for k in (1, 2, 4):
            layer = MoeLayer(
                experts=[base.copy() for _ in range(4)],
                router=rng.standard_normal((4, 4)),
                k=k,
                capacity_factor=1e9,
            )
            x = rng.standard_normal((4, 20))
            y, _ = moe_forward(layer, x)
            np.testing.assert_allclose(y, ffn_forward(base, x), atol=1e-6)

    def test_k1_selects_single_expert(self):
        rng = np.random.default_rng(7)
        layer = random_layer(rng, n_experts=2, k=1)
        x = rng.standard_normal((4, 10))
        y, record = moe_forward(layer, x)
        for t in range(10):
            e = record.topk_indices[t, 0]
            expected = ffn_forward(layer.experts[e], x[:, t:t + 1])
            np.testing.assert_allclose(y[:, t:t + 1], expected, atol=1e-12)

    def test_capacity_drops_in_token_order(self):
        # Router forces every token onto expert 0; capacity 1 keeps only token 0.
        d = 3
        experts = [
            DenseFfn(np.zeros((2, d)), np.zeros(2), np.zeros((d, 2)), np.full(d, fill))
            for fill in (1.0, 2.0)
        ]
        router = np.array([[10.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
        layer = MoeLayer(experts, router, k=1, capacity_factor=0.5)
        x = np.tile(np.array([[1.0], [0.0], [0.0]]), (1, 4))
        y, record = moe_forward(layer, x)
        assert expert_capacity(0.5, 4, 1, 2) == 1
        np.testing.assert_array_equal(record.topk_indices[:, 0], [0, 0, 0, 0])
        np.testing.assert_array_equal(record.dropped[:, 0], [False, True, True, True])
        assert np.abs(y[:, 0] - 1.0).max() < 1e-12  # served by expert 0
        np.testing.assert_allclose(y[:, 1:], 0.0)   # dropped tokens emit zero

    def test_drop_count_accounting(self):
        rng = np.random.default_rng(8)
        layer = random_layer(rng, n_experts=4, k=2, capacity_factor=0.6)
        x = rng.standard_normal((4, 40))
        _, record = moe_forward(layer, x)
        cap = expert_capacity(0.6, 40, 2, 4)
        for e in range(4):
            selected = int((record.topk_indices == e).sum())
            dropped = int((record.topk_indices[record.dropped] == e).sum())
            assert dropped == max(0, selected - cap)

    def test_gates_rows_sum_to_one(self):
        rng = np.random.default_rng(9)
        layer = random_layer(rng, n_experts=5, k=3)
        _, record = moe_forward(layer, rng.standard_normal((4, 30)))
        np.testing.assert_allclose(record.gates.sum(axis=1), 1.0, atol=1e-8)
        np.testing.assert_allclose(record.probs.sum(axis=1), 1.0, atol=1e-8)
        np.testing.assert_allclose(record.per_expert_fraction.sum(), 1.0, atol=1e-8)

    def test_expert_permutation_symmetry(self):
        rng = np.random.default_rng(10)
        layer = random_layer(rng, n_experts=4, k=2)
        x = rng.standard_normal((4, 25))
        y, _ = moe_forward(layer, x)
        perm = np.array([2, 0, 3, 1])
        permuted = MoeLayer(
            experts=[layer.experts[p].copy() for p in perm],
            router=layer.router[perm].copy(),
            k=2,
            capacity_factor=layer.capacity_factor,
        )
        y2, _ = moe_forward(permuted, x)
        np.testing.assert_allclose(y, y2, atol=1e-10)

    def test_full_k_equals_dense_ensemble(self):
        rng = np.random.default_rng(11)
        layer = random_layer(rng, n_experts=4, k=4)
        x = rng.standard_normal((4, 15))
        y, _ = moe_forward(layer, x)
        np.testing.assert_allclose(y, dense_ensemble_forward(layer, x), atol=1e-8)


class TestDenseEnsemble:
    def test_single_expert(self):
        rng = np.random.default_rng(12)
        layer = random_layer(rng, n_experts=1, k=1)
        x = rng.standard_normal((4, 8))
        np.testing.assert_allclose(
            dense_ensemble_forward(layer, x),
            ffn_forward(layer.experts[0], x),
            atol=1e-12,
        )

    def test_identical_experts_convexity(self):
        rng = np.random.default_rng(13)
        base = random_ffn(rng)
        layer = MoeLayer(
            experts=[base.copy() for _ in range(3)],
            router=rng.standard_normal((3, 4)),
            k=1,
            capacity_factor=1.0,
        )
        x = rng.standard_normal((4, 12))
        np.testing.assert_allclose(
            dense_ensemble_forward(layer, x), ffn_forward(base, x), atol=1e-10
        )


class TestLoadBalanceLoss:
    def test_uniform_is_one_over_n(self):
        n_e, t, k = 8, 16, 2
        probs = np.full((t, n_e), 1.0 / n_e)
        topk = np.tile(np.arange(k), (t, 1))
        # Build a perfectly balanced selection: rotate pairs across tokens.
        topk = np.stack([(np.arange(t) * k) % n_e, (np.arange(t) * k + 1) % n_e], axis=1)
        from clusterup.moe import RoutingRecord

        counts = np.bincount(topk.ravel(), minlength=n_e)
        record = RoutingRecord(
            probs=probs, topk_indices=topk,
            gates=np.full((t, k), 0.5), dropped=np.zeros((t, k), dtype=bool),
            per_expert_fraction=counts / (t * k),
            per_expert_mean_prob=probs.mean(axis=0),
        )
        assert load_balance_loss(record) == 1.0 / n_e

    def test_concentrated_is_one(self):
        from clusterup.moe import RoutingRecord

        t, n_e = 10, 4
        probs = np.zeros((t, n_e))
        probs[:, 0] = 1.0
        topk = np.zeros((t, 1), dtype=int)
        record = RoutingRecord(
            probs=probs, topk_indices=topk,
            gates=np.ones((t, 1)), dropped=np.zeros((t, 1), dtype=bool),
            per_expert_fraction=np.array([1.0, 0.0, 0.0, 0.0]),
            per_expert_mean_prob=probs.mean(axis=0),
        )
        assert load_balance_loss(record) == 1.0

    def test_hand_computed_mixture(self):
        from clusterup.moe import RoutingRecord

        record = RoutingRecord(
            probs=np.array([[0.6, 0.4]]), topk_indices=np.array([[0]]),
            gates=np.array([[1.0]]), dropped=np.array([[False]]),
            per_expert_fraction=np.array([0.75, 0.25]),
            per_expert_mean_prob=np.array([0.6, 0.4]),
        )
        assert abs(load_balance_loss(record) - 0.55) < 1e-15
