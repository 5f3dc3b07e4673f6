"""Importance criteria, score robustness, masks and physical channel removal."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from netgen import random_conv_net
from oracles import exact_rank
from qpsnn.errors import DegenerateInputError, InvalidArgumentError, UnsupportedLayerError
from qpsnn.network import forward
from qpsnn.prune import (
    ImportanceReport,
    PruneMask,
    apply_mask,
    avg_cos_similarity,
    build_mask,
    cosine_similarity,
    pruned_count,
    reports_to_json,
    reports_to_text,
    score_layers,
    score_sca,
    score_svs,
    zero_mask,
)


def report(scores, batches=None):
    scores = np.asarray(scores, dtype=float)
    return ImportanceReport(0, "svs", scores, 1, 1, batches if batches is not None else [scores])


def random_mask(rng, net):
    keep = {}
    for i in net.prunable_indices():
        n = net.layers[i].out_channels
        k = int(rng.integers(1, n + 1))
        keep[i] = np.sort(rng.choice(n, size=k, replace=False))
    return PruneMask(keep)


class TestScoreSca:
    def test_zero_potentials(self):
        np.testing.assert_array_equal(score_sca(np.zeros((2, 3, 4, 5, 5))).scores, np.zeros(4))

    def test_constant_map(self):
        u = np.zeros((3, 2, 2, 4, 6))
        u[:, :, 1] = -0.7
        np.testing.assert_allclose(score_sca(u).scores, [0.0, 0.7 * 4 * 6])

    def test_sign_symmetry(self):
        u = np.random.default_rng(0).normal(size=(2, 3, 4, 5, 5))
        np.testing.assert_array_equal(score_sca(u).scores, score_sca(-u).scores)

    def test_dense_history(self):
        u = np.ones((2, 3, 5))
        np.testing.assert_array_equal(score_sca(u).scores, np.ones(5))

    def test_empty_batch(self):
        with pytest.raises(InvalidArgumentError):
            score_sca(np.zeros((0, 2, 3, 4, 4)))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000), st.one_of(st.just(0.0), st.floats(1e-6, 100.0)))  # subnormal k underflows
    def test_homogeneous_and_mask_invariant(self, seed, k):
        u = np.random.default_rng(seed).normal(size=(2, 2, 6, 3, 3))
        base = score_sca(u)
        scaled = score_sca(k * u)
        np.testing.assert_allclose(scaled.scores, k * base.scores, rtol=1e-12)
        if k > 0:
            a = build_mask({0: base}, {0: 0.5}, protected=-1)
            b = build_mask({0: scaled}, {0: 0.5}, protected=-1)
            np.testing.assert_array_equal(a.keep[0], b.keep[0])


class TestScoreSvs:
    def test_silent_channel(self):
        assert score_svs(np.zeros((2, 3, 1, 4, 4))).scores[0] == 0.0

    def test_identity_average(self):
        s = np.broadcast_to(np.eye(4), (3, 2, 1, 4, 4)).copy()
        assert score_svs(s).scores[0] == 4.0

    def test_equals_exact_integer_rank(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            b, t = int(rng.integers(1, 4)), int(rng.integers(1, 5))
            s = (rng.random((b, t, 2, 8, 8)) < 0.4).astype(float)
            counts = s.sum(axis=1)  # T * S_avg, integer valued
            expected = [np.mean([exact_rank(counts[i, c]) for i in range(b)]) for c in range(2)]
            np.testing.assert_array_equal(score_svs(s).scores, expected)

    def test_dense_layer_unsupported(self):
        with pytest.raises(UnsupportedLayerError):
            score_svs(np.zeros((2, 3, 4)))

    def test_rejects_non_binary(self):
        with pytest.raises(InvalidArgumentError):
            score_svs(np.full((1, 1, 1, 2, 2), 0.5))

    def test_scores_bounded(self):
        s = (np.random.default_rng(1).random((4, 3, 5, 6, 9)) < 0.5).astype(float)
        scores = score_svs(s).scores
        assert np.all(scores >= 0) and np.all(scores <= 6)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000), st.integers(1, 8), st.integers(1, 8))
    def test_transpose_invariant(self, seed, h, w):
        s = (np.random.default_rng(seed).random((2, 3, 2, h, w)) < 0.5).astype(float)
        np.testing.assert_array_equal(score_svs(s).scores, score_svs(s.swapaxes(-1, -2)).scores)


class TestAvgCos:
    def test_identical(self):
        v = np.array([1.0, 2.0, 3.0])
        assert avg_cos_similarity(report(v, [v, v, v])) == pytest.approx(1.0)

    def test_orthogonal(self):
        assert avg_cos_similarity(report([1, 0], [np.array([1.0, 0]), np.array([0.0, 1])])) == 0.0

    def test_zero_vector(self):
        with pytest.raises(DegenerateInputError):
            cosine_similarity([0, 0], [1, 2])

    def test_needs_two_batches(self):
        with pytest.raises(InvalidArgumentError):
            avg_cos_similarity(report([1, 2]))

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(0.1, 10), min_size=2, max_size=5), st.integers(2, 5), st.integers(0, 1000))
    def test_range_and_positive_multiples(self, mults, n, seed):
        rng = np.random.default_rng(seed)
        v = rng.uniform(0.1, 1.0, size=4)
        assert avg_cos_similarity(report(v, [m * v for m in mults])) == pytest.approx(1.0, abs=1e-12)
        vecs = [rng.normal(size=4) for _ in range(n)]
        assert -1.0 <= avg_cos_similarity(report(vecs[0], vecs)) <= 1.0


class TestBuildMask:
    def test_top_half(self):
        mask = build_mask({0: report([3, 1, 2, 4])}, {0: 0.5}, protected=-1)
        np.testing.assert_array_equal(mask.keep[0], [0, 3])

    def test_zero_ratio_keeps_all(self):
        mask = build_mask({0: report([3, 1, 2, 4])}, {0: 0.0}, protected=-1)
        np.testing.assert_array_equal(mask.keep[0], [0, 1, 2, 3])

    def test_ties_keep_lowest_indices(self):
        mask = build_mask({0: report(np.ones(6))}, {0: 0.5}, protected=-1)
        np.testing.assert_array_equal(mask.keep[0], [0, 1, 2])

    def test_last_layer_protected(self):
        reports = {0: report([1, 2, 3, 4]), 3: report([1, 2, 3, 4])}
        mask = build_mask(reports, {0: 0.5, 3: 0.5})
        assert len(mask.keep[0]) == 2 and len(mask.keep[3]) == 4

    def test_rounding_half_away(self):
        assert pruned_count(0.5, 5) == 3  # 2.5 -> 3
        assert pruned_count(0.25, 6) == 2  # 1.5 -> 2
        assert pruned_count(0.99, 4) == 3  # at least one channel survives

    @pytest.mark.parametrize("r", [1.0, 1.5, -0.1])
    def test_invalid_ratio(self, r):
        with pytest.raises(InvalidArgumentError):
            build_mask({0: report([1, 2])}, {0: r}, protected=-1)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(0, 10), min_size=1, max_size=20), st.floats(0, 0.95))
    def test_keep_count(self, scores, r):
        mask = build_mask({0: report(scores)}, {0: r}, protected=-1)
        n = len(scores)
        assert len(mask.keep[0]) == n - pruned_count(r, n)
        kept = set(mask.keep[0].tolist())
        dropped = [i for i in range(n) if i not in kept]
        if dropped:
            assert min(scores[i] for i in kept) >= max(scores[i] for i in dropped)

    def test_mask_dict_roundtrip(self):
        mask = build_mask({0: report([3, 1, 2, 4])}, {0: 0.5}, protected=-1)
        again = PruneMask.from_dict(mask.to_dict())
        np.testing.assert_array_equal(again.keep[0], mask.keep[0])
        assert again.ratios == mask.ratios


class TestApplyMask:
    def test_matches_zero_masked_reference(self):
        rng = np.random.default_rng(0)
        for _ in range(25):
            net = random_conv_net(rng)
            mask = random_mask(rng, net)
            ref = zero_mask(net, mask)
            pruned = apply_mask(net.clone(), mask)
            x = rng.uniform(0, 1.5, size=(3,) + net.input_shape)
            a, b = forward(pruned, x, 3), forward(ref, x, 3)
            np.testing.assert_allclose(a.readout, b.readout, atol=1e-12, rtol=0)

    def test_identity_mask_is_bit_identical(self):
        rng = np.random.default_rng(1)
        net = random_conv_net(rng)
        mask = PruneMask({i: np.arange(net.layers[i].out_channels) for i in net.prunable_indices()})
        x = rng.uniform(0, 1.5, size=(2,) + net.input_shape)
        before = forward(net, x, 3).readout
        np.testing.assert_array_equal(forward(apply_mask(net, mask), x, 3).readout, before)

    def test_removing_channel_with_zero_outgoing_weights(self):
        rng = np.random.default_rng(2)
        net = random_conv_net(rng)
        first = net.prunable_indices()[0]
        nxt = next(j for j in range(first + 1, len(net.layers)) if net.layers[j].weighted)
        net.layers[nxt].weight[:, 0] = 0.0
        net.touch()
        x = rng.uniform(0, 1.5, size=(2,) + net.input_shape)
        before = forward(net, x, 2).readout
        keep = np.arange(1, net.layers[first].out_channels)
        after = forward(apply_mask(net, PruneMask({first: keep})), x, 2).readout
        np.testing.assert_array_equal(after, before)

    def test_records_original_channel_ids(self):
        rng = np.random.default_rng(3)
        net = random_conv_net(rng)
        first = net.prunable_indices()[0]
        n = net.layers[first].out_channels
        apply_mask(net, PruneMask({first: np.array([n - 1, 0])}))
        apply_mask(net, PruneMask({first: np.array([1])}))
        np.testing.assert_array_equal(net.layers[first].kept_channels, [n - 1])

    @pytest.mark.parametrize("keep", [[], [99], [0, 0]])
    def test_rejects_bad_mask(self, keep):
        net = random_conv_net(np.random.default_rng(4))
        with pytest.raises(InvalidArgumentError):
            apply_mask(net, PruneMask({net.prunable_indices()[0]: np.array(keep, dtype=int)}))

    def test_rejects_non_conv_layer(self):
        net = random_conv_net(np.random.default_rng(4))
        with pytest.raises(InvalidArgumentError):
            apply_mask(net, PruneMask({1: np.array([0])}))


class TestScoreLayers:
    def test_disjoint_batches(self):
        rng = np.random.default_rng(5)
        net = random_conv_net(rng)
        x = rng.uniform(0, 1.5, size=(12,) + net.input_shape)
        reports = score_layers(net, x, 2, "sca", batch_size=4)
        for idx, rep in reports.items():
            assert len(rep.batch_scores) == 3
            single = score_layers(net, x[4:8], 2, "sca", layers=[idx])[idx]
            np.testing.assert_array_equal(rep.batch_scores[1], single.scores)
            assert rep.n_channels == net.layers[idx].out_channels

    def test_svs_rejects_dense(self):
        net = random_conv_net(np.random.default_rng(6))
        dense = net.weighted_indices()[-1]
        with pytest.raises(UnsupportedLayerError):
            score_layers(net, np.zeros((2,) + net.input_shape), 2, "svs", layers=[dense])

    def test_unknown_criterion(self):
        net = random_conv_net(np.random.default_rng(6))
        with pytest.raises(InvalidArgumentError):
            score_layers(net, np.zeros((2,) + net.input_shape), 2, "l2")

    def test_text_and_json_reports(self):
        rng = np.random.default_rng(7)
        net = random_conv_net(rng)
        reports = score_layers(net, rng.uniform(0, 1.5, size=(4,) + net.input_shape), 2, "svs")
        lines = reports_to_text(reports).splitlines()
        assert lines[0].startswith("#")
        assert len(lines) - 1 == sum(r.n_channels for r in reports.values())
        layer, channel, score, criterion = lines[1].split("\t")
        assert criterion == "svs" and channel == "0"
        assert "batch_scores" in reports_to_json(reports)
