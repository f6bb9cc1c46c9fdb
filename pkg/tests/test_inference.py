import math

import numpy as np
import pytest

from treecrf import (
    LOG_ZERO,
    ChartMask,
    DegenerateChart,
    DimensionMismatch,
    FullTree,
    PartialTree,
    ScoreChart,
    Span,
    batched_masked_inside,
    build_mask,
    cky_decode,
    classify_nodes,
    extract_entities,
    inside,
    inside_chart,
    log_prob,
    loss_and_score_gradient,
    marginals,
    mask_from_full_tree,
    masked_inside,
    smooth_mask,
    tree_score,
    vanilla_partial_marginalization,
)
from treecrf.oracle import catalan, random_chart, random_partial_tree

from conftest import zero_chart

LOG8 = math.log(8.0)
LOG64 = math.log(64.0)


def annotation_mask(n, entities, schema, epsilon=0.0):
    tree = PartialTree(n=n, entities=entities)
    sym = classify_nodes(tree)
    mask = build_mask(sym, schema)
    if epsilon:
        mask = smooth_mask(mask, sym, epsilon)
    return sym, mask


class TestInside:
    def test_single_leaf(self, schema3):
        s = np.zeros((1, 1, 3))
        s[0, 0] = [0.3, -1.2, 0.5]
        chart = ScoreChart(s=s, schema=schema3)
        expected = math.log(sum(math.exp(v) for v in (0.3, -1.2, 0.5)))
        assert inside(chart) == pytest.approx(expected, abs=1e-12)

    def test_two_tokens_zero_scores(self, schema2):
        assert inside(zero_chart(2, schema2)) == pytest.approx(LOG8, abs=1e-12)

    def test_three_tokens_zero_scores(self, schema2):
        assert inside(zero_chart(3, schema2)) == pytest.approx(LOG64, abs=1e-12)

    def test_degenerate(self, schema2):
        chart = ScoreChart(s=np.zeros((0, 0, 2)), schema=schema2)
        with pytest.raises(DegenerateChart):
            inside(chart)

    def test_zero_chart_closed_form(self, schema2):
        # Catalan(n-1) bracketings, |L|^(2n-1) labelings, every score zero.
        for n in range(1, 7):
            expected = math.log(catalan(n - 1)) + (2 * n - 1) * math.log(2)
            assert inside(zero_chart(n, schema2)) == pytest.approx(expected, abs=1e-9)


class TestMaskedInside:
    def test_forced_single_tree(self, schema2):
        _, mask = annotation_mask(2, (Span(0, 1, 0),), schema2)
        assert masked_inside(zero_chart(2, schema2), mask) == pytest.approx(
            0.0, abs=1e-6
        )

    def test_all_ones_equals_inside_bitwise(self, schema3):
        rng = np.random.default_rng(0)
        chart = random_chart(5, schema3, rng)
        ones = ChartMask(n=5, m=np.ones((5, 5, 3)))
        assert masked_inside(chart, ones) == inside(chart)

    def test_full_tree_mask_recovers_evaluation(self, schema3):
        rng = np.random.default_rng(1)
        for n in (1, 2, 4, 6):
            chart = random_chart(n, schema3, rng)
            probe = cky_decode(random_chart(n, schema3, rng))
            mask = mask_from_full_tree(probe, schema3)
            assert masked_inside(chart, mask) == pytest.approx(
                tree_score(chart, probe), abs=1e-6
            )

    def test_dimension_mismatch(self, schema2):
        with pytest.raises(DimensionMismatch):
            masked_inside(zero_chart(2, schema2), ChartMask(n=3, m=np.zeros((3, 3, 2))))

    def test_upper_bound_for_arbitrary_masks(self, schema3):
        rng = np.random.default_rng(2)
        for _ in range(25):
            n = int(rng.integers(1, 7))
            chart = random_chart(n, schema3, rng)
            mask = ChartMask(n=n, m=rng.uniform(0, 1, size=(n, n, 3)))
            assert masked_inside(chart, mask) <= inside(chart) + 1e-6

    def test_monotone_under_mask_tightening(self, schema3):
        rng = np.random.default_rng(3)
        for _ in range(15):
            n = int(rng.integers(2, 7))
            chart = random_chart(n, schema3, rng)
            loose = rng.uniform(0, 1, size=(n, n, 3))
            tight = loose * rng.uniform(0, 1, size=loose.shape)
            beta_loose = inside_chart(chart, ChartMask(n=n, m=loose)).beta
            beta_tight = inside_chart(chart, ChartMask(n=n, m=tight)).beta
            iu, ju = np.triu_indices(n)
            assert (beta_tight[iu, ju] <= beta_loose[iu, ju] + 1e-6).all()


class TestVanillaPartialMarginalization:
    def test_forced_single_tree(self, schema2):
        sym, _ = annotation_mask(2, (Span(0, 1, 0),), schema2)
        assert vanilla_partial_marginalization(
            zero_chart(2, schema2), sym
        ) == pytest.approx(0.0, abs=1e-12)

    def test_three_tokens_forced_structure(self, schema2):
        # the single compatible structure is ((0,1),2) with all labels forced
        sym, _ = annotation_mask(3, (Span(0, 1, 0),), schema2)
        assert vanilla_partial_marginalization(
            zero_chart(3, schema2), sym
        ) == pytest.approx(0.0, abs=1e-12)

    def test_empty_annotation_latent_only_sum(self, schema3):
        # zero scores: value counts trees labeled entirely with latent labels
        for n in range(1, 6):
            sym, _ = annotation_mask(n, (), schema3)
            expected = math.log(catalan(n - 1) * 1 ** (2 * n - 1))
            assert vanilla_partial_marginalization(
                zero_chart(n, schema3), sym
            ) == pytest.approx(expected, abs=1e-9)

    def test_agrees_with_masked_inside(self, schema3):
        rng = np.random.default_rng(4)
        for _ in range(30):
            n = int(rng.integers(1, 8))
            chart = random_chart(n, schema3, rng)
            tree = random_partial_tree(n, schema3, rng, multilabel_prob=0.2)
            sym = classify_nodes(tree)
            mask = build_mask(sym, schema3)
            assert vanilla_partial_marginalization(chart, sym) == pytest.approx(
                masked_inside(chart, mask), abs=1e-6
            )


class TestLogProb:
    def test_two_tokens(self, schema2):
        _, mask = annotation_mask(2, (Span(0, 1, 0),), schema2)
        assert log_prob(zero_chart(2, schema2), mask) == pytest.approx(
            -LOG8, abs=1e-6
        )

    def test_three_tokens(self, schema2):
        _, mask = annotation_mask(3, (Span(0, 1, 0),), schema2)
        assert log_prob(zero_chart(3, schema2), mask) == pytest.approx(
            -LOG64, abs=1e-6
        )

    def test_all_ones_mask_is_zero(self, schema3):
        rng = np.random.default_rng(5)
        chart = random_chart(4, schema3, rng)
        ones = ChartMask(n=4, m=np.ones((4, 4, 3)))
        assert log_prob(chart, ones) == 0.0

    def test_nonpositive_for_unsmoothed_masks(self, schema3):
        rng = np.random.default_rng(6)
        for _ in range(20):
            n = int(rng.integers(1, 7))
            chart = random_chart(n, schema3, rng)
            tree = random_partial_tree(n, schema3, rng)
            _, mask = annotation_mask(n, tree.entities, schema3)
            assert log_prob(chart, mask) <= 1e-6


class TestMarginals:
    def test_two_tokens_uniform(self, schema2):
        mu = marginals(zero_chart(2, schema2)).mu
        for i, j in ((0, 0), (1, 1), (0, 1)):
            np.testing.assert_allclose(mu[i, j], [0.5, 0.5], atol=1e-12)

    def test_single_token_softmax(self, schema3):
        s = np.zeros((1, 1, 3))
        s[0, 0] = [1.0, 2.0, -0.5]
        chart = ScoreChart(s=s, schema=schema3)
        mu = marginals(chart).mu
        e = np.exp(s[0, 0])
        np.testing.assert_allclose(mu[0, 0], e / e.sum(), atol=1e-12)

    def test_masked_single_compatible_tree(self, schema2):
        _, mask = annotation_mask(2, (Span(0, 1, 0),), schema2)
        mu = marginals(zero_chart(2, schema2), mask).mu
        np.testing.assert_allclose(mu[0, 1], [1.0, 0.0], atol=1e-9)
        np.testing.assert_allclose(mu[0, 0], [0.0, 1.0], atol=1e-9)
        np.testing.assert_allclose(mu[1, 1], [0.0, 1.0], atol=1e-9)

    def test_identities_random(self, schema3):
        rng = np.random.default_rng(7)
        for _ in range(20):
            n = int(rng.integers(1, 8))
            chart = random_chart(n, schema3, rng)
            mu = marginals(chart).mu
            assert mu.sum() == pytest.approx(2 * n - 1, abs=1e-6)
            for i in range(n):
                assert mu[i, i].sum() == pytest.approx(1.0, abs=1e-9)
            assert mu[0, n - 1].sum() == pytest.approx(1.0, abs=1e-9)
            assert (mu >= 0).all() and (mu <= 1).all()


class TestLossAndScoreGradient:
    def test_gradient_sums_to_zero(self, schema3):
        rng = np.random.default_rng(8)
        for _ in range(10):
            n = int(rng.integers(1, 7))
            chart = random_chart(n, schema3, rng)
            tree = random_partial_tree(n, schema3, rng)
            _, mask = annotation_mask(n, tree.entities, schema3)
            loss, grad = loss_and_score_gradient(chart, mask)
            assert loss >= -1e-6
            assert abs(grad.sum()) < 1e-6

    def test_rejected_cells_keep_unmasked_posterior(self, schema2):
        sym, mask = annotation_mask(3, (Span(0, 1, 0),), schema2)
        chart = zero_chart(3, schema2)
        _, grad = loss_and_score_gradient(chart, mask)
        mu_unmasked = marginals(chart).mu
        np.testing.assert_allclose(grad[1, 2], mu_unmasked[1, 2], atol=1e-9)

    def test_all_ones_mask_gives_zero_loss_and_gradient(self, schema3):
        rng = np.random.default_rng(9)
        chart = random_chart(4, schema3, rng)
        ones = ChartMask(n=4, m=np.ones((4, 4, 3)))
        loss, grad = loss_and_score_gradient(chart, ones)
        assert loss == 0.0
        np.testing.assert_allclose(grad, 0.0, atol=1e-12)

    def test_matches_finite_differences(self, schema3):
        rng = np.random.default_rng(10)
        for _ in range(5):
            n = int(rng.integers(2, 6))
            chart = random_chart(n, schema3, rng)
            tree = random_partial_tree(n, schema3, rng)
            _, mask = annotation_mask(n, tree.entities, schema3, epsilon=0.01)
            _, grad = loss_and_score_gradient(chart, mask)
            h = 1e-5
            for i in range(n):
                for j in range(i, n):
                    for k in range(3):
                        sp = chart.s.copy()
                        sp[i, j, k] += h
                        up = loss_and_score_gradient(
                            ScoreChart(s=sp, schema=schema3), mask
                        )[0]
                        sp = chart.s.copy()
                        sp[i, j, k] -= h
                        dn = loss_and_score_gradient(
                            ScoreChart(s=sp, schema=schema3), mask
                        )[0]
                        fd = (up - dn) / (2 * h)
                        a = grad[i, j, k]
                        assert abs(fd - a) <= 1e-4 * max(abs(fd), abs(a), 1e-3)


class TestSmoothingMonotonicity:
    def test_strictly_increasing_in_epsilon(self, schema3):
        rng = np.random.default_rng(11)
        found = 0
        for _ in range(40):
            n = int(rng.integers(3, 7))
            chart = random_chart(n, schema3, rng)
            tree = random_partial_tree(n, schema3, rng)
            sym = classify_nodes(tree)
            if not (sym.node_kind[np.triu_indices(n)] == 2).any():
                continue
            found += 1
            base = build_mask(sym, schema3)
            values = [
                masked_inside(chart, smooth_mask(base, sym, eps))
                for eps in (0.0, 0.01, 0.02, 0.1)
            ]
            for lo, hi in zip(values, values[1:]):
                assert hi - lo > 1e-9
        assert found >= 10

    def test_epsilon_zero_recovers_unsmoothed(self, schema3):
        rng = np.random.default_rng(12)
        chart = random_chart(5, schema3, rng)
        tree = random_partial_tree(5, schema3, rng)
        sym = classify_nodes(tree)
        base = build_mask(sym, schema3)
        assert masked_inside(chart, smooth_mask(base, sym, 0.0)) == masked_inside(
            chart, base
        )


class TestCkyDecode:
    def test_two_token_example(self, schema2):
        s = np.zeros((2, 2, 2))
        s[0, 1] = [2.0, 0.0]
        s[0, 0] = [1.0, 0.0]
        s[1, 1] = [0.5, 0.0]
        chart = ScoreChart(s=s, schema=schema2)
        tree = cky_decode(chart)
        assert tree.nodes == ((0, 1, 0), (0, 0, 0), (1, 1, 0))
        assert tree_score(chart, tree) == pytest.approx(3.5, abs=1e-12)

    def test_single_token(self, schema3):
        s = np.zeros((1, 1, 3))
        s[0, 0] = [0.1, 0.9, 0.3]
        tree = cky_decode(ScoreChart(s=s, schema=schema3))
        assert tree.nodes == ((0, 0, 1),)

    def test_tie_break_left_splits_label_zero(self, schema3):
        tree = cky_decode(zero_chart(4, schema3))
        assert all(k == 0 for _, _, k in tree.nodes)
        # left-most splits: fully left-branching tree
        assert tree.splits == {(0, 3): 0, (1, 3): 1, (2, 3): 2}

    def test_degenerate(self, schema2):
        with pytest.raises(DegenerateChart):
            cky_decode(ScoreChart(s=np.zeros((0, 0, 2)), schema=schema2))

    def test_root_value_is_tree_score_bitwise(self, schema3):
        rng = np.random.default_rng(13)
        for _ in range(10):
            n = int(rng.integers(1, 8))
            chart = random_chart(n, schema3, rng)
            tree = cky_decode(chart)
            beta = inside_chart(chart)  # sanity: inside differs from max
            assert tree_score(chart, tree) <= beta.beta[0, n - 1] + 1e-9


class TestExtractEntities:
    def test_all_latent_tree_empty(self, schema3):
        nodes = ((0, 1, 2), (0, 0, 2), (1, 1, 2))
        assert extract_entities(FullTree(n=2, nodes=nodes), schema3) == []

    def test_decode_example(self, schema2):
        s = np.zeros((2, 2, 2))
        s[0, 1] = [2.0, 0.0]
        s[0, 0] = [1.0, 0.0]
        s[1, 1] = [0.5, 0.0]
        tree = cky_decode(ScoreChart(s=s, schema=schema2))
        assert extract_entities(tree, schema2) == [
            Span(0, 1, 0),
            Span(0, 0, 0),
            Span(1, 1, 0),
        ]

    def test_mixed_tree(self, schema3):
        nodes = ((0, 1, 1), (0, 0, 2), (1, 1, 0))
        spans = extract_entities(FullTree(n=2, nodes=nodes), schema3)
        assert spans == [Span(0, 1, 1), Span(1, 1, 0)]


class TestFullTree:
    def test_node_count_enforced(self):
        with pytest.raises(ValueError):
            FullTree(n=2, nodes=((0, 1, 0), (0, 0, 0)))

    def test_partition_enforced(self):
        # (0,1) and (1,2) cross; the root's right child (2,2) is missing
        with pytest.raises(ValueError):
            FullTree(n=3, nodes=((0, 2, 0), (0, 1, 0), (1, 2, 0), (0, 0, 0), (1, 1, 0)))
        # well-formed version passes
        FullTree(n=3, nodes=((0, 2, 0), (0, 1, 0), (0, 0, 0), (1, 1, 0), (2, 2, 0)))

    def test_document_order_canonicalization(self):
        scrambled = ((1, 1, 0), (0, 1, 0), (0, 0, 0))
        assert FullTree(n=2, nodes=scrambled).nodes == (
            (0, 1, 0),
            (0, 0, 0),
            (1, 1, 0),
        )


class TestNaNPoisoning:
    """Lower-triangular cells are never read by any chart algorithm."""

    def _poisoned_pair(self, n, schema, rng):
        clean = random_chart(n, schema, rng)
        s = clean.s.copy()
        s[np.tril_indices(n, k=-1)] = np.nan
        return clean, ScoreChart(s=s, schema=schema)

    def test_all_operations(self, schema3):
        rng = np.random.default_rng(14)
        for n in (2, 4, 6):
            clean, poisoned = self._poisoned_pair(n, schema3, rng)
            tree = random_partial_tree(n, schema3, rng)
            sym = classify_nodes(tree)
            mask = build_mask(sym, schema3)
            assert inside(poisoned) == inside(clean)
            assert masked_inside(poisoned, mask) == masked_inside(clean, mask)
            assert vanilla_partial_marginalization(
                poisoned, sym
            ) == vanilla_partial_marginalization(clean, sym)
            assert cky_decode(poisoned).nodes == cky_decode(clean).nodes
            iu, ju = np.triu_indices(n)
            np.testing.assert_array_equal(
                marginals(poisoned, mask).mu[iu, ju], marginals(clean, mask).mu[iu, ju]
            )
            loss_p, grad_p = loss_and_score_gradient(poisoned, mask)
            loss_c, grad_c = loss_and_score_gradient(clean, mask)
            assert loss_p == loss_c
            np.testing.assert_array_equal(grad_p[iu, ju], grad_c[iu, ju])
            assert np.isfinite(grad_p[iu, ju]).all()


class TestBatchedMaskedInside:
    def test_matches_per_sentence_bitwise(self, schema3):
        rng = np.random.default_rng(15)
        charts, masks = [], []
        for _ in range(9):
            n = int(rng.integers(1, 9))
            charts.append(random_chart(n, schema3, rng))
            tree = random_partial_tree(n, schema3, rng)
            sym = classify_nodes(tree)
            masks.append(build_mask(sym, schema3))
        got = batched_masked_inside(charts, masks)
        expected = np.array(
            [masked_inside(c, m) for c, m in zip(charts, masks)]
        )
        np.testing.assert_allclose(got, expected, atol=1e-10)

    def test_thread_count_does_not_change_values(self, schema3):
        rng = np.random.default_rng(16)
        charts, masks = [], []
        for _ in range(8):
            n = int(rng.integers(2, 8))
            charts.append(random_chart(n, schema3, rng))
            tree = random_partial_tree(n, schema3, rng)
            masks.append(build_mask(classify_nodes(tree), schema3))
        one = batched_masked_inside(charts, masks, threads=1)
        four = batched_masked_inside(charts, masks, threads=4)
        np.testing.assert_array_equal(one, four)

    def test_empty_batch(self):
        assert batched_masked_inside([], []).shape == (0,)

    def test_log_zero_constant(self):
        assert LOG_ZERO == -1.0e6
