""" Tests for set-prediction matching """
import itertools

import numpy as np
import pytest

from groundgenie.exceptions import MatchingError
from groundgenie.geometry import Box, Extent
from groundgenie.grammar import LabeledBox
from groundgenie.matching import *
from groundgenie.matching import LOSS_WEIGHTS, MATCH_WEIGHTS


def _permutations(n, r):
    if (n, r) not in _PERMS:
        _PERMS[(n, r)] = np.array(list(itertools.permutations(range(n), r)), dtype=int)
    return _PERMS[(n, r)]


_PERMS = {}


def _brute_force(cost):
    """ Minimal cost and lexicographically lowest optimal column tuple """
    m, k = cost.shape
    transposed = m > k
    work = cost.T if transposed else cost
    perms = _permutations(work.shape[1], work.shape[0])
    totals = work[np.arange(work.shape[0]), perms].sum(axis=1)
    best = totals.min()
    first = int(np.flatnonzero(totals <= best + 1e-9)[0])
    return float(best), tuple(int(c) for c in perms[first]), transposed


class TestHungarian:
    def test_square(self):
        cost = np.array([[4.0, 1.0, 3.0], [2.0, 0.0, 5.0], [3.0, 2.0, 2.0]])
        a = hungarian(cost)
        assert a.pairs == ((0, 1), (1, 0), (2, 2))
        assert a.cost == pytest.approx(5.0)
        assert a.mapping == {0: 1, 1: 0, 2: 2}

    def test_wide_and_tall(self):
        cost = np.array([[5.0, 1.0, 9.0, 2.0], [1.0, 8.0, 9.0, 3.0]])
        assert hungarian(cost).pairs == ((0, 1), (1, 0))
        tall = hungarian(cost.T)
        assert tall.pairs == ((0, 1), (1, 0))
        assert tall.rows == [0, 1] and tall.cols == [1, 0]

    def test_empty(self):
        assert hungarian(np.zeros((0, 3))) == ((), 0.0)
        assert len(hungarian(np.zeros((2, 0)))) == 0

    def test_tie_break_lexicographic(self):
        a = hungarian(np.ones((3, 3)))
        assert a.cols == [0, 1, 2]
        assert a.cost == pytest.approx(3.0)

    def test_tie_break_picks_lowest_optimum(self):
        cost = np.array([[1.0, 1.0, 0.0], [0.0, 1.0, 1.0], [1.0, 0.0, 0.0]])
        assert hungarian(cost).cols == [2, 0, 1]

    @pytest.mark.parametrize("cost", [np.array([[np.inf, 1.0]]), np.array([[np.nan]]), np.zeros(3)])
    def test_invalid(self, cost):
        with pytest.raises(MatchingError):
            hungarian(cost)

    def test_agrees_with_brute_force(self):
        rng = np.random.default_rng(2024)
        for _ in range(1000):
            m, k = rng.integers(1, 8, 2)
            # small integer costs force frequent ties
            cost = rng.integers(0, 4, (m, k)).astype(float)
            a = hungarian(cost)
            best, cols, transposed = _brute_force(cost)
            assert a.cost == best
            assert len(a) == min(m, k)
            assert len(set(a.rows)) == len(a) and len(set(a.cols)) == len(a)
            if transposed:
                got = tuple(r for r, c in sorted(a.pairs, key=lambda p: p[1]))
            else:
                got = tuple(a.cols)
            assert got == cols

    def test_continuous_costs_without_tie_break(self):
        rng = np.random.default_rng(11)
        cost = rng.random((7, 7))
        assert hungarian(cost, tie_break=False).cost == pytest.approx(_brute_force(cost)[0])

    def test_row_shift_keeps_assignment(self):
        rng = np.random.default_rng(5)
        for _ in range(200):
            m = int(rng.integers(1, 8))
            k = int(rng.integers(m, 8))
            cost = rng.random((m, k))
            shifted = cost + rng.uniform(-10, 10, (m, 1))
            assert hungarian(shifted).pairs == hungarian(cost).pairs

    def test_transpose_inverts_assignment(self):
        rng = np.random.default_rng(6)
        for _ in range(200):
            m, k = rng.integers(1, 8, 2)
            cost = rng.random((m, k))
            a, t = hungarian(cost), hungarian(cost.T)
            assert t.mapping == {c: r for r, c in a.pairs}
            assert t.cost == pytest.approx(a.cost)


class TestCosts:
    def test_weights(self):
        assert tuple(MATCH_WEIGHTS) == (2.0, 5.0, 2.0)
        assert tuple(LOSS_WEIGHTS) == (1.0, 5.0, 2.0)
        with pytest.raises(MatchingError):
            CostWeights(-1.0, 1.0, 1.0)

    def test_perfect_prediction_costs_nothing(self):
        b = Box(10, 10, 50, 50)
        assert pair_cost(ScoredBox(b, "cat"), LabeledBox("cat", b, 0), frame=Extent(100, 100)) == pytest.approx(0.0)

    def test_cost_terms(self):
        frame = Extent(100, 100)
        pred = ScoredBox(Box(0, 0, 10, 10), scores={"cat": 0.25})
        gt = LabeledBox("cat", Box(10, 0, 20, 10), 0)
        # class 2*(0.75), L1 5*(0.2), GIoU 2*(1 + 0)
        assert pair_cost(pred, gt, frame=frame) == pytest.approx(1.5 + 1.0 + 2.0)
        assert pair_cost(pred, gt, CostWeights(0, 0, 1), frame) == pytest.approx(1.0)

    def test_frame_required(self):
        b = Box(0, 0, 1, 1)
        with pytest.raises(MatchingError):
            pair_cost(ScoredBox(b, "x"), LabeledBox("x", b, 0))

    def test_focal_prefers_confident(self):
        frame, b = Extent(10, 10), Box(0, 0, 5, 5)
        gt = LabeledBox("a", b, 0)
        lo = pair_cost(ScoredBox(b, scores={"a": 0.2}), gt, frame=frame, focal=True)
        hi = pair_cost(ScoredBox(b, scores={"a": 0.9}), gt, frame=frame, focal=True)
        assert hi < lo

    def test_match_predictions(self):
        frame = Extent(100, 100)
        gts = [LabeledBox("cat", Box(0, 0, 20, 20), 0), LabeledBox("dog", Box(50, 50, 90, 90), 1)]
        preds = [ScoredBox(Box(51, 49, 90, 88), "dog"), ScoredBox(Box(70, 0, 80, 5), "cat"),
                 ScoredBox(Box(1, 1, 21, 19), "cat")]
        a = match_predictions(preds, gts, frame)
        assert a.mapping == {0: 1, 2: 0}


class TestGranularity:
    def test_scores_and_classification(self):
        fine, coarse = np.array([1.0, 0.0]), np.array([0.0, 1.0])
        prompts = concat_prompts(fine, coarse)
        assert prompts.shape == (2, 2)
        q = np.array([[2.0, 1.0], [0.0, 3.0], [1.0, 1.0]])
        s = granularity_scores(prompts, q)
        assert s.shape == (2, 3)
        assert list(classify_granularity(s)) == [0, 1, 0]

    def test_mismatch(self):
        with pytest.raises(MatchingError):
            granularity_scores(np.zeros((2, 3)), np.zeros((4, 2)))
        with pytest.raises(MatchingError):
            concat_prompts(np.zeros(3), np.zeros(4))

    def test_scores_match_naive_product(self):
        rng = np.random.default_rng(8)
        p, q = rng.normal(size=(2, 6)), rng.normal(size=(5, 6))
        s = granularity_scores(p, q)
        for i in range(2):
            for j in range(5):
                assert s[i, j] == pytest.approx(sum(p[i, d] * q[j, d] for d in range(6)))

    def test_scores_bilinear(self):
        rng = np.random.default_rng(9)
        p1, p2 = rng.normal(size=(2, 4)), rng.normal(size=(2, 4))
        q1, q2 = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
        a, b = 1.5, -0.25
        np.testing.assert_allclose(granularity_scores(a * p1 + b * p2, q1),
                                   a * granularity_scores(p1, q1) + b * granularity_scores(p2, q1))
        np.testing.assert_allclose(granularity_scores(p1, a * q1 + b * q2),
                                   a * granularity_scores(p1, q1) + b * granularity_scores(p1, q2))
