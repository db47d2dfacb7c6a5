import math
import time

import numpy as np
import pytest

from vgram.chart import (
    DmvScores,
    arc_posteriors,
    enumerate_projective_trees,
    inside,
    inside_adjoint,
    random_scores,
    score_tree,
    viterbi,
)
from vgram.core import validate_tree

TREE_COUNTS = {1: 1, 2: 2, 3: 7, 4: 30}


def zero_scores(n):
    return DmvScores(
        attach=np.zeros((n + 1, n + 1)),
        stop=np.zeros((n + 1, 2, 2)),
        cont=np.zeros((n + 1, 2, 2)),
        root=np.zeros(n + 1),
    )


def brute_logz(scores, n):
    return float(np.logaddexp.reduce(
        [score_tree(scores, t) for t in enumerate_projective_trees(n)]))


def brute_posteriors(scores, n):
    trees = enumerate_projective_trees(n)
    logs = np.array([score_tree(scores, t) for t in trees])
    w = np.exp(logs - np.logaddexp.reduce(logs))
    post = np.zeros((n + 1, n + 1))
    for weight, heads in zip(w, trees):
        for d, h in enumerate(heads, start=1):
            post[h][d] += weight
    return post


class TestEnumerator:
    @pytest.mark.parametrize("n,count", sorted(TREE_COUNTS.items()))
    def test_counts(self, n, count):
        trees = enumerate_projective_trees(n)
        assert len(trees) == count
        assert len({tuple(t) for t in trees}) == count

    @pytest.mark.parametrize("n", [1, 2, 3, 4, 5, 6])
    def test_matches_validate_tree_filter(self, n):
        # validate_tree accepts exactly the enumerated trees: cross-check
        # against exhaustive filtering of all (n+1)^n head arrays
        import itertools
        valid = {tuple(h) for h in itertools.product(range(n + 1), repeat=n)
                 if validate_tree(list(h)) is None}
        assert {tuple(t) for t in enumerate_projective_trees(n)} == valid

    def test_cap(self):
        with pytest.raises(ValueError):
            enumerate_projective_trees(9)


class TestInside:
    def test_single_token_zero_scores(self):
        logz, _ = inside(zero_scores(1))
        assert logz == pytest.approx(0.0, abs=1e-12)

    def test_n3_counts_trees(self):
        logz, _ = inside(zero_scores(3))
        assert logz == pytest.approx(math.log(7), abs=1e-12)

    @pytest.mark.parametrize("n", [1, 2, 3, 4])
    def test_zero_scores_count_trees(self, n):
        logz, _ = inside(zero_scores(n))
        assert logz == pytest.approx(math.log(TREE_COUNTS[n]), abs=1e-12)

    def test_weighted_two_token_example(self):
        s = zero_scores(2)
        s.attach[1][2] = math.log(2.0)
        logz, _ = inside(s)
        assert logz == pytest.approx(math.log(3.0), abs=1e-12)

    @pytest.mark.parametrize("n", [1, 2, 3, 4, 5, 6])
    def test_oracle_equivalence(self, n):
        rng = np.random.default_rng(100 + n)
        for _ in range(25):
            s = random_scores(n, rng)
            logz, _ = inside(s)
            assert logz == pytest.approx(brute_logz(s, n), abs=1e-9)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            inside(zero_scores(3), n=4)

    def test_per_dependent_shift_moves_partition(self):
        rng = np.random.default_rng(7)
        s = random_scores(4, rng)
        logz, _ = inside(s)
        kappa = 0.37
        shifted = DmvScores(attach=s.attach.copy(), stop=s.stop, cont=s.cont,
                            root=s.root.copy())
        shifted.attach[:, 2] += kappa
        shifted.root[2] += kappa
        logz2, _ = inside(shifted)
        assert logz2 == pytest.approx(logz + kappa, abs=1e-9)
        assert viterbi(shifted)[0] == viterbi(s)[0]


class TestViterbi:
    def test_single_token(self):
        s = zero_scores(1)
        s.root[1] = -0.5
        heads, score = viterbi(s)
        assert heads == [0]
        assert score == pytest.approx(-0.5)

    def test_weighted_two_token_example(self):
        s = zero_scores(2)
        s.attach[1][2] = math.log(2.0)
        heads, score = viterbi(s)
        assert heads == [0, 1]
        assert score == pytest.approx(math.log(2.0), abs=1e-12)

    def test_all_zero_ties_deterministic(self):
        heads1, score1 = viterbi(zero_scores(3))
        heads2, _ = viterbi(zero_scores(3))
        assert heads1 == heads2
        assert validate_tree(heads1) is None
        assert score1 == pytest.approx(0.0, abs=1e-12)

    @pytest.mark.parametrize("n", [1, 2, 3, 4, 5, 6])
    def test_oracle_equivalence(self, n):
        rng = np.random.default_rng(200 + n)
        for _ in range(25):
            s = random_scores(n, rng)
            heads, score = viterbi(s)
            trees = enumerate_projective_trees(n)
            best = max(trees, key=lambda t: score_tree(s, t))
            assert score == pytest.approx(score_tree(s, best), abs=1e-9)
            assert heads == best

    def test_score_matches_score_tree(self):
        rng = np.random.default_rng(3)
        s = random_scores(5, rng)
        heads, score = viterbi(s)
        assert score == pytest.approx(score_tree(s, heads), abs=1e-9)


class TestPosteriors:
    def test_symmetric_two_tokens(self):
        post = arc_posteriors(zero_scores(2))
        assert post[0][1] == pytest.approx(0.5, abs=1e-12)
        assert post[0][2] == pytest.approx(0.5, abs=1e-12)
        assert post[1][2] == pytest.approx(0.5, abs=1e-12)
        assert post[2][1] == pytest.approx(0.5, abs=1e-12)

    def test_weighted_two_token_example(self):
        s = zero_scores(2)
        s.attach[1][2] = math.log(2.0)
        post = arc_posteriors(s)
        assert post[1][2] == pytest.approx(2 / 3, abs=1e-12)
        assert post[2][1] == pytest.approx(1 / 3, abs=1e-12)

    @pytest.mark.parametrize("n", [1, 2, 3, 4, 5, 6])
    def test_oracle_equivalence(self, n):
        rng = np.random.default_rng(300 + n)
        for _ in range(10):
            s = random_scores(n, rng)
            assert np.allclose(arc_posteriors(s), brute_posteriors(s, n), atol=1e-9)

    @pytest.mark.parametrize("n", [2, 4, 6])
    def test_columns_sum_to_one(self, n):
        rng = np.random.default_rng(400 + n)
        for _ in range(20):
            post = arc_posteriors(random_scores(n, rng))
            sums = post[:, 1:].sum(axis=0)
            assert np.allclose(sums, 1.0, atol=1e-9)

    def test_stop_cont_adjoints_are_expected_counts(self, ):
        n = 4
        rng = np.random.default_rng(11)
        s = random_scores(n, rng)
        _, chart = inside(s)
        grads = inside_adjoint(s, chart)
        trees = enumerate_projective_trees(n)
        logs = np.array([score_tree(s, t) for t in trees])
        w = np.exp(logs - np.logaddexp.reduce(logs))
        exp_stop = np.zeros((n + 1, 2, 2))
        exp_cont = np.zeros((n + 1, 2, 2))
        for weight, heads in zip(w, trees):
            ndeps = [[0, 0] for _ in range(n + 1)]
            for d in range(1, n + 1):
                h = heads[d - 1]
                if h:
                    ndeps[h][1 if d > h else 0] += 1
            for h in range(1, n + 1):
                for direction in (0, 1):
                    k = ndeps[h][direction]
                    if k == 0:
                        exp_stop[h][direction][0] += weight
                    else:
                        exp_cont[h][direction][0] += weight
                        exp_cont[h][direction][1] += (k - 1) * weight
                        exp_stop[h][direction][1] += weight
        assert np.allclose(grads["stop"], exp_stop, atol=1e-9)
        assert np.allclose(grads["cont"], exp_cont, atol=1e-9)


def test_runtime_grows_cubically():
    rng = np.random.default_rng(0)
    s20 = random_scores(20, rng)
    s40 = random_scores(40, rng)
    inside(s20)  # warm caches before timing
    inside(s40)

    def timed(s):
        t0 = time.perf_counter()
        inside(s)
        return time.perf_counter() - t0

    # interleave the two sizes and keep per-size minima, so transient
    # background load must hit every round to skew the ratio
    t20s, t40s = [], []
    for _ in range(9):
        t20s.append(timed(s20))
        t40s.append(timed(s40))
    ratio = min(t40s) / min(t20s)
    assert 6.0 <= ratio <= 10.0, (min(t20s), min(t40s), ratio)
