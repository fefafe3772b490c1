"""Random forest: bagging, tree growth, voting, out-of-bag aggregation."""

import warnings

import numpy as np
import pytest

from lcanomaly.errors import InvalidArgument
from lcanomaly.forest import (
    Forest,
    ForestConfig,
    Tree,
    bootstrap_bag,
    grow_tree,
    load_forest,
    macro_f_score,
    oob_vote_matrix,
    predict_matrix,
    predict_votes,
    save_forest,
    train_forest,
    _descend_counts_numpy,
)

from synth import gaussian_blobs


def leaf_only_tree(cls, n=1):
    return Tree(feature=np.array([-1], dtype=np.int32),
                threshold=np.zeros(1),
                left=np.array([-1], dtype=np.int32),
                right=np.array([-1], dtype=np.int32),
                leaf_class=np.array([cls], dtype=np.int32),
                bag=np.zeros(n, dtype=np.int64))


class TestBootstrap:
    def test_n_one_only_draw(self):
        bag = bootstrap_bag(1, np.random.default_rng(0))
        np.testing.assert_array_equal(bag, [0])

    def test_distinct_fraction(self):
        for seed in range(3):
            bag = bootstrap_bag(10000, np.random.default_rng(seed))
            assert len(bag) == 10000
            frac = len(np.unique(bag)) / 10000
            assert 0.62 <= frac <= 0.645  # 1 - 1/e ≈ 0.632

    def test_same_seed_identical(self):
        b1 = bootstrap_bag(100, np.random.default_rng(42))
        b2 = bootstrap_bag(100, np.random.default_rng(42))
        np.testing.assert_array_equal(b1, b2)

    def test_empty_rejected(self):
        with pytest.raises(InvalidArgument):
            bootstrap_bag(0, np.random.default_rng(0))


class TestGrowTree:
    def test_separable_depth_one(self):
        X = np.array([[1.0, 9.0], [2.0, 8.0], [3.0, 7.0],
                      [7.0, 3.0], [8.0, 2.0], [9.0, 1.0]])
        y = np.array([0, 0, 0, 1, 1, 1], dtype=np.int32)
        cfg = ForestConfig(n_trees=1, n_split_features=2)
        tree = grow_tree(X, y, np.arange(6), cfg, np.random.default_rng(0), k=2)
        assert tree.n_nodes == 3  # root + two leaves
        assert tree.feature[0] in (0, 1)
        # zero error on the bag
        f = Forest([tree], ["a", "b"], cfg, 2)
        preds = np.argmax(predict_matrix(f, X), axis=1)
        np.testing.assert_array_equal(preds, y)

    def test_bag_of_one_is_single_leaf(self):
        X = np.array([[1.0], [2.0], [3.0]])
        y = np.array([2, 0, 1], dtype=np.int32)
        cfg = ForestConfig(n_trees=1, n_split_features=1)
        tree = grow_tree(X, y, np.array([0]), cfg, np.random.default_rng(0), k=3)
        assert tree.n_nodes == 1
        assert tree.leaf_class[0] == 2

    def test_xor_grown_to_purity(self):
        # axis splits give zero impurity decrease at the root, but trees grow
        # to maximum size, so the 4-point XOR set is still fit exactly
        X = np.array([[0.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 1.0]])
        y = np.array([0, 1, 1, 0], dtype=np.int32)
        cfg = ForestConfig(n_trees=1, n_split_features=2)
        tree = grow_tree(X, y, np.arange(4), cfg, np.random.default_rng(0), k=2)
        assert tree.n_nodes >= 7  # depth >= 2
        f = Forest([tree], ["a", "b"], cfg, 2)
        np.testing.assert_array_equal(np.argmax(predict_matrix(f, X), axis=1), y)

    def test_identical_rows_single_leaf(self):
        X = np.ones((5, 3))
        y = np.array([0, 1, 0, 1, 0], dtype=np.int32)
        cfg = ForestConfig(n_trees=1, n_split_features=3)
        tree = grow_tree(X, y, np.arange(5), cfg, np.random.default_rng(0), k=2)
        assert tree.n_nodes == 1
        assert tree.leaf_class[0] == 0  # majority

    def test_leaf_majority_tie_lowest_class(self):
        X = np.ones((4, 2))  # unsplittable
        y = np.array([3, 1, 3, 1], dtype=np.int32)
        cfg = ForestConfig(n_trees=1, n_split_features=2)
        tree = grow_tree(X, y, np.arange(4), cfg, np.random.default_rng(0), k=4)
        assert tree.leaf_class[0] == 1  # tie between 1 and 3 -> lowest

    def test_deep_chain_no_recursion_limit(self):
        # one noisy feature, alternating labels: tree must grow very deep
        rng = np.random.default_rng(1)
        n = 4000
        X = rng.uniform(0, 1, (n, 1))
        y = (np.arange(n) % 2).astype(np.int32)
        cfg = ForestConfig(n_trees=1, n_split_features=1)
        tree = grow_tree(X, y, np.arange(n), cfg, np.random.default_rng(2), k=2)
        assert tree.n_nodes > 100


class TestPredict:
    def test_single_tree_one_hot(self):
        X, y = gaussian_blobs([[0, 0], [5, 5]], 20, sigma=0.5, seed=0)
        f = train_forest(X, y, ForestConfig(n_trees=1, rng_seed=0), compute_oob=False)
        votes = predict_matrix(f, X)
        assert np.all(np.isin(votes, [0.0, 1.0]))
        np.testing.assert_allclose(votes.sum(axis=1), 1.0)

    def test_unanimous_forest(self):
        X, y = gaussian_blobs([[0, 0], [50, 50]], 30, sigma=0.1, seed=1)
        f = train_forest(X, y, ForestConfig(n_trees=50, rng_seed=1), compute_oob=False)
        v = predict_votes(f, np.array([50.0, 50.0]))
        assert v[1] == 1.0

    def test_vote_proportions_exact(self):
        # hand-built forest: 300 trees vote class 0, 200 vote class 1, k=3
        trees = [leaf_only_tree(0) for _ in range(300)] + \
                [leaf_only_tree(1) for _ in range(200)]
        f = Forest(trees, ["a", "b", "c"], ForestConfig(n_trees=500), n_features=2)
        v = predict_votes(f, np.array([0.0, 0.0]))
        np.testing.assert_allclose(v, [0.6, 0.4, 0.0])

    def test_votes_sum_to_one_and_nonnegative(self):
        X, y = gaussian_blobs([[0, 0, 0], [2, 2, 2], [0, 2, 0]], 40, sigma=1.5, seed=2)
        f = train_forest(X, y, ForestConfig(n_trees=37, rng_seed=3), compute_oob=False)
        Q = np.random.default_rng(4).uniform(-2, 4, (100, 3))
        votes = predict_matrix(f, Q)
        assert np.all(votes >= 0)
        np.testing.assert_allclose(votes.sum(axis=1), 1.0, atol=1e-9)

    def test_dimension_mismatch_rejected(self):
        X, y = gaussian_blobs([[0, 0], [3, 3]], 15, seed=5)
        f = train_forest(X, y, ForestConfig(n_trees=5, rng_seed=0), compute_oob=False)
        with pytest.raises(InvalidArgument):
            predict_votes(f, np.zeros(3))
        with pytest.raises(InvalidArgument):
            predict_matrix(f, np.zeros((4, 5)))

    def test_numba_kernel_matches_numpy_fallback(self):
        X, y = gaussian_blobs([[0, 0], [2, 1], [1, 3]], 50, sigma=1.0, seed=6)
        f = train_forest(X, y, ForestConfig(n_trees=40, rng_seed=7), compute_oob=False)
        Q = np.random.default_rng(8).uniform(-1, 4, (200, 2))
        fast = predict_matrix(f, Q)
        counts = np.zeros((len(Q), f.n_classes), dtype=np.int64)
        _descend_counts_numpy(*f.flattened(), Q, counts)
        np.testing.assert_array_equal(fast * 40, counts)


class TestOob:
    def test_mean_coverage_matches_binomial(self):
        X, y = gaussian_blobs([[0, 0], [4, 4]], 250, sigma=1.0, seed=9)
        f = train_forest(X, y, ForestConfig(n_trees=200, rng_seed=10))
        mean_cov = f.oob_coverage.mean()
        assert 200 / np.e * 0.9 <= mean_cov <= 200 / np.e * 1.1

    def test_single_tree_in_bag_rows_flagged(self):
        X, y = gaussian_blobs([[0.0], [5.0]], 5, sigma=0.5, seed=11)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            f = train_forest(X, y, ForestConfig(n_trees=1, rng_seed=12))
        in_bag = np.unique(f.trees[0].bag)
        for i in range(len(X)):
            if i in in_bag:
                assert f.oob_coverage[i] == 0
                assert i in f.oob_imputed
            else:
                assert f.oob_coverage[i] == 1

    def test_exclusion_instrumented(self):
        # recompute coverage and votes from per-tree bags independently
        X, y = gaussian_blobs([[0, 0], [3, 3]], 60, sigma=1.2, seed=13)
        f = train_forest(X, y, ForestConfig(n_trees=25, rng_seed=14))
        n, k = len(X), f.n_classes
        counts = np.zeros((n, k))
        coverage = np.zeros(n)
        for tree in f.trees:
            single = Forest([tree], f.class_names, f.config, f.n_features)
            preds = np.argmax(predict_matrix(single, X), axis=1)
            out = np.ones(n, dtype=bool)
            out[tree.bag] = False
            for i in np.nonzero(out)[0]:
                counts[i, preds[i]] += 1
                coverage[i] += 1
        np.testing.assert_array_equal(f.oob_coverage, coverage)
        covered = coverage > 0
        np.testing.assert_allclose(
            f.oob_votes[covered], counts[covered] / coverage[covered, None])

    def test_oob_macro_f_on_separable_blobs(self):
        X, y = gaussian_blobs([[0, 0, 0], [4, 0, 0], [0, 4, 0]], 80, sigma=1.0,
                              seed=15)
        f = train_forest(X, y, ForestConfig(n_trees=100, rng_seed=16))
        assert macro_f_score(f.oob_votes, y) >= 0.95


class TestMacroF:
    def test_perfect(self):
        votes = np.eye(3)[np.array([0, 1, 2, 0])]
        assert macro_f_score(votes, [0, 1, 2, 0]) == 1.0

    def test_constant_predictor_balanced(self):
        votes = np.tile([1.0, 0.0], (10, 1))
        y = np.array([0] * 5 + [1] * 5)
        assert macro_f_score(votes, y) == pytest.approx(1 / 3)

    def test_absent_class_skipped_with_warning(self):
        votes = np.eye(3)[np.array([0, 1, 0, 1])]
        y = np.array([0, 1, 0, 1])  # class 2 absent
        with pytest.warns(UserWarning, match="absent"):
            assert macro_f_score(votes, y) == 1.0


class TestTraining:
    def test_seed_determinism(self):
        X, y = gaussian_blobs([[0, 0], [2, 2]], 50, sigma=1.0, seed=17)
        f1 = train_forest(X, y, ForestConfig(n_trees=20, rng_seed=99))
        f2 = train_forest(X, y, ForestConfig(n_trees=20, rng_seed=99))
        for a, b in zip(f1.flattened(), f2.flattened()):
            np.testing.assert_array_equal(a, b)
        np.testing.assert_array_equal(f1.oob_votes, f2.oob_votes)
        f3 = train_forest(X, y, ForestConfig(n_trees=20, rng_seed=100))
        assert any((a.shape != b.shape or not np.array_equal(a, b))
                   for a, b in zip(f1.flattened(), f3.flattened()))

    def test_accuracy_monotone_in_ensemble_size(self):
        for seed in range(5):
            X, y = gaussian_blobs([[0, 0], [1.5, 1.5], [3, 0]], 60, sigma=1.0,
                                  seed=20 + seed)
            accs = []
            for R in (10, 40, 120):
                f = train_forest(X, y, ForestConfig(n_trees=R, rng_seed=seed),
                                 compute_oob=False)
                preds = np.argmax(predict_matrix(f, X), axis=1)
                accs.append(np.mean(preds == y))
            assert accs[1] >= accs[0] - 0.02
            assert accs[2] >= accs[1] - 0.02

    def test_class_names_first_appearance(self):
        X = np.array([[0.0], [5.0], [0.1], [5.1]])
        f = train_forest(X, ["lpv", "qso", "lpv", "qso"],
                         ForestConfig(n_trees=3, rng_seed=0), compute_oob=False)
        assert f.class_names == ["lpv", "qso"]

    def test_entropy_criterion_supported(self):
        X, y = gaussian_blobs([[0, 0], [4, 4]], 40, sigma=1.0, seed=30)
        f = train_forest(X, y, ForestConfig(n_trees=30, rng_seed=31,
                                            split_criterion="entropy"))
        assert macro_f_score(f.oob_votes, y) >= 0.95

    def test_config_validation(self):
        with pytest.raises(InvalidArgument):
            ForestConfig(n_trees=0)
        with pytest.raises(InvalidArgument):
            ForestConfig(min_node_size=0)
        with pytest.raises(InvalidArgument):
            ForestConfig(split_criterion="twoing")
        with pytest.raises(InvalidArgument):
            ForestConfig(n_split_features=9).resolve_split_features(5)

    def test_default_split_features_floor_sqrt(self):
        assert ForestConfig().resolve_split_features(13) == 3
        assert ForestConfig().resolve_split_features(16) == 4

    def test_save_load_round_trip(self, tmp_path):
        X, y = gaussian_blobs([[0, 0], [3, 3]], 40, sigma=1.0, seed=32)
        f = train_forest(X, y, ForestConfig(n_trees=15, rng_seed=33))
        p = tmp_path / "forest.model"
        save_forest(f, p)
        g = load_forest(p)
        assert g.class_names == f.class_names
        assert g.config == f.config
        for a, b in zip(f.flattened(), g.flattened()):
            np.testing.assert_array_equal(a, b)
        np.testing.assert_array_equal(g.oob_votes, f.oob_votes)
        Q = np.random.default_rng(34).uniform(-1, 4, (50, 2))
        np.testing.assert_array_equal(predict_matrix(f, Q), predict_matrix(g, Q))
