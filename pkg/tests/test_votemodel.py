"""Vote discretization, network scoring/learning, CPDs, joint probability."""

import itertools
import json

import numpy as np
import pytest
from scipy.optimize import minimize_scalar

from lcanomaly.errors import InvalidArgument, MalformedInput
from lcanomaly.votemodel import (
    CpdTable,
    Discretizer,
    NetworkStructure,
    VoteModel,
    entropy_order,
    equal_width_discretizer,
    fit_cpds,
    fit_vote_model,
    joint_log_probability_matrix,
    joint_probability,
    k2_local_score,
    learn_structure,
    load_vote_model,
    network_score,
    outlier_score,
    outlier_scores,
    parameter_count,
    quantile_discretizer,
    save_vote_model,
)


def k2_oracle(child, parents, D, alpha, n_bins):
    """Independent sequential-predictive implementation of the family score.

    The marginal likelihood equals the product of one-step-ahead predictive
    probabilities (count_so_far + alpha) / (total_so_far + n_bins*alpha),
    accumulated per parent configuration.
    """
    groups = {}
    for row in D:
        key = tuple(row[p] for p in parents)
        groups.setdefault(key, []).append(row[child])
    total = 0.0
    for seq in groups.values():
        counts = [0] * n_bins
        for i, x in enumerate(seq):
            total += np.log((counts[x] + alpha) / (i + n_bins * alpha))
            counts[x] += 1
    return total


def random_discrete(n, k, n_bins, seed):
    return np.random.default_rng(seed).integers(0, n_bins, size=(n, k))


class TestDiscretizer:
    def test_boundary_examples_20_bins(self):
        d = equal_width_discretizer(20)
        assert d([0.0])[0] == 0
        assert d([1.0])[0] == 19
        assert d([0.05])[0] == 1  # interior edge -> upper bin
        assert d([0.9999])[0] == 19
        assert d([0.049999])[0] == 0

    def test_every_value_maps_to_one_bin(self):
        d = equal_width_discretizer(7)
        v = np.random.default_rng(0).uniform(0, 1, 5000)
        bins = d(v)
        assert np.all((bins >= 0) & (bins < 7))
        # each bin's values sit inside its edges (right edge open except last)
        for b in range(7):
            sel = v[bins == b]
            assert np.all(sel >= d.edges[b])
            assert np.all(sel <= d.edges[b + 1])

    def test_tolerance_clamp_and_rejection(self):
        d = equal_width_discretizer(20)
        assert d([-5e-10])[0] == 0
        assert d([1.0 + 5e-10])[0] == 19
        with pytest.raises(InvalidArgument):
            d([-1e-8])
        with pytest.raises(InvalidArgument):
            d([1.0 + 1e-8])

    def test_edge_validation(self):
        with pytest.raises(InvalidArgument):
            Discretizer([0.0, 0.5, 0.5, 1.0])
        with pytest.raises(InvalidArgument):
            Discretizer([0.1, 0.5, 1.0])
        with pytest.raises(InvalidArgument):
            equal_width_discretizer(1)

    def test_quantile_binning_same_contract(self):
        rng = np.random.default_rng(1)
        votes = rng.beta(0.3, 3.0, 2000)  # concentrated near 0
        d = quantile_discretizer(votes, 10)
        assert d.edges[0] == 0.0 and d.edges[-1] == 1.0
        assert np.all(np.diff(d.edges) > 0)
        bins = d(votes)
        assert np.all((bins >= 0) & (bins < d.n_bins))
        # roughly balanced occupancy is the point of quantile edges
        occupancy = np.bincount(bins, minlength=d.n_bins) / len(votes)
        assert occupancy.max() < 3.0 / d.n_bins + 0.05


class TestParameterCount:
    def test_published_example(self):
        assert parameter_count(2, 2) == 4

    def test_root_and_two_parent_nodes(self):
        assert parameter_count(20, 0) == 19
        assert parameter_count(20, 2) == 7600

    def test_validation(self):
        with pytest.raises(InvalidArgument):
            parameter_count(1, 0)
        with pytest.raises(InvalidArgument):
            parameter_count(4, -1)

    def test_matches_stored_cells(self):
        rng = np.random.default_rng(2)
        votes = rng.dirichlet(np.ones(4), 300)
        model = fit_vote_model(votes, ["a", "b", "c", "d"], n_bins=5)
        for cpd in model.cpds:
            assert cpd.stored_cells == 5 * 5 ** len(cpd.parents)
            assert cpd.free_parameters == parameter_count(5, len(cpd.parents))


class TestK2Score:
    def test_single_row_closed_form(self):
        # one observation, no parents, 2 bins, alpha=1: P = 1/2
        D = np.array([[0]])
        assert k2_local_score(0, (), D, alpha=1.0, n_bins=2) == pytest.approx(
            np.log(0.5), abs=1e-12)

    def test_matches_sequential_oracle(self):
        for seed in range(8):
            n_bins = (3, 4, 5)[seed % 3]
            D = random_discrete(120, 4, n_bins, seed)
            for parents in ((), (1,), (1, 3)):
                got = k2_local_score(0, parents, D, alpha=2.5, n_bins=n_bins)
                want = k2_oracle(0, parents, D, alpha=2.5, n_bins=n_bins)
                assert got == pytest.approx(want, abs=1e-10)

    def test_independent_parent_penalized(self):
        wins = 0
        for seed in range(11):
            D = random_discrete(500, 2, 4, 100 + seed)
            no_parent = k2_local_score(0, (), D, alpha=4.0, n_bins=4)
            with_parent = k2_local_score(0, (1,), D, alpha=4.0, n_bins=4)
            wins += no_parent >= with_parent
        assert wins > 11 / 2

    def test_deterministic_copy_increases_score(self):
        rng = np.random.default_rng(7)
        col = rng.integers(0, 4, 500)
        D = np.column_stack([col, col])
        assert (k2_local_score(0, (1,), D, alpha=4.0, n_bins=4)
                > k2_local_score(0, (), D, alpha=4.0, n_bins=4))

    def test_empty_data_rejected(self):
        with pytest.raises(InvalidArgument):
            k2_local_score(0, (), np.zeros((0, 2), dtype=int), n_bins=2)

    def test_decomposability(self):
        D = random_discrete(200, 3, 4, 9)
        s1 = NetworkStructure(order=(0, 1, 2), parents=((), (0,), ()))
        s2 = NetworkStructure(order=(0, 1, 2), parents=((), (0,), (1,)))
        locals1 = [k2_local_score(j, s1.parents[j], D, 4.0, 4) for j in range(3)]
        locals2 = [k2_local_score(j, s2.parents[j], D, 4.0, 4) for j in range(3)]
        assert network_score(s1, D, 4.0, 4) == pytest.approx(sum(locals1))
        assert locals1[0] == locals2[0] and locals1[1] == locals2[1]
        assert locals1[2] != locals2[2]


class TestLearnStructure:
    def test_deterministic_copy_recovered(self):
        rng = np.random.default_rng(11)
        col = rng.integers(0, 4, 400)
        D = np.column_stack([col, col])
        s = learn_structure(D, order=(0, 1), n_bins=4)
        assert s.parents[1] == (0,)
        assert s.parents[0] == ()

    def test_independent_columns_stay_empty(self):
        empty = 0
        for seed in range(20):
            D = random_discrete(800, 3, 4, 200 + seed)
            s = learn_structure(D, n_bins=4)
            empty += all(p == () for p in s.parents)
        assert empty >= 18  # >= 90% of trials

    def test_max_parents_zero(self):
        col = np.random.default_rng(12).integers(0, 4, 300)
        D = np.column_stack([col, col, col])
        s = learn_structure(D, max_parents=0, n_bins=4)
        assert all(p == () for p in s.parents)

    def test_max_parents_respected_and_order_constraint(self):
        rng = np.random.default_rng(13)
        base = rng.integers(0, 3, 600)
        D = np.column_stack([base, (base + rng.integers(0, 2, 600)) % 3,
                             base, (base * 2) % 3])
        s = learn_structure(D, max_parents=2, n_bins=3)
        pos = {node: i for i, node in enumerate(s.order)}
        for j, ps in enumerate(s.parents):
            assert len(ps) <= 2
            for p in ps:
                assert pos[p] < pos[j]

    def test_planted_parent_recovered(self):
        hits = 0
        for seed in range(10):
            rng = np.random.default_rng(300 + seed)
            parent = rng.integers(0, 3, 500)
            noise = rng.integers(0, 3, 500)
            child = np.where(rng.uniform(size=500) < 0.85, parent, noise)
            other = rng.integers(0, 3, 500)
            D = np.column_stack([parent, other, child])
            s = learn_structure(D, order=(0, 1, 2), n_bins=3)
            hits += 0 in s.parents[2]
        assert hits == 10

    def test_score_never_below_empty_graph(self):
        for seed in range(5):
            D = random_discrete(300, 4, 4, 400 + seed)
            s = learn_structure(D, n_bins=4)
            empty = NetworkStructure(order=s.order, parents=((),) * 4)
            assert network_score(s, D, 4.0, 4) >= network_score(empty, D, 4.0, 4)

    def test_accepted_edges_strictly_improved(self):
        rng = np.random.default_rng(14)
        base = rng.integers(0, 4, 500)
        D = np.column_stack([base, (base + 1) % 4, rng.integers(0, 4, 500)])
        s = learn_structure(D, n_bins=4)
        for j in range(3):
            for p in s.parents[j]:
                reduced = tuple(x for x in s.parents[j] if x != p)
                assert (k2_local_score(j, s.parents[j], D, 4.0, 4)
                        > k2_local_score(j, reduced, D, 4.0, 4))

    def test_structure_validation(self):
        with pytest.raises(InvalidArgument):
            NetworkStructure(order=(0, 1), parents=((1,), ()))  # parent after child
        with pytest.raises(InvalidArgument):
            NetworkStructure(order=(0, 0), parents=((), ()))
        with pytest.raises(InvalidArgument):
            NetworkStructure(order=(0, 1, 2), parents=((), (0,), (0, 1)),
                             max_parents=1)


class TestFitCpds:
    def test_prior_only_row_uniform(self):
        s = NetworkStructure(order=(0,), parents=((),))
        cpds = fit_cpds(s, np.zeros((0, 1), dtype=int), alpha=4.0, n_bins=2)
        np.testing.assert_allclose(cpds[0].table, [[0.5, 0.5]])

    def test_stated_posterior_example(self):
        # counts (6, 2), alpha=4 -> (6+4)/(8+8) = 0.625
        D = np.array([[0]] * 6 + [[1]] * 2)
        s = NetworkStructure(order=(0,), parents=((),))
        cpd = fit_cpds(s, D, alpha=4.0, n_bins=2)[0]
        assert cpd.table[0, 0] == pytest.approx(0.625)

        # numerically maximize theta^(N1+a) (1-theta)^(N2+a)
        def neg_log_post(theta):
            return -((6 + 4) * np.log(theta) + (2 + 4) * np.log(1 - theta))

        res = minimize_scalar(neg_log_post, bounds=(1e-9, 1 - 1e-9),
                              method="bounded", options={"xatol": 1e-12})
        assert cpd.table[0, 0] == pytest.approx(res.x, abs=1e-8)

    def test_unseen_parent_config_uniform(self):
        # parent only ever takes bin 0; rows for bins 1..3 are pure prior
        D = np.column_stack([np.zeros(50, dtype=int),
                             np.random.default_rng(15).integers(0, 4, 50)])
        s = NetworkStructure(order=(0, 1), parents=((), (0,)))
        cpd = fit_cpds(s, D, alpha=4.0, n_bins=4)[1]
        for config in (1, 2, 3):
            np.testing.assert_allclose(cpd.table[config], 0.25)

    def test_rows_sum_to_one_and_positive(self):
        D = random_discrete(300, 3, 5, 16)
        s = learn_structure(D, n_bins=5)
        for cpd in fit_cpds(s, D, alpha=4.0, n_bins=5):
            np.testing.assert_allclose(cpd.table.sum(axis=1), 1.0, atol=1e-12)
            assert np.all(cpd.table > 0)
            # prior lower bound: alpha / (N_row + B*alpha) with N_row <= n
            assert cpd.table.min() >= 4.0 / (len(D) + 5 * 4.0) - 1e-12

    def test_posterior_mode_variant(self):
        D = np.array([[0]] * 6 + [[1]] * 2)
        s = NetworkStructure(order=(0,), parents=((),))
        cpd = fit_cpds(s, D, alpha=4.0, n_bins=2, map_variant="posterior_mode")[0]
        # (6+4-1)/(8+2*(4-1)) = 9/14
        assert cpd.table[0, 0] == pytest.approx(9 / 14)
        with pytest.raises(InvalidArgument):
            fit_cpds(s, np.zeros((0, 1), dtype=int), alpha=1.0, n_bins=2,
                     map_variant="posterior_mode")


def toy_model(seed=0, k=3, n_bins=4, n=200, **kw):
    rng = np.random.default_rng(seed)
    votes = rng.dirichlet(np.ones(k), n)
    return fit_vote_model(votes, [f"c{j}" for j in range(k)], n_bins=n_bins, **kw)


class TestJoint:
    def test_uniform_independent_model(self):
        disc = equal_width_discretizer(4)
        s = NetworkStructure(order=(0, 1), parents=((), ()))
        cpds = fit_cpds(s, np.zeros((0, 2), dtype=int), alpha=4.0, n_bins=4)
        model = VoteModel(disc, s, cpds, ["a", "b"])
        for v in ([0.1, 0.9], [0.5, 0.5], [0.99, 0.01]):
            assert joint_probability(model, v) == pytest.approx(1 / 16)

    def test_empty_graph_is_product_of_marginals(self):
        model = toy_model(seed=21, max_parents=0)
        rng = np.random.default_rng(22)
        for _ in range(20):
            v = rng.dirichlet(np.ones(3))
            bins = model.discretizer(v)
            direct = np.prod([model.cpds[j].table[0, bins[j]] for j in range(3)])
            assert joint_probability(model, v) == pytest.approx(direct, rel=1e-12)

    def test_exhaustive_normalization(self):
        # sum of the joint over every bin configuration must be 1
        for seed in range(3):
            model = toy_model(seed=seed)
            mids = (model.discretizer.edges[:-1] + model.discretizer.edges[1:]) / 2
            total = sum(
                joint_probability(model, np.array(cfg))
                for cfg in itertools.product(mids, repeat=3)
            )
            assert total == pytest.approx(1.0, abs=1e-9)

    def test_log_space_matches_direct_product(self):
        model = toy_model(seed=23)
        rng = np.random.default_rng(24)
        for _ in range(10):
            v = rng.dirichlet(np.ones(3))
            bins = model.discretizer(v)
            direct = 1.0
            for cpd in model.cpds:
                code = 0
                for i, p in enumerate(cpd.parents):
                    code += bins[p] * model.n_bins**i
                direct *= cpd.table[code, bins[cpd.node]]
            assert joint_probability(model, v) == pytest.approx(direct, rel=1e-12)

    def test_no_underflow_k8_20bins(self):
        rng = np.random.default_rng(25)
        votes = rng.dirichlet(np.ones(8) * 0.3, 400)
        model = fit_vote_model(votes, [f"c{j}" for j in range(8)], n_bins=20)
        logp = joint_log_probability_matrix(model, rng.dirichlet(np.ones(8), 100))
        assert np.all(np.isfinite(logp))
        assert np.all(np.exp(logp) > 0)

    def test_dimension_mismatch(self):
        model = toy_model(seed=26)
        with pytest.raises(InvalidArgument):
            joint_probability(model, np.array([0.5, 0.5]))


class TestOutlierScore:
    def test_degenerate_model_score_zero(self):
        # hand-built single-configuration model: P(v) = 1 -> score 0
        disc = equal_width_discretizer(2)
        s = NetworkStructure(order=(0,), parents=((),))
        cpd = CpdTable(node=0, parents=(), table=np.array([[1.0, 0.0]]), alpha=0.0)
        model = VoteModel(disc, s, [cpd], ["a"])
        assert outlier_score(model, np.array([0.2])) == 0.0

    def test_monotone_in_joint(self):
        model = toy_model(seed=27)
        rng = np.random.default_rng(28)
        V = rng.dirichlet(np.ones(3), 50)
        joints = np.exp(joint_log_probability_matrix(model, V))
        scores = outlier_scores(model, V)
        order = np.argsort(joints)
        assert np.all(np.diff(scores[order]) <= 1e-15)
        np.testing.assert_allclose(scores, 1.0 - joints, atol=1e-12)

    def test_scores_in_unit_interval(self):
        model = toy_model(seed=29)
        V = np.random.default_rng(30).dirichlet(np.ones(3), 100)
        s = outlier_scores(model, V)
        assert np.all((s >= 0) & (s < 1))


class TestModelIo:
    def test_round_trip_identical_scores(self, tmp_path):
        model = toy_model(seed=31, k=4, n_bins=6, max_parents=2)
        p = tmp_path / "votemodel.json"
        save_vote_model(model, p)
        back = load_vote_model(p)
        assert back.class_names == model.class_names
        assert back.structure == model.structure
        V = np.random.default_rng(32).dirichlet(np.ones(4), 50)
        np.testing.assert_array_equal(
            joint_log_probability_matrix(model, V),
            joint_log_probability_matrix(back, V))

    def test_save_is_deterministic_bytes(self, tmp_path):
        model = toy_model(seed=33)
        p1, p2 = tmp_path / "m1.json", tmp_path / "m2.json"
        save_vote_model(model, p1)
        save_vote_model(model, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_file_rejected(self, tmp_path):
        p = tmp_path / "junk.json"
        p.write_text("{not json")
        with pytest.raises(MalformedInput):
            load_vote_model(p)
        p2 = tmp_path / "wrong.json"
        p2.write_text(json.dumps({"format_version": 99}))
        with pytest.raises(MalformedInput):
            load_vote_model(p2)


class TestOrderStrategies:
    def test_entropy_order_sorted_by_marginal_entropy(self):
        rng = np.random.default_rng(34)
        # column 0 nearly constant (low entropy), column 2 uniform (high)
        D = np.column_stack([
            (rng.uniform(size=500) < 0.05).astype(int) * 3,
            rng.integers(0, 2, 500),
            rng.integers(0, 4, 500),
        ])
        order = entropy_order(D, 4)
        assert order[0] == 2 and order[-1] == 0

    def test_entropy_strategy_fits(self):
        model = toy_model(seed=35, order_strategy="entropy")
        assert sorted(model.structure.order) == [0, 1, 2]
        V = np.random.default_rng(36).dirichlet(np.ones(3), 10)
        assert np.all(np.isfinite(joint_log_probability_matrix(model, V)))
