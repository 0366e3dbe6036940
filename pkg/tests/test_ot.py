import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from strategies import distribution_pairs, distributions, line_metric, random_dist

from cofidec.ot import (
    Distribution,
    GroundMetric,
    SinkhornConfig,
    SupportMismatchError,
    SupportTooLargeError,
    barycenter_objective,
    build_ground_metric,
    exact_wasserstein,
    lp_barycenter,
    sinkhorn,
    sinkhorn_barycenter,
    total_variation,
)


def w1_line(p: Distribution, q: Distribution) -> float:
    """Closed-form W1 on the integer line: the L1 distance between CDFs."""
    return float(np.abs(np.cumsum(p.probs) - np.cumsum(q.probs))[:-1].sum())


# -- Distribution / GroundMetric ------------------------------------------


class TestDistribution:
    def test_rejects_bad_sum(self):
        with pytest.raises(ValueError, match="sum"):
            Distribution(np.array([0.5, 0.6]), np.array([0, 1]))

    def test_rejects_negative(self):
        with pytest.raises(ValueError):
            Distribution(np.array([1.5, -0.5]), np.array([0, 1]))

    def test_rejects_unsorted_ids(self):
        with pytest.raises(ValueError, match="increasing"):
            Distribution(np.array([0.5, 0.5]), np.array([3, 1]))

    def test_rejects_duplicate_ids(self):
        with pytest.raises(ValueError):
            Distribution(np.array([0.5, 0.5]), np.array([1, 1]))

    def test_sum_tolerance(self):
        Distribution(np.array([0.5, 0.5 + 5e-10]), np.array([0, 1]))

    def test_prob_lookup(self):
        d = Distribution(np.array([0.25, 0.75]), np.array([2, 5]))
        assert d.prob(5) == 0.75
        assert d.prob(3) == 0.0
        assert d.argmax() == 5

    def test_dirac(self):
        d = Distribution.dirac(2, [0, 1, 2, 3])
        assert d.probs.tolist() == [0, 0, 1, 0]
        with pytest.raises(ValueError):
            Distribution.dirac(9, [0, 1])

    def test_immutable(self):
        d = Distribution.full([0.5, 0.5])
        with pytest.raises(ValueError):
            d.probs[0] = 1.0


class TestGroundMetric:
    def test_squared_euclidean(self):
        m = build_ground_metric([[0], [1], [2]], "squared_euclidean")
        assert m.costs.tolist() == [[0, 1, 4], [1, 0, 1], [4, 1, 0]]

    def test_zero_one(self):
        m = build_ground_metric(np.random.default_rng(0).normal(size=(5, 3)), "zero_one")
        assert np.array_equal(m.costs, 1 - np.eye(5))

    def test_euclidean(self):
        m = build_ground_metric([[1, 0], [0, 1]], "euclidean")
        assert m.costs[0, 1] == pytest.approx(np.sqrt(2), abs=1e-15)
        assert m.costs[1, 0] == m.costs[0, 1]

    def test_unknown_kind(self):
        with pytest.raises(ValueError, match="unknown"):
            build_ground_metric([[0], [1]], "cosine")

    def test_mismatched_dims(self):
        with pytest.raises(ValueError, match="dimension"):
            build_ground_metric([[0], [1, 2]])

    @pytest.mark.parametrize(
        "costs",
        [
            [[0, 1], [2, 0]],  # asymmetric
            [[1, 1], [1, 0]],  # nonzero diagonal
            [[0, -1], [-1, 0]],  # negative
            [[0, np.inf], [np.inf, 0]],
        ],
    )
    def test_validation(self, costs):
        with pytest.raises(ValueError):
            GroundMetric(np.array(costs, dtype=float))

    def test_restrict_out_of_range(self):
        with pytest.raises(SupportMismatchError):
            line_metric(3).restrict([0, 5])


# -- exact transport -------------------------------------------------------


class TestExactWasserstein:
    def test_identity_coupling(self):
        p = Distribution.full([0.5, 0.5])
        assert exact_wasserstein(p, p, build_ground_metric([[0], [3]]))[0] == 0.0

    def test_single_route(self):
        m = GroundMetric(np.array([[0.0, 1.0], [1.0, 0.0]]))
        cost, plan = exact_wasserstein(Distribution.dirac(0, [0, 1]), Distribution.dirac(1, [0, 1]), m)
        assert cost == pytest.approx(1.0, abs=1e-12)
        assert plan.mass[0, 1] == pytest.approx(1.0, abs=1e-12)

    def test_monotone_shift(self):
        p = Distribution.full([0.5, 0.5, 0.0])
        q = Distribution.full([0.0, 0.5, 0.5])
        assert exact_wasserstein(p, q, line_metric(3, 1))[0] == pytest.approx(1.0, abs=1e-12)

    @given(distribution_pairs(max_n=8))
    def test_matches_line_cdf_formula(self, pq):
        p, q = pq
        cost, _ = exact_wasserstein(p, q, line_metric(p.size, 1))
        assert cost == pytest.approx(w1_line(p, q), abs=1e-9)

    @given(distribution_pairs(max_n=8))
    def test_zero_one_is_total_variation(self, pq):
        p, q = pq
        m = GroundMetric(1 - np.eye(p.size))
        assert exact_wasserstein(p, q, m)[0] == pytest.approx(total_variation(p, q), abs=1e-9)

    @given(distribution_pairs(max_n=7))
    def test_symmetry_and_feasibility(self, pq):
        p, q = pq
        m = line_metric(p.size)
        c_pq, plan = exact_wasserstein(p, q, m)
        c_qp, _ = exact_wasserstein(q, p, m)
        # the LP's mass tolerance is 1e-10, so costs agree to that times the cost scale
        assert c_pq == pytest.approx(c_qp, abs=1e-9 * m.costs.max())
        assert c_pq >= 0
        assert plan.row_marginal_err <= 1e-9 and plan.col_marginal_err <= 1e-9
        assert np.abs(plan.mass.sum(axis=1) - p.probs).max() <= plan.row_marginal_err + 1e-15
        assert np.abs(plan.mass.sum(axis=0) - q.probs).max() <= plan.col_marginal_err + 1e-15
        assert plan.mass.min() >= 0

    @given(distributions(max_n=8))
    def test_self_distance_zero(self, p):
        assert exact_wasserstein(p, p, line_metric(p.size))[0] == pytest.approx(0.0, abs=1e-12)

    @given(distribution_pairs(max_n=6))
    def test_zero_iff_equal(self, pq):
        p, q = pq
        cost = exact_wasserstein(p, q, line_metric(p.size))[0]
        if total_variation(p, q) > 1e-6:
            assert cost > 0

    def test_support_limit(self):
        p = Distribution.full(np.full(65, 1 / 65))
        with pytest.raises(SupportTooLargeError):
            exact_wasserstein(p, p, line_metric(65))

    def test_support_mismatch(self):
        with pytest.raises(SupportMismatchError):
            exact_wasserstein(Distribution.full([1.0, 0.0]), Distribution.full([0.2, 0.3, 0.5]), line_metric(3))

    def test_sparse_support_uses_global_ids(self):
        m = line_metric(10, 1)
        p = Distribution.dirac(2, [2, 7])
        q = Distribution.dirac(7, [2, 7])
        assert exact_wasserstein(p, q, m)[0] == pytest.approx(5.0)


# -- entropic transport ----------------------------------------------------


class TestSinkhorn:
    def test_uniform_feasible(self):
        p = Distribution.full(np.full(4, 0.25))
        cfg = SinkhornConfig(epsilon=0.1)
        res = sinkhorn(p, p, line_metric(4), cfg)
        assert res.cost >= 0
        assert res.converged
        assert res.plan.row_marginal_err <= cfg.tol
        assert res.plan.col_marginal_err <= cfg.tol

    def test_diracs_small_epsilon(self):
        m = GroundMetric(np.array([[0.0, 1.0], [1.0, 0.0]]))
        res = sinkhorn(Distribution.dirac(0, [0, 1]), Distribution.dirac(1, [0, 1]), m, SinkhornConfig(epsilon=0.005))
        assert abs(res.cost - 1.0) <= 0.01

    def test_random_pairs_close_to_exact(self):
        rng = np.random.default_rng(11)
        worst = 0.0
        for _ in range(20):
            emb = rng.uniform(size=(8, 2))
            m = build_ground_metric(emb)
            p, q = random_dist(rng, 8), random_dist(rng, 8)
            exact = exact_wasserstein(p, q, m)[0]
            approx = sinkhorn(p, q, m, SinkhornConfig(epsilon=0.01)).cost
            worst = max(worst, abs(approx - exact) / m.costs.max())
        assert worst <= 0.05

    def test_gap_shrinks_with_epsilon(self):
        rng = np.random.default_rng(5)
        eps_grid = (0.1, 0.05, 0.01, 0.005)
        gaps = np.zeros(len(eps_grid))
        for _ in range(10):
            m = build_ground_metric(rng.uniform(size=(6, 2)))
            p, q = random_dist(rng, 6), random_dist(rng, 6)
            exact = exact_wasserstein(p, q, m)[0]
            for i, eps in enumerate(eps_grid):
                gaps[i] += abs(sinkhorn(p, q, m, SinkhornConfig(epsilon=eps)).cost - exact)
        assert gaps[-1] <= gaps[0]
        assert np.all(np.diff(gaps) <= 1e-3)

    def test_truncation_reported(self):
        rng = np.random.default_rng(0)
        p, q = random_dist(rng, 6), random_dist(rng, 6)
        res = sinkhorn(p, q, line_metric(6), SinkhornConfig(epsilon=0.005, max_iter=3))
        assert not res.converged
        assert res.iterations == 3
        # the plan is built at the stage reached, so its column marginal is still exact
        assert res.plan.col_marginal_err <= 1e-12
        assert res.plan.mass.sum() == pytest.approx(1.0, abs=1e-12)

    def test_truncated_slow_case_stays_close(self):
        # nearly tied costs make the final stage need tens of thousands of sweeps
        c = np.array(
            [
                [0.0, 1.0411, 0.7455, 0.5081, 0.638, 0.823, 0.9078],
                [1.0411, 0.0, 0.2692, 0.1146, 0.1236, 0.0198, 0.3062],
                [0.7455, 0.2692, 0.0, 0.3117, 0.0404, 0.2936, 0.0088],
                [0.5081, 0.1146, 0.3117, 0.0, 0.1307, 0.0419, 0.4044],
                [0.638, 0.1236, 0.0404, 0.1307, 0.0, 0.1208, 0.0753],
                [0.823, 0.0198, 0.2936, 0.0419, 0.1208, 0.0, 0.3561],
                [0.9078, 0.3062, 0.0088, 0.4044, 0.0753, 0.3561, 0.0],
            ]
        )
        m = GroundMetric(c)
        p = Distribution.normalized([0.0293, 0.1409, 0.0877, 0.1439, 0.265, 0.3037, 0.0295])
        q = Distribution.normalized([0.1732, 0.2856, 0.092, 0.0043, 0.172, 0.1258, 0.147])
        res = sinkhorn(p, q, m, SinkhornConfig(epsilon=0.005, max_iter=20000))
        assert not res.converged
        assert res.plan.row_marginal_err <= 1e-3
        assert abs(res.cost - exact_wasserstein(p, q, m)[0]) <= 0.05 * c.max()

    def test_without_scaling(self):
        p = Distribution.full([0.3, 0.7])
        q = Distribution.full([0.6, 0.4])
        res = sinkhorn(p, q, line_metric(2), SinkhornConfig(epsilon=0.05, scaling=None))
        assert res.converged
        assert res.cost == pytest.approx(0.3, abs=0.02)

    def test_deterministic(self):
        rng = np.random.default_rng(2)
        p, q = random_dist(rng, 5), random_dist(rng, 5)
        a = sinkhorn(p, q, line_metric(5))
        b = sinkhorn(p, q, line_metric(5))
        assert a.cost == b.cost
        assert np.array_equal(a.plan.mass, b.plan.mass)

    @pytest.mark.parametrize(
        "kwargs",
        [dict(epsilon=0), dict(tol=0), dict(max_iter=0), dict(min_prob=-1.0), dict(scaling=1.5)],
    )
    def test_config_validation(self, kwargs):
        with pytest.raises(ValueError):
            SinkhornConfig(**kwargs)


# -- barycenters -----------------------------------------------------------


def simplex_grid(n: int, steps: int):
    for combo in itertools.product(range(steps + 1), repeat=n - 1):
        if sum(combo) <= steps:
            yield np.array(list(combo) + [steps - sum(combo)], dtype=float) / steps


class TestLpBarycenter:
    def test_identical_inputs(self):
        p = Distribution.full([0.1, 0.2, 0.3, 0.4])
        res = lp_barycenter([p, p, p], None, line_metric(4))
        assert res.objective == pytest.approx(0.0, abs=1e-12)
        assert total_variation(res.barycenter, p) <= 1e-9

    def test_dirac_mean(self):
        m = line_metric(5)
        dists = [Distribution.dirac(i, range(5)) for i in (0, 2, 4)]
        res = lp_barycenter(dists, None, m)
        # oracle: enumerate every Dirac candidate
        objectives = [barycenter_objective(Distribution.dirac(j, range(5)), dists, None, m) for j in range(5)]
        assert int(np.argmin(objectives)) == 2
        assert res.barycenter.argmax() == 2
        assert res.barycenter.prob(2) == pytest.approx(1.0, abs=1e-9)
        assert res.objective == pytest.approx(min(objectives), abs=1e-9)

    def test_two_point_zero_one(self):
        m = GroundMetric(1 - np.eye(2))
        dists = [Distribution.full([1.0, 0.0]), Distribution.full([0.0, 1.0])]
        res = lp_barycenter(dists, [0.5, 0.5], m)
        grid = [barycenter_objective(Distribution.full([t, 1 - t]), dists, [0.5, 0.5], m) for t in np.linspace(0, 1, 101)]
        assert np.allclose(grid, 0.5)
        assert res.objective == pytest.approx(0.5, abs=1e-12)
        assert barycenter_objective(res.barycenter, dists, [0.5, 0.5], m) == pytest.approx(0.5, abs=1e-12)

    @pytest.mark.parametrize("seed", range(6))
    def test_beats_simplex_grid(self, seed):
        rng = np.random.default_rng(seed)
        m = build_ground_metric(rng.uniform(size=(3, 2)))
        dists = [random_dist(rng, 3) for _ in range(3)]
        w = rng.dirichlet(np.ones(3))
        res = lp_barycenter(dists, w, m)
        best = min(barycenter_objective(Distribution.full(x), dists, w, m) for x in simplex_grid(3, 20))
        assert res.objective <= best + 1e-9
        assert barycenter_objective(res.barycenter, dists, w, m) == pytest.approx(res.objective, abs=1e-9)

    @given(st.integers(2, 4).flatmap(lambda k: st.lists(distributions(n=5), min_size=k, max_size=k)))
    def test_no_worse_than_inputs_or_uniform(self, dists):
        m = line_metric(5)
        res = lp_barycenter(dists, None, m)
        for cand in list(dists) + [Distribution.full(np.full(5, 0.2))]:
            assert res.objective <= barycenter_objective(cand, dists, None, m) + 1e-9

    @given(st.lists(distributions(n=4), min_size=3, max_size=3), st.permutations(range(3)))
    def test_permutation_invariant(self, dists, perm):
        m = line_metric(4)
        a = lp_barycenter(dists, None, m).barycenter
        b = lp_barycenter([dists[i] for i in perm], None, m).barycenter
        assert a == b

    def test_support_limit(self):
        p = Distribution.full(np.full(9, 1 / 9))
        with pytest.raises(SupportTooLargeError):
            lp_barycenter([p, p], None, line_metric(9))

    def test_requires_two_inputs(self):
        with pytest.raises(ValueError, match="at least two"):
            lp_barycenter([Distribution.full([1.0])], None, line_metric(1))

    def test_bad_weights(self):
        p = Distribution.full([0.5, 0.5])
        with pytest.raises(ValueError):
            lp_barycenter([p, p], [0.7, 0.7], line_metric(2))
        with pytest.raises(ValueError):
            lp_barycenter([p, p], [1.0, 0.0], line_metric(2))


class TestSinkhornBarycenter:
    def test_identical_inputs(self):
        p = Distribution.full([0.05, 0.15, 0.4, 0.3, 0.1])
        res = sinkhorn_barycenter([p, p, p], None, line_metric(5), SinkhornConfig(epsilon=0.01))
        assert total_variation(res.barycenter, p) <= 0.02

    def test_dirac_mean(self):
        dists = [Distribution.dirac(i, range(5)) for i in (0, 2, 4)]
        res = sinkhorn_barycenter(dists, None, line_metric(5), SinkhornConfig(epsilon=0.005))
        assert res.barycenter.argmax() == 2
        assert res.converged

    def test_permutation_invariant(self):
        rng = np.random.default_rng(3)
        dists = [random_dist(rng, 6) for _ in range(3)]
        m = line_metric(6)
        base = sinkhorn_barycenter(dists, None, m).barycenter
        for perm in itertools.permutations(range(3)):
            other = sinkhorn_barycenter([dists[i] for i in perm], None, m).barycenter
            assert np.abs(other.probs - base.probs).max() <= 1e-9

    def test_close_to_lp(self):
        rng = np.random.default_rng(9)
        m = line_metric(6)
        for _ in range(5):
            dists = [random_dist(rng, 6) for _ in range(3)]
            lp = lp_barycenter(dists, None, m).barycenter
            ent = sinkhorn_barycenter(dists, None, m, SinkhornConfig(epsilon=0.005)).barycenter
            assert total_variation(lp, ent) <= 0.05

    def test_truncated_status(self):
        rng = np.random.default_rng(1)
        dists = [random_dist(rng, 5) for _ in range(3)]
        res = sinkhorn_barycenter(dists, None, line_metric(5), SinkhornConfig(epsilon=0.005, max_iter=2))
        assert not res.converged
        assert res.iterations == 2
        assert np.isfinite(res.objective)

    def test_deterministic(self):
        rng = np.random.default_rng(4)
        dists = [random_dist(rng, 5) for _ in range(3)]
        a = sinkhorn_barycenter(dists, None, line_metric(5))
        b = sinkhorn_barycenter(dists, None, line_metric(5))
        assert a.barycenter == b.barycenter
        assert a.objective == b.objective
