import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from anyrace.inference import RatingSamples
from anyrace.select import (PreferenceError, budget_distribution, criterion_scores, custom_monotone,
                            dominated_by, final_time, log_uniform, minimax_preference,
                            monotonicity_audit, p2bb_scores, parse_preference, point,
                            portfolio_search, regret, select, trapezoid_weights, uniform,
                            value_posterior)
from anyrace.trajectories import TimeGrid

GRID = TimeGrid.logarithmic(1, 100, 7)


def crossing_samples(S=2000, seed=0):
    """A strong early and weak late, B the reverse, C middling throughout."""
    rng = np.random.default_rng(seed)
    T = len(GRID)
    a = np.linspace(0.6, 0.1, T)
    b = np.linspace(0.1, 0.6, T)
    base = np.stack([a, b, 1 - a - b], axis=-1)
    draws = np.stack([rng.dirichlet(400 * base[t], size=S) for t in range(T)], axis=1)
    return RatingSamples(draws, ("A", "B", "C"), GRID, "test")


class TestPreferences:
    def test_trapezoid_exact_for_linear(self):
        x = np.array([0.0, 0.5, 2.0, 3.0])
        q = trapezoid_weights(x)
        assert q.sum() == pytest.approx(3.0)
        assert q @ (2 * x + 1) == pytest.approx(3.0 ** 2 + 3.0)

    def test_uniform_and_log_uniform_of_constant(self):
        ones = np.ones(len(GRID))
        assert uniform(GRID)(ones) == pytest.approx(99.0)
        assert log_uniform(GRID)(ones) == pytest.approx(np.log(100.0))
        assert final_time(GRID)(np.arange(7.0)) == 6.0

    def test_point_interpolates(self):
        th = np.arange(len(GRID), dtype=float)
        assert point(GRID, GRID.points[2])(th) == pytest.approx(2.0)
        mid = 0.5 * (GRID.points[2] + GRID.points[3])
        assert point(GRID, mid)(th) == pytest.approx(2.5)
        assert point(GRID, 100.0)(th) == pytest.approx(6.0)
        with pytest.raises(PreferenceError):
            point(GRID, 101.0)

    def test_budget_distribution_normalises(self):
        u = budget_distribution(GRID, [1.0, 100.0], [1.0, 3.0])
        th = np.zeros(len(GRID))
        th[0], th[-1] = 4.0, 8.0
        assert u(th) == pytest.approx(7.0)
        with pytest.raises(PreferenceError):
            budget_distribution(GRID, [1.0], [-1.0])

    def test_parse_files(self, tmp_path):
        f = tmp_path / "budgets.csv"
        f.write_text("t,mass\n1,1\n100,1\n")
        u = parse_preference(f"dist:{f}", GRID)
        th = np.linspace(0, 1, len(GRID))
        assert u(th) == pytest.approx(0.5)
        w = tmp_path / "w.csv"
        w.write_text("# weight table\n1,1\n100,1\n")
        assert parse_preference(f"weights:{w}", GRID)(np.ones(len(GRID))) == pytest.approx(99.0)

    @pytest.mark.parametrize("spec", ["nope", "point:x", "dist:/does/not/exist"])
    def test_parse_errors(self, spec):
        with pytest.raises(PreferenceError):
            parse_preference(spec, GRID)

    def test_monotonicity_audit(self, rng):
        for u in (uniform(GRID), log_uniform(GRID), final_time(GRID)):
            # final-time ignores earlier points but still increases with a uniform lift
            assert monotonicity_audit(u, len(GRID), rng)
        bad = custom_monotone(lambda th: -th.sum(axis=-1))
        assert not monotonicity_audit(bad, len(GRID), rng)

    def test_negative_weights_rejected(self):
        with pytest.raises(PreferenceError):
            uniform(GRID).scaled(-1.0)
        with pytest.raises(PreferenceError):
            budget_distribution(GRID, [1.0, 2.0], [0.0, 0.0])


class TestCriteria:
    def test_p2bb_ties_share_credit(self):
        v = np.array([[1.0, 1.0, 0.0], [2.0, 0.0, 1.0]])
        np.testing.assert_allclose(p2bb_scores(v), [0.75, 0.25, 0.0])

    def test_quantile_needs_gamma(self):
        with pytest.raises(ValueError):
            criterion_scores(np.ones((3, 2)), "quantile")
        with pytest.raises(ValueError):
            criterion_scores(np.ones((3, 2)), "median")

    # powers of two keep the scaling exact in floating point
    @given(arrays(float, (30, 4), elements=st.floats(0, 1, allow_subnormal=False)),
           st.sampled_from([0.125, 0.5, 4.0, 64.0]))
    def test_scores_equivariant_to_scaling(self, v, c):
        for crit, g in (("expected", None), ("quantile", 0.1)):
            np.testing.assert_allclose(criterion_scores(c * v, crit, g), c * criterion_scores(v, crit, g))
        assert np.array_equal(criterion_scores(c * v, "p2bb"), criterion_scores(v, "p2bb"))

    def test_preference_changes_the_winner(self):
        s = crossing_samples()
        early = select(value_posterior(s, point(GRID, 1.0)), "p2bb")
        late = select(value_posterior(s, final_time(GRID)), "p2bb")
        assert early.best == "A" and late.best == "B"
        assert early.to_json()["ranking"][0]["algorithm"] == "A"

    def test_regret(self):
        vp = value_posterior(crossing_samples(), final_time(GRID))
        assert regret(vp, "B") < 0.01 < regret(vp, "A")


class TestPortfolio:
    def test_linear_expected_shortcut(self):
        s = crossing_samples()
        res = portfolio_search(s, uniform(GRID), 3)
        best = select(value_posterior(s, uniform(GRID)), "expected").best
        assert res.members == (best,) * 3
        assert res.shortcut_applies and res.shortcut_agrees
        assert res.evaluated == 10

    def test_nonlinear_prefers_a_mix(self):
        s = crossing_samples()
        worst_case = custom_monotone(lambda th: th.min(axis=-1), "worst")
        res = portfolio_search(s, worst_case, 2)
        assert set(res.members) == {"A", "B"}
        assert not res.shortcut_applies and res.shortcut_agrees is None

    def test_greedy_matches_exhaustive_when_linear(self):
        s = crossing_samples()
        ex = portfolio_search(s, log_uniform(GRID), 3, strategy="exhaustive")
        gr = portfolio_search(s, log_uniform(GRID), 3, strategy="greedy")
        assert ex.members == gr.members
        assert ex.score == pytest.approx(gr.score)

    def test_bad_arguments(self):
        with pytest.raises(ValueError):
            portfolio_search(crossing_samples(), uniform(GRID), 0)
        with pytest.raises(ValueError):
            portfolio_search(crossing_samples(), uniform(GRID), 2, strategy="beam")


class TestParetoEquivalence:
    @given(st.integers(2, 6), st.integers(2, 10), st.integers(0, 2 ** 32 - 1))
    def test_minimax_and_dominators(self, n, T, seed):
        theta = np.random.default_rng(seed).dirichlet(np.ones(n), size=T)
        grid = TimeGrid.logarithmic(1, 10 * T, T)
        dom = dominated_by(theta)
        prefs = [uniform(grid), log_uniform(grid), final_time(grid)]
        for a in range(n):
            if not dom[a]:
                u = minimax_preference(theta[:, a])
                vals = u(theta.T)
                assert vals[a] == 0 and vals.max() <= 0
            for b in dom[a]:
                for u in prefs:
                    assert u(theta[:, b]) > u(theta[:, a])
