import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from anyrace.plmodel import compile_rankings, loglik_mu
from anyrace.testbed import OnePlusOneES, RandomSearch, make_problem
from anyrace.trajectories import (NO_VALUE, BudgetExceededError, Instance, RankingObservation,
                                  TiePolicy, TimeGrid, Trajectory, append_archive, evaluate_at,
                                  expand_ties, rankings_from_trajectories, read_archive,
                                  run_anytime, tie_groups)


def traj(alg, samples, horizon=10.0, inst="g:0", failed=False):
    return Trajectory.from_samples(alg, inst, 0, samples, horizon, failed)


class TestTimeGrid:
    def test_uniform_and_log(self):
        g = TimeGrid.uniform(1, 10, 10)
        assert g.points[0] == 1 and g.points[-1] == 10 and len(g) == 10
        lg = TimeGrid.logarithmic(1, 1000, 4)
        np.testing.assert_allclose(lg.points, [1, 10, 100, 1000])
        np.testing.assert_allclose(lg.normalized(), [0, 1 / 3, 2 / 3, 1])

    @pytest.mark.parametrize("pts", [(1.0,), (2.0, 1.0), (1.0, 1.0)])
    def test_rejects_bad_points(self, pts):
        with pytest.raises(ValueError):
            TimeGrid(pts)

    def test_log_needs_positive(self):
        with pytest.raises(ValueError):
            TimeGrid((0.0, 1.0), "logarithmic")

    def test_dict_round_trip(self):
        g = TimeGrid.logarithmic(1, 50, 7)
        assert TimeGrid.from_dict(g.to_dict()) == g
        assert TimeGrid.from_dict({"spacing": "uniform", "start": 1, "stop": 5, "num": 5}) == \
            TimeGrid.uniform(1, 5, 5)


class TestEvaluateAt:
    def test_step_function(self):
        tr = traj("A", [(1, 5.0), (3, 2.0)])
        assert evaluate_at(tr, 2) == 5.0
        assert evaluate_at(tr, 3) == 2.0

    def test_before_first_sample(self):
        assert evaluate_at(traj("A", [(1, 5.0)]), 0.5) == NO_VALUE

    def test_beyond_horizon(self):
        with pytest.raises(BudgetExceededError):
            evaluate_at(traj("A", [(1, 5.0)], horizon=4), 5)

    def test_failed_run_has_no_value(self):
        assert evaluate_at(traj("A", [(1, 5.0)], failed=True), 2) == NO_VALUE

    def test_rejects_increasing_values(self):
        with pytest.raises(ValueError):
            traj("A", [(1, 1.0), (2, 3.0)])

    @given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=1, max_size=30))
    def test_monotone_over_grid(self, vals):
        best = np.minimum.accumulate(vals)
        keep = np.r_[True, np.diff(best) < 0]
        times = np.flatnonzero(keep) + 1.0
        tr = traj("A", list(zip(times, best[keep])), horizon=len(vals))
        grid = np.linspace(0.5, len(vals), 40)
        v = [evaluate_at(tr, t) for t in grid]
        assert all(b <= a for a, b in zip(v, v[1:]))


class TestTies:
    def test_no_ties(self):
        assert expand_ties([["A"], ["B"], ["C"]]) == [(("A", "B", "C"), 1.0)]

    def test_two_way(self):
        out = expand_ties([["A", "B"]], max_expand=10)
        assert sorted(out) == [(("A", "B"), 0.5), (("B", "A"), 0.5)]

    def test_subsampled_five_way(self):
        out = expand_ties([list("ABCDE")], 24, 24, np.random.default_rng(0))
        assert len(out) == 24 and all(w == 1 / 24 for _, w in out)

    def test_subsample_unbiased(self):
        # full enumeration is the oracle for the subsampled estimator
        algs = list("ABCDE")
        mu = np.log(np.array([[0.35, 0.25, 0.2, 0.12, 0.08]]))

        def lik(expansion):
            return sum(w * math.exp(loglik_mu(compile_rankings([RankingObservation(0, o)], algs, 1),
                                              mu, grad=False)[0]) for o, w in expansion)

        exact = lik(expand_ties([algs], max_expand=200))
        est = np.mean([lik(expand_ties([algs], 24, 24, np.random.default_rng(s)))
                       for s in range(1000)])
        assert abs(est - exact) / exact < 0.02

    def test_groups_with_sentinel(self):
        g = tie_groups({"A": 1.0, "B": NO_VALUE, "C": 1.0, "D": NO_VALUE, "E": 0.5})
        assert g == [["E"], ["A", "C"], ["B", "D"]]

    def test_atol(self):
        assert tie_groups({"A": 1.0, "B": 1.0 + 1e-9}, atol=1e-6) == [["A", "B"]]
        assert tie_groups({"A": 1.0, "B": 1.0 + 1e-9}) == [["A"], ["B"]]


class TestRankings:
    grid = TimeGrid((1.0, 5.0))

    def test_strict(self):
        trs = [traj("A", [(1, 1.0)]), traj("B", [(1, 2.0)]), traj("C", [(1, 3.0)])]
        out = rankings_from_trajectories(trs, self.grid)
        assert out[0] == RankingObservation(0, ("A", "B", "C"), 1.0)

    def test_tie_expanded(self):
        trs = [traj("A", [(1, 1.0)]), traj("B", [(1, 1.0)])]
        out = [o for o in rankings_from_trajectories(trs, self.grid) if o.timepoint == 0]
        assert sorted((o.ordering, o.weight) for o in out) == [(("A", "B"), 0.5), (("B", "A"), 0.5)]

    def test_truncated_algorithm_left_out(self):
        trs = [traj("A", [(1, 0.0)], horizon=1), traj("B", [(1, 1.0)]), traj("C", [(1, 2.0)])]
        out = rankings_from_trajectories(trs, self.grid)
        assert [o.ordering for o in out if o.timepoint == 1] == [("B", "C")]

    def test_failed_ranks_last(self):
        trs = [traj("A", [(1, 0.0)], failed=True), traj("B", [(1, 9.0)])]
        assert rankings_from_trajectories(trs, self.grid)[0].ordering == ("B", "A")

    def test_skipped_timepoints(self):
        trs = [traj("A", [(3, 1.0)]), traj("B", [(4, 1.0)])]
        diag = {}
        out = rankings_from_trajectories(trs, self.grid, diagnostics=diag)
        assert diag["skipped"] == [0] and {o.timepoint for o in out} == {1}

    def test_mixed_instances_rejected(self):
        with pytest.raises(ValueError):
            rankings_from_trajectories([traj("A", [(1, 1.0)]), traj("B", [(1, 1.0)], inst="g:1")],
                                       self.grid)

    def test_partial_ranking_consistency(self):
        # dropping the last of a full ranking is the same as the top-(n-1) partial ranking
        algs = ("A", "B", "C", "D")
        mu = np.log(np.array([[0.4, 0.3, 0.2, 0.1]]))
        full = compile_rankings([RankingObservation(0, algs)], algs, 1)
        top = compile_rankings([RankingObservation(0, algs[:3], tail=frozenset({"D"}))], algs, 1)
        assert loglik_mu(full, mu, False)[0] == pytest.approx(loglik_mu(top, mu, False)[0], abs=1e-14)


class TestRunAnytime:
    inst = Instance("sphere", 0, 7)

    def test_deterministic(self):
        p = make_problem("sphere", 3, 7)
        a = run_anytime(RandomSearch(), self.inst, p, 200, 11)
        b = run_anytime(RandomSearch(), self.inst, p, 200, 11)
        assert a.to_json() == b.to_json()

    def test_horizon_zero(self):
        with pytest.raises(ValueError):
            run_anytime(RandomSearch(), self.inst, make_problem("sphere", 2, 0), 0, 1)

    def test_es_improves(self):
        tr = run_anytime(OnePlusOneES(), self.inst, make_problem("sphere", 3, 7), 2000, 3)
        assert tr.values[-1] < tr.values[0]

    def test_crash_is_failed_run(self):
        class Crash:
            name = "crash"

            def optimize(self, problem, evaluate, rng):
                evaluate(np.zeros(problem.dim))
                raise RuntimeError("boom")

        tr = run_anytime(Crash(), self.inst, make_problem("sphere", 2, 0), 10, 1)
        assert tr.failed and tr.to_json()["samples"] == []

    def test_archive_round_trip(self, tmp_path):
        p = make_problem("sphere", 2, 1)
        runs = [run_anytime(a, self.inst, p, 50, 5) for a in (RandomSearch(), OnePlusOneES())]
        append_archive(tmp_path / "a.jsonl", runs)
        back = list(read_archive(tmp_path / "a.jsonl"))
        assert [r.to_json() for r in back] == [r.to_json() for r in runs]


def test_tie_policy_validation():
    with pytest.raises(ValueError):
        TiePolicy(max_expand=0)
    with pytest.raises(ValueError):
        TiePolicy(atol=-1)
