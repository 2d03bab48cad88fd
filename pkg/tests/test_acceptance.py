"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line."""

import itertools
import json
import math
import time

import numpy as np
import pytest
from scipy import stats

from anyrace.beliefs import anytime_table, check_elimination, pointwise_table
from anyrace.cli import main
from anyrace.experiments import RecoverySetup, run_recovery
from anyrace.inference import (InferenceConfig, LogPosterior, RatingSamples, hmc_sample, laplace_sample,
                               map_estimate)
from anyrace.plmodel import (compile_rankings, helmert, pairwise_win_probability, pl_log_likelihood,
                             pl_log_likelihood_grad, softmax)
from anyrace.priors import (KINDS, HilbertGP, IndependentDirichlet, MaternKernel, make_prior,
                            matern_spectral_density)
from anyrace.race import adapt_batch_size
from anyrace.select import dominated_by, final_time, log_uniform, minimax_preference, uniform
from anyrace.trajectories import RankingObservation, TimeGrid


@pytest.fixture
def verdict(capsys):
    def report(name, ok, detail=""):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
        assert ok, f"{name}: {detail}"
    return report


def fd_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        e = np.zeros_like(x)
        e[idx] = h
        g[idx] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def rel_err(a, b):
    return float(np.abs(a - b).max() / max(np.abs(b).max(), 1e-12))


def test_01_rankings_sum_to_one(verdict):
    rng = np.random.default_rng(1)
    start = time.perf_counter()
    worst = 0.0
    for n in (2, 3, 4, 5):
        algs = [chr(65 + i) for i in range(n)]
        perms = list(itertools.permutations(algs))
        for _ in range(20):
            theta = rng.dirichlet(np.ones(n))
            total = sum(math.exp(pl_log_likelihood([RankingObservation(0, p)], theta[None], algs))
                        for p in perms)
            worst = max(worst, abs(total - 1))
    secs = time.perf_counter() - start
    verdict("1 PL normalisation", worst < 1e-10 and secs < 1.0, f"max |sum-1| = {worst:.1e}, {secs:.2f}s")


def test_02_gradients_match_finite_differences(verdict):
    rng = np.random.default_rng(2)
    start = time.perf_counter()
    algs = "ABCD"
    obs = [RankingObservation(int(rng.integers(3)), tuple(rng.permutation(list(algs))),
                              float(rng.uniform(0.5, 2))) for _ in range(40)]
    Q = helmert(4)
    errs = {"pl": 0.0}
    for _ in range(10):
        eta = rng.normal(size=(3, 3))
        num = fd_grad(lambda e: pl_log_likelihood(obs, softmax(e @ Q.T), algs), eta)
        errs["pl"] = max(errs["pl"], rel_err(pl_log_likelihood_grad(obs, eta, algs), num))
    grid = TimeGrid.uniform(1, 20, 8)
    for kind in KINDS:
        model = make_prior(kind, 4, grid, **({"m": 16} if kind == "gp_hsgp" else {}))
        e = 0.0
        for _ in range(10):
            x = model.init_params() + 0.3 * rng.standard_normal(model.dim)
            e = max(e, rel_err(model.log_prior(x)[1], fd_grad(lambda p: model.log_prior(p)[0], x)))
        errs[kind] = e
    secs = time.perf_counter() - start
    worst = max(errs.values())
    detail = ", ".join(f"{k} {v:.1e}" for k, v in errs.items())
    verdict("2 gradients", worst < 1e-5 and secs < 10.0, f"{detail}; {secs:.1f}s")


def test_03_gumbel_max_reproduces_ranking_law(verdict):
    rng = np.random.default_rng(3)
    theta = np.array([0.5, 0.3, 0.2])
    N = 10 ** 6
    orders = np.argsort(-(np.log(theta) + rng.gumbel(size=(N, 3))), axis=1)
    perms = list(itertools.permutations(range(3)))
    code = orders @ np.array([9, 3, 1])
    observed = np.array([(code == 9 * p[0] + 3 * p[1] + p[2]).sum() for p in perms])
    algs = "ABC"
    expected = N * np.array([math.exp(pl_log_likelihood(
        [RankingObservation(0, tuple(algs[i] for i in p))], theta[None], algs)) for p in perms])
    pval = stats.chisquare(observed, expected).pvalue
    # first place within a subset: the earliest subset member in each full ranking
    pos = np.argsort(orders, axis=1)
    zmax = 0.0
    for S in ([0, 1], [0, 2], [1, 2], [0, 1, 2]):
        first = np.array(S)[np.argmin(pos[:, S], axis=1)]
        for i in S:
            p = theta[i] / theta[S].sum()
            zmax = max(zmax, abs((first == i).mean() - p) / math.sqrt(p * (1 - p) / N))
    verdict("3 Gumbel-max law", pval > 1e-3 and zmax < 3, f"chi2 p = {pval:.3f}, max subset z = {zmax:.2f}")


def test_04_helmert(verdict):
    worst = 0.0
    for n in range(2, 65):
        Q = helmert(n)
        worst = max(worst, np.abs(Q.T @ Q - np.eye(n - 1)).max(), np.abs(Q.sum(axis=0)).max())
    closed = np.array([[math.sqrt(1 / 2), math.sqrt(1 / 6)],
                       [-math.sqrt(1 / 2), math.sqrt(1 / 6)],
                       [0.0, -math.sqrt(2 / 3)]])
    exact = bool(np.array_equal(helmert(3), closed))
    verdict("4 Helmert contrasts", worst < 1e-12 and exact, f"max deviation {worst:.1e}, n=3 exact {exact}")


def test_05_hsgp_fidelity(verdict):
    grid = TimeGrid.uniform(1, 50, 101)
    model = HilbertGP(2, grid, m=64, c=1.5)
    x = model.x
    ell = (x[-1] - x[0]) / 4
    worst = 0.0
    for sigma in (0.5, 1.0, 2.0):
        s = matern_spectral_density(1.5, model.sqrt_lam, sigma, ell)[0]
        approx = (model.phi * s) @ model.phi.T
        exact = MaternKernel(1.5, sigma, ell).gram(x)
        worst = max(worst, np.abs(approx - exact).max() / sigma ** 2)
    verdict("5 HSGP fidelity", worst < 0.01, f"max |error| / sigma^2 = {worst:.4f}")


def _win_means(theta):
    return np.array([pairwise_win_probability(theta[:, 0], i, j).mean()
                     for i, j in itertools.combinations(range(theta.shape[-1]), 2)])


def test_06_laplace_and_hmc_agree(verdict):
    rng = np.random.default_rng(6)
    algs = ("A", "B", "C")
    truth = np.array([0.5, 0.3, 0.2])
    orders = np.argsort(-(np.log(truth) + rng.gumbel(size=(100, 3))), axis=1)
    data = compile_rankings([RankingObservation(0, tuple(algs[i] for i in o)) for o in orders], algs, 1)
    post = LogPosterior(IndependentDirichlet(3, 1), data)
    cfg = InferenceConfig(method="hmc", warmup=1000, hmc_draws=2000, chains=4)
    lap, _ = laplace_sample(post, map_estimate(post), 40000, np.random.default_rng(0))
    hmc, _, info = hmc_sample(post, cfg, np.random.default_rng(1))
    gap3 = np.abs(_win_means(lap) - _win_means(hmc)).max()

    # two algorithms, 100 rankings: the win probability has a closed 1-D posterior
    wins = 63
    data2 = compile_rankings([RankingObservation(0, ("A", "B"), float(wins)),
                              RankingObservation(0, ("B", "A"), float(100 - wins))], ("A", "B"), 1)
    post2 = LogPosterior(IndependentDirichlet(2, 1), data2)
    lap2, _ = laplace_sample(post2, map_estimate(post2), 40000, np.random.default_rng(2))
    hmc2, _, info2 = hmc_sample(post2, cfg, np.random.default_rng(3))
    p = np.linspace(0, 1, 200_001)[1:-1]
    logw = wins * np.log(p) + (100 - wins) * np.log1p(-p)
    w = np.exp(logw - logw.max())
    oracle = float(np.sum(p * w) / np.sum(w))
    gap_lap = abs(lap2[:, 0, 0].mean() - oracle)
    gap_hmc = abs(hmc2[:, 0, 0].mean() - oracle)
    rh = max(info["rhat_max"], info2["rhat_max"])
    div = info["divergences"] + info2["divergences"]
    ok = gap3 < 0.03 and gap_lap < 0.02 and gap_hmc < 0.02 and rh < 1.01 and div == 0
    verdict("6 inference agreement", ok,
            f"n=3 gap {gap3:.4f}; n=2 oracle {oracle:.4f} laplace gap {gap_lap:.4f} hmc gap {gap_hmc:.4f}; "
            f"rhat {rh:.4f}, divergences {div}")


@pytest.fixture(scope="module")
def recovery():
    setup = RecoverySetup()
    start = time.perf_counter()
    outcomes = [run_recovery(rep, setup) for rep in range(20)]
    return setup, outcomes, time.perf_counter() - start


def test_07_synthetic_pareto_recovery(recovery, verdict):
    setup, outcomes, secs = recovery
    covered = sum(o.covers_truth for o in outcomes)
    in_rope = sum(o.extras_in_rope(setup.epsilon) for o in outcomes)
    done = sum(o.resolved and o.rounds < setup.max_rounds for o in outcomes)
    extras = "; ".join(f"rep {o.rep}: {x}~{m} {w:.3f}" for o in outcomes for x, (m, w) in o.extras.items())
    ok = covered >= 19 and in_rope == 20 and done == 20
    verdict("7 Pareto recovery", ok,
            f"covered {covered}/20, extras in ROPE {in_rope}/20 ({extras or 'none'}), "
            f"terminated {done}/20, {secs:.0f}s")


def test_08_dominance_identities(verdict):
    rng = np.random.default_rng(8)
    sym, joint_ok = 0.0, True
    for _ in range(20):
        x = rng.dirichlet(np.ones(4), size=(300, 5))
        P = pointwise_table(x)
        off = ~np.eye(4, dtype=bool)
        sym = max(sym, np.abs((P + P.transpose(0, 2, 1))[:, off] - 1).max())
        joint_ok &= bool(np.all(anytime_table(x) <= P.min(axis=0)))
    # A loses at each timepoint in a disjoint 1% of draws
    T, S = 10, 10_000
    a = np.full((S, T), 0.6)
    for t in range(T):
        a[t * 100:(t + 1) * 100, t] = 0.4
    x = RatingSamples(np.stack([a, 1 - a], axis=-1), ("A", "B"), TimeGrid.uniform(1, T, T), "test")
    marg = pointwise_table(x)[:, 0, 1]
    joint = anytime_table(x)[0, 1]
    patho = joint < 0.99 <= marg.min()
    pointwise_elim = check_elimination(["A", "B"], x, 0.99, "pointwise")
    joint_elim = check_elimination(["A", "B"], x, 0.99, "joint")
    ok = sym == 0 and joint_ok and patho and joint_elim == [] and pointwise_elim == [("B", "A")]
    verdict("8 dominance identities", ok,
            f"symmetry error {sym:.1e}, joint <= min marginal {joint_ok}, "
            f"anticorrelated joint {joint:.3f} vs min marginal {marg.min():.3f}")


def test_09_minimax_preference_and_dominators(verdict):
    rng = np.random.default_rng(9)
    failures = 0
    for _ in range(50):
        n, T = int(rng.integers(2, 7)), int(rng.integers(2, 11))
        theta = rng.dirichlet(np.ones(n), size=T)
        grid = TimeGrid.logarithmic(1, 10 * T, T)
        dom = dominated_by(theta)
        prefs = [uniform(grid), log_uniform(grid), final_time(grid)]
        for a in range(n):
            if not dom[a]:
                vals = minimax_preference(theta[:, a])(theta.T)
                failures += not (vals[a] == 0 and vals.max() <= 1e-12)
            for b in dom[a]:
                failures += sum(not u(theta[:, b]) > u(theta[:, a]) for u in prefs)
    verdict("9 minimax preference", failures == 0, f"{failures} violations over 50 matrices")


def test_10_cost_below_baseline(recovery, verdict):
    _, outcomes, _ = recovery
    cheaper = [o for o in outcomes if o.cost < o.baseline_cost]
    ties = ", ".join(f"rep {o.rep} ({o.rounds} rounds, {o.cost:.0f}/{o.baseline_cost:.0f})"
                     for o in outcomes if o not in cheaper)
    total = sum(o.cost for o in outcomes) / sum(o.baseline_cost for o in outcomes)
    verdict("10 cost reduction", len(cheaper) == 20,
            f"cheaper in {len(cheaper)}/20, total {total:.2f}x baseline"
            + (f"; not cheaper: {ties}" if ties else ""))


def test_11_batch_adaptation(verdict):
    cases = [
        ((8, 0, 10), 16),   # nothing resolved: double
        ((64, 0, 10), 64),  # doubling clipped at b_max
        ((16, 3, 10), 8),   # 30% resolved: halve
        ((8, 5, 10), 8),    # halving clipped at b_min
        ((16, 2, 10), 16),  # exactly 20%: keep
        ((32, 1, 10), 32),  # some progress: keep
    ]
    got = [adapt_batch_size(*args, b_min=8, b_max=64) for args, _ in cases]
    ok = got == [want for _, want in cases]
    verdict("11 batch adaptation", ok, f"transitions {got}")


def test_12_manifest_replay_is_byte_identical(tmp_path, capsys, verdict):
    cfg = {"seed": 1,
           "benchmark": {"kind": "synthetic", "n": 3, "truth_seed": 4},
           "race": {"grid": {"spacing": "uniform", "start": 1, "stop": 4, "num": 4},
                    "model": {"kind": "independent_dirichlet"},
                    "inference": {"method": "laplace", "draws": 2000}}}
    path = tmp_path / "exp.json"
    path.write_text(json.dumps(cfg))
    a, b = tmp_path / "a", tmp_path / "b"
    codes = [main(["race", "--config", str(path), "--out", str(a)]),
             main(["race", "--manifest", str(a / "manifest.json"), "--out", str(b)])]
    capsys.readouterr()

    def files(d):
        return {p.name: p.read_bytes() for p in sorted(d.iterdir()) if p.is_file()}

    same = files(a) == files(b)
    verdict("12 manifest replay", codes == [0, 0] and same,
            f"exit codes {codes}, {len(files(a))} files identical {same}")
