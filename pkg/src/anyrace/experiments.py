"""Synthetic Pareto-recovery protocol shared by the acceptance suite and scripts/."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .inference import InferenceConfig
from .race import ModelSpec, RaceConfig, run_race
from .synth import SyntheticBenchmark, sample_ground_truth, true_pareto_set
from .trajectories import TimeGrid


@dataclass
class RecoverySetup:
    n: int = 5
    T: int = 20
    model: str = "gp_exact"
    method: str = "laplace"
    ell_prior: tuple[float, float] = (5.0, 2.0)  # inference hyperprior, sharper than the truth's
    alpha: float = 0.99
    epsilon: float = 0.05
    b_init: int = 8
    b_min: int = 8
    b_max: int = 64
    max_rounds: int = 200

    def grid(self) -> TimeGrid:
        return TimeGrid.uniform(1, self.T, self.T)

    def race_config(self, seed: int) -> RaceConfig:
        knobs = {"ell_prior": tuple(self.ell_prior)} if self.model in ("gp_exact", "gp_hsgp") else {}
        return RaceConfig(self.grid(), alpha=self.alpha, epsilon=self.epsilon,
                          model=ModelSpec(self.model, knobs),
                          inference=InferenceConfig(method=self.method),
                          elimination="joint", resolution="crossing", b_init=self.b_init,
                          b_min=self.b_min, b_max=self.b_max, max_rounds=self.max_rounds, seed=seed)


@dataclass
class RecoveryOutcome:
    rep: int
    true_set: list[str]
    estimated: list[str]
    resolved: bool
    rounds: int
    instances: int
    cost: float
    baseline_cost: float
    seconds: float
    # extra member -> (closest dominating true member, its best win probability against it)
    extras: dict = field(default_factory=dict)

    @property
    def covers_truth(self) -> bool:
        return set(self.true_set) <= set(self.estimated)

    def extras_in_rope(self, epsilon: float) -> bool:
        return all(abs(w - 0.5) <= epsilon for _, w in self.extras.values())

    def to_dict(self) -> dict:
        return asdict(self)


def closest_member(theta: np.ndarray, algorithms, x: str, members) -> tuple[str, float]:
    """The true member that dominates ``x`` most narrowly, and x's best win probability against it.

    For a dominator m this is max_t theta_x / (theta_x + theta_m), which stays
    below 0.5; ``x`` is within the epsilon-ROPE of m when it reaches 0.5 - epsilon.
    Falls back to every member when none dominates ``x``.
    """
    i = algorithms.index(x)
    cols = {m: algorithms.index(m) for m in sorted(members)}
    doms = [m for m, j in cols.items() if np.all(theta[:, j] > theta[:, i])] or list(cols)
    best = None
    for m in doms:
        j = cols[m]
        w = float(np.max(theta[:, i] / (theta[:, i] + theta[:, j])))
        if best is None or w > best[1]:
            best = (m, w)
    return best


def run_recovery(rep: int, setup: RecoverySetup | None = None) -> RecoveryOutcome:
    """One replication: draw a ground truth with seed ``rep``, race it, compare sets."""
    setup = setup or RecoverySetup()
    grid = setup.grid()
    truth = sample_ground_truth(setup.n, grid, rep)
    bench = SyntheticBenchmark(truth, seed=rep)
    start = time.perf_counter()
    res = run_race(setup.race_config(rep), truth.algorithms, bench)
    elapsed = time.perf_counter() - start
    P = true_pareto_set(truth)
    extras = {x: closest_member(truth.theta_star, truth.algorithms, x, P)
              for x in sorted(set(res.pareto_set) - P)}
    return RecoveryOutcome(rep, sorted(P), list(res.pareto_set), res.resolved, len(res.rounds),
                           len(res.state.instance_log), res.state.cost, res.state.baseline_cost,
                           elapsed, extras)


__all__ = ["RecoverySetup", "RecoveryOutcome", "run_recovery", "closest_member"]
