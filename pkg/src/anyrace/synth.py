"""Synthetic ground truth for end-to-end checks.

True rating trajectories are drawn from a Matérn GP prior on Helmert latents;
rankings are simulated by perturbing log-ratings with standard Gumbel noise,
which is exactly the Plackett-Luce generating process.
"""

from __future__ import annotations

import csv
import logging
import string
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .plmodel import helmert, softmax
from .priors import MaternKernel, PriorError, _matern_unit, JITTER
from .trajectories import Instance, RankingObservation, TimeGrid

log = logging.getLogger(__name__)

COLLISION_TOL = 1e-6


def default_ids(n: int) -> tuple[str, ...]:
    if n <= 26:
        return tuple(string.ascii_uppercase[:n])
    return tuple(f"a{i:03d}" for i in range(n))


@dataclass(frozen=True)
class GroundTruth:
    theta_star: np.ndarray  # T x n
    grid: TimeGrid
    algorithms: tuple[str, ...]
    kernel: MaternKernel
    seed: int | None = None

    @property
    def mu_star(self) -> np.ndarray:
        return np.log(self.theta_star)

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "algorithm", "theta"])
            for k, t in enumerate(self.grid.points):
                for i, a in enumerate(self.algorithms):
                    w.writerow([repr(float(t)), a, repr(float(self.theta_star[k, i]))])
        return path


def _collides(theta: np.ndarray) -> bool:
    n = theta.shape[1]
    for i in range(n):
        for j in range(i + 1, n):
            if np.all(np.abs(theta[:, i] - theta[:, j]) < COLLISION_TOL):
                return True
    return False


def sample_ground_truth(n: int, grid: TimeGrid, rng: np.random.Generator | int | None = None,
                        sigma_prior=(0.0, 0.5), ell_prior=(5.0, 3.0), nu: float = 1.5,
                        algorithms=None, max_tries: int = 100) -> GroundTruth:
    """Draw true ratings theta*(t) from the Matérn GP generating process."""
    if n < 2:
        raise ValueError("need n >= 2")
    seed = rng if isinstance(rng, (int, np.integer)) else None
    rng = np.random.default_rng(rng)
    algorithms = tuple(algorithms) if algorithms is not None else default_ids(n)
    x = grid.normalized()
    d = np.abs(x[:, None] - x[None, :])
    Q = helmert(n)
    for attempt in range(max_tries):
        sigma = float(np.exp(rng.normal(*sigma_prior)))
        ell = float(1.0 / rng.gamma(ell_prior[0], 1.0 / ell_prior[1]))
        C = _matern_unit(nu, d, ell)[0] + JITTER * np.eye(len(x))
        try:
            L = np.linalg.cholesky(C)
        except np.linalg.LinAlgError:
            log.info("ground truth: Cholesky failed at ell=%.3g, resampling", ell)
            continue
        eta = sigma * L @ rng.standard_normal((len(x), n - 1))
        theta = softmax(eta @ Q.T)
        if _collides(theta):
            log.info("ground truth: collision between trajectories, resampling")
            continue
        return GroundTruth(theta, grid, algorithms, MaternKernel(nu, sigma, ell), seed)
    raise PriorError(f"no valid ground truth after {max_tries} attempts")


def simulate_rankings(truth: GroundTruth, instances: int, rng: np.random.Generator | int | None = None
                      ) -> list[RankingObservation]:
    """Full rankings per instance and timepoint from Gumbel-perturbed log-ratings."""
    rng = np.random.default_rng(rng)
    T, n = truth.theta_star.shape
    mu = truth.mu_star
    out = []
    for _ in range(instances):
        g = mu + rng.gumbel(size=(T, n))
        order = np.argsort(-g, axis=1)
        for t in range(T):
            out.append(RankingObservation(t, tuple(truth.algorithms[i] for i in order[t])))
    return out


def dominates(theta: np.ndarray, b: int, a: int) -> bool:
    """b anytime-dominates a: strictly higher rating at every grid point."""
    return bool(np.all(theta[:, b] > theta[:, a]))


def true_pareto_set(truth: GroundTruth | np.ndarray, algorithms=None) -> set[str]:
    theta = truth.theta_star if isinstance(truth, GroundTruth) else np.asarray(truth)
    if algorithms is None:
        algorithms = truth.algorithms if isinstance(truth, GroundTruth) else default_ids(theta.shape[1])
    # vectorised: D[b, a] = b beats a everywhere
    D = np.all(theta[:, :, None] > theta[:, None, :], axis=0)
    return {algorithms[a] for a in range(theta.shape[1]) if not D[:, a].any()}


# --- synthetic benchmark -------------------------------------------------------------


@dataclass
class SyntheticTrace:
    """Trajectory stand-in whose value at each grid point is -(mu* + Gumbel).

    Values are noise draws, not best-so-far values, so they are not monotone;
    only the comparison across algorithms at a timepoint matters.
    """

    algorithm_id: str
    instance_id: str
    seed: int
    times: np.ndarray
    values: np.ndarray
    horizon: float
    failed: bool = False

    def to_json(self) -> dict:
        return {"algorithm": self.algorithm_id, "instance": self.instance_id, "seed": self.seed,
                "horizon": self.horizon,
                "samples": [[float(t), float(v)] for t, v in zip(self.times, self.values)]}

    @classmethod
    def from_json(cls, d: dict) -> SyntheticTrace:
        s = np.array(d["samples"], dtype=float).reshape(-1, 2)
        return cls(d["algorithm"], d["instance"], int(d["seed"]), s[:, 0], s[:, 1],
                   float(d["horizon"]))


def _stable_seed(*parts) -> int:
    words = [p if isinstance(p, int) else zlib.crc32(str(p).encode()) for p in parts]
    return int(np.random.SeedSequence(words).generate_state(1, np.uint64)[0])


class SyntheticBenchmark:
    """Instances whose rankings follow the Plackett-Luce model with ratings theta*.

    Noise is seeded per (instance, algorithm), so runs are reproducible and
    independent of which other algorithms are run.
    """

    generator = "synthetic"

    def __init__(self, truth: GroundTruth, seed: int = 0):
        self.truth = truth
        self.seed = int(seed)
        self.col = {a: i for i, a in enumerate(truth.algorithms)}

    @property
    def algorithms(self) -> tuple[str, ...]:
        return self.truth.algorithms

    def instance(self, index: int) -> Instance:
        return Instance(self.generator, int(index), _stable_seed(self.seed, int(index)))

    def run(self, algorithm: str, instance: Instance, horizon: float) -> SyntheticTrace:
        if not horizon > 0:
            raise ValueError("horizon must be positive")
        if algorithm not in self.col:
            raise KeyError(f"unknown algorithm {algorithm!r}")
        seed = _stable_seed(instance.seed, algorithm)
        rng = np.random.default_rng(seed)
        pts = self.truth.grid.array
        noise = rng.gumbel(size=len(pts))
        keep = pts <= horizon
        values = -(self.truth.mu_star[:, self.col[algorithm]] + noise)
        return SyntheticTrace(algorithm, instance.id, seed, pts[keep], values[keep], float(horizon))

    def trace_from_json(self, d: dict) -> SyntheticTrace:
        return SyntheticTrace.from_json(d)
