"""Toy optimisation testbed: seeded problem generators and two anytime optimisers.

Time is counted in objective evaluations.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from .trajectories import Instance, Trajectory, run_anytime

GENERATORS = ("sphere", "rastrigin", "quadratic")


@dataclass
class ToyProblem:
    kind: str
    dim: int
    center: np.ndarray
    matrix: np.ndarray | None = None
    lower: np.ndarray = field(init=False)
    upper: np.ndarray = field(init=False)

    def __post_init__(self):
        self.lower = np.full(self.dim, -5.0)
        self.upper = np.full(self.dim, 5.0)

    def __call__(self, x: np.ndarray) -> float:
        z = np.asarray(x, dtype=float) - self.center
        if self.kind == "sphere":
            return float(z @ z)
        if self.kind == "rastrigin":
            return float(10 * self.dim + np.sum(z * z - 10 * np.cos(2 * np.pi * z)))
        return float(z @ self.matrix @ z)


def make_problem(kind: str, dim: int, seed: int, shifted: bool = True) -> ToyProblem:
    """Instance of a generator; ``shifted=False`` puts the optimum (value 0) at the origin."""
    if kind not in GENERATORS:
        raise ValueError(f"unknown generator {kind!r}; choose from {GENERATORS}")
    if dim < 1:
        raise ValueError("dim must be >= 1")
    rng = np.random.default_rng(seed)
    center = rng.uniform(-4, 4, size=dim) if shifted else np.zeros(dim)
    matrix = None
    if kind == "quadratic":
        Q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
        eig = 10 ** rng.uniform(-2, 2, size=dim)
        matrix = (Q * eig) @ Q.T
    return ToyProblem(kind, dim, center, matrix)


class RandomSearch:
    """Uniform sampling in the box."""

    def __init__(self, name: str = "random_search"):
        self.name = name

    def optimize(self, problem, evaluate, rng):
        while True:
            evaluate(rng.uniform(problem.lower, problem.upper))


class OnePlusOneES:
    """(1+1)-ES with the 1/5 success rule (step factors exp(1/3) and exp(-1/12))."""

    def __init__(self, name: str = "one_plus_one_es", sigma0: float = 0.2):
        self.name = name
        self.sigma0 = sigma0

    def optimize(self, problem, evaluate, rng):
        x = rng.uniform(problem.lower, problem.upper)
        fx = evaluate(x)
        sigma = self.sigma0 * float(np.mean(problem.upper - problem.lower))
        while True:
            y = np.clip(x + sigma * rng.standard_normal(problem.dim), problem.lower, problem.upper)
            fy = evaluate(y)
            if fy <= fx:
                x, fx = y, fy
                sigma *= np.exp(1 / 3)
            else:
                sigma *= np.exp(-1 / 12)


def default_algorithms() -> dict:
    return {a.name: a for a in (RandomSearch(), OnePlusOneES())}


def _seed(*parts) -> int:
    words = [p if isinstance(p, int) else zlib.crc32(str(p).encode()) for p in parts]
    return int(np.random.SeedSequence(words).generate_state(1, np.uint64)[0])


class ToyBenchmark:
    """Benchmark over one toy generator: instance(index) and run(algorithm, instance, horizon)."""

    def __init__(self, generator: str = "sphere", dim: int = 5, algorithms: dict | None = None,
                 seed: int = 0, shifted: bool = True):
        if generator not in GENERATORS:
            raise ValueError(f"unknown generator {generator!r}")
        self.generator = generator
        self.dim = dim
        self.seed = int(seed)
        self.shifted = shifted
        self.registry = dict(algorithms) if algorithms is not None else default_algorithms()

    @property
    def algorithms(self) -> tuple[str, ...]:
        return tuple(self.registry)

    def instance(self, index: int) -> Instance:
        return Instance(self.generator, int(index), _seed(self.seed, int(index)))

    def problem(self, instance: Instance) -> ToyProblem:
        return make_problem(self.generator, self.dim, instance.seed, self.shifted)

    def run(self, algorithm: str, instance: Instance, horizon: float) -> Trajectory:
        alg = self.registry[algorithm]
        return run_anytime(alg, instance, self.problem(instance), horizon,
                           _seed(instance.seed, algorithm))

    def trace_from_json(self, d: dict) -> Trajectory:
        return Trajectory.from_json(d)
