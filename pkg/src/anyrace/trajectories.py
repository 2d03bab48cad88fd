"""Best-so-far trajectories and their conversion into ranking observations.

A trajectory stores only the best-so-far objective value as a step function
of time (evaluations or seconds).  Comparing the trajectories of several
algorithms on a shared instance at each grid timepoint yields one ranking
per timepoint; exact ties are expanded into weighted orderings.
"""

from __future__ import annotations

import itertools
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator, Protocol, Sequence

import numpy as np

log = logging.getLogger(__name__)

# Value reported before an algorithm has evaluated anything, and at every
# timepoint of a failed run. Ranks below any real value; equal sentinels tie.
NO_VALUE = math.inf


class BudgetExceededError(ValueError):
    """Raised when a trajectory is queried beyond the budget it was run for."""


@dataclass(frozen=True)
class TimeGrid:
    points: tuple[float, ...]
    spacing: str = "explicit"

    def __post_init__(self):
        pts = tuple(float(p) for p in self.points)
        object.__setattr__(self, "points", pts)
        if self.spacing not in ("uniform", "logarithmic", "explicit"):
            raise ValueError(f"unknown spacing {self.spacing!r}")
        if len(pts) < 2:
            raise ValueError("a time grid needs at least 2 points")
        if any(b <= a for a, b in zip(pts, pts[1:])):
            raise ValueError("grid points must be strictly increasing")
        if self.spacing == "logarithmic" and pts[0] <= 0:
            raise ValueError("logarithmic grids need positive points")

    @classmethod
    def uniform(cls, start: float, stop: float, num: int) -> TimeGrid:
        return cls(tuple(np.linspace(start, stop, num)), "uniform")

    @classmethod
    def logarithmic(cls, start: float, stop: float, num: int) -> TimeGrid:
        return cls(tuple(np.geomspace(start, stop, num)), "logarithmic")

    def __len__(self) -> int:
        return len(self.points)

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.points)

    def normalized(self) -> np.ndarray:
        """Grid coordinates rescaled to [0, 1] (in log-time for log grids).

        Temporal priors work on this coordinate so that their lengthscale
        hyperpriors do not depend on the budget unit.
        """
        x = np.log(self.array) if self.spacing == "logarithmic" else self.array
        return (x - x[0]) / (x[-1] - x[0])

    def to_dict(self) -> dict:
        return {"points": list(self.points), "spacing": self.spacing}

    @classmethod
    def from_dict(cls, d: dict) -> TimeGrid:
        if "points" in d:
            return cls(tuple(d["points"]), d.get("spacing", "explicit"))
        spacing = d.get("spacing", "uniform")
        make = cls.logarithmic if spacing == "logarithmic" else cls.uniform
        return make(d["start"], d["stop"], int(d["num"]))


@dataclass
class Trajectory:
    """Monotone best-so-far values of one run, stored at improvement times."""

    algorithm_id: str
    instance_id: str
    seed: int
    times: np.ndarray
    values: np.ndarray
    horizon: float
    failed: bool = False

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float).reshape(-1)
        self.values = np.asarray(self.values, dtype=float).reshape(-1)
        if self.times.shape != self.values.shape:
            raise ValueError("times and values differ in length")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("sample times must be strictly increasing")
        if np.any(np.diff(self.values) > 0):
            raise ValueError("best-so-far values must be non-increasing")
        if len(self.times) and self.horizon < self.times[-1]:
            raise ValueError("horizon precedes the last sample")

    @classmethod
    def from_samples(cls, algorithm_id, instance_id, seed, samples, horizon, failed=False):
        samples = list(samples)
        times = [s[0] for s in samples]
        values = [s[1] for s in samples]
        return cls(algorithm_id, instance_id, int(seed), times, values, float(horizon), failed)

    @property
    def samples(self) -> list[tuple[float, float]]:
        return list(zip(self.times.tolist(), self.values.tolist()))

    def evaluate_at(self, t: float) -> float:
        return evaluate_at(self, t)

    def to_json(self) -> dict:
        return {
            "algorithm": self.algorithm_id,
            "instance": self.instance_id,
            "seed": self.seed,
            "horizon": self.horizon,
            # a failed run is archived without samples: it ranks worst either way
            "samples": [] if self.failed else [[t, v] for t, v in self.samples],
        }

    @classmethod
    def from_json(cls, d: dict) -> Trajectory:
        return cls.from_samples(d["algorithm"], d["instance"], d["seed"], d["samples"], d["horizon"])


def evaluate_at(traj, t: float) -> float:
    """Best-so-far value of ``traj`` at time ``t`` (step-function lookup).

    Returns ``NO_VALUE`` before the first recorded sample and for failed runs.
    """
    if t > traj.horizon:
        raise BudgetExceededError(
            f"{traj.algorithm_id} on {traj.instance_id} ran to {traj.horizon}, queried at {t}"
        )
    if getattr(traj, "failed", False):
        return NO_VALUE
    k = int(np.searchsorted(traj.times, t, side="right")) - 1
    if k < 0:
        return NO_VALUE
    return float(traj.values[k])


@dataclass(frozen=True)
class RankingObservation:
    """One (possibly partial, possibly weighted) ordering at a grid timepoint.

    ``ordering`` lists algorithm ids best first.  ``tail`` holds algorithms
    that took part but whose order is unobserved (top-m partial ranking):
    they enter the choice denominators but not the numerators.
    """

    timepoint: int
    ordering: tuple[str, ...]
    weight: float = 1.0
    tail: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        object.__setattr__(self, "ordering", tuple(self.ordering))
        object.__setattr__(self, "tail", frozenset(self.tail))
        if len(set(self.ordering)) != len(self.ordering):
            raise ValueError(f"duplicate ids in ordering {self.ordering}")
        if self.tail & set(self.ordering):
            raise ValueError("tail overlaps the ordering")
        if not self.weight > 0:
            raise ValueError("observation weight must be positive")

    @property
    def items(self) -> tuple[str, ...]:
        return self.ordering + tuple(sorted(self.tail))

    def to_json(self) -> dict:
        d = {"t": self.timepoint, "order": list(self.ordering), "w": self.weight}
        if self.tail:
            d["tail"] = sorted(self.tail)
        return d

    @classmethod
    def from_json(cls, d: dict) -> RankingObservation:
        return cls(d["t"], tuple(d["order"]), d["w"], frozenset(d.get("tail", ())))


@dataclass(frozen=True)
class TiePolicy:
    max_expand: int = 24
    subsample: int = 24
    atol: float = 0.0

    def __post_init__(self):
        if self.max_expand < 1 or self.subsample < 1:
            raise ValueError("max_expand and subsample must be >= 1")
        if self.atol < 0:
            raise ValueError("atol must be non-negative")


def expand_ties(groups: Sequence[Sequence[str]], max_expand: int = 24, subsample: int = 24,
                rng: np.random.Generator | None = None) -> list[tuple[tuple[str, ...], float]]:
    """Replace tie groups (best group first) by weighted strict orderings.

    Every group of size k is permuted; with full enumeration each ordering
    gets weight prod(1/k!).  When the enumeration would exceed ``max_expand``
    orderings, ``subsample`` orderings are drawn uniformly instead, each with
    weight 1/subsample, which keeps the expected likelihood contribution.
    """
    if max_expand < 1 or subsample < 1:
        raise ValueError("max_expand and subsample must be >= 1")
    groups = [tuple(g) for g in groups if len(g)]
    total = math.prod(math.factorial(len(g)) for g in groups)
    if total <= max_expand:
        w = 1.0 / total
        return [
            (tuple(itertools.chain.from_iterable(combo)), w)
            for combo in itertools.product(*(itertools.permutations(g) for g in groups))
        ]
    rng = np.random.default_rng() if rng is None else rng
    out = []
    for _ in range(subsample):
        order = []
        for g in groups:
            order.extend(g[i] for i in rng.permutation(len(g)))
        out.append((tuple(order), 1.0 / subsample))
    return out


def tie_groups(values: dict[str, float], atol: float = 0.0) -> list[list[str]]:
    """Group algorithm ids by value, best (smallest) first.

    Consecutive sorted values within ``atol`` of each other share a group;
    ``NO_VALUE`` entries always form one trailing group.
    """
    items = sorted(values.items(), key=lambda kv: (kv[1], kv[0]))
    groups: list[list[str]] = []
    prev = None
    for name, v in items:
        if groups and (v == prev or (math.isfinite(v) and v - prev <= atol)):
            groups[-1].append(name)
        else:
            groups.append([name])
        prev = v
    return groups


def rankings_from_trajectories(
    trajs: Iterable,
    grid: TimeGrid,
    tie_policy: TiePolicy = TiePolicy(),
    rng: np.random.Generator | None = None,
    diagnostics: dict | None = None,
) -> list[RankingObservation]:
    """Rank the trajectories of one instance at every grid timepoint.

    Algorithms whose horizon ends before a timepoint are left out of that
    timepoint's ranking.  Timepoints with fewer than two rankable algorithms,
    or where nobody has a value yet, are skipped and listed under
    ``diagnostics["skipped"]``.
    """
    trajs = list(trajs)
    if len({tr.instance_id for tr in trajs}) > 1:
        raise ValueError("trajectories must share one instance")
    if len({tr.algorithm_id for tr in trajs}) != len(trajs):
        raise ValueError("one trajectory per algorithm expected")
    rng = np.random.default_rng(0) if rng is None else rng
    out: list[RankingObservation] = []
    skipped = []
    for k, t in enumerate(grid.points):
        values = {tr.algorithm_id: evaluate_at(tr, t) for tr in trajs if tr.horizon >= t}
        if len(values) < 2 or all(v == NO_VALUE for v in values.values()):
            skipped.append(k)
            continue
        groups = tie_groups(values, tie_policy.atol)
        for order, w in expand_ties(groups, tie_policy.max_expand, tie_policy.subsample, rng):
            out.append(RankingObservation(k, order, w))
    if skipped:
        log.debug("skipped timepoints %s for instance %s", skipped,
                  trajs[0].instance_id if trajs else "?")
    if diagnostics is not None:
        diagnostics.setdefault("skipped", []).extend(skipped)
    return out


# --- running algorithms -----------------------------------------------------


@dataclass(frozen=True)
class Instance:
    """A problem instance: generator name, index within the generator, seed."""

    generator: str
    index: int
    seed: int

    @property
    def id(self) -> str:
        return f"{self.generator}:{self.index}"


class Problem(Protocol):
    dim: int
    lower: np.ndarray
    upper: np.ndarray

    def __call__(self, x: np.ndarray) -> float: ...


class AnytimeAlgorithm(Protocol):
    name: str

    def optimize(self, problem: Problem, evaluate: Callable[[np.ndarray], float],
                 rng: np.random.Generator) -> None: ...


class _BudgetSpent(Exception):
    pass


class _Recorder:
    def __init__(self, problem, horizon):
        self.problem = problem
        self.horizon = horizon
        self.count = 0
        self.best = math.inf
        self.times: list[float] = []
        self.values: list[float] = []

    def __call__(self, x) -> float:
        if self.count >= self.horizon:
            raise _BudgetSpent
        self.count += 1
        y = float(self.problem(np.asarray(x, dtype=float)))
        if y < self.best:
            self.best = y
            self.times.append(float(self.count))
            self.values.append(y)
        if self.count >= self.horizon:
            raise _BudgetSpent
        return y


def run_anytime(algorithm, instance: Instance, problem: Problem, horizon: float,
                seed: int) -> Trajectory:
    """Run ``algorithm`` on ``problem`` for ``horizon`` evaluations.

    The time axis counts objective evaluations.  An exception raised by the
    algorithm marks the run as failed; failed runs rank worst everywhere.
    """
    if not horizon > 0:
        raise ValueError("horizon must be positive")
    rec = _Recorder(problem, int(math.floor(horizon)))
    rng = np.random.default_rng(seed)
    failed = False
    try:
        algorithm.optimize(problem, rec, rng)
    except _BudgetSpent:
        pass
    except Exception:  # noqa: BLE001 - any algorithm crash is a failed run
        log.warning("run of %s on %s failed", algorithm.name, instance.id, exc_info=True)
        failed = True
    return Trajectory(algorithm.name, instance.id, int(seed), rec.times, rec.values,
                      float(horizon), failed)


def merge_runs(runs: Iterable) -> list:
    """Order runs deterministically by (algorithm, instance, seed)."""
    return sorted(runs, key=lambda r: (r.algorithm_id, r.instance_id, r.seed))


# --- run archive --------------------------------------------------------------


def append_archive(path: str | Path, runs: Iterable) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        for run in runs:
            fh.write(json.dumps(run.to_json(), sort_keys=True) + "\n")


def read_archive(path: str | Path, factory=Trajectory.from_json) -> Iterator:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                yield factory(json.loads(line))
