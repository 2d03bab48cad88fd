"""The racing loop: sample instances, refit, eliminate, resolve, adapt.

Each round runs every still-unresolved candidate on a fresh batch of
instances, but only up to the last timepoint where that candidate still has
an open comparison.  The posterior is refit on the full ranking archive,
dominated candidates are dropped, decided (timepoint, pair) cells are latched
and the batch size is doubled or halved depending on progress.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .beliefs import (MODES_ELIMINATION, MODES_RESOLUTION, ResolutionMatrix, anytime_table,
                      check_elimination, pointwise_table, update_resolution)
from .inference import InferenceConfig, RatingSamples, posterior_update
from .priors import KINDS, make_prior
from .trajectories import Instance, RankingObservation, TiePolicy, TimeGrid, rankings_from_trajectories

log = logging.getLogger(__name__)


class Benchmark(Protocol):
    def instance(self, index: int) -> Instance: ...

    def run(self, algorithm: str, instance: Instance, horizon: float): ...

    def trace_from_json(self, d: dict): ...


class ConfigError(ValueError):
    """Invalid race configuration; ``field`` names the offending entry."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass
class ModelSpec:
    kind: str = "independent_dirichlet"
    knobs: dict = field(default_factory=dict)

    def build(self, n: int, grid: TimeGrid):
        return make_prior(self.kind, n, grid, **self.knobs)


@dataclass
class RaceConfig:
    grid: TimeGrid
    alpha: float = 0.99
    epsilon: float = 0.05
    model: ModelSpec = field(default_factory=ModelSpec)
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    elimination: str = "auto"  # auto -> pointwise for independent_dirichlet, else joint
    resolution: str = "crossing"
    b_init: int = 8
    b_min: int = 8
    b_max: int = 64
    max_rounds: int = 200
    seed: int = 0
    tie_policy: TiePolicy = field(default_factory=TiePolicy)
    truncate: bool = True
    replay: int | None = None  # cached instances replayed by a newcomer; None = current b

    def __post_init__(self):
        if not 0.5 < self.alpha <= 1:
            raise ConfigError("alpha", "must lie in (0.5, 1]")
        if not 0 <= self.epsilon < 0.5:
            raise ConfigError("epsilon", "must lie in [0, 0.5)")
        if self.model.kind not in KINDS:
            raise ConfigError("model.kind", f"unknown prior kind {self.model.kind!r}")
        if self.elimination not in ("auto",) + MODES_ELIMINATION:
            raise ConfigError("elimination", f"must be auto, pointwise or joint, got {self.elimination!r}")
        if self.resolution not in MODES_RESOLUTION:
            raise ConfigError("resolution", f"must be strict or crossing, got {self.resolution!r}")
        if not 1 <= self.b_min <= self.b_init <= self.b_max:
            raise ConfigError("b_init", "need 1 <= b_min <= b_init <= b_max")
        if self.max_rounds < 1:
            raise ConfigError("max_rounds", "must be >= 1")

    @property
    def elimination_mode(self) -> str:
        if self.elimination != "auto":
            return self.elimination
        return "pointwise" if self.model.kind == "independent_dirichlet" else "joint"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid"] = self.grid.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> RaceConfig:
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown config field")
        if "grid" not in d:
            raise ConfigError("grid", "missing")
        try:
            d["grid"] = TimeGrid.from_dict(d["grid"])
        except (KeyError, TypeError, ValueError) as err:
            raise ConfigError("grid", str(err)) from None
        if "model" in d:
            m = d["model"]
            if not isinstance(m, dict) or "kind" not in m:
                raise ConfigError("model.kind", "missing")
            d["model"] = ModelSpec(m["kind"], dict(m.get("knobs", {})))
        for name, typ in (("inference", InferenceConfig), ("tie_policy", TiePolicy)):
            if name in d:
                try:
                    d[name] = typ(**d[name])
                except TypeError as err:
                    raise ConfigError(name, str(err)) from None
                except ValueError as err:
                    raise ConfigError(name, str(err)) from None
        return cls(**d)


def adapt_batch_size(b: int, resolved: int, open_at_start: int, b_min: int, b_max: int) -> int:
    """Double when nothing resolved, halve when more than 20% of open cells resolved."""
    if resolved == 0:
        return min(2 * b, b_max)
    if open_at_start > 0 and resolved / open_at_start > 0.2:
        return max(b // 2, b_min)
    return b


@dataclass
class RaceState:
    algorithms: list[str]
    candidates: list[str]
    resolution: ResolutionMatrix
    batch_size: int
    eliminated: dict[str, tuple[int, str]] = field(default_factory=dict)
    round: int = 0
    next_instance: int = 0
    instance_log: list[Instance] = field(default_factory=list)
    runs: dict[tuple[str, str], object] = field(default_factory=dict)
    rankings: dict[str, list[RankingObservation]] = field(default_factory=dict)
    cost: float = 0.0
    baseline_cost: float = 0.0
    skipped: dict[str, list[int]] = field(default_factory=dict)

    @classmethod
    def fresh(cls, algorithms: Sequence[str], config: RaceConfig) -> RaceState:
        algorithms = list(algorithms)
        if len(algorithms) < 2:
            raise ValueError("a race needs at least 2 algorithms")
        if len(set(algorithms)) != len(algorithms):
            raise ValueError("duplicate algorithm ids")
        return cls(algorithms, list(algorithms), ResolutionMatrix(len(config.grid), list(algorithms)),
                   config.b_init)

    def observations(self) -> list[RankingObservation]:
        out = []
        for inst in self.instance_log:
            out.extend(self.rankings.get(inst.id, []))
        return out

    def to_json(self) -> dict:
        """Checkpoint without runs (those live in the append-only run archive)."""
        return {"algorithms": self.algorithms, "candidates": self.candidates,
                "eliminated": {a: list(v) for a, v in sorted(self.eliminated.items())},
                "resolution": self.resolution.to_json(), "batch_size": self.batch_size,
                "round": self.round, "next_instance": self.next_instance,
                "instances": [[i.generator, i.index, i.seed] for i in self.instance_log],
                "cost": self.cost, "baseline_cost": self.baseline_cost}

    def digest(self) -> str:
        runs = sorted(json.dumps(r.to_json(), sort_keys=True) for r in self.runs.values())
        blob = json.dumps([self.to_json(), runs], sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()


def unresolved_algorithms(state: RaceState) -> set[str]:
    return state.resolution.unresolved_algorithms(state.candidates)


def max_unresolved_timepoint(state: RaceState, algorithm: str, grid: TimeGrid) -> float | None:
    """Last grid time with an open comparison involving ``algorithm`` (None if none)."""
    if algorithm not in state.candidates:
        raise ValueError(f"{algorithm!r} is not a candidate")
    k = state.resolution.max_unresolved_index(algorithm, state.candidates)
    return None if k is None else grid.points[k]


def _rank_instance(state: RaceState, inst: Instance, config: RaceConfig) -> None:
    runs = [r for (iid, _), r in sorted(state.runs.items()) if iid == inst.id]
    diag: dict = {}
    # tie subsampling gets its own stream per instance so regeneration is reproducible
    rng = np.random.default_rng([config.seed, inst.index, 1])
    state.rankings[inst.id] = rankings_from_trajectories(runs, config.grid, config.tie_policy,
                                                         rng, diag)
    if diag.get("skipped"):
        state.skipped[inst.id] = sorted(set(diag["skipped"]))


def fit_posterior(state: RaceState, config: RaceConfig, rng) -> RatingSamples:
    model = config.model.build(len(state.algorithms), config.grid)
    return posterior_update(state.observations(), model, state.algorithms, config.grid,
                            config.inference, rng)


def _posterior_summary(samples: RatingSamples, candidates: Sequence[str]) -> dict:
    mean = samples.mean()
    P = anytime_table(samples)
    Pw = pointwise_table(samples).min(axis=0)
    algs = list(samples.algorithms)
    dom = {}
    for a in candidates:
        i = algs.index(a)
        others = [algs.index(b) for b in candidates if b != a]
        dom[a] = {"anytime": float(max((P[j, i] for j in others), default=0.0)),
                  "pointwise": float(max((Pw[j, i] for j in others), default=0.0))}
    # timepoint-independent models have no joint posterior: anytime numbers multiply marginals
    basis = "joint" if samples.joint else "product_of_marginals"
    return {"mean": {a: mean[:, algs.index(a)].tolist() for a in algs},
            "max_dominated_prob": dom, "anytime_basis": basis}


def race_round(state: RaceState, config: RaceConfig, benchmark: Benchmark) -> tuple[dict, RatingSamples | None]:
    """Run one round in place; returns the round report and the refit posterior."""
    grid = config.grid
    active = sorted(unresolved_algorithms(state))
    if not active:
        raise RuntimeError("race already fully resolved")
    state.round += 1
    rnd = state.round
    open_start = state.resolution.open_cells(state.candidates)
    horizons = {}
    for a in active:
        tau = max_unresolved_timepoint(state, a, grid)
        horizons[a] = tau if config.truncate else grid.points[-1]
    b = state.batch_size
    new_instances = []
    for _ in range(b):
        inst = benchmark.instance(state.next_instance)
        state.next_instance += 1
        state.instance_log.append(inst)
        new_instances.append(inst)
        for a in active:
            if (inst.id, a) not in state.runs:
                run = benchmark.run(a, inst, horizons[a])
                state.runs[(inst.id, a)] = run
                state.cost += float(run.horizon)
        state.baseline_cost += len(state.algorithms) * grid.points[-1]
        _rank_instance(state, inst, config)

    samples = fit_posterior(state, config, np.random.default_rng([config.seed, rnd]))
    report = {"round": rnd, "instances": len(state.instance_log), "new_instances": b,
              "sampled": {a: horizons[a] for a in active}, "batch_size": b,
              "open_cells_start": open_start, "converged": samples.converged,
              "method": samples.method, "eliminated": [], "newly_resolved": 0,
              "flagged": [], "cost": state.cost}
    if not samples.converged:
        log.warning("round %d: inference unconverged; nothing latched", rnd)
        resolved = 0
    else:
        resolved = 0
        for loser, winner in check_elimination(state.candidates, samples, config.alpha,
                                               config.elimination_mode):
            state.eliminated[loser] = (rnd, winner)
            report["eliminated"].append([loser, winner])
        for loser, _ in report["eliminated"]:
            state.candidates.remove(loser)
            resolved += state.resolution.eliminate(loser)
        upd = update_resolution(state.resolution, samples, config.alpha, config.epsilon,
                                config.resolution, state.candidates,
                                hold_dominance=config.elimination_mode == "joint")
        state.resolution = upd.matrix
        resolved += len(upd.newly)
        report["flagged"] = [list(f) for f in upd.flagged]
    state.batch_size = adapt_batch_size(b, resolved, open_start, config.b_min, config.b_max)
    report.update({"newly_resolved": resolved, "next_batch_size": state.batch_size,
                   "candidates": list(state.candidates),
                   "open_cells_end": state.resolution.open_cells(state.candidates),
                   "diagnostics": {k: v for k, v in samples.diagnostics.items()
                                   if k in ("rhat_max", "ess_min", "divergences", "map_grad_norm",
                                            "ridge", "converged")},
                   "posterior": _posterior_summary(samples, state.candidates)})
    return report, samples


def add_algorithm(state: RaceState, config: RaceConfig, benchmark: Benchmark, algorithm: str) -> dict:
    """Register a newcomer and replay it on the newest cached instances."""
    if algorithm in state.algorithms:
        raise ValueError(f"algorithm {algorithm!r} already registered")
    state.algorithms.append(algorithm)
    state.candidates.append(algorithm)
    state.resolution.add_algorithm(algorithm)
    count = config.replay if config.replay is not None else state.batch_size
    replayed = []
    for inst in list(reversed(state.instance_log))[:count]:
        run = benchmark.run(algorithm, inst, config.grid.points[-1])
        state.runs[(inst.id, algorithm)] = run
        state.cost += float(run.horizon)
        _rank_instance(state, inst, config)
        replayed.append(inst.id)
    return {"added": algorithm, "replayed": replayed}


@dataclass
class RaceResult:
    pareto_set: list[str]
    samples: RatingSamples | None
    rounds: list[dict]
    state: RaceState
    resolved: bool

    @property
    def status(self) -> str:
        return "resolved" if self.resolved else "partial"


class RaceRecorder:
    """Persists checkpoint, run archive and round log into a directory."""

    def __init__(self, out: str | Path):
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.state_path = self.out / "state.json"
        self.archive_path = self.out / "runs.jsonl"
        self.rounds_path = self.out / "rounds.jsonl"
        self._written: set[tuple[str, str]] = set()

    def start(self, state: RaceState, config: RaceConfig, fresh: bool = True) -> None:
        if fresh:
            for p in (self.archive_path, self.rounds_path):
                p.write_text("")
        self._written = set(state.runs)
        self.checkpoint(state, config)

    def round(self, state: RaceState, config: RaceConfig, report: dict) -> None:
        new = [k for k in sorted(state.runs) if k not in self._written]
        with open(self.archive_path, "a", encoding="utf-8") as fh:
            for k in new:
                fh.write(json.dumps(state.runs[k].to_json(), sort_keys=True) + "\n")
        self._written.update(new)
        with open(self.rounds_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(report, sort_keys=True) + "\n")
        self.checkpoint(state, config)

    def checkpoint(self, state: RaceState, config: RaceConfig) -> None:
        blob = {"config": config.to_dict(), "state": state.to_json()}
        tmp = self.state_path.with_suffix(".tmp")
        tmp.write_text(json.dumps(blob, indent=2, sort_keys=True) + "\n")
        tmp.replace(self.state_path)


def load_state(out: str | Path, benchmark: Benchmark) -> tuple[RaceState, RaceConfig]:
    """Rebuild a race from its checkpoint and run archive."""
    out = Path(out)
    blob = json.loads((out / "state.json").read_text())
    config = RaceConfig.from_dict(blob["config"])
    s = blob["state"]
    res = ResolutionMatrix.from_json(s["resolution"])
    state = RaceState(list(s["algorithms"]), list(s["candidates"]), res, int(s["batch_size"]),
                      {a: (int(v[0]), v[1]) for a, v in s["eliminated"].items()},
                      int(s["round"]), int(s["next_instance"]),
                      [Instance(g, int(i), int(seed)) for g, i, seed in s["instances"]],
                      cost=float(s["cost"]), baseline_cost=float(s["baseline_cost"]))
    archive = out / "runs.jsonl"
    if archive.exists():
        for line in archive.read_text().splitlines():
            if line.strip():
                run = benchmark.trace_from_json(json.loads(line))
                state.runs[(run.instance_id, run.algorithm_id)] = run
    for inst in state.instance_log:
        _rank_instance(state, inst, config)
    return state, config


def continue_race(state: RaceState, config: RaceConfig, benchmark: Benchmark,
                  recorder: RaceRecorder | None = None, rounds: list[dict] | None = None
                  ) -> RaceResult:
    rounds = list(rounds or [])
    samples = None
    while unresolved_algorithms(state) and state.round < config.max_rounds:
        report, samples = race_round(state, config, benchmark)
        rounds.append(report)
        log.info("round %d: %d candidates, %d open cells, b=%d", report["round"],
                 len(state.candidates), report["open_cells_end"], state.batch_size)
        if recorder is not None:
            recorder.round(state, config, report)
    resolved = not unresolved_algorithms(state)
    if samples is None and state.instance_log:
        samples = fit_posterior(state, config, np.random.default_rng([config.seed, state.round]))
    return RaceResult(sorted(state.candidates), samples, rounds, state, resolved)


def run_race(config: RaceConfig, algorithms: Sequence[str], benchmark: Benchmark,
             recorder: RaceRecorder | None = None) -> RaceResult:
    """Race ``algorithms`` until every candidate pair is resolved or max_rounds is hit."""
    state = RaceState.fresh(algorithms, config)
    if recorder is not None:
        recorder.start(state, config)
    return continue_race(state, config, benchmark, recorder)
