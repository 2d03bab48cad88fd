"""Experiment files: race settings plus a benchmark description, in JSON or TOML.

A complete annotated example (TOML)::

    seed = 0                        # drives instances, tie breaking and inference
    algorithms = ["A", "B", "C"]    # racers at the start; omit to race every benchmark algorithm

    [benchmark]
    kind = "synthetic"              # synthetic | toy | python
    n = 5                           # synthetic: number of ground-truth algorithms
    truth_seed = 0                  # synthetic: seed of the ground-truth draw
    # toy:    generator = "sphere", dim = 5, shifted = true,
    #         [benchmark.algorithms.es] type = "one_plus_one_es", sigma0 = 0.1
    # python: factory = "package.module:function"  (called with seed=..., **options)

    [race]
    alpha = 0.99
    epsilon = 0.05
    elimination = "auto"            # auto | pointwise | joint
    resolution = "crossing"         # strict | crossing
    b_init = 8
    b_min = 8
    b_max = 64
    max_rounds = 200

    [race.grid]
    spacing = "uniform"             # uniform | logarithmic; or give points = [...]
    start = 1
    stop = 20
    num = 20

    [race.model]
    kind = "gp_exact"
    knobs = { ell_prior = [5.0, 2.0] }

    [race.inference]
    method = "laplace"              # auto | laplace | hmc
"""

from __future__ import annotations

import hashlib
import importlib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

from .race import ConfigError, RaceConfig
from .synth import SyntheticBenchmark, sample_ground_truth
from .testbed import OnePlusOneES, RandomSearch, ToyBenchmark

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

TOY_TYPES = {"random_search": RandomSearch, "one_plus_one_es": OnePlusOneES}
BENCHMARK_KINDS = ("synthetic", "toy", "python")


@dataclass
class Experiment:
    race: RaceConfig
    benchmark: dict
    algorithms: list[str] | None = None
    seed: int = 0
    raw: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"seed": self.seed, "algorithms": self.algorithms, "benchmark": self.benchmark,
                "race": self.race.to_dict()}

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()


def read_file(path: str | Path) -> dict:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if path.suffix.lower() == ".toml":
        try:
            return tomllib.loads(text)
        except tomllib.TOMLDecodeError as err:
            raise ConfigError("file", f"{path}: {err}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as err:
        raise ConfigError("file", f"{path}: {err}") from None


def parse_experiment(d: dict, seed: int | None = None) -> Experiment:
    """Validate a config mapping; ``seed`` overrides the file's seed."""
    if not isinstance(d, dict):
        raise ConfigError("file", "top level must be a table")
    unknown = set(d) - {"seed", "algorithms", "benchmark", "race"}
    if unknown:
        raise ConfigError(sorted(unknown)[0], "unknown config field")
    s = int(d.get("seed", 0) if seed is None else seed)
    bench = dict(d.get("benchmark", {}))
    kind = bench.get("kind")
    if kind not in BENCHMARK_KINDS:
        raise ConfigError("benchmark.kind", f"must be one of {BENCHMARK_KINDS}, got {kind!r}")
    race = dict(d.get("race", {}))
    race["seed"] = s
    cfg = RaceConfig.from_dict(race)
    algs = d.get("algorithms")
    if algs is not None:
        if not isinstance(algs, list) or not all(isinstance(a, str) for a in algs):
            raise ConfigError("algorithms", "must be a list of ids")
        algs = list(algs)
    return Experiment(cfg, bench, algs, s, d)


def load_experiment(path: str | Path, seed: int | None = None) -> Experiment:
    return parse_experiment(read_file(path), seed)


def _toy_registry(spec: dict) -> dict:
    if not spec:
        return {a.name: a for a in (RandomSearch(), OnePlusOneES())}
    out = {}
    for name, opts in spec.items():
        opts = dict(opts)
        typ = opts.pop("type", name)
        if typ not in TOY_TYPES:
            raise ConfigError(f"benchmark.algorithms.{name}.type", f"unknown type {typ!r}")
        try:
            out[name] = TOY_TYPES[typ](name=name, **opts)
        except TypeError as err:
            raise ConfigError(f"benchmark.algorithms.{name}", str(err)) from None
    return out


def build_benchmark(exp: Experiment):
    """Instantiate the benchmark described by ``exp.benchmark``."""
    b = dict(exp.benchmark)
    kind = b.pop("kind")
    if kind == "synthetic":
        n = int(b.get("n", 5))
        truth = sample_ground_truth(n, exp.race.grid, int(b.get("truth_seed", exp.seed)),
                                    sigma_prior=tuple(b.get("sigma_prior", (0.0, 0.5))),
                                    ell_prior=tuple(b.get("ell_prior", (5.0, 3.0))),
                                    nu=float(b.get("nu", 1.5)))
        return SyntheticBenchmark(truth, seed=exp.seed)
    if kind == "toy":
        try:
            return ToyBenchmark(b.get("generator", "sphere"), int(b.get("dim", 5)),
                                _toy_registry(b.get("algorithms", {})), exp.seed,
                                bool(b.get("shifted", True)))
        except ValueError as err:
            raise ConfigError("benchmark.generator", str(err)) from None
    target = b.get("factory", "")
    mod, _, attr = target.partition(":")
    if not mod or not attr:
        raise ConfigError("benchmark.factory", "expected 'module:function'")
    try:
        factory = getattr(importlib.import_module(mod), attr)
    except (ImportError, AttributeError) as err:
        raise ConfigError("benchmark.factory", str(err)) from None
    return factory(seed=exp.seed, **b.get("options", {}))


def racers(exp: Experiment, benchmark) -> list[str]:
    available = list(benchmark.algorithms)
    algs = exp.algorithms if exp.algorithms is not None else available
    for a in algs:
        if a not in available:
            raise ConfigError("algorithms", f"{a!r} is not provided by the benchmark")
    return list(algs)
