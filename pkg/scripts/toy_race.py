#!/usr/bin/env python3
"""Race random search against a (1+1)-ES on a toy generator and print the selection.

    python scripts/toy_race.py --generator rastrigin --dim 5 --out results/toy
"""

from __future__ import annotations

import argparse
import logging
from pathlib import Path

from anyrace.inference import InferenceConfig
from anyrace.race import ModelSpec, RaceConfig, RaceRecorder, run_race
from anyrace.select import builtin_preferences, select, value_posterior
from anyrace.testbed import GENERATORS, ToyBenchmark
from anyrace.trajectories import TimeGrid


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--generator", default="sphere", choices=GENERATORS)
    p.add_argument("--dim", type=int, default=5)
    p.add_argument("--budget", type=float, default=1000, help="evaluations at the last grid point")
    p.add_argument("--T", type=int, default=10)
    p.add_argument("--model", default="random_walk")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path)
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO)

    bench = ToyBenchmark(args.generator, args.dim, seed=args.seed)
    grid = TimeGrid.logarithmic(10, args.budget, args.T)
    cfg = RaceConfig(grid, model=ModelSpec(args.model), inference=InferenceConfig(method="laplace"),
                     seed=args.seed)
    recorder = RaceRecorder(args.out) if args.out else None
    res = run_race(cfg, bench.algorithms, bench, recorder)
    print(f"{res.status}: Pareto set {res.pareto_set} after {len(res.rounds)} rounds, "
          f"{len(res.state.instance_log)} instances, cost {res.state.cost:.0f} "
          f"of {res.state.baseline_cost:.0f}")
    for name, u in builtin_preferences(grid).items():
        sel = select(value_posterior(res.samples, u), "p2bb")
        print(f"  {name:<12} best={sel.best}  P(best)={sel.ranking[0][1]:.3f}")


if __name__ == "__main__":
    main()
