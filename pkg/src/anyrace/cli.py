"""Command-line interface.

Exit codes: 0 race fully resolved (or command succeeded), 2 race stopped at
max_rounds with open pairs, 1 invalid input.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from collections import defaultdict
from pathlib import Path

import numpy as np

from . import __version__
from .config import Experiment, build_benchmark, load_experiment, parse_experiment, racers
from .inference import RatingSamples
from .race import (ConfigError, RaceRecorder, RaceResult, RaceState, add_algorithm,
                   continue_race, fit_posterior, load_state)
from .select import PreferenceError, parse_preference, portfolio_search, select, value_posterior
from .synth import sample_ground_truth
from .trajectories import TimeGrid

log = logging.getLogger("anyrace")

EXIT_OK, EXIT_ERROR, EXIT_PARTIAL = 0, 1, 2
MANIFEST = "manifest.json"


class CliError(Exception):
    pass


def _out_dir(arg: str | None) -> Path:
    out = arg or os.environ.get("ANYRACE_OUT")
    if not out:
        raise CliError("no output directory: pass --out or set ANYRACE_OUT")
    return Path(out)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_manifest(out: Path, exp: Experiment, events: list | None = None) -> dict:
    manifest = {"software": "anyrace", "version": __version__, "seed": exp.seed,
                "config_sha256": exp.digest(), "config": exp.to_dict(), "events": events or []}
    _write_json(out / MANIFEST, manifest)
    return manifest


def read_manifest(out: Path) -> dict:
    path = out / MANIFEST
    if not path.exists():
        raise CliError(f"{path} not found")
    return json.loads(path.read_text(encoding="utf-8"))


def experiment_from_manifest(manifest: dict) -> Experiment:
    cfg = manifest["config"]
    exp = parse_experiment({"seed": cfg["seed"], "algorithms": cfg["algorithms"],
                            "benchmark": cfg["benchmark"], "race": _race_section(cfg["race"])})
    if exp.digest() != manifest["config_sha256"]:
        raise CliError("manifest config hash mismatch")
    return exp


def _race_section(race: dict) -> dict:
    d = dict(race)
    d.pop("seed", None)
    return d


def _write_outputs(out: Path, result: RaceResult, exp: Experiment) -> None:
    state = result.state
    pareto = {"status": result.status, "pareto_set": result.pareto_set,
              "eliminated": {a: {"round": r, "by": w} for a, (r, w) in sorted(state.eliminated.items())},
              "rounds": state.round, "instances": len(state.instance_log),
              "cost": state.cost, "baseline_cost": state.baseline_cost}
    _write_json(out / "pareto.json", pareto)
    if result.samples is not None:
        result.samples.to_csv(out / "posterior.csv")


def _finish(out: Path, result: RaceResult, exp: Experiment) -> int:
    _write_outputs(out, result, exp)
    print(json.dumps({"status": result.status, "pareto_set": result.pareto_set,
                      "rounds": result.state.round}))
    return EXIT_OK if result.resolved else EXIT_PARTIAL


def _load_rounds(out: Path) -> list[dict]:
    path = out / "rounds.jsonl"
    if not path.exists():
        return []
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


# --- subcommands ---------------------------------------------------------------------


def cmd_race(args) -> int:
    if args.manifest:
        exp = experiment_from_manifest(json.loads(Path(args.manifest).read_text()))
        if args.seed is not None:
            raise CliError("--seed cannot be combined with --manifest")
    elif args.config:
        exp = load_experiment(args.config, args.seed)
    else:
        raise CliError("race needs --config or --manifest")
    if args.max_rounds is not None:
        exp.race.max_rounds = args.max_rounds
    out = _out_dir(args.out)
    bench = build_benchmark(exp)
    algs = racers(exp, bench)
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(out, exp)
    recorder = RaceRecorder(out)
    state = RaceState.fresh(algs, exp.race)
    recorder.start(state, exp.race)
    result = continue_race(state, exp.race, bench, recorder)
    return _finish(out, result, exp)


def _resume(out: Path, max_rounds: int | None):
    manifest = read_manifest(out)
    exp = experiment_from_manifest(manifest)
    bench = build_benchmark(exp)
    state, config = load_state(out, bench)
    if max_rounds is not None:
        config.max_rounds = max_rounds
    return manifest, exp, bench, state, config


def cmd_resume(args) -> int:
    out = _out_dir(args.out)
    manifest, exp, bench, state, config = _resume(out, args.max_rounds)
    recorder = RaceRecorder(out)
    recorder.start(state, config, fresh=False)
    result = continue_race(state, config, bench, recorder, _load_rounds(out))
    return _finish(out, result, exp)


def cmd_add(args) -> int:
    out = _out_dir(args.out)
    manifest, exp, bench, state, config = _resume(out, args.max_rounds)
    if args.algorithm not in bench.algorithms:
        raise CliError(f"benchmark does not provide algorithm {args.algorithm!r}")
    if args.algorithm in state.algorithms:
        raise CliError(f"algorithm {args.algorithm!r} already registered")
    recorder = RaceRecorder(out)
    recorder.start(state, config, fresh=False)
    info = add_algorithm(state, config, bench, args.algorithm)
    recorder.round(state, config, {"round": state.round, "event": "add", **info})
    manifest["events"].append({"add": args.algorithm, "after_round": state.round})
    _write_json(out / MANIFEST, manifest)
    if args.no_continue:
        print(json.dumps(info))
        return EXIT_OK
    result = continue_race(state, config, bench, recorder,
                           [r for r in _load_rounds(out) if "event" not in r])
    return _finish(out, result, exp)


def cmd_posterior(args) -> int:
    out = _out_dir(args.out)
    manifest, exp, bench, state, config = _resume(out, None)
    if not state.instance_log:
        raise CliError("no instances in the archive yet")
    samples = fit_posterior(state, config, np.random.default_rng([config.seed, state.round]))
    target = Path(args.export) if args.export else out / "posterior.csv"
    samples.to_csv(target)
    print(str(target))
    return EXIT_OK


def cmd_select(args) -> int:
    samples = RatingSamples.from_csv(args.posterior)
    try:
        u = parse_preference(args.preference, samples.grid)
    except (PreferenceError, OSError, ValueError) as err:
        raise CliError(f"preference: {err}") from None
    meta = {"preference": u.label, "criterion": args.criterion, "gamma": args.gamma, "k": args.k}
    if args.k > 1:
        res = portfolio_search(samples, u, args.k, args.criterion, args.gamma)
        payload = {**meta, "portfolio": res.to_json()}
        lines = [f"portfolio {' + '.join(res.members)}  score={res.score:.6g}"]
    else:
        sel = select(value_posterior(samples, u), args.criterion, args.gamma)
        payload = {**meta, **sel.to_json()}
        lines = [f"{i + 1:>3}  {a:<24} {s:.6g}" for i, (a, s) in enumerate(sel.ranking)]
    if args.json:
        print(json.dumps(payload, sort_keys=True))
    else:
        print(f"# preference={u.label} criterion={args.criterion} gamma={args.gamma} k={args.k}")
        print("\n".join(lines))
    return EXIT_OK


def cmd_synth(args) -> int:
    out = _out_dir(args.out)
    out.mkdir(parents=True, exist_ok=True)
    grid = TimeGrid.uniform(args.t_min, args.t_max, args.T) if args.spacing == "uniform" \
        else TimeGrid.logarithmic(args.t_min, args.t_max, args.T)
    truth = sample_ground_truth(args.n, grid, args.seed)
    truth.to_csv(out / "truth.csv")
    cfg = {"seed": args.seed,
           "benchmark": {"kind": "synthetic", "n": args.n, "truth_seed": args.seed},
           "race": {"grid": grid.to_dict(),
                    "model": {"kind": "gp_exact", "knobs": {"ell_prior": [5.0, 2.0]}},
                    "inference": {"method": "laplace"}}}
    parse_experiment(cfg)  # fail here rather than at race time
    _write_json(out / "config.json", cfg)
    print(str(out / "config.json"))
    return EXIT_OK


def cmd_report(args) -> int:
    out = _out_dir(args.out)
    src = Path(args.rounds) if args.rounds else out / "rounds.jsonl"
    if not src.exists():
        raise CliError(f"{src} not found")
    rounds = [json.loads(x) for x in src.read_text().splitlines() if x.strip()]
    rounds = [r for r in rounds if "event" not in r]
    dest = Path(args.dest) if args.dest else out
    dest.mkdir(parents=True, exist_ok=True)
    mode = "anytime"
    state_path = out / "state.json"
    if state_path.exists():
        blob = json.loads(state_path.read_text())
        elim = blob["config"].get("elimination", "auto")
        kind = blob["config"]["model"]["kind"]
        if elim == "pointwise" or (elim == "auto" and kind == "independent_dirichlet"):
            mode = "pointwise"
    with open(dest / "dominance_evolution.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["round", "algorithm", "max_dominance_prob", "instances"])
        for r in rounds:
            for a, d in sorted(r.get("posterior", {}).get("max_dominated_prob", {}).items()):
                w.writerow([r["round"], a, repr(d[mode]), r["instances"]])
    posterior = out / "posterior.csv"
    if posterior.exists():
        samples = RatingSamples.from_csv(posterior)
        x = samples.samples
        mean = x.mean(axis=0)
        lo, hi = np.quantile(x, [0.025, 0.975], axis=0)
        with open(dest / "rating_posterior.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "algorithm", "mean", "q025", "q975"])
            for k, t in enumerate(samples.grid.points):
                for i, a in enumerate(samples.algorithms):
                    w.writerow([repr(float(t)), a, repr(float(mean[k, i])), repr(float(lo[k, i])),
                                repr(float(hi[k, i]))])
    counts: dict[tuple[str, float], int] = defaultdict(int)
    archive = out / "runs.jsonl"
    if archive.exists():
        for line in archive.read_text().splitlines():
            if line.strip():
                d = json.loads(line)
                counts[(d["algorithm"], float(d["horizon"]))] += 1
    with open(dest / "sample_counts.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["algorithm", "horizon", "instances"])
        for (a, h), c in sorted(counts.items()):
            w.writerow([a, repr(h), c])
    print(str(dest))
    return EXIT_OK


# --- parser --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="anyrace", description="Bayesian racing of anytime algorithms.")
    p.add_argument("--version", action="version", version=f"anyrace {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("race", help="run a race from a config file or a manifest")
    r.add_argument("--config", help="JSON or TOML experiment file")
    r.add_argument("--manifest", help="replay the run recorded in this manifest")
    r.add_argument("--out", help="output directory (default $ANYRACE_OUT)")
    r.add_argument("--seed", type=int, help="override the config seed")
    r.add_argument("--max-rounds", type=int)
    r.set_defaults(func=cmd_race)

    s = sub.add_parser("resume", help="continue a race from its output directory")
    s.add_argument("--out")
    s.add_argument("--max-rounds", type=int)
    s.set_defaults(func=cmd_resume)

    a = sub.add_parser("add", help="register a new algorithm in an existing race")
    a.add_argument("algorithm")
    a.add_argument("--out")
    a.add_argument("--max-rounds", type=int)
    a.add_argument("--no-continue", action="store_true", help="only replay, do not race on")
    a.set_defaults(func=cmd_add)

    q = sub.add_parser("posterior", help="refit and export rating draws from the archive")
    q.add_argument("--out")
    q.add_argument("--export", help="CSV path (default OUT/posterior.csv)")
    q.set_defaults(func=cmd_posterior)

    e = sub.add_parser("select", help="rank algorithms or portfolios under a preference")
    e.add_argument("posterior", help="posterior CSV export")
    e.add_argument("--preference", default="uniform",
                   help="uniform | log_uniform | final | point:T | dist:FILE | weights:FILE")
    e.add_argument("--criterion", default="expected", choices=("expected", "quantile", "p2bb"))
    e.add_argument("--gamma", type=float, help="quantile level for criterion=quantile")
    e.add_argument("-k", type=int, default=1, help="portfolio size")
    e.add_argument("--json", action="store_true")
    e.set_defaults(func=cmd_select)

    y = sub.add_parser("synth", help="draw a synthetic ground truth and write a race config")
    y.add_argument("--out")
    y.add_argument("--n", type=int, default=5)
    y.add_argument("--T", type=int, default=20)
    y.add_argument("--t-min", type=float, default=1.0)
    y.add_argument("--t-max", type=float, default=20.0)
    y.add_argument("--spacing", choices=("uniform", "logarithmic"), default="uniform")
    y.add_argument("--seed", type=int, default=0)
    y.set_defaults(func=cmd_synth)

    o = sub.add_parser("report", help="write plot-ready CSVs from a race directory")
    o.add_argument("--out")
    o.add_argument("--rounds", help="round log (default OUT/rounds.jsonl)")
    o.add_argument("--dest", help="directory for the CSVs (default OUT)")
    o.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"error: invalid config field {err.field!r}: {err}", file=sys.stderr)
        return EXIT_ERROR
    except (CliError, FileNotFoundError, KeyError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
