"""Deployment-time selection from rating draws.

A preference functional maps a rating trajectory theta_A(t_1..t_T) to a
scalar value.  Pushing every posterior draw through it gives a value
posterior per algorithm, from which algorithms (or portfolios, i.e.
multisets of algorithms whose ratings add up) are ranked by probability of
being best, posterior mean or a lower quantile.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .trajectories import TimeGrid

CRITERIA = ("p2bb", "expected", "quantile")
EXHAUSTIVE_LIMIT = 100_000


class PreferenceError(ValueError):
    pass


@dataclass(frozen=True)
class PreferenceFunctional:
    """u(theta) over the grid: linear kinds carry quadrature ``weights``."""

    kind: str
    label: str
    weights: np.ndarray | None = None
    func: Callable[[np.ndarray], np.ndarray] | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=float)
            if np.any(w < 0) or not np.all(np.isfinite(w)):
                raise PreferenceError("quadrature weights must be finite and non-negative")
            if w.sum() <= 0:
                raise PreferenceError("quadrature weights must not all be zero")
            object.__setattr__(self, "weights", w)
        elif self.func is None:
            raise PreferenceError("a preference needs weights or a function")

    @property
    def linear(self) -> bool:
        return self.weights is not None

    def __call__(self, theta: np.ndarray) -> np.ndarray:
        """Values for rating trajectories with time on the last axis."""
        theta = np.asarray(theta, dtype=float)
        if self.linear:
            return theta @ self.weights
        return np.asarray(self.func(theta))

    def scaled(self, c: float) -> PreferenceFunctional:
        if not c > 0:
            raise PreferenceError("scale must be positive")
        if self.linear:
            return PreferenceFunctional(self.kind, self.label, self.weights * c, None, self.meta)
        f = self.func
        return PreferenceFunctional(self.kind, self.label, None, lambda th: c * f(th), self.meta)


def trapezoid_weights(x: np.ndarray) -> np.ndarray:
    """Weights q with sum_k q_k f(x_k) = trapezoid integral of f over x."""
    x = np.asarray(x, dtype=float)
    dx = np.diff(x)
    q = np.zeros(len(x))
    q[:-1] += dx / 2
    q[1:] += dx / 2
    return q


def weighted_integral(grid: TimeGrid, w: Callable[[np.ndarray], np.ndarray] | np.ndarray | float = 1.0,
                      label: str = "weighted_integral") -> PreferenceFunctional:
    """u(theta) = integral of w(t) theta(t) dt by the trapezoidal rule on the grid."""
    t = grid.array
    wt = w(t) if callable(w) else np.broadcast_to(np.asarray(w, dtype=float), t.shape)
    wt = np.asarray(wt, dtype=float)
    if np.any(wt < 0):
        raise PreferenceError("weight function must be non-negative")
    return PreferenceFunctional("weighted_integral", label, wt * trapezoid_weights(t))


def uniform(grid: TimeGrid) -> PreferenceFunctional:
    return weighted_integral(grid, 1.0, "uniform")


def log_uniform(grid: TimeGrid) -> PreferenceFunctional:
    """Weight 1/t: integral of theta d(log t), trapezoidal in log t."""
    t = grid.array
    if np.any(t <= 0):
        raise PreferenceError("log_uniform needs positive timepoints")
    return PreferenceFunctional("weighted_integral", "log_uniform", trapezoid_weights(np.log(t)))


def final_time(grid: TimeGrid) -> PreferenceFunctional:
    w = np.zeros(len(grid))
    w[-1] = 1.0
    return PreferenceFunctional("final_time", "final", w)


def _interp_weights(grid: TimeGrid, t: float) -> np.ndarray:
    pts = grid.array
    if not pts[0] <= t <= pts[-1]:
        raise PreferenceError(f"time {t} outside grid [{pts[0]}, {pts[-1]}]")
    w = np.zeros(len(pts))
    k = int(np.searchsorted(pts, t, side="right")) - 1
    if k >= len(pts) - 1:
        w[-1] = 1.0
        return w
    frac = (t - pts[k]) / (pts[k + 1] - pts[k])
    w[k] += 1 - frac
    w[k + 1] += frac
    return w


def point(grid: TimeGrid, t: float) -> PreferenceFunctional:
    """theta at budget t, linearly interpolated between grid points."""
    return PreferenceFunctional("budget_distribution", f"point:{t:g}", _interp_weights(grid, t))


def budget_distribution(grid: TimeGrid, times: Sequence[float], mass: Sequence[float],
                        label: str = "budget_distribution") -> PreferenceFunctional:
    """Expected rating under a discrete distribution over deployment budgets."""
    times, mass = np.asarray(times, dtype=float), np.asarray(mass, dtype=float)
    if times.shape != mass.shape or times.size == 0:
        raise PreferenceError("times and mass must be non-empty and of equal length")
    if np.any(mass < 0) or mass.sum() <= 0:
        raise PreferenceError("budget mass must be non-negative with positive total")
    w = sum(m * _interp_weights(grid, t) for t, m in zip(times, mass))
    return PreferenceFunctional("budget_distribution", label, w / mass.sum())


def tabulated(grid: TimeGrid, times: Sequence[float], weights: Sequence[float],
              label: str = "tabulated") -> PreferenceFunctional:
    """Weight function given as a table (t, w), linearly interpolated onto the grid."""
    times, weights = np.asarray(times, dtype=float), np.asarray(weights, dtype=float)
    if times.shape != weights.shape or times.size < 1 or np.any(np.diff(times) <= 0):
        raise PreferenceError("weight table needs strictly increasing t and matching w")
    return weighted_integral(grid, np.interp(grid.array, times, weights), label)


def custom_monotone(func: Callable[[np.ndarray], np.ndarray], label: str = "custom") -> PreferenceFunctional:
    """User functional; its monotonicity is the caller's responsibility (see ``monotonicity_audit``)."""
    return PreferenceFunctional("custom_monotone", label, None, func)


def minimax_preference(theta_ref: np.ndarray) -> PreferenceFunctional:
    """u(theta) = min_t (theta(t) - theta_ref(t)); zero at theta_ref itself."""
    ref = np.asarray(theta_ref, dtype=float)
    return PreferenceFunctional("custom_monotone", "minimax", None,
                                lambda th: np.min(np.asarray(th) - ref, axis=-1), {"reference": ref})


def _read_pairs(path: Path) -> tuple[np.ndarray, np.ndarray]:
    try:
        rows = []
        with open(path, newline="") as fh:
            for rec in csv.reader(fh):
                if not rec or rec[0].strip().startswith("#"):
                    continue
                try:
                    rows.append((float(rec[0]), float(rec[1])))
                except ValueError:
                    if rows:
                        raise
                    continue  # header line
    except (OSError, IndexError, ValueError) as err:
        raise PreferenceError(f"cannot read preference file {path}: {err}") from None
    if not rows:
        raise PreferenceError(f"preference file {path} has no rows")
    arr = np.array(rows)
    return arr[:, 0], arr[:, 1]


def parse_preference(spec: str, grid: TimeGrid) -> PreferenceFunctional:
    """Built-in names: uniform, log_uniform, final, point:<t>, dist:<file>, weights:<file>."""
    if spec == "uniform":
        return uniform(grid)
    if spec == "log_uniform":
        return log_uniform(grid)
    if spec in ("final", "final_time"):
        return final_time(grid)
    if spec.startswith("point:"):
        try:
            t = float(spec[6:])
        except ValueError:
            raise PreferenceError(f"bad point preference {spec!r}") from None
        return point(grid, t)
    if spec.startswith("dist:"):
        times, mass = _read_pairs(Path(spec[5:]))
        return budget_distribution(grid, times, mass, spec)
    if spec.startswith("weights:"):
        times, w = _read_pairs(Path(spec[8:]))
        return tabulated(grid, times, w, spec)
    raise PreferenceError(f"unknown preference {spec!r}")


def builtin_preferences(grid: TimeGrid) -> dict[str, PreferenceFunctional]:
    prefs = {"uniform": uniform(grid), "final": final_time(grid)}
    if grid.points[0] > 0:
        prefs["log_uniform"] = log_uniform(grid)
    return prefs


def monotonicity_audit(u: PreferenceFunctional, T: int, rng: np.random.Generator,
                       trials: int = 1000) -> bool:
    """Random check that componentwise-larger trajectories get strictly larger values."""
    a = rng.uniform(0, 1, size=(trials, T))
    b = a + rng.uniform(1e-3, 0.5, size=(trials, T))
    return bool(np.all(u(b) > u(a)))


# --- value posteriors and criteria ---------------------------------------------------


@dataclass(frozen=True)
class ValuePosterior:
    values: np.ndarray  # S x k
    algorithms: tuple[str, ...]

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 2 or v.shape[1] != len(self.algorithms):
            raise ValueError("values must be S x len(algorithms)")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "algorithms", tuple(self.algorithms))

    def __getitem__(self, algorithm: str) -> np.ndarray:
        return self.values[:, self.algorithms.index(algorithm)]


def value_posterior(samples, u: PreferenceFunctional, algorithms: Sequence[str] | None = None
                    ) -> ValuePosterior:
    x = np.asarray(getattr(samples, "samples", samples), dtype=float)
    names = tuple(getattr(samples, "algorithms", [str(i) for i in range(x.shape[2])]))
    algorithms = tuple(algorithms) if algorithms is not None else names
    cols = [names.index(a) for a in algorithms]
    # S x T x k -> S x k x T
    return ValuePosterior(u(np.moveaxis(x[:, :, cols], 1, 2)), algorithms)


def p2bb_scores(values: np.ndarray) -> np.ndarray:
    """Frequency of being the per-draw maximum; ties share the credit equally."""
    best = values.max(axis=1, keepdims=True)
    hits = values == best
    return (hits / hits.sum(axis=1, keepdims=True)).mean(axis=0)


def criterion_scores(values: np.ndarray, criterion: str, gamma: float | None = None) -> np.ndarray:
    if values.size == 0:
        raise ValueError("empty value posterior")
    if criterion == "p2bb":
        return p2bb_scores(values)
    if criterion == "expected":
        return values.mean(axis=0)
    if criterion == "quantile":
        if gamma is None or not 0 < gamma < 1:
            raise ValueError("quantile criterion needs gamma in (0, 1)")
        return np.quantile(values, gamma, axis=0, method="linear")
    raise ValueError(f"criterion must be one of {CRITERIA}")


@dataclass
class Selection:
    criterion: str
    gamma: float | None
    ranking: list[tuple[str, float]]

    @property
    def best(self) -> str:
        return self.ranking[0][0]

    def to_json(self) -> dict:
        return {"criterion": self.criterion, "gamma": self.gamma,
                "ranking": [{"algorithm": a, "score": s} for a, s in self.ranking]}


def select(values: ValuePosterior, criterion: str = "expected", gamma: float | None = None) -> Selection:
    scores = criterion_scores(values.values, criterion, gamma)
    order = sorted(range(len(values.algorithms)), key=lambda i: (-scores[i], values.algorithms[i]))
    return Selection(criterion, gamma, [(values.algorithms[i], float(scores[i])) for i in order])


def regret(values: ValuePosterior, algorithm: str) -> float:
    """Expected shortfall of ``algorithm`` against the per-draw best."""
    v = values.values
    return float(np.mean(v.max(axis=1) - values[algorithm]))


# --- portfolios --------------------------------------------------------------------------


@dataclass
class PortfolioResult:
    members: tuple[str, ...]
    score: float
    strategy: str
    evaluated: int
    shortcut_applies: bool
    shortcut_agrees: bool | None
    criterion: str
    gamma: float | None = None

    def to_json(self) -> dict:
        return {"members": list(self.members), "score": self.score, "strategy": self.strategy,
                "evaluated": self.evaluated, "shortcut_applies": self.shortcut_applies,
                "shortcut_agrees": self.shortcut_agrees, "criterion": self.criterion,
                "gamma": self.gamma}


def portfolio_values(theta: np.ndarray, u: PreferenceFunctional, multisets: Sequence[Sequence[int]]
                     ) -> np.ndarray:
    """S x len(multisets) values of u applied to summed member ratings."""
    # theta: S x T x m
    out = np.zeros((theta.shape[0], len(multisets)))
    for c, ms in enumerate(multisets):
        counts = np.bincount(np.asarray(ms, dtype=int), minlength=theta.shape[2])
        out[:, c] = u(theta @ counts)
    return out


def portfolio_search(samples, u: PreferenceFunctional, k: int, criterion: str = "expected",
                     gamma: float | None = None, strategy: str = "auto",
                     candidates: Sequence[str] | None = None) -> PortfolioResult:
    """Best size-k multiset of ``candidates`` under ``u`` and ``criterion``."""
    if k < 1:
        raise ValueError("k must be >= 1")
    x = np.asarray(getattr(samples, "samples", samples), dtype=float)
    names = tuple(getattr(samples, "algorithms", [str(i) for i in range(x.shape[2])]))
    cands = tuple(candidates) if candidates is not None else names
    theta = x[:, :, [names.index(a) for a in cands]]
    m = len(cands)
    count = math.comb(m + k - 1, k)
    if strategy == "auto":
        strategy = "exhaustive" if count <= EXHAUSTIVE_LIMIT else "greedy"
    if strategy == "exhaustive":
        multisets = list(itertools.combinations_with_replacement(range(m), k))
        scores = criterion_scores(portfolio_values(theta, u, multisets), criterion, gamma)
        best = int(np.argmax(scores))
        chosen, score, evaluated = multisets[best], float(scores[best]), len(multisets)
    elif strategy == "greedy":
        chosen, evaluated = (), 0
        for _ in range(k):
            options = [tuple(sorted(chosen + (i,))) for i in range(m)]
            scores = criterion_scores(portfolio_values(theta, u, options), criterion, gamma)
            evaluated += len(options)
            chosen = options[int(np.argmax(scores))]
            score = float(scores.max())
    else:
        raise ValueError("strategy must be auto, exhaustive or greedy")
    members = tuple(cands[i] for i in chosen)
    applies = u.linear and criterion in ("expected", "p2bb")
    agrees = None
    if applies:
        single = select(value_posterior(theta, u, None), criterion, gamma)
        top = single.ranking[0][1]
        # ties in the single-algorithm ranking may pick a different but equally good member
        winners = {cands[int(a)] for a, s in single.ranking if s >= top - 1e-12}
        agrees = len(set(members)) == 1 and members[0] in winners
    return PortfolioResult(members, score, strategy, evaluated, applies, agrees, criterion, gamma)


def dominated_by(theta_mean: np.ndarray) -> dict[int, list[int]]:
    """For each column a, the columns b with theta_b(t) > theta_a(t) at every t."""
    D = np.all(theta_mean[:, :, None] > theta_mean[:, None, :], axis=0)
    return {a: [b for b in range(theta_mean.shape[1]) if D[b, a]] for a in range(theta_mean.shape[1])}
