"""Decisions from rating draws: dominance, equivalence, resolution, elimination.

All probabilities are Monte Carlo frequencies over the S draws.  Exact ties
between two ratings in a draw count as dominance for neither side.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations
from typing import Iterable, Sequence

import numpy as np

LABELS = ("dominates_ij", "dominates_ji", "equivalent", "crossing_shortcut", "eliminated_shortcut")
MODES_ELIMINATION = ("pointwise", "joint")
MODES_RESOLUTION = ("strict", "crossing")
# latched relations are flagged when their current probability falls this far below alpha
LATCH_SLACK = 0.05


def _array(samples) -> np.ndarray:
    x = getattr(samples, "samples", samples)
    x = np.asarray(x, dtype=float)
    if x.ndim != 3:
        raise ValueError("samples must be S x T x n")
    return x


def _col(samples, i) -> int:
    if isinstance(i, str):
        return samples.index(i)
    return int(i)


def p_dominates_pointwise(samples, i, j, t: int) -> float:
    x = _array(samples)
    i, j = _col(samples, i), _col(samples, j)
    return float(np.mean(x[:, t, i] > x[:, t, j]))


def p_dominates_anytime(samples, i, j) -> float:
    """Fraction of draws where i beats j at every timepoint simultaneously."""
    x = _array(samples)
    i, j = _col(samples, i), _col(samples, j)
    return float(np.mean(np.all(x[:, :, i] > x[:, :, j], axis=1)))


def p_equivalent(samples, i, j, t: int, epsilon: float) -> float:
    if not 0 <= epsilon <= 0.5:
        raise ValueError("epsilon must lie in [0, 0.5]")
    x = _array(samples)
    i, j = _col(samples, i), _col(samples, j)
    a, b = x[:, t, i], x[:, t, j]
    w = a / (a + b)
    return float(np.mean((w >= 0.5 - epsilon) & (w <= 0.5 + epsilon)))


def pointwise_table(samples) -> np.ndarray:
    """P[t, i, j] = P(theta_i(t) > theta_j(t)) for every ordered pair."""
    x = _array(samples)
    return (x[:, :, :, None] > x[:, :, None, :]).mean(axis=0)


def anytime_table(samples) -> np.ndarray:
    """P[i, j] = P(theta_i(t) > theta_j(t) for all t)."""
    x = _array(samples)
    return np.all(x[:, :, :, None] > x[:, :, None, :], axis=1).mean(axis=0)


def equivalence_table(samples, epsilon: float) -> np.ndarray:
    x = _array(samples)
    a, b = x[:, :, :, None], x[:, :, None, :]
    w = a / (a + b)
    return ((w >= 0.5 - epsilon) & (w <= 0.5 + epsilon)).mean(axis=0)


def pair_key(a: str, b: str) -> tuple[str, str]:
    if a == b:
        raise ValueError("a pair needs two distinct algorithms")
    return (a, b) if a < b else (b, a)


@dataclass
class ResolutionMatrix:
    """Latched pairwise resolution state over timepoints.

    Keys are sorted id pairs; ``labels[key][t]`` names the relation that
    resolved the entry, with ``dominates_ij`` meaning the first id of the key
    dominates the second.
    """

    T: int
    algorithms: list[str] = field(default_factory=list)
    resolved: dict[tuple[str, str], np.ndarray] = field(default_factory=dict)
    labels: dict[tuple[str, str], list] = field(default_factory=dict)
    # pairs latched as one-sided dominance everywhere but not yet settled by elimination
    pending: set = field(default_factory=set)

    def __post_init__(self):
        for a, b in combinations(list(self.algorithms), 2):
            self._ensure(pair_key(a, b))

    def _ensure(self, key):
        if key not in self.resolved:
            self.resolved[key] = np.zeros(self.T, dtype=bool)
            self.labels[key] = [None] * self.T

    def add_algorithm(self, algorithm: str) -> None:
        if algorithm in self.algorithms:
            raise ValueError(f"algorithm {algorithm!r} already registered")
        for other in self.algorithms:
            self._ensure(pair_key(algorithm, other))
        self.algorithms.append(algorithm)

    def copy(self) -> ResolutionMatrix:
        return ResolutionMatrix(self.T, list(self.algorithms),
                                {k: v.copy() for k, v in self.resolved.items()},
                                {k: list(v) for k, v in self.labels.items()},
                                set(self.pending))

    def set(self, a: str, b: str, t: int, label: str) -> bool:
        """Latch entry (t, {a, b}); returns True if it was newly resolved."""
        if label not in LABELS:
            raise ValueError(f"unknown label {label!r}")
        key = pair_key(a, b)
        if (a, b) != key and label in ("dominates_ij", "dominates_ji"):
            label = "dominates_ji" if label == "dominates_ij" else "dominates_ij"
        if self.resolved[key][t]:
            return False
        self.resolved[key][t] = True
        self.labels[key][t] = label
        return True

    def _open(self, key) -> np.ndarray:
        if key in self.pending:
            return np.ones(self.T, dtype=bool)
        return ~self.resolved[key]

    def is_resolved(self, a: str, b: str, t: int | None = None) -> bool:
        row = ~self._open(pair_key(a, b))
        return bool(row.all() if t is None else row[t])

    def hold_dominance(self, a: str, b: str) -> bool:
        """Keep a pair open while every entry is latched as dominance in one direction.

        Per-timepoint dominance at every t does not imply joint dominance, so
        such a pair is only settled by an elimination.
        """
        key = pair_key(a, b)
        labs = set(self.labels[key])
        if self.resolved[key].all() and labs in ({"dominates_ij"}, {"dominates_ji"}):
            self.pending.add(key)
            return True
        self.pending.discard(key)
        return False

    def eliminate(self, algorithm: str) -> int:
        """Resolve every entry involving ``algorithm``; returns the number newly set."""
        count = 0
        for other in self.algorithms:
            if other != algorithm:
                key = pair_key(algorithm, other)
                if key in self.pending:
                    self.pending.discard(key)
                    count += self.T
                for t in range(self.T):
                    count += self.set(algorithm, other, t, "eliminated_shortcut")
        return count

    def open_cells(self, candidates: Iterable[str]) -> int:
        cands = sorted(candidates)
        return int(sum(self._open(pair_key(a, b)).sum() for a, b in combinations(cands, 2)))

    def unresolved_pairs(self, candidates: Iterable[str]) -> list[tuple[str, str]]:
        cands = sorted(candidates)
        return [(a, b) for a, b in combinations(cands, 2) if self._open((a, b)).any()]

    def unresolved_algorithms(self, candidates: Iterable[str]) -> set[str]:
        out: set[str] = set()
        for a, b in self.unresolved_pairs(candidates):
            out.update((a, b))
        return out

    def max_unresolved_index(self, algorithm: str, candidates: Iterable[str]) -> int | None:
        """Largest timepoint index with an open entry involving ``algorithm``."""
        best = None
        for other in candidates:
            if other == algorithm:
                continue
            open_t = np.flatnonzero(self._open(pair_key(algorithm, other)))
            if open_t.size and (best is None or open_t[-1] > best):
                best = int(open_t[-1])
        return best

    def to_json(self) -> dict:
        return {"T": self.T, "algorithms": list(self.algorithms),
                "pairs": [{"pair": list(k), "resolved": self.resolved[k].tolist(),
                           "labels": self.labels[k], "pending": k in self.pending}
                          for k in sorted(self.resolved)]}

    @classmethod
    def from_json(cls, d: dict) -> ResolutionMatrix:
        m = cls(d["T"])
        m.algorithms = list(d["algorithms"])
        for rec in d["pairs"]:
            key = tuple(rec["pair"])
            m.resolved[key] = np.array(rec["resolved"], dtype=bool)
            m.labels[key] = list(rec["labels"])
            if rec.get("pending"):
                m.pending.add(key)
        return m


@dataclass
class ResolutionUpdate:
    matrix: ResolutionMatrix
    newly: list[tuple[int, str, str, str]]  # (t, a, b, label) with a < b
    flagged: list[tuple[int, str, str, str, float]]  # latched relations now below alpha - slack
    current: dict[tuple[str, str], list]  # this round's precedence labels (None = undecided)


def _current_labels(P: np.ndarray, E: np.ndarray, i: int, j: int, alpha: float) -> list:
    out = []
    for t in range(P.shape[0]):
        if P[t, i, j] >= alpha:
            out.append("dominates_ij")
        elif P[t, j, i] >= alpha:
            out.append("dominates_ji")
        elif E[t, i, j] >= alpha:
            out.append("equivalent")
        else:
            out.append(None)
    return out


def _is_crossing(labels: list) -> bool:
    # one strict dominance plus the other side winning or tying at another timepoint;
    # each timepoint carries a single label, so the two timepoints always differ
    if "dominates_ij" in labels and ("dominates_ji" in labels or "equivalent" in labels):
        return True
    return "dominates_ji" in labels and "equivalent" in labels


def update_resolution(matrix: ResolutionMatrix, samples, alpha: float, epsilon: float,
                      mode: str = "strict", candidates: Sequence[str] | None = None,
                      hold_dominance: bool = False) -> ResolutionUpdate:
    """Latch newly decided (t, pair) entries among ``candidates``.

    ``samples`` must carry ``algorithms``; its columns are matched by id.
    With ``hold_dominance`` (joint elimination), pairs latched as one-sided
    dominance at every timepoint stay open until the loser is eliminated.
    """
    if mode not in MODES_RESOLUTION:
        raise ValueError(f"resolution mode must be one of {MODES_RESOLUTION}")
    if not 0.5 < alpha <= 1:
        raise ValueError("alpha must lie in (0.5, 1]")
    algs = list(samples.algorithms)
    cands = sorted(candidates if candidates is not None else algs)
    out = matrix.copy()
    P = pointwise_table(samples)
    E = equivalence_table(samples, epsilon)
    newly, flagged, current = [], [], {}
    for a, b in combinations(cands, 2):
        i, j = algs.index(a), algs.index(b)
        labels = _current_labels(P, E, i, j, alpha)
        current[(a, b)] = labels
        for t, lab in enumerate(labels):
            if lab is not None and out.set(a, b, t, lab):
                newly.append((t, a, b, lab))
        if mode == "crossing" and _is_crossing(labels):
            for t in range(out.T):
                if out.set(a, b, t, "crossing_shortcut"):
                    newly.append((t, a, b, "crossing_shortcut"))
        if hold_dominance:
            out.hold_dominance(a, b)
        for t, lab in enumerate(out.labels[(a, b)]):
            if lab == "dominates_ij":
                p = P[t, i, j]
            elif lab == "dominates_ji":
                p = P[t, j, i]
            elif lab == "equivalent":
                p = E[t, i, j]
            else:
                continue
            if p < alpha - LATCH_SLACK:
                flagged.append((t, a, b, lab, float(p)))
    return ResolutionUpdate(out, newly, flagged, current)


def check_elimination(candidates: Sequence[str], samples, alpha: float,
                      mode: str = "joint") -> list[tuple[str, str]]:
    """(eliminated, dominator) pairs, evaluated against the entry candidate set."""
    if mode not in MODES_ELIMINATION:
        raise ValueError(f"elimination mode must be one of {MODES_ELIMINATION}")
    cands = sorted(candidates)
    if len(cands) < 2:
        return []
    algs = list(samples.algorithms)
    if mode == "joint":
        score = anytime_table(samples)  # score[b, a]: b beats a everywhere
    else:
        score = pointwise_table(samples).min(axis=0)  # weakest timepoint
    out = []
    for a in cands:
        ia = algs.index(a)
        best = None
        for b in cands:
            if b == a:
                continue
            p = score[algs.index(b), ia]
            if p >= alpha and (best is None or p > best[1]):
                best = (b, p)
        if best is not None:
            out.append((a, best[0]))
    return out


def resolution_snapshot(samples, epsilon: float, matrix: ResolutionMatrix,
                        candidates: Sequence[str]) -> dict:
    """Per-pair, per-timepoint probabilities and latched labels."""
    algs = list(samples.algorithms)
    P = pointwise_table(samples)
    E = equivalence_table(samples, epsilon)
    A = anytime_table(samples)
    pairs = []
    for a, b in combinations(sorted(candidates), 2):
        i, j = algs.index(a), algs.index(b)
        pairs.append({"pair": [a, b], "p_ij": P[:, i, j].tolist(), "p_ji": P[:, j, i].tolist(),
                      "p_equiv": E[:, i, j].tolist(), "p_anytime_ij": float(A[i, j]),
                      "p_anytime_ji": float(A[j, i]),
                      "resolved": matrix.resolved[(a, b)].tolist(),
                      "labels": matrix.labels[(a, b)]})
    return {"joint": bool(getattr(samples, "joint", True)), "pairs": pairs}
