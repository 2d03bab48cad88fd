"""Plackett-Luce likelihood over time-indexed rankings.

Ratings theta(t) live on the simplex; the likelihood only depends on
log-ratings up to a per-timepoint shift, so all internals work with
log-utilities ``mu`` (``theta = softmax(mu)``).  Observations are compiled
once into padded index arrays so that likelihood and gradient are a few
vectorised numpy passes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .trajectories import RankingObservation


def helmert(n: int) -> np.ndarray:
    """Orthonormal n x (n-1) contrast matrix with zero column sums."""
    if n < 2:
        raise ValueError("helmert needs n >= 2")
    Q = np.zeros((n, n - 1))
    for k in range(1, n):
        Q[:k, k - 1] = np.sqrt(1.0 / (k * (k + 1)))
        Q[k, k - 1] = -np.sqrt(k / (k + 1))
    return Q


def softmax(mu: np.ndarray, axis: int = -1) -> np.ndarray:
    z = np.exp(mu - mu.max(axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True)


@dataclass
class RankingData:
    """Observations compiled against a fixed algorithm order.

    ``idx[r, p]`` is the column of the algorithm at position p of ranking r;
    positions ``>= size[r]`` are padding.  Positions ``< ranked[r]`` carry a
    sequential-choice factor, the rest are unordered tail members.
    """

    algorithms: tuple[str, ...]
    n_times: int
    idx: np.ndarray
    t: np.ndarray
    weight: np.ndarray
    ranked: np.ndarray
    size: np.ndarray

    def __post_init__(self):
        width = self.idx.shape[1] if self.idx.ndim == 2 else 0
        pos = np.arange(width)
        self.valid = pos[None, :] < self.size[:, None]
        self.choice = pos[None, :] < self.ranked[:, None]
        n = len(self.algorithms)
        self.flat = (self.t[:, None] * n + self.idx)[self.valid]

    def __len__(self) -> int:
        return len(self.t)

    def merged(self) -> RankingData:
        """Identical rankings collapsed into one row with the summed weight.

        The likelihood is linear in the weights, so this is exact; with few
        algorithms it shrinks a large archive to at most T * n! rows.
        """
        if len(self) == 0:
            return self
        key = np.column_stack([self.t, self.ranked, self.size, self.idx])
        uniq, inverse = np.unique(key, axis=0, return_inverse=True)
        if len(uniq) == len(self):
            return self
        w = np.bincount(inverse.reshape(-1), weights=self.weight, minlength=len(uniq))
        return RankingData(self.algorithms, self.n_times, uniq[:, 3:], uniq[:, 0], w,
                           uniq[:, 1], uniq[:, 2])

    def subset_times(self, keep: Sequence[int]) -> RankingData:
        """Restrict to the given timepoints, renumbered 0..len(keep)-1."""
        keep = list(keep)
        remap = np.full(self.n_times, -1)
        remap[keep] = np.arange(len(keep))
        sel = remap[self.t] >= 0
        return RankingData(self.algorithms, len(keep), self.idx[sel], remap[self.t[sel]],
                           self.weight[sel], self.ranked[sel], self.size[sel])


def compile_rankings(obs: Sequence[RankingObservation], algorithms: Sequence[str],
                     n_times: int) -> RankingData:
    algorithms = tuple(algorithms)
    col = {a: i for i, a in enumerate(algorithms)}
    width = max((len(o.ordering) + len(o.tail) for o in obs), default=0)
    R = len(obs)
    idx = np.zeros((R, width), dtype=np.int64)
    t = np.zeros(R, dtype=np.int64)
    w = np.zeros(R)
    ranked = np.zeros(R, dtype=np.int64)
    size = np.zeros(R, dtype=np.int64)
    for r, o in enumerate(obs):
        try:
            cols = [col[a] for a in o.items]
        except KeyError as err:
            raise KeyError(f"unknown algorithm id {err.args[0]!r}") from None
        if not 0 <= o.timepoint < n_times:
            raise IndexError(f"timepoint {o.timepoint} outside grid of {n_times}")
        idx[r, : len(cols)] = cols
        t[r] = o.timepoint
        w[r] = o.weight
        ranked[r] = len(o.ordering)
        size[r] = len(cols)
    return RankingData(algorithms, n_times, idx, t, w, ranked, size)


# shifted partial sums below this fall back to log-space accumulation
_TINY = 1e-250


def _loglik_rows_logspace(M, choice, valid):
    """Reference path: reverse cumulative log-sum-exp, exact for any spread of utilities."""
    lse = np.logaddexp.accumulate(M[:, ::-1], axis=1)[:, ::-1]
    terms = np.where(choice, M - np.where(choice, lse, 0.0), 0.0)
    acc = np.logaddexp.accumulate(np.where(choice, -lse, -np.inf), axis=1)
    with np.errstate(invalid="ignore"):
        share = np.exp(M + acc)
    return terms, np.where(valid, share, 0.0)


def loglik_mu(data: RankingData, mu: np.ndarray, grad: bool = True):
    """Weighted PL log-likelihood at log-utilities ``mu`` (T x n) and its gradient.

    Choice denominators are reverse cumulative sums of exp(mu - rowmax); rows
    where those sums underflow are redone with log-space accumulation.
    """
    T, n = mu.shape
    if len(data) == 0:
        return 0.0, np.zeros_like(mu) if grad else None
    valid, choice = data.valid, data.choice
    M = np.where(valid, mu[data.t[:, None], data.idx], -np.inf)
    top = M.max(axis=1, keepdims=True)
    E = np.exp(M - top)
    C = np.cumsum(E[:, ::-1], axis=1)[:, ::-1]
    bad = np.any(choice & (C < _TINY), axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(choice, M - top - np.log(C), 0.0)
    share = None
    if grad:
        # d/d mu_j = 1[j chosen] - sum_{k <= j, k chosen} exp(mu_j) / denominator_k
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = np.where(choice, 1.0 / C, 0.0)
            share = np.where(valid, E * np.cumsum(inv, axis=1), 0.0)
    if bad.any():
        t_bad, s_bad = _loglik_rows_logspace(M[bad], choice[bad], valid[bad])
        terms[bad] = t_bad
        if grad:
            share[bad] = s_bad
    ll = float(data.weight @ terms.sum(axis=1))
    if not grad:
        return ll, None
    g = (choice.astype(float) - share) * data.weight[:, None]
    dmu = np.bincount(data.flat, weights=g[valid], minlength=T * n).reshape(T, n)
    return ll, dmu


def _check_simplex(theta: np.ndarray, tol: float = 1e-8) -> None:
    if np.any(theta <= 0) or np.any(np.abs(theta.sum(axis=-1) - 1) > tol):
        raise ValueError("theta rows must be positive and sum to 1")


def _as_data(obs, algorithms, n_times) -> RankingData:
    if isinstance(obs, RankingData):
        return obs
    if algorithms is None:
        raise ValueError("algorithm ids are needed to compile raw observations")
    return compile_rankings(obs, algorithms, n_times)


def pl_log_likelihood(obs, theta: np.ndarray, algorithms: Sequence[str] | None = None) -> float:
    """Sum over observations of ``w_r * log P(r | theta(t_r))``.

    ``theta`` is T x n with columns ordered as ``algorithms``.
    """
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    _check_simplex(theta)
    data = _as_data(obs, algorithms, theta.shape[0])
    return loglik_mu(data, np.log(theta), grad=False)[0]


def pl_log_likelihood_grad(obs, eta: np.ndarray, algorithms: Sequence[str] | None = None) -> np.ndarray:
    """Gradient of the log-likelihood w.r.t. Helmert latents ``eta`` (T x (n-1))."""
    eta = np.atleast_2d(np.asarray(eta, dtype=float))
    Q = helmert(eta.shape[1] + 1)
    data = _as_data(obs, algorithms, eta.shape[0])
    _, dmu = loglik_mu(data, eta @ Q.T)
    return dmu @ Q


def pairwise_win_probability(theta_t, i: int, j: int):
    """P(i beats j) = theta_i / (theta_i + theta_j); broadcasts over leading axes."""
    if i == j:
        raise ValueError("i and j must differ")
    theta_t = np.asarray(theta_t, dtype=float)
    a, b = theta_t[..., i], theta_t[..., j]
    return a / (a + b)


def portfolio_rating(theta_t, members: Sequence[int]):
    """Summed rating of a multiset of algorithm indices (repeats count)."""
    members = list(members)
    if not members:
        raise ValueError("portfolio must be non-empty")
    theta_t = np.asarray(theta_t, dtype=float)
    counts = np.bincount(members, minlength=theta_t.shape[-1])
    return theta_t @ counts
