"""Multinomial No-U-Turn sampler with Stan-style warmup.

Trajectories are built by recursive doubling with multinomial sampling of
the proposal (biased progressive at the top level, uniform within subtrees)
and the generalised U-turn criterion including the extra checks across
merged subtrees.  Warmup adapts the step size by dual averaging and a
diagonal inverse metric over expanding windows.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

LogDensity = Callable[[np.ndarray], "tuple[float, np.ndarray]"]

DIVERGENCE_THRESHOLD = 1000.0


@dataclass
class NUTSConfig:
    warmup: int = 1000
    draws: int = 2000
    target_accept: float = 0.8
    max_treedepth: int = 10
    init_buffer: int = 75
    term_buffer: int = 50
    base_window: int = 25
    gamma: float = 0.05
    t0: float = 10.0
    kappa: float = 0.75


@dataclass
class ChainResult:
    draws: np.ndarray  # draws x dim
    log_density: np.ndarray
    divergent: np.ndarray
    treedepth: np.ndarray
    accept_stat: np.ndarray
    step_size: float
    inv_metric: np.ndarray
    n_leapfrog: int = 0
    warnings: list[str] = field(default_factory=list)


class _State:
    __slots__ = ("q", "p", "grad", "logp")

    def __init__(self, q, p, grad, logp):
        self.q, self.p, self.grad, self.logp = q, p, grad, logp


class _Tree:
    __slots__ = ("first", "last", "proposal", "rho", "log_weight", "accept_sum", "n_steps")


class _Sampler:
    def __init__(self, log_density: LogDensity, dim: int, config: NUTSConfig,
                 rng: np.random.Generator):
        self.f = log_density
        self.dim = dim
        self.cfg = config
        self.rng = rng
        self.inv_metric = np.ones(dim)
        self.step = 1.0
        self.n_leapfrog = 0

    def _energy(self, s: _State) -> float:
        return -s.logp + 0.5 * float(s.p @ (self.inv_metric * s.p))

    def _leapfrog(self, s: _State, eps: float) -> _State:
        p = s.p + 0.5 * eps * s.grad
        q = s.q + eps * self.inv_metric * p
        logp, grad = self.f(q)
        self.n_leapfrog += 1
        if not np.isfinite(logp):
            return _State(q, p, np.zeros_like(q), -np.inf)
        p = p + 0.5 * eps * grad
        return _State(q, p, grad, logp)

    def _uturn_ok(self, p_sharp_minus, p_sharp_plus, rho) -> bool:
        return float(p_sharp_plus @ rho) > 0 and float(p_sharp_minus @ rho) > 0

    def _build(self, s: _State, depth: int, eps: float, H0: float):
        """Build a subtree of 2**depth leapfrog steps; None marks an invalid tree."""
        if depth == 0:
            nxt = self._leapfrog(s, eps)
            H = self._energy(nxt) if np.isfinite(nxt.logp) else np.inf
            if not np.isfinite(H) or H - H0 > DIVERGENCE_THRESHOLD:
                self._divergent = True
                self._accept_sum += 0.0
                self._steps += 1
                return None
            t = _Tree()
            t.first = t.last = t.proposal = nxt
            t.rho = nxt.p.copy()
            t.log_weight = H0 - H
            self._accept_sum += min(1.0, np.exp(H0 - H))
            self._steps += 1
            return t
        left = self._build(s, depth - 1, eps, H0)
        if left is None:
            return None
        right = self._build(left.last, depth - 1, eps, H0)
        if right is None:
            return None
        merged = _Tree()
        merged.first, merged.last = left.first, right.last
        merged.rho = left.rho + right.rho
        merged.log_weight = np.logaddexp(left.log_weight, right.log_weight)
        if np.log(self.rng.uniform()) < right.log_weight - merged.log_weight:
            merged.proposal = right.proposal
        else:
            merged.proposal = left.proposal
        if not self._merged_ok(left, right, merged.rho):
            return None
        return merged

    def _merged_ok(self, left, right, rho) -> bool:
        im = self.inv_metric
        sharp = lambda st: im * st.p  # noqa: E731
        if not self._uturn_ok(sharp(left.first), sharp(right.last), rho):
            return False
        # extra checks across the join guard against missed U-turns
        if not self._uturn_ok(sharp(left.first), sharp(right.first), left.rho + right.first.p):
            return False
        return self._uturn_ok(sharp(left.last), sharp(right.last), right.rho + left.last.p)

    def transition(self, q: np.ndarray, logp: float, grad: np.ndarray):
        p = self.rng.standard_normal(self.dim) / np.sqrt(self.inv_metric)
        start = _State(q, p, grad, logp)
        H0 = self._energy(start)
        minus = plus = start
        proposal = start
        rho = p.copy()
        log_weight = 0.0
        self._divergent = False
        self._accept_sum = 0.0
        self._steps = 0
        depth = 0
        while depth < self.cfg.max_treedepth:
            forward = self.rng.uniform() < 0.5
            if forward:
                sub = self._build(plus, depth, self.step, H0)
            else:
                sub = self._build(minus, depth, -self.step, H0)
            depth += 1
            if sub is None:
                break
            # biased progressive sampling favours the new subtree
            if np.log(self.rng.uniform()) < sub.log_weight - log_weight:
                proposal = sub.proposal
            log_weight = np.logaddexp(log_weight, sub.log_weight)
            if forward:
                old = _Tree()
                old.first, old.last, old.rho = minus, plus, rho
                ok = self._merged_ok(old, sub, rho + sub.rho)
                plus = sub.last
            else:
                # a backward subtree runs in reverse time; flip it so the join is ordered
                rev = _Tree()
                rev.first, rev.last, rev.rho = sub.last, sub.first, sub.rho
                old = _Tree()
                old.first, old.last, old.rho = minus, plus, rho
                ok = self._merged_ok(rev, old, rho + sub.rho)
                minus = sub.last
            rho = rho + sub.rho
            if not ok:
                break
        accept = self._accept_sum / max(self._steps, 1)
        return proposal, depth, accept, self._divergent

    def find_reasonable_step(self, q, logp, grad) -> float:
        eps = self.step
        p = self.rng.standard_normal(self.dim) / np.sqrt(self.inv_metric)
        s = _State(q, p, grad, logp)
        H0 = self._energy(s)
        nxt = self._leapfrog(s, eps)
        delta = H0 - self._energy(nxt) if np.isfinite(nxt.logp) else -np.inf
        direction = 1 if delta > np.log(0.8) else -1
        for _ in range(100):
            p = self.rng.standard_normal(self.dim) / np.sqrt(self.inv_metric)
            s = _State(q, p, grad, logp)
            H0 = self._energy(s)
            nxt = self._leapfrog(s, eps)
            delta = H0 - self._energy(nxt) if np.isfinite(nxt.logp) else -np.inf
            if direction == 1 and not delta > np.log(0.8):
                break
            if direction == -1 and not delta < np.log(0.8):
                break
            eps = eps * 2 if direction == 1 else eps / 2
            if eps > 1e7 or eps < 1e-12:
                break
        return eps


def _adaptation_windows(warmup: int, cfg: NUTSConfig) -> tuple[int, int, int]:
    init, term, base = cfg.init_buffer, cfg.term_buffer, cfg.base_window
    if init + term + base > warmup:
        init = int(0.15 * warmup)
        term = int(0.1 * warmup)
        base = warmup - init - term
    return init, term, base


def sample_chain(log_density: LogDensity, init: np.ndarray, config: NUTSConfig,
                 rng: np.random.Generator) -> ChainResult:
    """Run one NUTS chain; returns post-warmup draws and sampler statistics."""
    cfg = config
    q = np.array(init, dtype=float)
    logp, grad = log_density(q)
    if not np.isfinite(logp):
        raise ValueError("initial point has non-finite log density")
    s = _Sampler(log_density, len(q), cfg, rng)
    s.step = s.find_reasonable_step(q, logp, grad)

    def restart_dual_averaging():
        return {"mu": np.log(10 * s.step), "hbar": 0.0, "log_eps_bar": 0.0, "t": 0}

    da = restart_dual_averaging()
    init_buf, term_buf, window = _adaptation_windows(cfg.warmup, cfg)
    window_end = init_buf + window
    window_draws: list[np.ndarray] = []

    draws = np.zeros((cfg.draws, len(q)))
    lps = np.zeros(cfg.draws)
    div = np.zeros(cfg.draws, dtype=bool)
    depths = np.zeros(cfg.draws, dtype=int)
    accs = np.zeros(cfg.draws)
    for it in range(cfg.warmup + cfg.draws):
        state, depth, accept, divergent = s.transition(q, logp, grad)
        q, logp, grad = state.q, state.logp, state.grad
        if it < cfg.warmup:
            da["t"] += 1
            t = da["t"]
            da["hbar"] = (1 - 1 / (t + cfg.t0)) * da["hbar"] + (cfg.target_accept - accept) / (t + cfg.t0)
            log_eps = da["mu"] - np.sqrt(t) / cfg.gamma * da["hbar"]
            eta = t ** (-cfg.kappa)
            da["log_eps_bar"] = eta * log_eps + (1 - eta) * da["log_eps_bar"]
            s.step = float(np.exp(log_eps))
            if init_buf <= it < cfg.warmup - term_buf:
                window_draws.append(q.copy())
                if it + 1 == window_end:
                    w = np.array(window_draws)
                    k = len(w)
                    var = w.var(axis=0, ddof=1) if k > 1 else np.ones(len(q))
                    s.inv_metric = (k / (k + 5.0)) * var + 1e-3 * (5.0 / (k + 5.0))
                    window_draws = []
                    window *= 2
                    nxt_end = window_end + window
                    # stretch the last window to reach the terminal buffer
                    if nxt_end + 2 * window > cfg.warmup - term_buf:
                        nxt_end = cfg.warmup - term_buf
                        window = nxt_end - window_end
                    window_end = nxt_end
                    s.step = s.find_reasonable_step(q, logp, grad)
                    da = restart_dual_averaging()
            if it + 1 == cfg.warmup:
                s.step = float(np.exp(da["log_eps_bar"]))
        else:
            k = it - cfg.warmup
            draws[k], lps[k], div[k], depths[k], accs[k] = q, logp, divergent, depth, accept
    result = ChainResult(draws, lps, div, depths, accs, s.step, s.inv_metric.copy(), s.n_leapfrog)
    hits = int(np.sum(depths >= cfg.max_treedepth))
    if hits:
        result.warnings.append(f"{hits} transitions hit max treedepth {cfg.max_treedepth}")
    return result
