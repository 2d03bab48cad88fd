"""Posterior inference for rating trajectories: MAP, Laplace and NUTS.

``posterior_update`` is the entry point used by the race: it compiles the
ranking archive, picks a backend per prior kind and returns ``RatingSamples``,
the S x T x n array of simplex-valued draws every decision is computed from.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.linalg import cholesky, solve_triangular, LinAlgError
from scipy.optimize import minimize

from . import diagnostics as diag
from .nuts import NUTSConfig, sample_chain
from .plmodel import RankingData, compile_rankings, loglik_mu
from .priors import IndependentDirichlet, PriorError, PriorModel
from .trajectories import RankingObservation, TimeGrid

METHODS = ("laplace", "hmc")


class InferenceError(RuntimeError):
    pass


@dataclass
class InferenceConfig:
    method: str = "auto"  # auto | laplace | hmc
    draws: int = 4000  # Laplace draws
    chains: int = 4
    warmup: int = 1000
    hmc_draws: int = 2000  # per chain
    target_accept: float = 0.8
    max_treedepth: int = 10
    init_radius: float = 1.0
    map_max_iter: int = 2000
    gtol: float = 1e-6
    fd_step: float = 1e-5
    ridge_warn: float = 1e-2
    rhat_max: float = 1.01
    max_divergent_frac: float = 0.01
    min_draws: int = 1000
    shard: bool = True
    # "plugin": Gaussian over latents with hyperparameters fixed at the joint MAP;
    # "joint": Gaussian over all unconstrained parameters
    laplace_hyper: str = "plugin"

    def __post_init__(self):
        if self.method not in ("auto",) + METHODS:
            raise ValueError(f"method must be one of auto, laplace, hmc; got {self.method!r}")
        for name in ("draws", "chains", "hmc_draws", "map_max_iter"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.laplace_hyper not in ("plugin", "joint"):
            raise ValueError("laplace_hyper must be 'plugin' or 'joint'")
        if not 0 < self.target_accept < 1:
            raise ValueError("target_accept must lie in (0, 1)")

    def resolve_method(self, model: PriorModel) -> str:
        if self.method != "auto":
            return self.method
        return "laplace" if not model.log_space else "hmc"


# --- posterior samples --------------------------------------------------------------


@dataclass(frozen=True)
class RatingSamples:
    """Posterior draws of ratings: ``samples[s, t, i]`` is theta_i(t) in draw s."""

    samples: np.ndarray
    algorithms: tuple[str, ...]
    grid: TimeGrid
    method: str
    diagnostics: dict = field(default_factory=dict)
    converged: bool = True
    joint: bool = True  # False: draws are independent across timepoints

    def __post_init__(self):
        x = np.asarray(self.samples, dtype=float)
        if x.ndim != 3:
            raise ValueError("samples must be S x T x n")
        S, T, n = x.shape
        if T != len(self.grid) or n != len(self.algorithms):
            raise ValueError(f"samples shape {x.shape} does not match grid/algorithms")
        if np.any(x < 0) or np.any(np.abs(x.sum(axis=-1) - 1) > 1e-8):
            raise ValueError("every draw must lie on the simplex")
        x = x.copy()
        x.flags.writeable = False
        object.__setattr__(self, "samples", x)
        object.__setattr__(self, "algorithms", tuple(self.algorithms))

    @property
    def n_draws(self) -> int:
        return self.samples.shape[0]

    def index(self, algorithm: str) -> int:
        try:
            return self.algorithms.index(algorithm)
        except ValueError:
            raise KeyError(f"unknown algorithm {algorithm!r}") from None

    def mean(self) -> np.ndarray:
        return self.samples.mean(axis=0)

    def to_csv(self, path: str | Path) -> Path:
        """Long-format draws (sample, timepoint, algorithm, theta) plus a JSON sidecar."""
        path = Path(path)
        S, T, n = self.samples.shape
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample", "timepoint", "algorithm", "theta"])
            for s in range(S):
                for t in range(T):
                    for i, a in enumerate(self.algorithms):
                        w.writerow([s, t, a, repr(float(self.samples[s, t, i]))])
        meta = {"algorithms": list(self.algorithms), "grid": self.grid.to_dict(),
                "method": self.method, "converged": self.converged, "joint": self.joint,
                "diagnostics": _jsonable(self.diagnostics)}
        sidecar_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def from_csv(cls, path: str | Path) -> RatingSamples:
        path = Path(path)
        meta = json.loads(sidecar_path(path).read_text())
        algorithms = tuple(meta["algorithms"])
        col = {a: i for i, a in enumerate(algorithms)}
        grid = TimeGrid.from_dict(meta["grid"])
        rows = []
        with open(path, newline="") as fh:
            for rec in csv.DictReader(fh):
                rows.append((int(rec["sample"]), int(rec["timepoint"]), col[rec["algorithm"]],
                             float(rec["theta"])))
        arr = np.array(rows)
        S = int(arr[:, 0].max()) + 1
        x = np.zeros((S, len(grid), len(algorithms)))
        x[arr[:, 0].astype(int), arr[:, 1].astype(int), arr[:, 2].astype(int)] = arr[:, 3]
        return cls(x, algorithms, grid, meta["method"], meta.get("diagnostics", {}),
                   meta.get("converged", True), meta.get("joint", True))


def sidecar_path(path: Path) -> Path:
    return path.with_suffix(path.suffix + ".json")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else str(v)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


# --- log posterior -----------------------------------------------------------------


class LogPosterior:
    """log p(params | rankings) up to a constant, with gradient."""

    def __init__(self, model: PriorModel, data: RankingData):
        if data.n_times != model.T or len(data.algorithms) != model.n:
            raise ValueError("ranking data does not match the prior's grid/algorithms")
        self.model = model
        self.data = data.merged()

    @property
    def dim(self) -> int:
        return self.model.dim

    def __call__(self, params: np.ndarray) -> tuple[float, np.ndarray]:
        lp, g = self.model.log_prior(params)
        mu = self.model.log_utilities(params)
        ll, dmu = loglik_mu(self.data, mu)
        return lp + ll, g + self.model.chain(params, dmu)

    def safe(self, params: np.ndarray) -> tuple[float, np.ndarray]:
        """As ``__call__`` but maps numerical failures to -inf (for samplers)."""
        try:
            with np.errstate(all="ignore"):
                v, g = self(params)
        except PriorError:
            return -np.inf, np.zeros(self.dim)
        if not np.isfinite(v) or not np.all(np.isfinite(g)):
            return -np.inf, np.zeros(self.dim)
        return v, g

    def check(self, params: np.ndarray) -> tuple[float, np.ndarray]:
        """Evaluate and raise naming the offending block if anything is non-finite."""
        bad = np.flatnonzero(~np.isfinite(params))
        if bad.size:
            raise InferenceError(f"non-finite parameter in block {self.model.block_of(bad[0])!r}")
        try:
            v, g = self(params)
        except PriorError as err:
            raise InferenceError(str(err)) from err
        bad = np.flatnonzero(~np.isfinite(g))
        if bad.size:
            raise InferenceError(f"non-finite gradient in block {self.model.block_of(bad[0])!r}")
        if not np.isfinite(v):
            raise InferenceError("non-finite log density")
        return v, g


@dataclass
class MapResult:
    params: np.ndarray
    log_density: float
    grad_norm: float
    converged: bool
    iterations: int
    message: str = ""


def hessian_fd(post: LogPosterior, x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Symmetrised Hessian of the log density by central differences of its gradient."""
    d = len(x)
    H = np.zeros((d, d))
    for i in range(d):
        e = np.zeros(d)
        e[i] = step
        H[i] = (post(x + e)[1] - post(x - e)[1]) / (2 * step)
    return 0.5 * (H + H.T)


def map_estimate(post: LogPosterior, init: np.ndarray | None = None,
                 config: InferenceConfig | None = None) -> MapResult:
    """Maximise the log posterior: L-BFGS, then damped Newton polish if needed."""
    cfg = config or InferenceConfig()
    x0 = post.model.init_params() if init is None else np.asarray(init, dtype=float)
    f0, _ = post.check(x0)

    def neg(x):
        v, g = post.safe(x)
        if not np.isfinite(v):
            return 1e300, np.zeros_like(x)
        return -v, -g

    res = minimize(neg, x0, jac=True, method="L-BFGS-B",
                   options={"maxiter": cfg.map_max_iter, "gtol": cfg.gtol * 1e-2,
                            "ftol": 1e-15, "maxcor": 20})
    x = res.x
    v, g = post.check(x)
    iterations = int(res.nit)
    # Newton polish: cheap at these dimensions and reaches tight gradient norms
    for _ in range(20):
        if np.linalg.norm(g) < cfg.gtol or post.dim > 2000:
            break
        H = hessian_fd(post, x, cfg.fd_step)
        try:
            step = np.linalg.solve(-H + 1e-10 * np.eye(post.dim), g)
        except np.linalg.LinAlgError:
            break
        t = 1.0
        while t > 1e-8:
            v_new, g_new = post.safe(x + t * step)
            if np.isfinite(v_new) and v_new >= v - 1e-12:
                break
            t /= 2
        else:
            break
        x, v, g = x + t * step, v_new, g_new
        iterations += 1
    gnorm = float(np.linalg.norm(g))
    if v < f0:
        x, v, gnorm = x0, f0, float(np.linalg.norm(post(x0)[1]))
    return MapResult(x, float(v), gnorm, gnorm < cfg.gtol, iterations, str(res.message))


@dataclass
class LaplaceFit:
    mean: np.ndarray
    chol_precision: np.ndarray
    ridge: float
    map: MapResult

    def draw(self, rng: np.random.Generator, size: int) -> np.ndarray:
        z = rng.standard_normal((self.mean.size, size))
        return (self.mean[:, None] + solve_triangular(self.chol_precision.T, z, lower=False)).T


def laplace_fit(post: LogPosterior, map_result: MapResult,
                config: InferenceConfig | None = None) -> LaplaceFit:
    cfg = config or InferenceConfig()
    P = -hessian_fd(post, map_result.params, cfg.fd_step)
    ridge = 0.0
    scale = max(1.0, float(np.mean(np.abs(np.diag(P)))))
    while True:
        try:
            L = cholesky(P + ridge * np.eye(len(P)), lower=True)
            break
        except LinAlgError:
            ridge = 1e-10 * scale if ridge == 0 else ridge * 10
            if ridge > 1e6 * scale:
                raise InferenceError("Hessian could not be regularised") from None
    if ridge > cfg.ridge_warn:
        warnings.warn("posterior strongly non-Gaussian; use hmc", RuntimeWarning, stacklevel=2)
    return LaplaceFit(map_result.params, L, ridge, map_result)


def laplace_sample(post: LogPosterior, map_result: MapResult, S: int, rng: np.random.Generator,
                   config: InferenceConfig | None = None) -> tuple[np.ndarray, dict]:
    """Draw S ratings (S x T x n) from the Gaussian at the MAP; also return diagnostics."""
    if S < 1:
        raise ValueError("S must be >= 1")
    fit = laplace_fit(post, map_result, config)
    params = fit.draw(rng, S)
    theta = post.model.transform_batch(params)
    info = {"map_grad_norm": map_result.grad_norm, "map_converged": map_result.converged,
            "ridge": fit.ridge, "ridge_flagged": fit.ridge > 0}
    return theta, info


def hmc_sample(post: LogPosterior, config: InferenceConfig | None, rng: np.random.Generator):
    """Run ``chains`` NUTS chains; returns (theta draws, raw params, diagnostics)."""
    cfg = config or InferenceConfig()
    ncfg = NUTSConfig(warmup=cfg.warmup, draws=cfg.hmc_draws, target_accept=cfg.target_accept,
                      max_treedepth=cfg.max_treedepth)
    seeds = rng.integers(2 ** 63, size=cfg.chains)
    base = post.model.init_params()
    chains = []
    for c in range(cfg.chains):
        crng = np.random.default_rng(seeds[c])
        for _ in range(100):
            init = base + crng.uniform(-cfg.init_radius, cfg.init_radius, size=post.dim)
            if np.isfinite(post.safe(init)[0]):
                break
        else:
            raise InferenceError("no finite initial point found")
        chains.append(sample_chain(post.safe, init, ncfg, crng))
    draws = np.stack([c.draws for c in chains])  # chains x draws x dim
    rh = diag.rhat(draws)
    ess = diag.ess_bulk(draws)
    n_div = int(sum(c.divergent.sum() for c in chains))
    total = cfg.chains * cfg.hmc_draws
    info = {"rhat": rh, "ess_bulk": ess, "rhat_max": float(np.nanmax(rh)),
            "ess_min": float(np.nanmin(ess)), "divergences": n_div,
            "step_size": [c.step_size for c in chains],
            "max_treedepth_hits": int(sum((c.treedepth >= cfg.max_treedepth).sum() for c in chains)),
            "n_leapfrog": int(sum(c.n_leapfrog for c in chains))}
    info["converged"] = bool(info["rhat_max"] <= cfg.rhat_max and n_div <= cfg.max_divergent_frac * total)
    flat = draws.reshape(-1, post.dim)
    theta = post.model.transform_batch(flat)
    return theta, flat, info


# --- entry point --------------------------------------------------------------------


def _merge_shard_info(infos: list[dict], method: str) -> dict:
    out = {"shards": len(infos)}
    if method == "hmc":
        out["rhat_max"] = max(i["rhat_max"] for i in infos)
        out["ess_min"] = min(i["ess_min"] for i in infos)
        out["divergences"] = sum(i["divergences"] for i in infos)
        out["converged"] = all(i["converged"] for i in infos)
    else:
        out["map_grad_norm"] = max(i["map_grad_norm"] for i in infos)
        out["map_converged"] = all(i["map_converged"] for i in infos)
        out["ridge"] = max(i["ridge"] for i in infos)
    return out


def posterior_update(observations: Sequence[RankingObservation] | RankingData,
                     model: PriorModel, algorithms: Sequence[str], grid: TimeGrid,
                     config: InferenceConfig | None = None,
                     rng: np.random.Generator | int | None = None) -> RatingSamples:
    """Refit the posterior on the full archive and return rating draws."""
    cfg = config or InferenceConfig()
    rng = np.random.default_rng(rng)
    algorithms = tuple(algorithms)
    data = observations if isinstance(observations, RankingData) else \
        compile_rankings(observations, algorithms, len(grid))
    if len(data) == 0:
        S = max(cfg.draws, cfg.min_draws)
        params = model.sample_prior(rng, S)
        theta = model.transform_batch(params)
        return RatingSamples(theta, algorithms, grid, "prior", {"prior_only": True},
                             True, joint=not isinstance(model, IndependentDirichlet))
    method = cfg.resolve_method(model)
    if isinstance(model, IndependentDirichlet) and cfg.shard:
        theta, info = _sharded_dirichlet(data, model, method, cfg, rng)
        joint = False
    else:
        post = LogPosterior(model, data)
        if method == "laplace":
            mp = map_estimate(post, config=cfg)
            hyper = {}
            if cfg.laplace_hyper == "plugin" and model.log_space and model.hyper_names():
                cond, latent = model.conditional(mp.params)
                hyper = {k: cond.fixed[k] for k in model.hyper_names()}
                post = LogPosterior(cond, data)
                mp = map_estimate(post, latent, config=cfg)
            theta, info = laplace_sample(post, mp, cfg.draws, rng, cfg)
            info["converged"] = mp.converged or mp.grad_norm < 1e-3
            if hyper:
                info["plugin_hyper"] = hyper
        else:
            theta, _, info = hmc_sample(post, cfg, rng)
        joint = not isinstance(model, IndependentDirichlet)
    if theta.shape[0] < cfg.min_draws:
        raise InferenceError(f"only {theta.shape[0]} draws; decisions need >= {cfg.min_draws}")
    info["model"] = model.describe()
    converged = bool(info.get("converged", True))
    return RatingSamples(theta, algorithms, grid, method, info, converged, joint)


def _sharded_dirichlet(data: RankingData, model: IndependentDirichlet, method: str,
                       cfg: InferenceConfig, rng: np.random.Generator):
    """Fit each timepoint separately: the independent prior factorises over t."""
    T, n = model.T, model.n
    S = cfg.draws if method == "laplace" else cfg.chains * cfg.hmc_draws
    seeds = rng.integers(2 ** 63, size=T)
    theta = np.zeros((S, T, n))
    infos = []
    present = set(np.unique(data.t).tolist())
    for t in range(T):
        trng = np.random.default_rng(seeds[t])
        if t not in present:
            theta[:, t] = trng.dirichlet(np.full(n, model.alpha), size=S)
            continue
        sub = IndependentDirichlet(n, 1, alpha=model.alpha)
        post = LogPosterior(sub, data.subset_times([t]))
        if method == "laplace":
            mp = map_estimate(post, config=cfg)
            th, info = laplace_sample(post, mp, S, trng, cfg)
        else:
            th, _, info = hmc_sample(post, cfg, trng)
        theta[:, t] = th[:, 0]
        infos.append(info)
    info = _merge_shard_info(infos, method) if infos else {"shards": 0}
    if method == "laplace":
        info["converged"] = all(i["map_converged"] or i["map_grad_norm"] < 1e-3 for i in infos)
    return theta, info


def config_dict(cfg: InferenceConfig) -> dict:
    return asdict(cfg)


__all__ = ["InferenceConfig", "RatingSamples", "LogPosterior", "MapResult", "map_estimate",
           "laplace_sample", "hmc_sample", "posterior_update", "hessian_fd", "InferenceError",
           "laplace_fit", "sidecar_path"]
