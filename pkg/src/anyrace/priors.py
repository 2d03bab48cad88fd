"""Prior models over rating trajectories.

Every model maps a flat unconstrained parameter vector to log-utilities
``mu`` (T x n) and supplies the log prior density with its gradient.
Simplex models (Dirichlet) parameterise each theta(t) by stick-breaking;
log-space models place a prior on n-1 latent functions eta_q(t) which the
Helmert matrix turns into zero-sum utilities.  Constrained hyperparameters
are stored as logs, with the log-Jacobian included in the density.

Temporal models work on the normalised grid coordinate in [0, 1]
(``TimeGrid.normalized``), so lengthscales are fractions of the time range.
"""

from __future__ import annotations

import copy

from dataclasses import dataclass
from typing import ClassVar

import numpy as np
from scipy.linalg import cho_solve, cholesky, solve_triangular, LinAlgError
from scipy.special import gammaln, digamma, log_expit

from .plmodel import helmert, softmax
from .trajectories import TimeGrid

KINDS = ("independent_dirichlet", "hierarchical_dirichlet", "gp_exact", "gp_hsgp",
         "random_walk", "bspline")

JITTER = 1e-9


class PriorError(RuntimeError):
    """A prior density could not be evaluated (e.g. Cholesky failure)."""


# --- kernels -------------------------------------------------------------------


@dataclass(frozen=True)
class MaternKernel:
    nu: float = 1.5  # 1.5, 2.5 or inf
    sigma: float = 1.0
    lengthscale: float = 1.0

    def __post_init__(self):
        if self.nu not in (1.5, 2.5, np.inf):
            raise ValueError("nu must be 1.5, 2.5 or inf")
        if self.sigma <= 0 or self.lengthscale <= 0:
            raise ValueError("sigma and lengthscale must be positive")

    def __call__(self, t, t2):
        return matern_cov(self, t, t2)

    def gram(self, x: np.ndarray) -> np.ndarray:
        return matern_cov(self, x[:, None], x[None, :])


def _matern_unit(nu, d, ell):
    """Unit-amplitude Matérn correlation and its derivative w.r.t. log(ell)."""
    if nu == 1.5:
        r = np.sqrt(3.0) * d / ell
        e = np.exp(-r)
        return (1 + r) * e, r * r * e
    if nu == 2.5:
        r = np.sqrt(5.0) * d / ell
        e = np.exp(-r)
        return (1 + r + r * r / 3) * e, r * r * (1 + r) / 3 * e
    c = np.exp(-0.5 * (d / ell) ** 2)
    return c, c * (d / ell) ** 2


def matern_cov(kernel: MaternKernel, t, t2):
    d = np.abs(np.asarray(t, dtype=float) - np.asarray(t2, dtype=float))
    return kernel.sigma ** 2 * _matern_unit(kernel.nu, d, kernel.lengthscale)[0]


def matern_spectral_density(nu, omega, sigma=1.0, ell=1.0):
    """1-D spectral density of the Matérn kernel and d log S / d log ell."""
    omega = np.asarray(omega, dtype=float)
    if nu == np.inf:
        s = sigma ** 2 * np.sqrt(2 * np.pi) * ell * np.exp(-0.5 * (ell * omega) ** 2)
        return s, 1.0 - (ell * omega) ** 2
    from scipy.special import gamma
    lam2 = 2 * nu / ell ** 2
    const = 2 * np.sqrt(np.pi) * gamma(nu + 0.5) / gamma(nu) * (2 * nu) ** nu
    s = sigma ** 2 * const * ell ** (-2 * nu) * (lam2 + omega ** 2) ** (-(nu + 0.5))
    dlog = -2 * nu + (nu + 0.5) * 2 * lam2 / (lam2 + omega ** 2)
    return s, dlog


def hsgp_basis(x: np.ndarray, L: float, m: int, kernel: MaternKernel | None = None):
    """Laplacian eigenpairs on [-L, L] with Dirichlet boundaries.

    Returns ``(sqrt_eigenvalues, phi, spectral)`` where ``phi`` is len(x) x m
    and ``spectral`` is the kernel's spectral density at each sqrt-eigenvalue
    (``None`` without a kernel).
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    x = np.asarray(x, dtype=float)
    if np.any(np.abs(x) > L):
        raise ValueError("points must lie inside [-L, L]")
    sqrt_lam = np.arange(1, m + 1) * np.pi / (2 * L)
    phi = np.sqrt(1.0 / L) * np.sin(sqrt_lam[None, :] * (x[:, None] + L))
    spectral = None
    if kernel is not None:
        spectral = matern_spectral_density(kernel.nu, sqrt_lam, kernel.sigma, kernel.lengthscale)[0]
    return sqrt_lam, phi, spectral


# --- B-splines --------------------------------------------------------------------


def bspline_knots(x: np.ndarray, K: int, degree: int = 3) -> np.ndarray:
    """Clamped knot vector of length K+degree+1, interior knots at quantiles of x."""
    if K < degree + 1:
        raise ValueError(f"need K >= degree+1 = {degree + 1}, got {K}")
    n_interior = K - degree - 1
    interior = np.quantile(x, np.linspace(0, 1, n_interior + 2)[1:-1]) if n_interior else []
    return np.concatenate([np.full(degree + 1, x[0]), interior, np.full(degree + 1, x[-1])])


def _cox_de_boor(x: np.ndarray, knots: np.ndarray, degree: int) -> np.ndarray:
    n_basis = len(knots) - degree - 1
    # degree-0 indicators on half-open spans; the last non-empty span is closed
    B = np.zeros((len(x), len(knots) - 1))
    for i in range(len(knots) - 1):
        lo, hi = knots[i], knots[i + 1]
        if hi > lo:
            B[:, i] = (x >= lo) & (x < hi)
    last = max(i for i in range(len(knots) - 1) if knots[i + 1] > knots[i])
    B[x == knots[-1], last] = 1.0
    for d in range(1, degree + 1):
        nxt = np.zeros((len(x), len(knots) - 1 - d))
        for i in range(len(knots) - 1 - d):
            left = knots[i + d] - knots[i]
            right = knots[i + d + 1] - knots[i + 1]
            if left > 0:
                nxt[:, i] += (x - knots[i]) / left * B[:, i]
            if right > 0:
                nxt[:, i] += (knots[i + d + 1] - x) / right * B[:, i + 1]
        B = nxt
    return B[:, :n_basis]


def bspline_basis(grid: TimeGrid | np.ndarray, K: int | None = None, degree: int = 3) -> np.ndarray:
    """T x K B-spline design matrix on the (normalised) grid coordinates."""
    x = grid.normalized() if isinstance(grid, TimeGrid) else np.asarray(grid, dtype=float)
    if K is None:
        K = max(len(x) // 2, degree + 1)
    knots = bspline_knots(x, K, degree)
    return _cox_de_boor(x, knots, degree)


# --- stick-breaking ----------------------------------------------------------------


def _stick_offsets(n: int) -> np.ndarray:
    # offsets centre y = 0 on the uniform simplex point
    return np.log(n - 1 - np.arange(n - 1))


def stick_breaking_log(y: np.ndarray):
    """Map y (..., n-1) to log theta (..., n); also return z and log-Jacobian."""
    n = y.shape[-1] + 1
    a = y - _stick_offsets(n)
    log_z, log_1mz = log_expit(a), log_expit(-a)
    log_stick = np.concatenate(
        [np.zeros(y.shape[:-1] + (1,)), np.cumsum(log_1mz, axis=-1)], axis=-1
    )
    log_theta = log_stick.copy()
    log_theta[..., :-1] += log_z
    log_jac = (log_z + log_1mz + log_stick[..., :-1]).sum(axis=-1)
    return log_theta, np.exp(log_z), log_jac


def stick_breaking(y: np.ndarray) -> np.ndarray:
    return np.exp(stick_breaking_log(np.asarray(y, dtype=float))[0])


def stick_breaking_inverse(theta: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return stick_breaking_inverse_log(np.log(np.asarray(theta, dtype=float)))


def stick_breaking_inverse_log(log_theta: np.ndarray) -> np.ndarray:
    """Inverse from log-ratings; stays finite for components far below 1e-300."""
    log_theta = np.asarray(log_theta, dtype=float)
    n = log_theta.shape[-1]
    # log of the mass after position k: sum_{i > k} theta_i
    rest = np.logaddexp.accumulate(log_theta[..., ::-1], axis=-1)[..., ::-1][..., 1:]
    return log_theta[..., :-1] - rest + _stick_offsets(n)


def _log_dirichlet(rng: np.random.Generator, alpha: np.ndarray, size) -> np.ndarray:
    """Log of Dirichlet draws, accurate for tiny concentrations.

    Uses Gamma(a) = Gamma(a + 1) * U^(1/a) so the log never underflows.
    """
    shape = tuple(np.atleast_1d(size)) + alpha.shape
    lg = np.log(rng.gamma(alpha + 1.0, size=shape)) + np.log(rng.uniform(size=shape)) / alpha
    return lg - np.logaddexp.reduce(lg, axis=-1, keepdims=True)


def _stick_backprop(z: np.ndarray, g_log_theta: np.ndarray) -> np.ndarray:
    """Chain rule from d/d log theta (..., n) to d/dy (..., n-1)."""
    tail = np.cumsum(g_log_theta[..., ::-1], axis=-1)[..., ::-1]  # sum_{i >= k}
    later = tail[..., 1:]  # sum_{i > k}
    return g_log_theta[..., :-1] * (1 - z) - z * later


def _stick_logjac_grad(z: np.ndarray) -> np.ndarray:
    n = z.shape[-1] + 1
    k = np.arange(n - 1)
    return 1 - 2 * z - (n - 2 - k) * z


# --- hyperpriors (densities of the log-transformed parameter) ---------------


def _lognormal_logp(log_x, mu, s):
    return -0.5 * ((log_x - mu) / s) ** 2 - np.log(s * np.sqrt(2 * np.pi)), -(log_x - mu) / s ** 2


def _invgamma_logp(log_x, a, b):
    x = np.exp(log_x)
    lp = a * np.log(b) - gammaln(a) - a * log_x - b / x
    return lp, -a + b / x


def _exponential_logp(log_x, lam):
    x = np.exp(log_x)
    return np.log(lam) - lam * x + log_x, -lam * x + 1


# --- models ---------------------------------------------------------------------------


class PriorModel:
    """Base class: flat parameter layout plus density, transform and chain rule."""

    kind: ClassVar[str]
    log_space: ClassVar[bool] = True

    def __init__(self, n: int, grid: TimeGrid, fixed: dict | None = None):
        if n < 2:
            raise ValueError("need at least 2 algorithms")
        self.n = n
        # Dirichlet models ignore time, so they also accept a bare timepoint count
        self.grid = grid
        self.T = grid if isinstance(grid, int) else len(grid)
        self.fixed = dict(fixed or {})
        self._build_layout()

    def _build_layout(self):
        self.layout: dict[str, tuple[slice, tuple[int, ...]]] = {}
        offset = 0
        for name, shape in self._blocks():
            if name.startswith("log_") and name[4:] in self.fixed:
                continue
            size = int(np.prod(shape))
            self.layout[name] = (slice(offset, offset + size), shape)
            offset += size
        self.dim = offset

    def _blocks(self) -> list[tuple[str, tuple[int, ...]]]:
        raise NotImplementedError

    def hyper_names(self) -> list[str]:
        """Free log-stored hyperparameters, by constrained name."""
        return [name[4:] for name in self.layout if name.startswith("log_")]

    def conditional(self, params: np.ndarray) -> tuple[PriorModel, np.ndarray]:
        """Copy with every free hyperparameter fixed at its value in ``params``.

        Returns the copy and the remaining (latent) parameters.
        """
        p = self.unpack(params)
        out = copy.copy(self)
        out.fixed = dict(self.fixed)
        for name in self.hyper_names():
            out.fixed[name] = float(np.exp(p["log_" + name]))
        out._build_layout()
        return out, out.pack(p)

    def unpack(self, params: np.ndarray) -> dict[str, np.ndarray]:
        params = np.asarray(params, dtype=float)
        if params.shape != (self.dim,):
            raise ValueError(f"{self.kind} expects {self.dim} parameters, got {params.shape}")
        return {name: params[sl].reshape(shape) for name, (sl, shape) in self.layout.items()}

    def pack(self, blocks: dict[str, np.ndarray]) -> np.ndarray:
        out = np.zeros(self.dim)
        for name, (sl, shape) in self.layout.items():
            out[sl] = np.asarray(blocks[name], dtype=float).reshape(-1)
        return out

    def block_of(self, index: int) -> str:
        for name, (sl, _) in self.layout.items():
            if sl.start <= index < sl.stop:
                return name
        return "?"

    def hyper(self, p: dict, name: str) -> float:
        """Constrained value of a log-stored hyperparameter (fixed or free)."""
        if name in self.fixed:
            return float(self.fixed[name])
        return float(np.exp(p["log_" + name]))

    def unpack_batch(self, params: np.ndarray) -> dict[str, np.ndarray]:
        """Blocks of an S x dim stack of parameter vectors, with a leading S axis."""
        params = np.atleast_2d(np.asarray(params, dtype=float))
        if params.shape[1] != self.dim:
            raise ValueError(f"{self.kind} expects {self.dim} parameters, got {params.shape[1]}")
        return {name: params[:, sl].reshape((len(params),) + shape)
                for name, (sl, shape) in self.layout.items()}

    def hyper_batch(self, p: dict, name: str) -> np.ndarray:
        size = len(next(iter(p.values())))
        if name in self.fixed:
            return np.full(size, float(self.fixed[name]))
        return np.exp(p["log_" + name])

    # subclasses implement these
    def log_prior(self, params: np.ndarray) -> tuple[float, np.ndarray]:
        raise NotImplementedError

    def log_utilities(self, params: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def chain(self, params: np.ndarray, dmu: np.ndarray) -> np.ndarray:
        """Pull back a gradient w.r.t. log-utilities to the flat parameters."""
        raise NotImplementedError

    def sample_prior(self, rng: np.random.Generator, size: int) -> np.ndarray:
        raise NotImplementedError

    def init_params(self) -> np.ndarray:
        return np.zeros(self.dim)

    def transform(self, params: np.ndarray) -> np.ndarray:
        """Ratings theta (T x n), each row on the simplex."""
        return softmax(self.log_utilities(params))

    def log_utilities_batch(self, params: np.ndarray) -> np.ndarray:
        return np.stack([self.log_utilities(p) for p in np.atleast_2d(params)])

    def transform_batch(self, params: np.ndarray) -> np.ndarray:
        """Ratings for an S x dim stack of parameters -> S x T x n."""
        return softmax(self.log_utilities_batch(params))

    def describe(self) -> dict:
        return {"kind": self.kind, "n": self.n, "T": self.T, "dim": self.dim,
                "fixed": self.fixed, "blocks": {k: list(s) for k, (_, s) in self.layout.items()}}


class IndependentDirichlet(PriorModel):
    """theta(t) ~ Dirichlet(alpha, ..., alpha) independently per timepoint."""

    kind = "independent_dirichlet"
    log_space = False

    def __init__(self, n, grid, alpha: float = 1.0, fixed=None):
        if alpha <= 0:
            raise ValueError("alpha must be positive")
        self.alpha = float(alpha)
        super().__init__(n, grid, fixed)

    def _blocks(self):
        return [("y", (self.T, self.n - 1))]

    def log_prior(self, params):
        y = self.unpack(params)["y"]
        log_theta, z, log_jac = stick_breaking_log(y)
        a, n = self.alpha, self.n
        norm = gammaln(n * a) - n * gammaln(a)
        lp = self.T * norm + (a - 1) * log_theta.sum() + log_jac.sum()
        grad = _stick_backprop(z, np.full_like(log_theta, a - 1)) + _stick_logjac_grad(z)
        return float(lp), grad.reshape(-1)

    def log_jacobian(self, params):
        return float(stick_breaking_log(self.unpack(params)["y"])[2].sum())

    def log_utilities(self, params):
        return stick_breaking_log(self.unpack(params)["y"])[0]

    def log_utilities_batch(self, params):
        return stick_breaking_log(self.unpack_batch(params)["y"])[0]

    def chain(self, params, dmu):
        z = stick_breaking_log(self.unpack(params)["y"])[1]
        return _stick_backprop(z, dmu).reshape(-1)

    def sample_prior(self, rng, size):
        log_theta = _log_dirichlet(rng, np.full(self.n, self.alpha), (size, self.T))
        return stick_breaking_inverse_log(log_theta).reshape(size, -1)

    def inverse_transform(self, theta):
        return stick_breaking_inverse(theta).reshape(-1)


class HierarchicalDirichlet(PriorModel):
    """kappa ~ Exponential(lam); theta(t) ~ Dirichlet(kappa/n) per timepoint."""

    kind = "hierarchical_dirichlet"
    log_space = False

    def __init__(self, n, grid, lam: float = 1.0, fixed=None):
        self.lam = float(lam)
        super().__init__(n, grid, fixed)

    def _blocks(self):
        return [("y", (self.T, self.n - 1)), ("log_kappa", ())]

    def log_prior(self, params):
        p = self.unpack(params)
        log_theta, z, log_jac = stick_breaking_log(p["y"])
        kappa, n, T = self.hyper(p, "kappa"), self.n, self.T
        a = kappa / n
        sum_log = log_theta.sum()
        lp = T * (gammaln(kappa) - n * gammaln(a)) + (a - 1) * sum_log + log_jac.sum()
        gy = _stick_backprop(z, np.full_like(log_theta, a - 1)) + _stick_logjac_grad(z)
        grads = {"y": gy}
        if "log_kappa" in self.layout:
            hp, hg = _exponential_logp(p["log_kappa"], self.lam)
            lp += hp
            grads["log_kappa"] = kappa * (T * (digamma(kappa) - digamma(a)) + sum_log / n) + hg
        return float(lp), self.pack(grads)

    def log_utilities(self, params):
        return stick_breaking_log(self.unpack(params)["y"])[0]

    def log_utilities_batch(self, params):
        return stick_breaking_log(self.unpack_batch(params)["y"])[0]

    def chain(self, params, dmu):
        z = stick_breaking_log(self.unpack(params)["y"])[1]
        grads = {"y": _stick_backprop(z, dmu)}
        if "log_kappa" in self.layout:
            grads["log_kappa"] = 0.0
        return self.pack(grads)

    def sample_prior(self, rng, size):
        out = np.zeros((size, self.dim))
        for s in range(size):
            kappa = self.fixed.get("kappa") or rng.exponential(1 / self.lam)
            log_theta = _log_dirichlet(rng, np.full(self.n, kappa / self.n), self.T)
            blocks = {"y": stick_breaking_inverse_log(log_theta)}
            if "log_kappa" in self.layout:
                blocks["log_kappa"] = np.log(kappa)
            out[s] = self.pack(blocks)
        return out

    def init_params(self):
        blocks = {"y": np.zeros((self.T, self.n - 1))}
        if "log_kappa" in self.layout:
            blocks["log_kappa"] = np.log(self.n)
        return self.pack(blocks)


class _LatentModel(PriorModel):
    """Shared machinery for log-space models with Helmert latents eta (T x n-1)."""

    def __init__(self, n, grid, fixed=None):
        super().__init__(n, grid, fixed)
        self.Q = helmert(n)
        self.x = grid.normalized()

    def latents(self, params) -> np.ndarray:
        raise NotImplementedError

    def latent_chain(self, params, deta) -> np.ndarray:
        raise NotImplementedError

    def log_utilities(self, params):
        return self.latents(params) @ self.Q.T

    def latents_batch(self, params) -> np.ndarray:
        return np.stack([self.latents(p) for p in np.atleast_2d(params)])

    def log_utilities_batch(self, params):
        return self.latents_batch(params) @ self.Q.T

    def chain(self, params, dmu):
        return self.latent_chain(params, dmu @ self.Q)


def _hyper_init(prior: tuple[float, float], kind: str) -> float:
    if kind == "lognormal":
        return prior[0]
    a, b = prior
    return float(np.log(b / (a + 1)))  # mode of the inverse gamma


class ExactGP(_LatentModel):
    """eta_q ~ GP(0, sigma^2 Matern_nu(ell)) with log-normal / inverse-gamma hyperpriors.

    ``parameterization="noncentered"`` stores z with eta = sigma * chol(C) z,
    which keeps joint MAP away from the sigma -> 0 collapse.
    """

    kind = "gp_exact"

    def __init__(self, n, grid, nu=1.5, sigma_prior=(0.0, 0.5), ell_prior=(5.0, 3.0),
                 parameterization="noncentered", fixed=None):
        if parameterization not in ("centered", "noncentered"):
            raise ValueError("parameterization must be 'centered' or 'noncentered'")
        self.nu = nu
        self.sigma_prior = tuple(sigma_prior)
        self.ell_prior = tuple(ell_prior)
        self.centered = parameterization == "centered"
        super().__init__(n, grid, fixed)
        self._d = np.abs(self.x[:, None] - self.x[None, :])

    def _blocks(self):
        name = "eta" if self.centered else "z"
        return [(name, (self.T, self.n - 1)), ("log_sigma", ()), ("log_ell", ())]

    def _chol(self, ell):
        if not (np.isfinite(ell) and ell > 0):
            raise PriorError(f"GP lengthscale must be positive and finite, got {ell}")
        C, dC = _matern_unit(self.nu, self._d, ell)
        C = C + JITTER * np.eye(self.T)
        try:
            L = cholesky(C, lower=True)
        except LinAlgError as err:
            raise PriorError(f"GP Gram matrix not positive definite (ell={ell:.3g})") from err
        return L, dC

    def _hyper_terms(self, p, lp, grads):
        if "log_sigma" in self.layout:
            h, hg = _lognormal_logp(p["log_sigma"], *self.sigma_prior)
            lp += h
            grads["log_sigma"] = grads.get("log_sigma", 0.0) + hg
        if "log_ell" in self.layout:
            h, hg = _invgamma_logp(p["log_ell"], *self.ell_prior)
            lp += h
            grads["log_ell"] = grads.get("log_ell", 0.0) + hg
        return lp

    def log_prior(self, params):
        p = self.unpack(params)
        q = self.n - 1
        if not self.centered:
            z = p["z"]
            lp = -0.5 * np.sum(z ** 2) - 0.5 * z.size * np.log(2 * np.pi)
            grads = {"z": -z}
            lp = self._hyper_terms(p, lp, grads)
            return float(lp), self.pack(grads)
        eta = p["eta"]
        sigma, ell = self.hyper(p, "sigma"), self.hyper(p, "ell")
        L, dC = self._chol(ell)
        # K = sigma^2 C
        A = cho_solve((L, True), eta) / sigma ** 2  # K^-1 eta
        quad = float(np.sum(eta * A))
        logdet = 2 * np.log(np.diag(L)).sum() + 2 * self.T * np.log(sigma)
        lp = -0.5 * quad - 0.5 * q * (logdet + self.T * np.log(2 * np.pi))
        grads = {"eta": -A}
        if "log_sigma" in self.layout:
            grads["log_sigma"] = quad - q * self.T
        if "log_ell" in self.layout:
            tr = np.trace(cho_solve((L, True), dC))
            grads["log_ell"] = 0.5 * sigma ** 2 * np.sum(A * (dC @ A)) - 0.5 * q * tr
        lp = self._hyper_terms(p, lp, grads)
        return float(lp), self.pack(grads)

    def latents(self, params):
        p = self.unpack(params)
        if self.centered:
            return p["eta"]
        L, _ = self._chol(self.hyper(p, "ell"))
        return self.hyper(p, "sigma") * (L @ p["z"])

    def latents_batch(self, params):
        p = self.unpack_batch(params)
        if self.centered:
            return p["eta"]
        sigma, ell = self.hyper_batch(p, "sigma"), self.hyper_batch(p, "ell")
        if "log_ell" in self.layout:
            L = np.stack([self._chol(e)[0] for e in ell])
        else:
            L = self._chol(ell[0])[0]
        return sigma[:, None, None] * (L @ p["z"])

    def latent_chain(self, params, deta):
        p = self.unpack(params)
        if self.centered:
            grads = {"eta": deta}
            for name in ("log_sigma", "log_ell"):
                if name in self.layout:
                    grads[name] = 0.0
            return self.pack(grads)
        sigma, z = self.hyper(p, "sigma"), p["z"]
        L, dC = self._chol(self.hyper(p, "ell"))
        grads = {"z": sigma * (L.T @ deta)}
        if "log_sigma" in self.layout:
            grads["log_sigma"] = sigma * np.sum(deta * (L @ z))
        if "log_ell" in self.layout:
            # derivative of the Cholesky factor: dL = L Phi(L^-1 dC L^-T)
            X = solve_triangular(L, solve_triangular(L, dC.T, lower=True).T, lower=True)
            Phi = np.tril(X) - 0.5 * np.diag(np.diag(X))
            grads["log_ell"] = sigma * np.sum(deta * (L @ Phi @ z))
        return self.pack(grads)

    def init_params(self):
        name = "eta" if self.centered else "z"
        blocks = {name: np.zeros((self.T, self.n - 1))}
        if "log_sigma" in self.layout:
            blocks["log_sigma"] = _hyper_init(self.sigma_prior, "lognormal")
        if "log_ell" in self.layout:
            blocks["log_ell"] = _hyper_init(self.ell_prior, "invgamma")
        return self.pack(blocks)

    def sample_prior(self, rng, size):
        out = np.zeros((size, self.dim))
        for s in range(size):
            sigma = self.fixed.get("sigma") or np.exp(rng.normal(*self.sigma_prior))
            ell = self.fixed.get("ell") or 1.0 / rng.gamma(self.ell_prior[0], 1.0 / self.ell_prior[1])
            z = rng.standard_normal((self.T, self.n - 1))
            blocks = {"log_sigma": np.log(sigma), "log_ell": np.log(ell)}
            if self.centered:
                blocks["eta"] = sigma * self._chol(ell)[0] @ z
            else:
                blocks["z"] = z
            out[s] = self.pack(blocks)
        return out


class HilbertGP(_LatentModel):
    """Reduced-rank GP: eta_q(t) = sum_j beta_qj sqrt(S(sqrt(lambda_j))) phi_j(t)."""

    kind = "gp_hsgp"

    def __init__(self, n, grid, nu=1.5, m=64, c=1.5, sigma_prior=(0.0, 0.5),
                 ell_prior=(5.0, 3.0), fixed=None):
        if c <= 1:
            raise ValueError("boundary factor c must exceed 1")
        self.nu, self.m, self.c = nu, int(m), float(c)
        self.sigma_prior = tuple(sigma_prior)
        self.ell_prior = tuple(ell_prior)
        super().__init__(n, grid, fixed)
        # normalised coordinates span [0, 1], so L = c * t_T = c
        self.L = self.c * self.x[-1]
        self.sqrt_lam, self.phi, _ = hsgp_basis(self.x, self.L, self.m)

    def _blocks(self):
        return [("beta", (self.m, self.n - 1)), ("log_sigma", ()), ("log_ell", ())]

    def _scales(self, p):
        sigma, ell = self.hyper(p, "sigma"), self.hyper(p, "ell")
        s, dlog_ell = matern_spectral_density(self.nu, self.sqrt_lam, sigma, ell)
        return np.sqrt(s), dlog_ell

    def log_prior(self, params):
        p = self.unpack(params)
        beta = p["beta"]
        lp = -0.5 * np.sum(beta ** 2) - 0.5 * beta.size * np.log(2 * np.pi)
        grads = {"beta": -beta}
        if "log_sigma" in self.layout:
            h, hg = _lognormal_logp(p["log_sigma"], *self.sigma_prior)
            lp += h
            grads["log_sigma"] = hg
        if "log_ell" in self.layout:
            h, hg = _invgamma_logp(p["log_ell"], *self.ell_prior)
            lp += h
            grads["log_ell"] = hg
        return float(lp), self.pack(grads)

    def latents(self, params):
        p = self.unpack(params)
        root, _ = self._scales(p)
        return self.phi @ (root[:, None] * p["beta"])

    def latents_batch(self, params):
        p = self.unpack_batch(params)
        sigma, ell = self.hyper_batch(p, "sigma"), self.hyper_batch(p, "ell")
        s, _ = matern_spectral_density(self.nu, self.sqrt_lam[None, :], sigma[:, None], ell[:, None])
        return self.phi @ (np.sqrt(s)[:, :, None] * p["beta"])

    def latent_chain(self, params, deta):
        p = self.unpack(params)
        root, dlog_ell = self._scales(p)
        proj = self.phi.T @ deta  # m x (n-1)
        contrib = (proj * p["beta"]).sum(axis=1) * root  # per basis function
        grads = {"beta": root[:, None] * proj}
        if "log_sigma" in self.layout:
            grads["log_sigma"] = contrib.sum()  # d sqrt(S) / d log sigma = sqrt(S)
        if "log_ell" in self.layout:
            grads["log_ell"] = (0.5 * dlog_ell * contrib).sum()
        return self.pack(grads)

    def init_params(self):
        blocks = {"beta": np.zeros((self.m, self.n - 1))}
        if "log_sigma" in self.layout:
            blocks["log_sigma"] = _hyper_init(self.sigma_prior, "lognormal")
        if "log_ell" in self.layout:
            blocks["log_ell"] = _hyper_init(self.ell_prior, "invgamma")
        return self.pack(blocks)

    def sample_prior(self, rng, size):
        out = np.zeros((size, self.dim))
        for s in range(size):
            blocks = {"beta": rng.standard_normal((self.m, self.n - 1)),
                      "log_sigma": rng.normal(*self.sigma_prior),
                      "log_ell": -np.log(rng.gamma(self.ell_prior[0], 1.0 / self.ell_prior[1]))}
            out[s] = self.pack(blocks)
        return out


class RandomWalk(_LatentModel):
    """eta_q(t_1) ~ N(0, init_scale^2); increments ~ N(0, sigma^2 * dt)."""

    kind = "random_walk"

    def __init__(self, n, grid, sigma_prior=(0.0, 0.5), init_scale=1.0,
                 parameterization="noncentered", fixed=None):
        if parameterization not in ("centered", "noncentered"):
            raise ValueError("parameterization must be 'centered' or 'noncentered'")
        self.sigma_prior = tuple(sigma_prior)
        self.init_scale = float(init_scale)
        self.centered = parameterization == "centered"
        super().__init__(n, grid, fixed)
        self.dt = np.diff(self.x)

    def _blocks(self):
        name = "eta" if self.centered else "z"
        return [(name, (self.T, self.n - 1)), ("log_sigma", ())]

    def _step_scales(self, sigma):
        return np.concatenate([[self.init_scale], sigma * np.sqrt(self.dt)])[:, None]

    def log_prior(self, params):
        p = self.unpack(params)
        sigma = self.hyper(p, "sigma")
        q = self.n - 1
        if self.centered:
            eta = p["eta"]
            s0 = self.init_scale
            var = sigma ** 2 * self.dt[:, None]
            inc = np.diff(eta, axis=0)
            lp = (-0.5 * np.sum(eta[0] ** 2) / s0 ** 2 - q * np.log(s0 * np.sqrt(2 * np.pi))
                  - 0.5 * np.sum(inc ** 2 / var) - 0.5 * q * np.sum(np.log(2 * np.pi * var[:, 0])))
            r = inc / var
            geta = np.zeros_like(eta)
            geta[0] -= eta[0] / s0 ** 2
            geta[1:] -= r
            geta[:-1] += r
            grads = {"eta": geta}
            if "log_sigma" in self.layout:
                grads["log_sigma"] = np.sum(inc ** 2 / var) - q * (self.T - 1)
        else:
            z = p["z"]
            lp = -0.5 * np.sum(z ** 2) - 0.5 * z.size * np.log(2 * np.pi)
            grads = {"z": -z}
            if "log_sigma" in self.layout:
                grads["log_sigma"] = 0.0
        if "log_sigma" in self.layout:
            h, hg = _lognormal_logp(p["log_sigma"], *self.sigma_prior)
            lp += h
            grads["log_sigma"] += hg
        return float(lp), self.pack(grads)

    def latents(self, params):
        p = self.unpack(params)
        if self.centered:
            return p["eta"]
        return np.cumsum(self._step_scales(self.hyper(p, "sigma")) * p["z"], axis=0)

    def latents_batch(self, params):
        p = self.unpack_batch(params)
        if self.centered:
            return p["eta"]
        sigma = self.hyper_batch(p, "sigma")
        scales = np.concatenate([np.full((len(sigma), 1), self.init_scale),
                                 sigma[:, None] * np.sqrt(self.dt)[None, :]], axis=1)
        return np.cumsum(scales[:, :, None] * p["z"], axis=1)

    def latent_chain(self, params, deta):
        p = self.unpack(params)
        if self.centered:
            grads = {"eta": deta}
            if "log_sigma" in self.layout:
                grads["log_sigma"] = 0.0
            return self.pack(grads)
        scales = self._step_scales(self.hyper(p, "sigma"))
        tail = np.cumsum(deta[::-1], axis=0)[::-1]  # sum over later timepoints
        grads = {"z": scales * tail}
        if "log_sigma" in self.layout:
            grads["log_sigma"] = np.sum((scales * p["z"] * tail)[1:])
        return self.pack(grads)

    def init_params(self):
        name = "eta" if self.centered else "z"
        blocks = {name: np.zeros((self.T, self.n - 1))}
        if "log_sigma" in self.layout:
            blocks["log_sigma"] = self.sigma_prior[0]
        return self.pack(blocks)

    def sample_prior(self, rng, size):
        out = np.zeros((size, self.dim))
        for s in range(size):
            sigma = self.fixed.get("sigma") or np.exp(rng.normal(*self.sigma_prior))
            z = rng.standard_normal((self.T, self.n - 1))
            blocks = {"log_sigma": np.log(sigma)}
            if self.centered:
                blocks["eta"] = np.cumsum(self._step_scales(sigma) * z, axis=0)
            else:
                blocks["z"] = z
            out[s] = self.pack(blocks)
        return out


class BSpline(_LatentModel):
    """eta_q = B beta_q with beta ~ N(0, tau^2), tau ~ LogNormal."""

    kind = "bspline"

    def __init__(self, n, grid, K: int | None = None, degree: int = 3,
                 tau_prior=(0.0, 0.5), parameterization="noncentered", fixed=None):
        if parameterization not in ("centered", "noncentered"):
            raise ValueError("parameterization must be 'centered' or 'noncentered'")
        self.degree = int(degree)
        self.K = int(K) if K is not None else max(len(grid) // 2, self.degree + 1)
        self.tau_prior = tuple(tau_prior)
        self.centered = parameterization == "centered"
        super().__init__(n, grid, fixed)
        self.B = bspline_basis(self.x, self.K, self.degree)

    def _blocks(self):
        name = "beta" if self.centered else "z"
        return [(name, (self.K, self.n - 1)), ("log_tau", ())]

    def _coefficients(self, p):
        return p["beta"] if self.centered else self.hyper(p, "tau") * p["z"]

    def log_prior(self, params):
        p = self.unpack(params)
        tau = self.hyper(p, "tau")
        if self.centered:
            beta = p["beta"]
            ss = float(np.sum(beta ** 2))
            lp = -0.5 * ss / tau ** 2 - beta.size * np.log(tau * np.sqrt(2 * np.pi))
            grads = {"beta": -beta / tau ** 2, "log_tau": ss / tau ** 2 - beta.size}
        else:
            z = p["z"]
            lp = -0.5 * np.sum(z ** 2) - 0.5 * z.size * np.log(2 * np.pi)
            grads = {"z": -z, "log_tau": 0.0}
        if "log_tau" in self.layout:
            h, hg = _lognormal_logp(p["log_tau"], *self.tau_prior)
            lp += h
            grads["log_tau"] += hg
        else:
            del grads["log_tau"]
        return float(lp), self.pack(grads)

    def latents(self, params):
        return self.B @ self._coefficients(self.unpack(params))

    def latents_batch(self, params):
        p = self.unpack_batch(params)
        coef = p["beta"] if self.centered else self.hyper_batch(p, "tau")[:, None, None] * p["z"]
        return self.B @ coef

    def latent_chain(self, params, deta):
        p = self.unpack(params)
        proj = self.B.T @ deta
        if self.centered:
            grads = {"beta": proj, "log_tau": 0.0}
        else:
            tau = self.hyper(p, "tau")
            grads = {"z": tau * proj, "log_tau": tau * np.sum(proj * p["z"])}
        if "log_tau" not in self.layout:
            del grads["log_tau"]
        return self.pack(grads)

    def init_params(self):
        name = "beta" if self.centered else "z"
        blocks = {name: np.zeros((self.K, self.n - 1))}
        if "log_tau" in self.layout:
            blocks["log_tau"] = self.tau_prior[0]
        return self.pack(blocks)

    def sample_prior(self, rng, size):
        out = np.zeros((size, self.dim))
        for s in range(size):
            tau = self.fixed.get("tau") or np.exp(rng.normal(*self.tau_prior))
            z = rng.standard_normal((self.K, self.n - 1))
            blocks = {"log_tau": np.log(tau)}
            blocks["beta" if self.centered else "z"] = tau * z if self.centered else z
            out[s] = self.pack(blocks)
        return out


_MODELS = {cls.kind: cls for cls in
           (IndependentDirichlet, HierarchicalDirichlet, ExactGP, HilbertGP, RandomWalk, BSpline)}


def make_prior(kind: str, n: int, grid: TimeGrid, **knobs) -> PriorModel:
    """Build a prior model by name; ``knobs`` are passed to its constructor."""
    try:
        cls = _MODELS[kind]
    except KeyError:
        raise ValueError(f"unknown prior kind {kind!r}; choose from {KINDS}") from None
    return cls(n, grid, **knobs)


def log_prior(model: PriorModel, params) -> tuple[float, np.ndarray]:
    return model.log_prior(params)


def transform(model: PriorModel, params) -> np.ndarray:
    return model.transform(params)
