import math

import numpy as np
import pytest
from scipy import stats

from anyrace.priors import (JITTER, KINDS, BSpline, ExactGP, HierarchicalDirichlet, HilbertGP,
                            IndependentDirichlet, MaternKernel, PriorError, RandomWalk,
                            bspline_basis, bspline_knots, hsgp_basis, make_prior, matern_cov,
                            matern_spectral_density, stick_breaking, stick_breaking_inverse)
from anyrace.trajectories import TimeGrid

GRID = TimeGrid.uniform(1, 20, 8)


def fd(f, x, h=1e-6):
    out = np.zeros_like(x)
    for i in range(len(x)):
        e = np.zeros_like(x)
        e[i] = h
        out[i] = (f(x + e) - f(x - e)) / (2 * h)
    return out


def rel_err(a, b):
    return np.abs(a - b).max() / max(1.0, np.abs(b).max())


def models():
    out = [make_prior(k, 4, GRID, **({"m": 12} if k == "gp_hsgp" else {})) for k in KINDS]
    for kind in ("gp_exact", "random_walk", "bspline"):
        out.append(make_prior(kind, 3, GRID, parameterization="centered"))
    out.append(make_prior("gp_exact", 3, GRID, nu=2.5))
    out.append(make_prior("gp_exact", 3, GRID, nu=np.inf))
    out.append(make_prior("gp_exact", 3, GRID, fixed={"ell": 0.3}))
    return out


@pytest.mark.parametrize("model", models(), ids=lambda m: f"{m.kind}-{m.dim}")
def test_gradients_match_finite_differences(model, rng):
    for _ in range(10):
        x = model.init_params() + 0.3 * rng.standard_normal(model.dim)
        _, g = model.log_prior(x)
        assert rel_err(g, fd(lambda p: model.log_prior(p)[0], x)) < 1e-5
        W = rng.standard_normal((model.T, model.n))
        chain = model.chain(x, W)
        assert rel_err(chain, fd(lambda p: np.sum(W * model.log_utilities(p)), x)) < 1e-5


@pytest.mark.parametrize("kind", KINDS)
def test_prior_predictive_on_simplex(kind, rng):
    m = make_prior(kind, 4, GRID)
    theta = m.transform_batch(m.sample_prior(rng, 10_000 if m.dim < 200 else 2000))
    # tiny hierarchical concentrations push components below double precision
    assert np.all(np.isfinite(theta)) and np.all(theta >= 0)
    assert np.abs(theta.sum(axis=-1) - 1).max() < 1e-10


@pytest.mark.parametrize("kind", KINDS)
def test_batch_transform_matches_single(kind, rng):
    m = make_prior(kind, 3, GRID)
    P = m.init_params() + 0.5 * rng.standard_normal((5, m.dim))
    np.testing.assert_allclose(m.transform_batch(P), np.stack([m.transform(p) for p in P]),
                               atol=1e-12)


@pytest.mark.parametrize("kind", ["gp_exact", "gp_hsgp", "random_walk", "bspline"])
def test_zero_latents_give_uniform(kind):
    m = make_prior(kind, 5, GRID)
    p = m.unpack(m.init_params())
    blocks = {k: (np.zeros_like(v) if not k.startswith("log_") else v) for k, v in p.items()}
    np.testing.assert_allclose(m.transform(m.pack(blocks)), 0.2, atol=1e-14)


class TestDirichlet:
    def test_origin_is_uniform(self):
        np.testing.assert_allclose(stick_breaking(np.zeros(4)), 0.2, atol=1e-15)

    def test_round_trip(self, rng):
        y = rng.normal(size=(6, 4))
        np.testing.assert_allclose(stick_breaking_inverse(stick_breaking(y)), y, atol=1e-10)

    def test_flat_in_theta(self, rng):
        # alpha = 1: the density in y is the Jacobian alone
        m = IndependentDirichlet(4, 3)
        vals = []
        for _ in range(5):
            x = rng.normal(size=m.dim)
            vals.append(m.log_prior(x)[0] - m.log_jacobian(x))
        assert np.ptp(vals) < 1e-12

    def test_prior_draws_uniform(self, rng):
        m = IndependentDirichlet(4, 1)
        theta = m.transform_batch(m.sample_prior(rng, 20_000))[:, 0]
        # the first coordinate of a flat Dirichlet(1,1,1,1) is Beta(1, 3)
        assert stats.kstest(theta[:, 0], stats.beta(1, 3).cdf).pvalue > 1e-3

    def test_hierarchical_reduces_to_independent(self, rng):
        a = 1.7
        h = HierarchicalDirichlet(4, 3, fixed={"kappa": 4 * a})
        ind = IndependentDirichlet(4, 3, alpha=a)
        for _ in range(3):
            x = rng.normal(size=ind.dim)
            assert h.log_prior(x)[0] == pytest.approx(ind.log_prior(x)[0], abs=1e-10)
            np.testing.assert_allclose(h.log_prior(x)[1], ind.log_prior(x)[1], atol=1e-12)


class TestMatern:
    def test_zero_distance(self):
        assert matern_cov(MaternKernel(1.5, 2.0, 0.7), 0.3, 0.3) == pytest.approx(4.0)

    def test_closed_form(self):
        s3 = math.sqrt(3)
        assert matern_cov(MaternKernel(1.5, 1.0, 1.0), 0.0, 1.0) == pytest.approx((1 + s3) * math.exp(-s3))
        assert matern_cov(MaternKernel(1.5, 1.0, 1.0), 0.0, 1.0) == pytest.approx(0.4834, abs=1e-4)

    @pytest.mark.parametrize("nu", [1.5, 2.5, np.inf])
    def test_decay(self, nu):
        assert matern_cov(MaternKernel(nu, 1.0, 0.5), 0.0, 1e3) < 1e-12

    def test_rejects_other_nu(self):
        with pytest.raises(ValueError):
            MaternKernel(0.5)

    @pytest.mark.parametrize("nu", [1.5, 2.5, np.inf])
    def test_spectral_density_is_fourier_pair(self, nu):
        # k(0) = (1/pi) * int_0^inf S(w) dw for a 1-D stationary kernel
        w = np.linspace(0, 400, 400_001)
        s, _ = matern_spectral_density(nu, w, 1.3, 0.4)
        assert np.trapezoid(s, w) / np.pi == pytest.approx(1.69, rel=1e-3)


def _hsgp_cov(m, c=1.5, ell=0.25, x=np.linspace(0, 1, 41)):
    k = MaternKernel(1.5, 1.0, ell)
    _, phi, s = hsgp_basis(x, c * x[-1], m, k)
    return (phi * s) @ phi.T, k.gram(x)


class TestHSGP:
    def test_fidelity(self):
        approx, exact = _hsgp_cov(64)
        assert np.abs(approx - exact).max() < 0.01

    def test_boundaries_vanish(self):
        _, phi, _ = hsgp_basis(np.array([-2.0, 2.0]), 2.0, 16)
        assert np.abs(phi).max() < 1e-12

    def test_doubling_m_never_hurts(self):
        errs = [np.abs(np.subtract(*_hsgp_cov(m))).max() for m in (4, 8, 16, 32, 64, 128)]
        assert all(b <= a + 1e-12 for a, b in zip(errs, errs[1:]))

    def test_outside_domain(self):
        with pytest.raises(ValueError):
            hsgp_basis(np.array([3.0]), 2.0, 4)


class TestBSpline:
    def test_partition_of_unity(self):
        B = bspline_basis(TimeGrid.uniform(1, 20, 20), 10)
        assert np.abs(B.sum(axis=1) - 1).max() < 1e-12

    def test_clamped_start(self):
        B = bspline_basis(TimeGrid.uniform(1, 20, 20), 10)
        np.testing.assert_array_equal(B[0], np.eye(10)[0])

    def test_local_support(self):
        B = bspline_basis(TimeGrid.uniform(1, 20, 20), 10)
        assert (np.abs(B) > 0).sum(axis=1).max() <= 4

    def test_too_few_coefficients(self):
        with pytest.raises(ValueError):
            bspline_basis(np.linspace(0, 1, 5), 3)

    @pytest.mark.parametrize("T, K", [(20, 10), (9, 4), (31, 15)])
    def test_matches_scipy_design_matrix(self, T, K):
        from scipy.interpolate import BSpline as ScipyBSpline

        grid = TimeGrid.logarithmic(1, 100, T)
        x = grid.normalized()
        knots = bspline_knots(x, K)
        ref = ScipyBSpline.design_matrix(x, knots, 3).toarray()
        np.testing.assert_allclose(bspline_basis(grid, K), ref, atol=1e-12)


class TestLatentDensities:
    def test_random_walk_increment(self):
        g = TimeGrid((1.0, 3.0))
        m = RandomWalk(2, g, parameterization="centered", fixed={"sigma": 0.7})
        eta = np.array([[0.4], [1.1]])
        lp, _ = m.log_prior(eta.reshape(-1))
        dt = 1.0  # normalised coordinates span [0, 1]
        expect = stats.norm(0, 1).logpdf(0.4) + stats.norm(0, 0.7 * math.sqrt(dt)).logpdf(0.7)
        assert lp == pytest.approx(expect, abs=1e-12)

    def test_gp_density_at_zero(self):
        # oracle: direct multivariate normal evaluation
        m = ExactGP(3, GRID, parameterization="centered", fixed={"sigma": 0.8, "ell": 0.3})
        K = MaternKernel(1.5, 0.8, 0.3).gram(GRID.normalized()) + JITTER * 0.64 * np.eye(8)
        lp, _ = m.log_prior(np.zeros(m.dim))
        mvn = stats.multivariate_normal(np.zeros(8), K).logpdf(np.zeros(8))
        assert lp == pytest.approx(2 * mvn, rel=1e-9)
        sign, logdet = np.linalg.slogdet(2 * np.pi * K)
        assert lp == pytest.approx(-0.5 * logdet * 2, rel=1e-9)

    def test_bad_lengthscale_is_diagnosable(self):
        m = ExactGP(2, GRID, parameterization="centered", fixed={"sigma": 1.0, "ell": float("nan")})
        with pytest.raises(PriorError, match="lengthscale"):
            m.log_prior(np.zeros(m.dim))

    def test_jittered_gram_factorises(self):
        # a near-constant squared-exponential Gram is still factorised thanks to the jitter
        g = TimeGrid.uniform(1, 20, 60)
        m = ExactGP(2, g, nu=np.inf, parameterization="centered", fixed={"sigma": 1.0, "ell": 50.0})
        assert np.isfinite(m.log_prior(np.zeros(m.dim))[0])

    def test_conditional_fixes_hyperparameters(self, rng):
        m = ExactGP(3, GRID)
        x = m.init_params() + 0.2 * rng.standard_normal(m.dim)
        cond, latent = m.conditional(x)
        assert cond.hyper_names() == [] and cond.dim == m.dim - 2
        np.testing.assert_allclose(cond.transform(latent), m.transform(x), atol=1e-14)

    def test_hsgp_records_knobs(self):
        d = HilbertGP(3, GRID, m=16, c=2.0)
        assert d.m == 16 and d.L == pytest.approx(2.0)

    def test_bspline_default_K(self):
        assert BSpline(3, TimeGrid.uniform(1, 20, 20)).K == 10

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            make_prior("spline", 3, GRID)
