import itertools

import numpy as np
import pytest
from scipy import integrate, stats
from scipy.special import gammaln

from hdphmm.distributions import (
    GammaHyper,
    beta_sample,
    categorical_sample,
    dirichlet_logpdf,
    dirichlet_sample,
    gamma_logpdf,
    gamma_poisson_logpmf,
    gamma_sample,
    make_rng,
    negbinom_logpmf,
    poisson_logpmf,
    poisson_sample,
    split_rng,
)
from hdphmm.errors import DomainError


@pytest.fixture
def rng():
    return make_rng(20240501)


class TestRng:
    def test_reproducible(self):
        a = make_rng(7, 3).random(5)
        b = make_rng(7, 3).random(5)
        np.testing.assert_array_equal(a, b)

    def test_streams_differ(self):
        assert not np.array_equal(make_rng(7, 0).random(5), make_rng(7, 1).random(5))

    def test_split_independent_of_order(self):
        kids = split_rng(make_rng(1), 3)
        again = split_rng(make_rng(1), 3)
        # consume the children in a different order
        late = [k.random(4) for k in reversed(again)][::-1]
        for k, v in zip(kids, late):
            np.testing.assert_array_equal(k.random(4), v)

    def test_seed_range(self):
        with pytest.raises(DomainError):
            make_rng(-1)
        make_rng(2**64 - 1)


class TestGamma:
    def test_unit_exponential(self):
        assert gamma_logpdf(1.0, 1.0, 1.0) == pytest.approx(-1.0, abs=1e-14)

    def test_closed_form(self):
        assert gamma_logpdf(2.0, 3.0, 1.0) == pytest.approx(np.log(2) - 2, abs=1e-12)

    def test_matches_scipy(self):
        x = np.linspace(0.1, 10, 25)
        np.testing.assert_allclose(gamma_logpdf(x, 2.5, 0.7),
                                   stats.gamma.logpdf(x, 2.5, scale=1 / 0.7), rtol=1e-12)

    def test_sample_mean_rate_convention(self, rng):
        s = gamma_sample(rng, 1.0, 0.2, size=100_000)
        assert abs(s.mean() - 5.0) < 0.15

    @pytest.mark.parametrize("shape,rate", [(0.5, 1.0), (2.0, 3.0), (7.0, 0.5)])
    def test_normalizes(self, shape, rate):
        val, _ = integrate.quad(lambda x: np.exp(gamma_logpdf(x, shape, rate)), 0, np.inf)
        assert val == pytest.approx(1.0, abs=1e-6)

    @pytest.mark.parametrize("args", [(1.0, 0.0, 1.0), (1.0, 1.0, -1.0), (0.0, 1.0, 1.0)])
    def test_domain(self, args):
        with pytest.raises(DomainError):
            gamma_logpdf(*args)

    def test_hyper_validation(self):
        with pytest.raises(DomainError):
            GammaHyper(0.0, 1.0)
        assert GammaHyper(1.0, 0.2).mean == pytest.approx(5.0)


class TestDirichlet:
    def test_concentrated(self, rng):
        x = dirichlet_sample(rng, [1e6, 1e6])
        np.testing.assert_allclose(x, [0.5, 0.5], atol=0.01)

    @pytest.mark.parametrize("alpha", [[0.01, 0.01, 0.01], [1.0, 2.0], [1e-4] * 50, [5.0] * 7])
    def test_simplex(self, rng, alpha):
        x = dirichlet_sample(rng, alpha)
        assert abs(x.sum() - 1.0) < 1e-12
        assert np.all(x > 0)

    def test_uniform_density(self):
        assert dirichlet_logpdf([0.5, 0.5], [1.0, 1.0]) == pytest.approx(0.0, abs=1e-14)

    def test_matches_scipy(self):
        x = np.array([0.2, 0.3, 0.5])
        a = np.array([0.7, 2.0, 3.5])
        assert dirichlet_logpdf(x, a) == pytest.approx(stats.dirichlet.logpdf(x, a), rel=1e-12)

    @pytest.mark.parametrize("a,b", [(1.0, 1.0), (2.0, 5.0), (0.8, 3.0)])
    def test_normalizes_on_segment(self, a, b):
        val, _ = integrate.quad(lambda t: np.exp(dirichlet_logpdf([t, 1 - t], [a, b])), 0, 1)
        assert val == pytest.approx(1.0, abs=1e-6)

    def test_sample_mean(self, rng):
        alpha = np.array([0.5, 1.5, 3.0])
        draws = dirichlet_sample(rng, np.broadcast_to(alpha, (20_000, 3)))
        np.testing.assert_allclose(draws.mean(axis=0), alpha / alpha.sum(), atol=0.01)

    def test_domain(self, rng):
        with pytest.raises(DomainError):
            dirichlet_sample(rng, [1.0, 0.0])


class TestPoisson:
    def test_zero_count(self):
        assert poisson_logpmf(0, 2.0) == pytest.approx(-2.0)

    def test_closed_form(self):
        assert poisson_logpmf(3, 1.0) == pytest.approx(-1 - np.log(6), abs=1e-12)

    def test_zero_rate(self):
        assert poisson_logpmf(0, 0.0) == 0.0
        assert poisson_logpmf(2, 0.0) == -np.inf

    @pytest.mark.parametrize("rate", [0.3, 4.0, 25.0])
    def test_normalizes(self, rate):
        k = np.arange(200)
        assert np.exp(poisson_logpmf(k, rate)).sum() == pytest.approx(1.0, abs=1e-6)

    def test_domain(self, rng):
        with pytest.raises(DomainError):
            poisson_logpmf(1, -1.0)
        with pytest.raises(DomainError):
            poisson_sample(rng, -0.5)

    def test_sample_mean(self, rng):
        assert abs(poisson_sample(rng, 5.0, size=10_000).mean() - 5.0) < 0.1


class TestBeta:
    def test_uniform_ks(self, rng):
        s = beta_sample(rng, 1.0, 1.0, size=100_000)
        assert stats.kstest(s, "uniform").statistic < 0.02

    def test_mean(self, rng):
        assert abs(beta_sample(rng, 1.0, 9.0, size=100_000).mean() - 0.1) < 0.005

    def test_concentrated(self, rng):
        assert abs(beta_sample(rng, 1e6, 1e6) - 0.5) < 0.01

    def test_open_interval(self, rng):
        s = beta_sample(rng, 1e-3, 1e-3, size=10_000)
        assert np.all((s > 0) & (s < 1))

    def test_domain(self, rng):
        with pytest.raises(DomainError):
            beta_sample(rng, 0.0, 1.0)


class TestCategorical:
    def test_degenerate(self, rng):
        assert all(categorical_sample(rng, [1.0, 0.0, 0.0]) == 0 for _ in range(200))

    def test_symmetric(self, rng):
        freq = np.mean([categorical_sample(rng, [0.5, 0.5]) for _ in range(100_000)])
        assert abs(freq - 0.5) < 0.01

    def test_bad_sum(self, rng):
        with pytest.raises(DomainError):
            categorical_sample(rng, [0.4, 0.5])

    def test_negative(self, rng):
        with pytest.raises(DomainError):
            categorical_sample(rng, [1.5, -0.5])


class TestNegativeBinomial:
    def test_geometric_case(self):
        assert gamma_poisson_logpmf(0, 1.0, 1.0) == pytest.approx(-np.log(2), abs=1e-14)

    @pytest.mark.parametrize("a,b,k", list(itertools.product([1, 2, 5], repeat=3)))
    def test_quadrature(self, a, b, k):
        def integrand(lam):
            return stats.poisson.pmf(k, lam) * stats.gamma.pdf(lam, a, scale=1.0 / b)

        val, _ = integrate.quad(integrand, 0, np.inf, epsabs=1e-14, epsrel=1e-12)
        assert gamma_poisson_logpmf(k, a, b) == pytest.approx(np.log(val), abs=1e-8)

    def test_normalizes(self):
        k = np.arange(1001)
        assert abs(np.exp(negbinom_logpmf(k, 2.0, 0.3)).sum() - 1.0) < 1e-9

    def test_matches_scipy(self):
        k = np.arange(30)
        # scipy's p is the success probability of the complementary convention
        np.testing.assert_allclose(negbinom_logpmf(k, 3.2, 0.4), stats.nbinom.logpmf(k, 3.2, 0.6), rtol=1e-12)

    def test_domain(self):
        with pytest.raises(DomainError):
            negbinom_logpmf(1, 1.0, 1.0)
        with pytest.raises(DomainError):
            negbinom_logpmf(-1, 1.0, 0.5)

    def test_analytic_identity(self):
        a, b = np.meshgrid(np.linspace(0.2, 9, 12), np.linspace(0.1, 6, 12))
        for k in range(0, 40, 3):
            direct = (a * np.log(b) - gammaln(a) + gammaln(a + k) - (a + k) * np.log1p(b) - gammaln(k + 1))
            np.testing.assert_allclose(gamma_poisson_logpmf(k, a, b), direct, atol=1e-10)
