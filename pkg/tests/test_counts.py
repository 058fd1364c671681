import numpy as np
import numpy.testing as npt
import pytest
from scipy import stats

from zimed import counts
from zimed.counts import Family
from zimed.errors import UsageError


class TestFamily:
    def test_parse_aliases(self):
        assert Family.parse("ZINB") is Family.ZINB
        assert Family.parse("ZINegBinomial") is Family.ZINB
        assert Family.parse("zi-poisson") is Family.ZIP
        assert Family.parse("negative_binomial") is Family.NB
        assert Family.parse(Family.POISSON) is Family.POISSON

    def test_parse_unknown(self):
        with pytest.raises(UsageError):
            Family.parse("gamma")

    def test_parameter_counts(self):
        assert Family.ZINB.n_params(1) == 6
        assert Family.ZIP.n_params(1) == 5
        assert Family.NB.n_params(1) == 5
        assert Family.POISSON.n_params(2) == 7
        assert Family.ZINB.n_taxon_shape_params() == 3
        assert Family.ZIP.n_taxon_shape_params() == 2
        assert Family.NB.n_taxon_shape_params() == 2
        assert Family.POISSON.n_taxon_shape_params() == 1


class TestLogPmf:
    def test_poisson_zero(self):
        value = counts.log_pmf(0, np.log(2.0), -np.inf, np.inf, Family.POISSON)
        assert value == pytest.approx(-2.0)

    def test_zinb_zero_mass(self):
        pi, phi, lam = 0.3, 0.5, 4.0
        value = np.exp(counts.log_pmf(0, np.log(lam), np.log(pi / (1 - pi)), np.log(phi), Family.ZINB))
        assert value == pytest.approx(pi + (1 - pi) * (phi / (phi + lam)) ** phi)

    def test_nb_matches_scipy(self):
        phi, lam = 2.5, 3.0
        m = np.arange(30)
        expected = stats.nbinom.logpmf(m, phi, phi / (phi + lam))
        npt.assert_allclose(counts.log_pmf(m, np.log(lam), 0.0, np.log(phi), Family.NB), expected, rtol=1e-10)

    @pytest.mark.parametrize("family", list(Family))
    def test_mass_sums_to_one(self, family):
        m = np.arange(600)
        total = np.exp(counts.log_pmf(m, np.log(3.0), -0.8, np.log(0.5), family)).sum()
        assert total == pytest.approx(1.0, abs=1e-8)

    def test_certain_zero_inflation(self):
        value = counts.log_pmf(np.array([0, 0]), 0.0, 30.0, 0.0, Family.ZIP)
        npt.assert_allclose(value, 0.0, atol=1e-10)


class TestDerivatives:
    @pytest.mark.parametrize("family", list(Family))
    def test_against_finite_differences(self, family):
        m = np.array([0.0, 1.0, 3.0, 12.0])
        eta, bz, bl, h = 0.7, -0.4, 0.3, 1e-6
        terms = counts.log_pmf_terms(m, eta, bz, bl, family)
        npt.assert_allclose(terms.logf, counts.log_pmf(m, eta, bz, bl, family), rtol=1e-12)

        d_eta = (counts.log_pmf(m, eta + h, bz, bl, family) - counts.log_pmf(m, eta - h, bz, bl, family)) / (2 * h)
        npt.assert_allclose(terms.d_eta, d_eta, rtol=1e-5, atol=1e-7)

        up = counts.log_pmf_terms(m, eta + h, bz, bl, family).d_eta
        down = counts.log_pmf_terms(m, eta - h, bz, bl, family).d_eta
        npt.assert_allclose(terms.d2_eta, (up - down) / (2 * h), rtol=1e-5, atol=1e-7)

        if family.zero_inflated:
            d_bz = (counts.log_pmf(m, eta, bz + h, bl, family) - counts.log_pmf(m, eta, bz - h, bl, family)) / (2 * h)
            npt.assert_allclose(terms.d_bz, d_bz, rtol=1e-5, atol=1e-7)
        if family.overdispersed:
            d_bl = (counts.log_pmf(m, eta, bz, bl + h, family) - counts.log_pmf(m, eta, bz, bl - h, family)) / (2 * h)
            npt.assert_allclose(terms.d_bl, d_bl, rtol=1e-5, atol=1e-7)


class TestCdfAndSampling:
    @pytest.mark.parametrize("family", list(Family))
    def test_cdf_is_cumulative_mass(self, family):
        k = np.arange(25)
        mass = np.exp(counts.log_pmf(k, np.log(2.0), -1.0, np.log(0.8), family))
        npt.assert_allclose(counts.cdf(k, np.log(2.0), -1.0, np.log(0.8), family), np.cumsum(mass), rtol=1e-10)

    def test_sample_mean(self):
        rng = np.random.default_rng(0)
        eta = np.full(200_000, np.log(3.0))
        draws = counts.sample(rng, eta, np.log(0.25 / 0.75), np.log(1.0), Family.ZINB)
        assert draws.dtype == np.int64
        expected = counts.mean(np.log(3.0), np.log(0.25 / 0.75), Family.ZINB)
        assert draws.mean() == pytest.approx(expected, rel=0.02)

    def test_sample_zero_share(self):
        rng = np.random.default_rng(1)
        draws = counts.sample(rng, np.full(100_000, np.log(50.0)), 0.0, 0.0, Family.ZIP)
        assert np.mean(draws == 0) == pytest.approx(0.5, abs=0.01)
