import numpy as np
import numpy.testing as npt
import pytest
from scipy import stats

from zimed.comparators import ComparatorConfig, delta_ci, effects_jacobian, npb_ci
from zimed.errors import InsufficientReplicates, UsageError
from zimed.fiducial import IntervalMethod


class TestComparatorConfig:
    def test_defaults(self):
        config = ComparatorConfig()
        assert config.method is IntervalMethod.NPB
        assert config.npb_reps == 1000

    def test_method_from_string(self):
        assert ComparatorConfig(method="Delta", npb_reps=0).method is IntervalMethod.DELTA

    def test_fiducial_is_not_a_comparator(self):
        with pytest.raises(UsageError):
            ComparatorConfig(method="FiducialHDI")

    def test_bootstrap_needs_replicates(self):
        with pytest.raises(InsufficientReplicates):
            ComparatorConfig(npb_reps=100)

    def test_alpha_range(self):
        with pytest.raises(UsageError):
            ComparatorConfig(method=IntervalMethod.DELTA, alpha=1.5)


class TestDeltaMethod:
    def test_symmetric_wald_intervals(self, state):
        intervals = delta_ci(state, alpha=0.05)
        assert list(intervals) == ["NDE", "taxon_1"]
        estimates = state.effects.effect_vector()
        for est, summary in zip(estimates, intervals.values()):
            assert summary.method is IntervalMethod.DELTA
            assert summary.estimate == pytest.approx(est)
            assert (summary.lower + summary.upper) / 2 == pytest.approx(est)
            assert summary.width > 0

    def test_wider_than_outcome_model_alone(self, state):
        intervals = delta_ci(state, alpha=0.05)
        z = stats.norm.ppf(0.975)
        wls_only = 2 * z * np.sqrt(state.effects.cov[2, 2])
        assert intervals["taxon_1"].width >= wls_only - 1e-12

    def test_jacobian_skips_random_effect_scale(self, state):
        J = effects_jacobian(state)
        assert J.shape == (2, 6)
        npt.assert_array_equal(J[:, -1], 0.0)
        # beta_1 moves the indirect effect
        assert J[1, 3] != 0.0

    def test_variance_combines_mediator_and_outcome_terms_only(self, state):
        fit = state.mediator_fit
        J = effects_jacobian(state)
        cov = fit.cov_star[np.ix_(fit.free_mask, fit.free_mask)]
        var = np.diag(J @ cov @ J.T + state.effects.cov[1:3, 1:3])
        intervals = delta_ci(state, alpha=0.05)
        widths = [intervals[name].width for name in ("NDE", "taxon_1")]
        npt.assert_allclose(widths, 2 * stats.norm.ppf(0.975) * np.sqrt(var), rtol=1e-10)

    def test_level_controls_width(self, state):
        narrow = delta_ci(state, alpha=0.2)["NDE"].width
        wide = delta_ci(state, alpha=0.01)["NDE"].width
        assert narrow < wide


class TestBootstrap:
    def test_needs_replicates(self, sim_data):
        with pytest.raises(InsufficientReplicates):
            npb_ci(sim_data, "zinb", reps=50, seed=1)

    @pytest.mark.slow
    def test_identity_resample_is_degenerate(self, sim_data, state):
        intervals = npb_ci(sim_data, "zinb", reps=200, seed=1, resample=lambda rng, n: np.arange(n), state=state)
        for name, summary in intervals.items():
            assert summary.lower == pytest.approx(summary.upper, rel=1e-6, abs=1e-9)
            assert summary.estimate == pytest.approx(summary.lower, rel=1e-4, abs=1e-6)

    @pytest.mark.slow
    def test_percentile_interval_brackets_estimate(self, sim_data, state):
        intervals = npb_ci(sim_data, "zinb", reps=200, seed=2, n_jobs=2, state=state)
        for summary in intervals.values():
            assert summary.method is IntervalMethod.NPB
            assert summary.lower < summary.estimate < summary.upper
