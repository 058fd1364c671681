import numpy as np
import numpy.testing as npt
import pytest
from numpy.polynomial.hermite import hermgauss
from scipy.special import logit

from zimed import counts
from zimed.counts import Family
from zimed.errors import UnsupportedGenerator, UsageError
from zimed.fiducial import IntervalMethod, IntervalSummary
from zimed.simulation import (
    PRESET_ALIASES,
    PRESETS,
    ScenarioConfig,
    aggregate_scores,
    generate_dataset,
    gold_standard,
    gold_standard_nie,
    preset,
    replicate_seed,
    run_scenario,
    scenario_grid,
    score_interval,
)


class TestGoldStandard:
    def test_default_scenario(self):
        assert gold_standard_nie(ScenarioConfig(), 0) == pytest.approx(0.0351, abs=5e-4)

    def test_no_exposure_effect(self):
        assert gold_standard_nie(ScenarioConfig(beta1=0.0), 0) == 0.0

    def test_near_certain_zero_inflation(self):
        assert gold_standard_nie(ScenarioConfig(pi=0.999), 0) == pytest.approx(0.0, abs=1e-4)

    def test_poisson_generator_has_no_zero_inflation(self):
        zinb = gold_standard_nie(ScenarioConfig(pi=0.5), 0)
        poisson = gold_standard_nie(ScenarioConfig(pi=0.5, generate_family="poisson"), 0)
        assert poisson == pytest.approx(2 * zinb)

    @pytest.mark.parametrize("changes", [
        {},
        {"pi": 0.5, "phi": 0.5},
        {"beta0": 0.0, "beta1": 1.0, "beta2": 0.3},
        {"generate_family": "poisson", "beta0": -1.0},
        {"beta0": 0.5, "beta1": 0.0},
    ])
    def test_matches_counterfactual_draws(self, changes):
        cfg = ScenarioConfig(**changes)
        family = Family.parse(cfg.generate_family)
        rng = np.random.default_rng(2024)
        draws = 1_000_000
        c2 = rng.normal(0.0, np.sqrt(cfg.sigma_c2_sq), draws)
        delta = rng.normal(0.0, np.sqrt(cfg.sigma_delta_sq), draws)
        with np.errstate(divide="ignore"):
            beta_z0 = logit(cfg.pi[0])
        beta_l0 = np.log(cfg.phi[0])
        base = cfg.beta0[0] + cfg.beta2[0] * c2 + delta
        m1 = counts.sample(rng, base + cfg.beta1[0], beta_z0, beta_l0, family)
        m0 = counts.sample(rng, base, beta_z0, beta_l0, family)
        effect = cfg.gamma2_mean * (m1 - m0)
        se = effect.std() / np.sqrt(draws)
        assert abs(gold_standard_nie(cfg, 0) - effect.mean()) < 4 * se

    def test_monotone_in_exposure_effect_and_zero_inflation(self):
        by_beta1 = [gold_standard_nie(ScenarioConfig(beta1=b), 0) for b in (-0.5, 0.0, 0.3, 0.6, 1.2)]
        assert np.all(np.diff(by_beta1) > 0)
        by_pi = [gold_standard_nie(ScenarioConfig(pi=p), 0) for p in (0.0, 0.2, 0.4, 0.6)]
        assert np.all(np.diff(by_pi) < 0)

    def test_effect_keys(self):
        truth = gold_standard(ScenarioConfig(p=3))
        assert list(truth) == ["NDE", "taxon_1", "taxon_2", "taxon_3"]
        assert truth["NDE"] == 2.0

    def test_sequencing_depth_unsupported(self):
        with pytest.raises(UnsupportedGenerator):
            gold_standard(ScenarioConfig(depth="sequencing"))


class TestScenarioConfig:
    def test_per_taxon_broadcast(self):
        cfg = ScenarioConfig(p=3, pi=0.4, beta1=[0.6, 0.0, 0.3])
        assert cfg.pi == (0.4, 0.4, 0.4)
        assert cfg.beta1 == (0.6, 0.0, 0.3)

    @pytest.mark.parametrize(
        "changes",
        [
            {"p": 0},
            {"n": 1},
            {"pi": 1.0},
            {"phi": 0.0},
            {"p": 2, "pi": (0.1, 0.2, 0.3)},
            {"depth": "rarefied"},
            {"methods": ("bayes",)},
            {"replications": 0},
            {"fit_family": "gamma"},
        ],
    )
    def test_invalid(self, changes):
        with pytest.raises(UsageError):
            ScenarioConfig(**changes)

    def test_from_dict(self):
        cfg = ScenarioConfig.from_dict({"n": 50, "pi": [0.3], "methods": ["delta"]})
        assert cfg.n == 50
        assert cfg.methods == ("delta",)
        assert ScenarioConfig.from_dict(cfg.to_dict()) == cfg

    def test_from_dict_unknown_key(self):
        with pytest.raises(UsageError):
            ScenarioConfig.from_dict({"sample_size": 50})


class TestGrids:
    def test_cartesian_product(self):
        configs = scenario_grid(ScenarioConfig(seed=4), {"pi": [0.2, 0.4, 0.6], "n": [20, 40, 80, 200, 300]})
        assert len(configs) == 15
        assert [(c.pi[0], c.n) for c in configs[:2]] == [(0.2, 20), (0.2, 40)]
        assert len({c.seed for c in configs}) == 15
        assert configs[0].seed == replicate_seed(4, 0)

    def test_empty_axes(self):
        base = ScenarioConfig()
        assert scenario_grid(base, {}) == [base]
        assert scenario_grid(base, {"n": []}) == [base]

    def test_presets(self):
        assert set(PRESETS) == {"coverage", "dispersion", "taxa", "sensitivity", "misspec"}
        assert len(preset("coverage")) == 15
        assert [c.p for c in preset("taxa")] == [1, 3, 5]
        misspec = preset("misspec", replications=10)
        assert all(c.fit_family == "zip" and c.generate_family == "zinb" for c in misspec)
        assert all(c.replications == 10 for c in misspec)

    def test_unknown_preset(self):
        with pytest.raises(UsageError) as info:
            preset("nine")
        assert "fig5" in str(info.value)

    def test_preset_aliases(self):
        assert preset("fig5") == preset("coverage")
        assert preset("fig7", replications=3) == preset("sensitivity", replications=3)
        assert PRESET_ALIASES["fig6"] in PRESETS


class TestGenerator:
    def test_reproducible(self):
        cfg = ScenarioConfig(n=50, p=2)
        a, b = generate_dataset(cfg, 3), generate_dataset(cfg, 3)
        npt.assert_array_equal(a.mediators, b.mediators)
        npt.assert_array_equal(a.outcome, b.outcome)
        assert not np.array_equal(a.outcome, generate_dataset(cfg, 4).outcome)

    def test_layout(self):
        data = generate_dataset(ScenarioConfig(n=80, p=3), 1)
        assert data.mediators.shape == (80, 3)
        assert data.c1_names == ("c1", "c2")
        npt.assert_array_equal(data.c1[:, 1], data.c2[:, 0])
        npt.assert_array_equal(data.offset, 1.0)

    def test_sequencing_depth_range(self):
        data = generate_dataset(ScenarioConfig(n=200, depth="sequencing", beta0=-8.0), 2)
        assert data.offset.min() >= 10_000
        assert data.offset.max() <= 100_000

    def test_zero_proportion(self):
        cfg = ScenarioConfig(n=10_000, pi=0.6, phi=1.0, beta0=1.0, beta1=0.0, beta2=0.0)
        data = generate_dataset(cfg, 8)
        nodes, weights = hermgauss(40)
        delta = np.sqrt(2 * cfg.sigma_delta_sq) * nodes
        kernel_zero = np.sum(weights / np.sqrt(np.pi) / (1.0 + np.exp(1.0 + delta)))
        expected = 0.6 + 0.4 * kernel_zero
        assert data.zero_proportion()[0] == pytest.approx(expected, abs=0.015)

    def test_exposure_independent_of_c2_without_effect(self):
        data = generate_dataset(ScenarioConfig(n=10_000, alpha_exposure=(0.25, 0.0)), 9)
        assert abs(np.corrcoef(data.exposure, data.c2[:, 0])[0, 1]) < 0.03

    def test_fixed_gamma_is_shared(self):
        cfg = ScenarioConfig(n=30, beta0=1.0, fix_gamma=True, noise_sd=1e-12, gamma=(0.0, 0.0, 0.0))
        ratios = []
        for seed in (1, 2):
            data = generate_dataset(cfg, seed)
            keep = data.mediators[:, 0] > 0
            ratios.append(np.unique(np.round(data.outcome[keep] / data.mediators[keep, 0], 8)))
        assert len(ratios[0]) == 1
        npt.assert_allclose(ratios[0], ratios[1])


class TestScoring:
    def test_score_interval(self):
        summary = IntervalSummary("taxon_1", 0.05, 0.01, 0.09, 0.05, IntervalMethod.FIDUCIAL_HDI)
        score = score_interval(summary, 0.0351)
        assert score.covered
        assert score.excludes_zero
        assert score.width == pytest.approx(0.08)
        assert score.error == pytest.approx(0.05 - 0.0351)

    def test_aggregate(self):
        summaries = [
            IntervalSummary("NDE", 2.0, 1.0, 3.0, 0.05, IntervalMethod.DELTA),
            IntervalSummary("NDE", 2.4, -0.2, 1.8, 0.05, IntervalMethod.DELTA),
        ]
        agg = aggregate_scores([score_interval(s, 2.0) for s in summaries])
        assert agg["coverage"] == 0.5
        assert agg["sensitivity"] == 0.5
        assert agg["mean_width"] == pytest.approx(2.0)
        assert agg["bias"] == pytest.approx(0.2)
        assert agg["effective"] == 2

    def test_aggregate_empty(self):
        agg = aggregate_scores([])
        assert agg["effective"] == 0
        assert np.isnan(agg["coverage"])


class TestRunScenario:
    def test_small_delta_study(self):
        cfg = ScenarioConfig(n=100, beta0=1.0, generate_family="poisson", fit_family="poisson", methods=("delta",),
                             replications=4, seed=6)
        result = run_scenario(cfg)
        assert result.failures == 0
        assert list(result.summary["effect"]) == ["NDE", "taxon_1"]
        assert set(result.summary["method"]) == {"delta"}
        assert (result.summary["effective"] == 4).all()
        assert len(result.replicates) == 8
        assert list(result.replicates.columns) == ["replication", "method", "effect", "estimate", "lower", "upper",
                                                   "width", "covered"]
        frame = result.to_frame()
        assert list(frame.columns[:3]) == ["n", "p", "pi"]
        assert "coverage" in frame.columns

    def test_reproducible(self):
        cfg = ScenarioConfig(n=60, beta0=1.0, generate_family="poisson", fit_family="poisson", methods=("delta",),
                             replications=2, seed=11)
        first, second = run_scenario(cfg), run_scenario(cfg)
        npt.assert_array_equal(first.replicates["estimate"], second.replicates["estimate"])


@pytest.mark.slow
class TestCoverageStudies:
    def test_delta_coverage(self):
        cfg = ScenarioConfig(n=200, beta0=1.0, methods=("delta",), replications=100, seed=21)
        summary = run_scenario(cfg, n_jobs=-1).summary.set_index("effect")
        assert summary.loc["NDE", "coverage"] >= 0.85
        assert summary.loc["taxon_1", "coverage"] >= 0.8

    def test_fiducial_coverage(self):
        cfg = ScenarioConfig(n=200, beta0=1.0, methods=("fiducial",), replications=100, k=500, n_equiv=200, seed=22)
        summary = run_scenario(cfg, n_jobs=-1).summary.set_index("effect")
        assert summary.loc["taxon_1", "coverage"] >= 0.85
        assert summary.loc["taxon_1", "sensitivity"] >= 0.8

    def test_default_scenario_replications_succeed(self):
        result = run_scenario(ScenarioConfig(methods=("delta",), replications=20, seed=1), n_jobs=-1)
        assert result.failures <= 1

    def test_delta_covers_less_than_fiducial(self):
        cfg = ScenarioConfig(methods=("fiducial", "delta"), replications=60, k=500, n_equiv=600, seed=31)
        summary = run_scenario(cfg, n_jobs=-1).summary.set_index(["method", "effect"])
        delta = summary.loc[("delta", "taxon_1"), "coverage"]
        assert delta <= 0.97
        assert delta <= summary.loc[("fiducial", "taxon_1"), "coverage"] + 0.1

    def test_bootstrap_intervals_wider_than_fiducial(self):
        cfg = ScenarioConfig(n=300, methods=("fiducial", "npb"), replications=30, k=500, n_equiv=600, npb_reps=100,
                             seed=32)
        result = run_scenario(cfg, n_jobs=-1)
        summary = result.summary.set_index(["method", "effect"])
        assert summary.loc[("npb", "taxon_1"), "coverage"] >= 0.8
        widths = result.replicates.query("effect == 'taxon_1'").pivot(index="replication", columns="method",
                                                                      values="width")
        assert (widths["npb"] > widths["fiducial"]).mean() >= 0.4

    def test_zip_fit_of_zinb_data_keeps_reasonable_coverage(self):
        cfg = ScenarioConfig(pi=0.2, fit_family="zip", methods=("fiducial",), replications=40, k=500, n_equiv=600,
                             seed=33)
        summary = run_scenario(cfg, n_jobs=-1).summary.set_index("effect")
        assert summary.loc["taxon_1", "coverage"] >= 0.65

    def test_fiducial_sensitivity_at_small_n(self):
        cfg = ScenarioConfig(n=80, phi=0.5, methods=("fiducial", "npb"), replications=40, k=500, n_equiv=600,
                             npb_reps=100, seed=34)
        summary = run_scenario(cfg, n_jobs=-1).summary.set_index(["method", "effect"])
        fiducial = summary.loc[("fiducial", "taxon_1"), "sensitivity"]
        assert fiducial >= summary.loc[("npb", "taxon_1"), "sensitivity"] - 0.15
