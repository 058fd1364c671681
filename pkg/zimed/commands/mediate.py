"""
Mediate command for zimed CLI.
"""

import logging
from typing import Optional

from zimed import __version__
from zimed.commands.common import load_input, settings
from zimed.comparators import delta_ci, npb_ci
from zimed.fiducial import equivalence_number, fiducial_nie_samples, summarize_draws
from zimed.pipeline import estimate_effects
from zimed.report import build_report
from zimed.storage import ArtifactStore

logger = logging.getLogger(__name__)


class MediateCommand:
    """Estimate natural direct and indirect effects with fiducial and comparator intervals."""

    def __call__(
        self,
        input: str,
        seed: Optional[int] = None,
        family: Optional[str] = None,
        k: Optional[int] = None,
        n=None,
        alpha: Optional[float] = None,
        methods: Optional[str] = None,
        npb_reps: Optional[int] = None,
        kappa: Optional[float] = None,
        conditional: Optional[bool] = None,
        truncate: Optional[float] = None,
        export_weights: bool = False,
        n_jobs: Optional[int] = None,
        output: Optional[str] = None,
        config: Optional[str] = None,
    ):
        """
        Run the full mediation analysis and write report.json, report.csv and draws.csv.

        Args:
            input: Input CSV path, or "demo"
            seed: Random seed (required)
            family: Mediator family (poisson, zip, zinb, nb)
            k: Number of fiducial draws
            n: Equivalence number, or "auto" to calibrate it
            alpha: 1 - confidence level
            methods: Comma-separated subset of fiducial, delta, npb
            npb_reps: Bootstrap resamples for the npb method
            kappa: Null value of the generalized p-value
            conditional: Keep fiducial draws conditional on the empirical Bayes random effects
            truncate: Weight truncation percentile (0 disables)
            export_weights: Also write weights.csv
            n_jobs: Parallel workers (-1 for all cores)
            output: Output directory
            config: Config file path
        """
        # Load and validate configuration
        run = settings(
            "mediate", config, input=input, seed=seed, family=family, k=k, n=n, alpha=alpha, methods=methods,
            npb_reps=npb_reps, kappa=kappa, conditional=conditional, truncate=truncate, n_jobs=n_jobs,
            output_dir=output,
        )
        seed = run.require_seed()
        store = ArtifactStore(run.output_dir)
        data = load_input(run)

        state = estimate_effects(data, run.family, run.fit_options(), run.effect_options())
        metadata = {
            "version": __version__,
            "seed": seed,
            "family": run.family,
            "alpha": run.alpha,
            "methods": list(run.methods),
            "n": data.n,
            "p": data.p,
            "n_jobs": run.n_jobs,
            "warnings": list(state.mediator_fit.warnings),
        }

        fiducial = delta = npb = None
        if "fiducial" in run.methods:
            n_equiv = run.n_equiv
            if n_equiv is None:
                calibration = equivalence_number(
                    data, state.mediator_fit, run.grid, run.equiv_tol, run.norm, seed, run.n_jobs, run.fit_options()
                )
                store.write_json("calibration.json", calibration.to_dict())
                n_equiv = calibration.n_equiv
            draws = fiducial_nie_samples(state, run.k, n_equiv, seed, run.conditional, run.n_jobs)
            fiducial = summarize_draws(draws, run.alpha, run.kappa)
            store.write_csv("draws.csv", draws.to_frame())
            metadata.update(k=run.k, n_equiv=n_equiv, effective_draws=draws.k, conditional=draws.conditional)
        if "delta" in run.methods:
            delta = delta_ci(state, run.alpha)
        if "npb" in run.methods:
            npb = npb_ci(data, run.family, run.alpha, run.npb_reps, seed, run.n_jobs, fit_options=run.fit_options(),
                         options=run.effect_options(), state=state)
            metadata["npb_reps"] = run.npb_reps

        if export_weights:
            store.write_csv("weights.csv", state.weights.to_frame(state.expanded, data.mediator_names))

        report = build_report(state, fiducial, delta, npb, metadata)
        store.write_json("report.json", report.to_dict())
        path = store.write_csv("report.csv", report.to_frame())
        print(report.to_frame().to_string(index=False))
        print(f"Wrote {path}")
