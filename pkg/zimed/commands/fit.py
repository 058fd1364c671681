"""
Fit command for zimed CLI.
"""

from typing import Optional

import pandas as pd

from zimed.commands.common import load_input, settings
from zimed.estimation import fit_exposure_model, fit_mediator_model, model_selection
from zimed.storage import ArtifactStore


class FitCommand:
    """Fit the exposure and mediator models."""

    def __call__(
        self,
        input: str,
        family: Optional[str] = None,
        select: Optional[str] = None,
        output: Optional[str] = None,
        config: Optional[str] = None,
        seed: Optional[int] = None,
    ):
        """
        Fit the exposure and mediator models and write fit.json.

        Args:
            input: Input CSV path, or "demo"
            family: Mediator family (poisson, zip, zinb, nb)
            select: Comma-separated families to rank by AIC (writes model_selection.csv)
            output: Output directory
            config: Config file path
            seed: Seed for jittered restarts
        """
        # Load and validate configuration
        run = settings("fit", config, input=input, family=family, select_families=select, output_dir=output,
                       seed=seed)
        store = ArtifactStore(run.output_dir)
        data = load_input(run)

        exposure = fit_exposure_model(data)
        if run.select_families:
            ranked, fits = model_selection(data, run.select_families, run.fit_options())
            store.write_csv("model_selection.csv", _selection_frame(ranked))
            fit = fits.get(run.family) or fit_mediator_model(data, run.family, run.fit_options())
            print(f"Best family by AIC: {ranked[0].family.label}")
        else:
            fit = fit_mediator_model(data, run.family, run.fit_options())

        summary = data.describe()
        payload = {
            "data": {"n": summary.n, "p": summary.p, "zero_proportion": summary.zero_proportion},
            "exposure": {
                "covariates": list(exposure.covariates),
                "alpha": exposure.alpha,
                "marginal_prob": list(exposure.marginal_prob),
            },
            "mediator": fit.to_dict(),
        }
        path = store.write_json("fit.json", payload)
        print(f"{fit.family.label}: log-likelihood {fit.log_lik:.4f}, AIC {fit.aic:.4f}")
        print(f"Wrote {path}")


def _selection_frame(ranked):
    return pd.DataFrame(
        [
            {"rank": i + 1, "family": row.family.value, "aic": row.aic, "log_lik": row.log_lik,
             "n_params": row.n_params}
            for i, row in enumerate(ranked)
        ]
    )
