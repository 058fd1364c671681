"""
Gof command for zimed CLI.
"""

from typing import Optional

import pandas as pd

from zimed.commands.common import load_input, settings
from zimed.estimation import fit_mediator_model, goodness_of_fit
from zimed.storage import ArtifactStore


class GofCommand:
    """Chi-square goodness of fit of the mediator model per taxon."""

    def __call__(
        self,
        input: str,
        family: Optional[str] = None,
        alpha: Optional[float] = None,
        output: Optional[str] = None,
        config: Optional[str] = None,
    ):
        """
        Fit the mediator model and write gof.csv.

        Args:
            input: Input CSV path, or "demo"
            family: Mediator family (poisson, zip, zinb, nb)
            alpha: Significance level of the test
            output: Output directory
            config: Config file path
        """
        # Load and validate configuration
        run = settings("gof", config, input=input, family=family, alpha=alpha, output_dir=output)
        store = ArtifactStore(run.output_dir)
        data = load_input(run)

        fit = fit_mediator_model(data, run.family, run.fit_options())
        report = goodness_of_fit(fit, data, run.alpha, strict=False)
        frame = pd.DataFrame(report.to_rows())
        path = store.write_csv("gof.csv", frame)
        print(f"{report.n_passed} of {len(report.taxa)} taxa consistent with {fit.family.label} at alpha={run.alpha}")
        print(f"Wrote {path}")
