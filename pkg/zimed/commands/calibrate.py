"""
Calibrate-n command for zimed CLI.
"""

from typing import Optional

from zimed.commands.common import load_input, settings
from zimed.estimation import fit_mediator_model
from zimed.fiducial import equivalence_number
from zimed.storage import ArtifactStore


class CalibrateCommand:
    """Choose the equivalence number N by parametric bootstrap."""

    def __call__(
        self,
        input: str,
        seed: Optional[int] = None,
        family: Optional[str] = None,
        n_jobs: Optional[int] = None,
        output: Optional[str] = None,
        config: Optional[str] = None,
    ):
        """
        Fit the mediator model and write calibration.json.

        Args:
            input: Input CSV path, or "demo"
            seed: Random seed (required)
            family: Mediator family (poisson, zip, zinb, nb)
            n_jobs: Parallel workers (-1 for all cores)
            output: Output directory
            config: Config file path
        """
        # Load and validate configuration
        run = settings("calibrate-n", config, input=input, seed=seed, family=family, n_jobs=n_jobs,
                       output_dir=output)
        seed = run.require_seed()
        store = ArtifactStore(run.output_dir)
        data = load_input(run)

        fit = fit_mediator_model(data, run.family, run.fit_options())
        calibration = equivalence_number(data, fit, run.grid, run.equiv_tol, run.norm, seed, run.n_jobs,
                                         run.fit_options())
        path = store.write_json("calibration.json", calibration.to_dict())
        status = "within tolerance" if calibration.within_tol else "closest candidate"
        print(f"N = {calibration.n_equiv} ({status}, distance {calibration.distance:.4g})")
        print(f"Wrote {path}")
