"""
Command-line interface for zimed.
"""

import logging
import sys
from typing import List, Optional

import fire

from zimed.errors import ZimedError

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s [seed=%(seed)s] %(message)s"


class SeedFilter(logging.Filter):
    """Stamps every record with the run seed."""

    def __init__(self, seed: Optional[int] = None):
        super().__init__()
        self.seed = "none" if seed is None else seed

    def filter(self, record: logging.LogRecord) -> bool:
        record.seed = self.seed
        return True


def configure_logging(level: str = "INFO", seed: Optional[int] = None) -> None:
    """
    Send log records to stderr, each line tagged with the seed.
    """
    handler = logging.StreamHandler(sys.stderr)
    handler.addFilter(SeedFilter(seed))
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    logging.basicConfig(level=getattr(logging, str(level).upper(), logging.INFO), handlers=[handler], force=True)


class ZimedCLI:
    """
    zimed - Causal mediation analysis for zero-inflated count mediators

    Fits zero-inflated mixed mediator models, estimates natural direct and indirect effects and reports
    fiducial generalized confidence intervals next to delta-method and bootstrap intervals.
    """

    def __init__(self):
        pass

    def fit(
        self,
        input: str,
        family: Optional[str] = None,
        select: Optional[str] = None,
        output: Optional[str] = None,
        config: Optional[str] = None,
        seed: Optional[int] = None,
    ):
        """Fit the exposure and mediator models.

        Args:
            input: Input CSV path, or "demo" for the bundled dataset
            family: Mediator family (poisson, zip, zinb, nb)
            select: Comma-separated families to rank by AIC
            output: Output directory
            config: Config file path
            seed: Seed for jittered restarts
        """
        from zimed.commands.fit import FitCommand

        return FitCommand()(input, family, select, output, config, seed)

    def mediate(
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
        """Estimate natural effects with fiducial, delta-method and bootstrap intervals.

        Args:
            input: Input CSV path, or "demo" for the bundled dataset
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
        from zimed.commands.mediate import MediateCommand

        return MediateCommand()(
            input, seed, family, k, n, alpha, methods, npb_reps, kappa, conditional, truncate, export_weights,
            n_jobs, output, config,
        )

    def simulate(
        self,
        seed: Optional[int] = None,
        preset: Optional[str] = None,
        reps: Optional[int] = None,
        n=None,
        p=None,
        pi=None,
        phi=None,
        generate_family: Optional[str] = None,
        fit_family: Optional[str] = None,
        methods: Optional[str] = None,
        k: Optional[int] = None,
        n_equiv: Optional[int] = None,
        npb_reps: Optional[int] = None,
        alpha: Optional[float] = None,
        n_jobs: Optional[int] = None,
        output: Optional[str] = None,
        config: Optional[str] = None,
    ):
        """Run a simulation study of interval coverage, width and sensitivity.

        Args:
            seed: Base random seed (required)
            preset: Named study (coverage, dispersion, taxa, sensitivity, misspec, or the aliases fig5, fig6, fig7)
            reps: Replications per scenario
            n: Sample size, or comma-separated sizes
            p: Number of taxa, or comma-separated values
            pi: Zero-inflation probability, or comma-separated values
            phi: Dispersion, or comma-separated values
            generate_family: Family the data are generated from
            fit_family: Family fitted to each replication
            methods: Comma-separated subset of fiducial, delta, npb
            k: Fiducial draws per replication
            n_equiv: Fixed equivalence number (calibrated per scenario when omitted)
            npb_reps: Bootstrap resamples per replication
            alpha: 1 - confidence level
            n_jobs: Parallel workers (-1 for all cores)
            output: Output directory
            config: Config file path
        """
        from zimed.commands.simulate import SimulateCommand

        return SimulateCommand()(
            seed, preset, reps, n, p, pi, phi, generate_family, fit_family, methods, k, n_equiv, npb_reps, alpha,
            n_jobs, output, config,
        )

    def calibrate_n(
        self,
        input: str,
        seed: Optional[int] = None,
        family: Optional[str] = None,
        n_jobs: Optional[int] = None,
        output: Optional[str] = None,
        config: Optional[str] = None,
    ):
        """Choose the equivalence number N by parametric bootstrap.

        Args:
            input: Input CSV path, or "demo" for the bundled dataset
            seed: Random seed (required)
            family: Mediator family (poisson, zip, zinb, nb)
            n_jobs: Parallel workers (-1 for all cores)
            output: Output directory
            config: Config file path
        """
        from zimed.commands.calibrate import CalibrateCommand

        return CalibrateCommand()(input, seed, family, n_jobs, output, config)

    def gof(
        self,
        input: str,
        family: Optional[str] = None,
        alpha: Optional[float] = None,
        output: Optional[str] = None,
        config: Optional[str] = None,
    ):
        """Chi-square goodness of fit of the mediator model per taxon.

        Args:
            input: Input CSV path, or "demo" for the bundled dataset
            family: Mediator family (poisson, zip, zinb, nb)
            alpha: Significance level of the test
            output: Output directory
            config: Config file path
        """
        from zimed.commands.gof import GofCommand

        return GofCommand()(input, family, alpha, output, config)

    def summary(self, input: str, output: Optional[str] = None, config: Optional[str] = None):
        """Per-taxon zero proportions and count distributions, per-subject depth.

        Args:
            input: Input CSV path, or "demo" for the bundled dataset
            output: Output directory
            config: Config file path
        """
        from zimed.commands.summary import SummaryCommand

        return SummaryCommand()(input, output, config)

    def synth(
        self,
        seed: Optional[int] = None,
        name: str = "synth.csv",
        output: Optional[str] = None,
        config: Optional[str] = None,
    ):
        """Write a synthetic dataset from the demonstration scenario.

        Args:
            seed: Random seed (required)
            name: Output file name
            output: Output directory
            config: Config file path
        """
        from zimed.commands.synth import SynthCommand

        return SynthCommand()(seed, name, output, config)

    @property
    def version(self):
        """Print the version and exit."""
        from importlib.metadata import PackageNotFoundError, version

        try:
            return version("zimed")
        except PackageNotFoundError:
            from zimed import __version__

            return __version__


def main(argv: Optional[List[str]] = None) -> int:
    """
    Main entry point for the CLI.

    Returns:
        Process exit code: 0 on success, 2 usage, 3 data, 4 convergence, 5 output, 1 anything else
    """
    argv = list(sys.argv[1:] if argv is None else argv)
    if argv and argv[0] == "calibrate-n":
        argv[0] = "calibrate_n"
    try:
        fire.Fire(ZimedCLI, command=argv, name="zimed")
    except fire.core.FireExit as e:
        return 0 if e.code in (0, None) else 2
    except ZimedError as e:
        print(f"Error: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"Error: {e}", file=sys.stderr)
        return 5
    except Exception as e:
        print(f"Unexpected error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
