"""
Simulate command for zimed CLI.
"""

import logging
from typing import Optional

import pandas as pd

from zimed import simulation
from zimed.commands.common import settings
from zimed.errors import ConvergenceError, UsageError, ZimedError
from zimed.simulation import ScenarioConfig, run_scenario, scenario_grid
from zimed.storage import ArtifactStore

logger = logging.getLogger(__name__)


def _axis(value):
    if value is None:
        return None
    if isinstance(value, (list, tuple)):
        return list(value)
    if isinstance(value, str):
        return [float(v) if "." in v else int(v) for v in value.split(",") if v.strip()]
    return [value]


class SimulateCommand:
    """Run a simulation study scoring the interval methods against gold-standard effects."""

    def __call__(
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
        """
        Run a preset study or a grid built from the scenario flags; writes scenario_results.csv.

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
        # Load and validate configuration
        run = settings("simulate", config, seed=seed, n_jobs=n_jobs, output_dir=output)
        base_seed = run.require_seed()
        store = ArtifactStore(run.output_dir)

        overrides = {
            "seed": base_seed,
            "replications": reps,
            "generate_family": generate_family,
            "fit_family": fit_family,
            "methods": tuple(m.strip() for m in methods.split(",")) if isinstance(methods, str) else methods,
            "k": k,
            "n_equiv": n_equiv,
            "npb_reps": npb_reps,
            "alpha": alpha,
        }
        overrides = {key: value for key, value in overrides.items() if value is not None}
        axes = {"n": _axis(n), "p": _axis(p), "pi": _axis(pi), "phi": _axis(phi)}

        if preset:
            if any(axes.values()):
                raise UsageError("Scenario flags --n, --p, --pi and --phi cannot be combined with --preset")
            scenarios = simulation.preset(preset, **overrides)
        else:
            scenarios = scenario_grid(ScenarioConfig(**overrides), axes)
        logger.info(f"Running {len(scenarios)} scenario(s)")

        tables, replicates, failed = [], [], []
        for index, cfg in enumerate(scenarios):
            try:
                result = run_scenario(cfg, run.n_jobs)
            except ZimedError as e:
                logger.error(f"Scenario {index} (n={cfg.n}, p={cfg.p}, pi={cfg.pi[0]}) failed: {e}")
                failed.append({"scenario": index, "config": cfg.to_dict(), "error": str(e)})
                continue
            frame = result.to_frame()
            frame.insert(0, "scenario", index)
            tables.append(frame)
            if not result.replicates.empty:
                rep = result.replicates.copy()
                rep.insert(0, "scenario", index)
                replicates.append(rep)

        results = pd.concat(tables, ignore_index=True) if tables else pd.DataFrame()
        store.write_csv("scenario_results.csv", results)
        store.write_json(
            "scenario_results.json",
            {
                "seed": base_seed,
                "scenarios": [cfg.to_dict() for cfg in scenarios],
                "results": results.to_dict(orient="records"),
                "failed": failed,
            },
        )
        if replicates:
            store.write_csv("scenario_replicates.csv", pd.concat(replicates, ignore_index=True))

        if not results.empty:
            columns = [c for c in ("scenario", "n", "pi", "method", "effect", "coverage", "mean_width") if c in results]
            print(results[columns].to_string(index=False))
        print(f"Wrote {store.path('scenario_results.csv')}")
        if failed:
            raise ConvergenceError(f"{len(failed)} of {len(scenarios)} scenarios failed")
