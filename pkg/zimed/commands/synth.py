"""
Synth command for zimed CLI.
"""

from typing import Optional

from zimed.commands.common import settings
from zimed.datasets import DEMO_SCENARIO
from zimed.simulation import generate_dataset
from zimed.storage import ArtifactStore


class SynthCommand:
    """Write a synthetic dataset drawn from the demonstration scenario."""

    def __call__(
        self,
        seed: Optional[int] = None,
        name: str = "synth.csv",
        output: Optional[str] = None,
        config: Optional[str] = None,
    ):
        """
        Generate the dataset and write it as CSV.

        Args:
            seed: Random seed (required; the bundled demo uses 20240607)
            name: Output file name
            output: Output directory
            config: Config file path
        """
        # Load and validate configuration
        run = settings("synth", config, seed=seed, output_dir=output)
        seed = run.require_seed()
        store = ArtifactStore(run.output_dir)

        data = generate_dataset(DEMO_SCENARIO, seed)
        path = store.write_dataset(name, data)
        print(f"Wrote {data.n} subjects x {data.p} taxa to {path}")
