"""
Summary command for zimed CLI.
"""

from typing import Optional

from zimed.commands.common import load_input, settings
from zimed.report import emit_summary_stats
from zimed.storage import ArtifactStore


class SummaryCommand:
    """Per-taxon and per-subject summary statistics of the input."""

    def __call__(self, input: str, output: Optional[str] = None, config: Optional[str] = None):
        """
        Write summary_taxa.csv and summary_depth.csv.

        Args:
            input: Input CSV path, or "demo"
            output: Output directory
            config: Config file path
        """
        # Load and validate configuration
        run = settings("summary", config, input=input, output_dir=output)
        store = ArtifactStore(run.output_dir)
        data = load_input(run)

        taxa, depth = emit_summary_stats(data)
        store.write_csv("summary_taxa.csv", taxa)
        path = store.write_csv("summary_depth.csv", depth)
        print(taxa.to_string(index=False))
        print(f"Wrote {path}")
