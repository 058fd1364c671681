"""
Shared helpers for zimed commands.
"""

import logging
from typing import Optional

from zimed.config import RunConfig, load_config
from zimed.data import Dataset
from zimed.datasets import DEMO_NAME, load_demo
from zimed.errors import UsageError
from zimed.storage import ArtifactStore, schema_path

logger = logging.getLogger(__name__)


def settings(command: str, config: Optional[str] = None, **overrides) -> RunConfig:
    """
    Load and validate configuration, apply command-line overrides and set up logging.
    """
    from zimed.cli import configure_logging

    run = RunConfig.from_config(load_config(config), command, **overrides)
    configure_logging(run.log_level, run.seed)
    return run


def load_input(run: RunConfig) -> Dataset:
    """The dataset named by ``--input``; ``demo`` resolves to the bundled synthetic dataset."""
    if not run.input:
        raise UsageError("--input is required")
    if str(run.input) == DEMO_NAME:
        logger.info("Using the bundled demonstration dataset")
        return load_demo()
    schema = ArtifactStore.read_schema(run.input)
    if schema is None:
        schema = run.schema
    else:
        # Roles saved with the CSV take precedence over the [data] config section
        logger.info(f"Using column roles from {schema_path(run.input)}")
    return ArtifactStore.read_dataset(run.input, schema)
