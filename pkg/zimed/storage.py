"""
Artifact storage module for zimed.
Handles reading input tables and writing JSON and CSV artifacts to the output directory.
"""

import json
import logging
import math
from dataclasses import asdict
from pathlib import Path
from typing import Any, Optional, Union

import numpy as np
import pandas as pd

from zimed.data import Dataset, Schema, read_dataset
from zimed.errors import OutputError

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.10g"
SCHEMA_SUFFIX = ".schema.json"


def _clean(value: Any) -> Any:
    """Make a value JSON-serializable with non-finite floats as null."""
    if isinstance(value, dict):
        return {str(k): _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    if isinstance(value, np.ndarray):
        return [_clean(v) for v in value.tolist()]
    if isinstance(value, (np.bool_, bool)):
        return bool(value)
    if isinstance(value, (np.integer, int)):
        return int(value)
    if isinstance(value, (np.floating, float)):
        value = float(value)
        return value if math.isfinite(value) else None
    if hasattr(value, "value") and isinstance(getattr(value, "value"), str):
        return value.value
    return value


def schema_path(path: Union[str, Path]) -> Path:
    return Path(path).with_suffix(SCHEMA_SUFFIX)


class ArtifactStore:
    """
    Handles the artifacts of one run.
    """

    def __init__(self, output_dir: Union[str, Path]):
        """
        Initialize the artifact store.

        Args:
            output_dir: Directory that receives the artifacts; created on first write
        """
        self.output_dir = Path(output_dir)

    def path(self, name: str) -> Path:
        return self.output_dir / name

    def _ensure_dir(self) -> None:
        try:
            self.output_dir.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            logger.error(f"Error creating output directory {self.output_dir}: {e}")
            raise OutputError(f"Cannot create output directory {self.output_dir}: {e}") from e

    def write_json(self, name: str, payload: Any) -> Path:
        """
        Write a JSON artifact with sorted keys.

        Args:
            name: File name inside the output directory
            payload: JSON-like object (numpy scalars and arrays allowed)

        Returns:
            Path of the written file
        """
        self._ensure_dir()
        target = self.path(name)
        try:
            text = json.dumps(_clean(payload), sort_keys=True, indent=2, allow_nan=False)
            target.write_text(text + "\n", encoding="utf-8")
        except (OSError, ValueError, TypeError) as e:
            logger.error(f"Error writing {target}: {e}")
            raise OutputError(f"Cannot write {target}: {e}") from e
        logger.info(f"Wrote {target}")
        return target

    def write_csv(self, name: str, frame: pd.DataFrame) -> Path:
        """
        Write a CSV artifact with a fixed float format.

        Args:
            name: File name inside the output directory
            frame: Table to write

        Returns:
            Path of the written file
        """
        self._ensure_dir()
        target = self.path(name)
        try:
            frame.to_csv(target, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
        except OSError as e:
            logger.error(f"Error writing {target}: {e}")
            raise OutputError(f"Cannot write {target}: {e}") from e
        logger.info(f"Wrote {target}")
        return target

    def write_dataset(self, name: str, data: Dataset) -> Path:
        """
        Write a dataset as CSV together with its column roles in a ``.schema.json`` file beside it.
        """
        target = self.write_csv(name, data.to_frame())
        self.write_json(str(schema_path(name)), asdict(data.schema()))
        return target

    @staticmethod
    def read_schema(path: Union[str, Path]) -> Optional[Schema]:
        """Column roles stored beside a CSV written by ``write_dataset``, or None when there are none."""
        sidecar = schema_path(path)
        if not sidecar.exists():
            return None
        try:
            return Schema.from_dict(json.loads(sidecar.read_text(encoding="utf-8")))
        except (OSError, ValueError, TypeError) as e:
            logger.error(f"Error reading {sidecar}: {e}")
            raise OutputError(f"Cannot read {sidecar}: {e}") from e

    @staticmethod
    def read_dataset(path: Union[str, Path], schema: Optional[Schema] = None) -> Dataset:
        """
        Read and validate an input CSV.

        Args:
            path: CSV file with a header row
            schema: Column-role map

        Returns:
            Validated Dataset
        """
        path = Path(path)
        if not path.exists():
            logger.error(f"Input file not found: {path}")
            raise OutputError(f"Input file not found: {path}")
        try:
            return read_dataset(path, schema or Schema())
        except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
            logger.error(f"Error reading {path}: {e}")
            raise OutputError(f"Cannot read {path}: {e}") from e
