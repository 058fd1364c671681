"""
Configuration module for zimed.
Handles loading configuration from files and environment variables.
"""

import copy
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

# For Python < 3.11, use tomli instead of tomllib
if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from dotenv import load_dotenv

from zimed.comparators import MIN_NPB_REPS
from zimed.counts import Family
from zimed.data import Schema
from zimed.errors import UsageError
from zimed.estimation import FitOptions
from zimed.fiducial import DEFAULT_GRID, DEFAULT_TOL, MIN_DRAWS
from zimed.pipeline import EffectOptions
from zimed.simulation import METHODS

# Load environment variables from .env file if it exists
load_dotenv()

DEFAULTS: Dict[str, Dict[str, Any]] = {
    "data": {
        "exposure": "exposure",
        "outcome": "outcome",
        "id": "subject_id",
        "c1": [],
        "c2": [],
        "c3": [],
        "mediators": [],
        "mediator_prefix": "taxon_",
        "offset": "offset",
        "unassigned": "",
    },
    "model": {
        "family": "zinb",
        "quad_nodes": 15,
        "tol": 1e-6,
        "max_iter": 500,
        "select_families": [],
    },
    "weights": {
        "truncate": 0.0,
        "include_c3": False,
        "p_max": 15,
    },
    "fiducial": {
        "k": 2000,
        "n": "auto",
        "grid": list(DEFAULT_GRID),
        "tol": DEFAULT_TOL,
        "norm": "L2",
        "conditional": False,
    },
    "inference": {
        "methods": list(METHODS),
        "alpha": 0.05,
        "npb_reps": 1000,
        "kappa": 0.0,
    },
    "run": {
        "output_dir": "zimed-output",
        "n_jobs": -1,
        "log_level": "INFO",
        "seed": None,
    },
}


def get_config_paths() -> List[Path]:
    """
    Get a list of possible configuration file paths in order of priority.
    """
    paths = [
        Path.cwd() / "zimed.toml",  # Current directory
        Path.home() / ".zimed" / "config.toml",  # User's home directory
    ]

    # XDG config directory
    xdg_config_home = os.environ.get("XDG_CONFIG_HOME")
    if xdg_config_home:
        paths.append(Path(xdg_config_home) / "zimed" / "config.toml")
    else:
        paths.append(Path.home() / ".config" / "zimed" / "config.toml")

    return paths


def load_config(path: Optional[Union[str, Path]] = None) -> Dict[str, Any]:
    """
    Load configuration from TOML files and environment variables.

    Args:
        path: Explicit config file; when given it must exist and it replaces the search path

    Returns:
        A dictionary with the merged configuration
    """
    config = copy.deepcopy(DEFAULTS)

    if path is not None:
        if not Path(path).exists():
            raise UsageError(f"Config file not found: {path}")
        candidates = [Path(path)]
    else:
        candidates = get_config_paths()

    # Try to load from config files
    for config_path in candidates:
        if config_path.exists():
            try:
                with open(config_path, "rb") as f:
                    file_config = tomllib.load(f)

                # Update config with values from file
                for section, values in file_config.items():
                    if section in config and isinstance(values, dict):
                        config[section].update(values)

                break  # Stop after the first valid config file
            except Exception as e:
                if path is not None:
                    raise UsageError(f"Error loading config from {config_path}: {e}") from e
                print(f"Error loading config from {config_path}: {e}", file=sys.stderr)

    # Override with environment variables
    env_mapping = {
        "ZIMED_OUTPUT_DIR": ("run", "output_dir"),
        "ZIMED_N_JOBS": ("run", "n_jobs"),
        "ZIMED_LOG_LEVEL": ("run", "log_level"),
        "ZIMED_FAMILY": ("model", "family"),
        "ZIMED_ALPHA": ("inference", "alpha"),
    }

    for env_var, (section, key) in env_mapping.items():
        value = os.environ.get(env_var)
        if value is not None:
            # Convert numeric values
            if key == "n_jobs":
                try:
                    value = int(value)
                except ValueError:
                    pass
            elif key == "alpha":
                try:
                    value = float(value)
                except ValueError:
                    pass
            config[section][key] = value

    return config


def _as_list(value) -> List[str]:
    if value is None:
        return []
    if isinstance(value, str):
        return [part.strip() for part in value.split(",") if part.strip()]
    return [str(v) for v in value]


def validate_config(config: Dict[str, Any]) -> Optional[str]:
    """
    Validate the configuration and return an error message if invalid.
    """
    try:
        Family.parse(config["model"]["family"])
        for name in _as_list(config["model"]["select_families"]):
            Family.parse(name)
    except UsageError as e:
        return str(e)

    alpha = config["inference"]["alpha"]
    if not isinstance(alpha, (int, float)) or not 0 < alpha < 1:
        return f"Invalid alpha: {alpha}. Must be a number in (0, 1)"

    k = config["fiducial"]["k"]
    if not isinstance(k, int) or k < MIN_DRAWS:
        return f"Invalid number of fiducial draws: {k}. Must be an integer of at least {MIN_DRAWS}"

    n = config["fiducial"]["n"]
    if not (n == "auto" or (isinstance(n, int) and n > 0)):
        return f"Invalid equivalence number: {n}. Must be 'auto' or a positive integer"

    if str(config["fiducial"]["norm"]).upper() not in ("L1", "L2"):
        return f"Invalid norm: {config['fiducial']['norm']}. Must be one of: L1, L2"

    methods = _as_list(config["inference"]["methods"])
    unknown = [m for m in methods if m.lower() not in METHODS]
    if not methods or unknown:
        return f"Invalid methods: {', '.join(methods)}. Must be among: {', '.join(METHODS)}"

    npb_reps = config["inference"]["npb_reps"]
    if not isinstance(npb_reps, int) or npb_reps < MIN_NPB_REPS:
        return f"Invalid npb_reps: {npb_reps}. Must be an integer of at least {MIN_NPB_REPS}"

    n_jobs = config["run"]["n_jobs"]
    if not isinstance(n_jobs, int) or n_jobs == 0:
        return f"Invalid n_jobs: {n_jobs}. Must be a nonzero integer"

    truncate = config["weights"]["truncate"]
    if not isinstance(truncate, (int, float)) or not 0 <= truncate < 50:
        return f"Invalid truncate: {truncate}. Must be a percentile in [0, 50)"

    quad_nodes = config["model"]["quad_nodes"]
    if not isinstance(quad_nodes, int) or quad_nodes < 5:
        return f"Invalid quad_nodes: {quad_nodes}. Must be an integer of at least 5"

    return None


@dataclass(frozen=True)
class RunConfig:
    """Settings of one command invocation: the merged config with command-line overrides applied."""

    command: str
    input: Optional[str] = None
    schema: Schema = field(default_factory=Schema)
    family: str = "zinb"
    select_families: Tuple[str, ...] = ()
    k: int = 2000
    n_equiv: Optional[int] = None
    grid: Tuple[int, ...] = DEFAULT_GRID
    equiv_tol: float = DEFAULT_TOL
    norm: str = "L2"
    conditional: bool = False
    alpha: float = 0.05
    methods: Tuple[str, ...] = METHODS
    npb_reps: int = 1000
    kappa: float = 0.0
    seed: Optional[int] = None
    output_dir: str = "zimed-output"
    n_jobs: int = -1
    quad_nodes: int = 15
    tol: float = 1e-6
    max_iter: int = 500
    truncate: Optional[float] = None
    include_c3: bool = False
    p_max: int = 15
    log_level: str = "INFO"

    @classmethod
    def from_config(cls, config: Dict[str, Any], command: str, **overrides) -> "RunConfig":
        """
        Build a RunConfig; overrides that are None keep the config value.
        """
        merged = copy.deepcopy(config)
        section_of = {
            "family": ("model", "family"),
            "k": ("fiducial", "k"),
            "n": ("fiducial", "n"),
            "alpha": ("inference", "alpha"),
            "methods": ("inference", "methods"),
            "npb_reps": ("inference", "npb_reps"),
            "kappa": ("inference", "kappa"),
            "conditional": ("fiducial", "conditional"),
            "seed": ("run", "seed"),
            "output_dir": ("run", "output_dir"),
            "n_jobs": ("run", "n_jobs"),
            "truncate": ("weights", "truncate"),
            "include_c3": ("weights", "include_c3"),
            "select_families": ("model", "select_families"),
            "log_level": ("run", "log_level"),
        }
        for key, value in overrides.items():
            if value is None or key not in section_of:
                continue
            section, name = section_of[key]
            merged[section][name] = value

        error = validate_config(merged)
        if error:
            raise UsageError(f"Configuration error: {error}")

        n = merged["fiducial"]["n"]
        truncate = merged["weights"]["truncate"]
        seed = merged["run"]["seed"]
        return cls(
            command=command,
            input=overrides.get("input"),
            schema=Schema.from_dict(merged["data"]),
            family=Family.parse(merged["model"]["family"]).value,
            select_families=tuple(Family.parse(f).value for f in _as_list(merged["model"]["select_families"])),
            k=int(merged["fiducial"]["k"]),
            n_equiv=None if n == "auto" else int(n),
            grid=tuple(int(v) for v in merged["fiducial"]["grid"]),
            equiv_tol=float(merged["fiducial"]["tol"]),
            norm=str(merged["fiducial"]["norm"]).upper(),
            conditional=bool(merged["fiducial"]["conditional"]),
            alpha=float(merged["inference"]["alpha"]),
            methods=tuple(m.lower() for m in _as_list(merged["inference"]["methods"])),
            npb_reps=int(merged["inference"]["npb_reps"]),
            kappa=float(merged["inference"]["kappa"]),
            seed=None if seed in (None, "") else int(seed),
            output_dir=str(merged["run"]["output_dir"]),
            n_jobs=int(merged["run"]["n_jobs"]),
            quad_nodes=int(merged["model"]["quad_nodes"]),
            tol=float(merged["model"]["tol"]),
            max_iter=int(merged["model"]["max_iter"]),
            truncate=float(truncate) if truncate else None,
            include_c3=bool(merged["weights"]["include_c3"]),
            p_max=int(merged["weights"]["p_max"]),
            log_level=str(merged["run"]["log_level"]).upper(),
        )

    def require_seed(self) -> int:
        if self.seed is None:
            raise UsageError(f"--seed is required for the {self.command} command")
        return self.seed

    def fit_options(self) -> FitOptions:
        return FitOptions(quad_nodes=self.quad_nodes, tol=self.tol, max_iter=self.max_iter, seed=self.seed or 0)

    def effect_options(self) -> EffectOptions:
        return EffectOptions(truncate=self.truncate, include_c3=self.include_c3, p_max=self.p_max)

    def to_metadata(self) -> Dict[str, Any]:
        """Settings recorded in report metadata; the schema is flattened to its column lists."""
        values = asdict(self)
        values.pop("log_level")
        values["schema"] = {k: list(v) if isinstance(v, tuple) else v for k, v in values["schema"].items()}
        return values
