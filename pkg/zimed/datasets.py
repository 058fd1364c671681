"""
Bundled datasets for zimed.
"""

from zimed.data import Dataset
from zimed.simulation import ScenarioConfig, generate_dataset

DEMO_NAME = "demo"
DEMO_SEED = 20240607

# Five taxa with distinct zero inflation and dispersion; sequencing-depth offsets
DEMO_SCENARIO = ScenarioConfig(
    n=300,
    p=5,
    pi=(0.2, 0.3, 0.4, 0.5, 0.6),
    phi=(0.5, 1.0, 1.0, 2.0, 10.0),
    beta0=(-7.5, -7.0, -8.0, -7.2, -8.5),
    beta1=(0.6, 0.4, 0.0, 0.8, 0.3),
    beta2=(0.5, 0.5, 0.5, 0.5, 0.5),
    depth="sequencing",
    replications=1,
    seed=DEMO_SEED,
)


def load_demo() -> Dataset:
    """The synthetic demonstration dataset (n=300, p=5), identical on every call."""
    return generate_dataset(DEMO_SCENARIO, DEMO_SEED)
