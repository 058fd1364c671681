import numpy as np
import pytest

from zimed.counts import Family
from zimed.data import Dataset, ExposureFit, ThetaVector
from zimed.estimation import MediatorFit
from zimed.pipeline import estimate_effects
from zimed.simulation import ScenarioConfig, generate_dataset


def build_dataset(mediators, exposure, offset=None, outcome=None, c2=None, c1=None, c3=None):
    """Dataset from plain arrays, bypassing validation (single subjects allowed)."""
    mediators = np.atleast_2d(np.asarray(mediators))
    n = mediators.shape[0]
    return Dataset(
        subject_id=tuple(str(i + 1) for i in range(n)),
        exposure=np.asarray(exposure),
        c1=np.zeros((n, 0)) if c1 is None else np.asarray(c1, dtype=float).reshape(n, -1),
        c2=np.zeros((n, 1)) if c2 is None else np.asarray(c2, dtype=float).reshape(n, -1),
        c3=np.zeros((n, 0)) if c3 is None else np.asarray(c3, dtype=float).reshape(n, -1),
        mediators=mediators,
        offset=np.ones(n) if offset is None else np.asarray(offset, dtype=float),
        outcome=np.zeros(n) if outcome is None else np.asarray(outcome, dtype=float),
        mediator_names=tuple(f"taxon_{j + 1}" for j in range(mediators.shape[1])),
    )


def build_fit(theta: ThetaVector, family, data: Dataset, delta_hat=None, cov_star=None) -> MediatorFit:
    family = Family.parse(family)
    P = theta.size
    return MediatorFit(
        theta_hat=theta.pinned(family),
        family=family,
        cov_star=np.zeros((P, P)) if cov_star is None else cov_star,
        delta_hat=np.zeros(data.n) if delta_hat is None else np.asarray(delta_hat, dtype=float),
        log_lik=0.0,
        aic=0.0,
        converged=True,
        n_iter=0,
        mediator_names=data.mediator_names,
    )


def build_exposure_fit(data: Dataset, p1: float = 0.4) -> ExposureFit:
    fitted = np.full(data.n, p1)
    return ExposureFit(alpha=np.zeros(1), fitted_prob=fitted, marginal_prob=(p1, 1.0 - p1))


@pytest.fixture
def make_dataset():
    return build_dataset


@pytest.fixture
def make_fit():
    return build_fit


@pytest.fixture
def make_exposure_fit():
    return build_exposure_fit


@pytest.fixture(scope="session")
def scenario():
    """Single taxon with moderate counts so every family fits quickly."""
    return ScenarioConfig(n=150, p=1, pi=0.2, phi=1.0, beta0=1.0, beta1=0.6, beta2=0.5, replications=1, seed=3)


@pytest.fixture(scope="session")
def sim_data(scenario):
    return generate_dataset(scenario, 11)


@pytest.fixture(scope="session")
def sim_data_p2():
    cfg = ScenarioConfig(n=120, p=2, pi=(0.2, 0.3), phi=1.0, beta0=(1.0, 0.5), beta1=(0.6, 0.0), beta2=0.5,
                         generate_family="poisson", replications=1, seed=5)
    return generate_dataset(cfg, 21)


@pytest.fixture(scope="session")
def state(sim_data):
    return estimate_effects(sim_data, "zinb")


@pytest.fixture(scope="session")
def sparse_data():
    """One draw of the default scenario: baseline log-mean -3 at unit depth, so most counts are zero."""
    return generate_dataset(ScenarioConfig(), 1000)
