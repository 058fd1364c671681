"""
Fiducial inference module for zimed.
Equivalence-number calibration by parametric bootstrap, Wishart-based fiducial draws of the mediator
parameters, their propagation to NDE/NIE draws, and HDI / mode / generalized p-value summaries.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from numpy.polynomial.hermite import hermgauss
from scipy import linalg, stats
from scipy.special import expit

from zimed import counts
from zimed.data import Dataset, ThetaVector
from zimed.effects import effects_from_theta
from zimed.errors import (
    CholeskyFailure,
    DegreesOfFreedomTooSmall,
    InsufficientDraws,
    InsufficientReplicates,
    TooManyFailures,
    UsageError,
    ZimedError,
)
from zimed.estimation import FitOptions, MediatorFit, fit_mediator_model
from zimed.pipeline import AnalysisState

logger = logging.getLogger(__name__)

DEFAULT_GRID = (100, 200, 400, 600, 800, 1000)
DEFAULT_TOL = 0.002
MIN_DRAWS = 500
MIN_BOOTSTRAP = 50
GH_NODES = 9


def replicate_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream for replicate ``index``, so results do not depend on scheduling."""
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def index_chunks(k: int, n_jobs: int) -> List[range]:
    n_chunks = max(1, min(k, 4 * (n_jobs if n_jobs and n_jobs > 0 else 1)))
    bounds = np.linspace(0, k, n_chunks + 1).astype(int)
    return [range(lo, hi) for lo, hi in zip(bounds[:-1], bounds[1:]) if hi > lo]


class IntervalMethod(str, Enum):
    FIDUCIAL_HDI = "FiducialHDI"
    DELTA = "Delta"
    NPB = "NPB"


@dataclass(frozen=True)
class IntervalSummary:
    """Point estimate and interval for one effect."""

    effect: str
    estimate: float
    lower: float
    upper: float
    alpha: float
    method: IntervalMethod
    gen_p_value: Optional[float] = None

    @property
    def width(self) -> float:
        return self.upper - self.lower

    def covers(self, value: float) -> bool:
        return self.lower <= value <= self.upper

    def excludes_zero(self) -> bool:
        return not self.covers(0.0)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "effect": self.effect,
            "estimate": self.estimate,
            "lower": self.lower,
            "upper": self.upper,
            "width": self.width,
            "alpha": self.alpha,
            "method": self.method.value,
            "gen_p_value": self.gen_p_value,
        }


# Parametric bootstrap


def simulate_from_fit(data: Dataset, fit: MediatorFit, rng: np.random.Generator) -> Dataset:
    """New mediator counts from the fitted model with fresh random effects; covariates and offsets kept."""
    theta = fit.theta_hat
    delta = rng.normal(0.0, abs(theta.sigma_delta), size=data.n)
    eta = theta.linear_predictor(data, delta=delta)
    return data.with_mediators(counts.sample(rng, eta, theta.beta_z0, theta.beta_l0, fit.family))


def _refit_replicates(data, fit, indices, seed, options) -> List[Optional[np.ndarray]]:
    free = fit.free_mask
    results: List[Optional[np.ndarray]] = []
    for index in indices:
        replicate = simulate_from_fit(data, fit, replicate_rng(seed, index))
        try:
            refit = fit_mediator_model(replicate, fit.family, options, start=fit.theta_hat)
        except ZimedError as e:
            logger.warning(f"Bootstrap replicate {index} dropped: {e}")
            results.append(None)
            continue
        results.append(refit.theta_hat.pack()[free])
    return results


def bootstrap_estimates(
    data: Dataset,
    fit: MediatorFit,
    n_total: int,
    seed: int,
    n_jobs: int = 1,
    options: Optional[FitOptions] = None,
) -> np.ndarray:
    """
    Refit the mediator model on ``n_total`` datasets simulated from the fit.

    Returns:
        Array (effective replicates, free parameters) in replicate order
    """
    options = replace(options or FitOptions(quad_nodes=fit.quad_nodes), covariance=False)
    batches = Parallel(n_jobs=n_jobs)(
        delayed(_refit_replicates)(data, fit, chunk, seed, options) for chunk in index_chunks(n_total, n_jobs)
    )
    kept = [est for batch in batches for est in batch if est is not None]
    dropped = n_total - len(kept)
    if dropped:
        logger.warning(f"Parametric bootstrap: {dropped} of {n_total} replicates dropped; effective {len(kept)}")
    if len(kept) < 2:
        raise TooManyFailures(f"Parametric bootstrap kept {len(kept)} of {n_total} replicates")
    return np.vstack(kept)


def _sample_covariance(estimates: np.ndarray) -> np.ndarray:
    """Covariance of bootstrap estimates with divisor (count - 1)."""
    centered = estimates - estimates.mean(axis=0)
    return centered.T @ centered / (len(estimates) - 1)


def _embed(block: np.ndarray, mask: np.ndarray) -> np.ndarray:
    full = np.zeros((len(mask), len(mask)))
    idx = np.flatnonzero(mask)
    full[np.ix_(idx, idx)] = block
    return full


def bootstrap_covariance(
    data: Dataset,
    fit: MediatorFit,
    n_reps: int,
    seed: int,
    n_jobs: int = 1,
    options: Optional[FitOptions] = None,
) -> np.ndarray:
    """
    Parametric bootstrap covariance S_N of the mediator parameters from n_reps + 1 refits.

    Returns:
        P x P matrix; rows of coordinates the family does not estimate are zero
    """
    if n_reps < MIN_BOOTSTRAP:
        raise InsufficientReplicates(f"n_reps must be at least {MIN_BOOTSTRAP}, got {n_reps}")
    estimates = bootstrap_estimates(data, fit, n_reps + 1, seed, n_jobs, options)
    return _embed(_sample_covariance(estimates), fit.free_mask)


@dataclass(frozen=True)
class EquivalenceCalibration:
    n_equiv: int
    distance: float
    bootstrap_reps: int
    search_trace: Tuple[Tuple[int, float], ...]
    tol: float = DEFAULT_TOL
    norm: str = "L2"
    within_tol: bool = True
    dropped: int = 0

    def to_dict(self) -> Dict[str, Any]:
        return {
            "n_equiv": self.n_equiv,
            "distance": self.distance,
            "bootstrap_reps": self.bootstrap_reps,
            "tol": self.tol,
            "norm": self.norm,
            "within_tol": self.within_tol,
            "dropped": self.dropped,
            "search_trace": [{"n": n, "distance": d} for n, d in self.search_trace],
        }


def eigenvalue_distance(a: np.ndarray, b: np.ndarray, norm: str = "L2") -> float:
    """Norm of the difference of the eigenvalues of two symmetric matrices, both sorted descending."""
    ea = np.sort(np.linalg.eigvalsh(a))[::-1]
    eb = np.sort(np.linalg.eigvalsh(b))[::-1]
    diff = ea - eb
    key = norm.upper()
    if key == "L1":
        return float(np.sum(np.abs(diff)))
    if key == "L2":
        return float(np.sqrt(np.sum(diff**2)))
    raise UsageError(f"Unknown norm: {norm}. Must be L1 or L2")


def select_equivalence_number(
    s_star: np.ndarray,
    candidates: Sequence[Tuple[int, np.ndarray]],
    tol: float = DEFAULT_TOL,
    norm: str = "L2",
) -> EquivalenceCalibration:
    """
    Smallest candidate N whose bootstrap covariance is within ``tol`` of S*, else the closest one.

    Args:
        s_star: Information-based covariance (free block)
        candidates: (N, S_N) pairs with N ascending
    """
    trace = [(int(n), eigenvalue_distance(s_star, s_n, norm)) for n, s_n in candidates]
    for n, d in trace:
        if d <= tol:
            return EquivalenceCalibration(n, d, n + 1, tuple(trace), tol, norm.upper(), True)
    n, d = min(trace, key=lambda item: item[1])
    logger.warning(f"No equivalence number within tolerance {tol}; using closest N={n} (distance {d:.4g})")
    return EquivalenceCalibration(n, d, n + 1, tuple(trace), tol, norm.upper(), False)


def equivalence_number(
    data: Dataset,
    fit: MediatorFit,
    grid: Sequence[int] = DEFAULT_GRID,
    tol: float = DEFAULT_TOL,
    norm: str = "L2",
    seed: int = 0,
    n_jobs: int = 1,
    options: Optional[FitOptions] = None,
) -> EquivalenceCalibration:
    """
    Calibrate the Wishart degrees of freedom N by matching bootstrap and information-based covariances.

    One nested sequence of max(grid) + 1 refits is simulated; candidate N uses its first N + 1 members.
    """
    grid = [int(n) for n in grid]
    if not grid or any(b <= a for a, b in zip(grid, grid[1:])):
        raise UsageError(f"Grid must be non-empty and strictly ascending, got {grid}")
    if grid[0] < MIN_BOOTSTRAP:
        raise InsufficientReplicates(f"Grid values must be at least {MIN_BOOTSTRAP}, got {grid[0]}")

    n_total = grid[-1] + 1
    estimates = bootstrap_estimates(data, fit, n_total, seed, n_jobs, options)
    free = fit.free_mask
    s_star = fit.cov_star[np.ix_(free, free)]
    candidates = []
    for n in grid:
        subset = estimates[: n + 1]
        if len(subset) < n + 1:
            logger.warning(f"Candidate N={n} uses only {len(subset)} replicates after drops")
        candidates.append((n, _sample_covariance(subset)))
    calibration = select_equivalence_number(s_star, candidates, tol, norm)
    calibration = replace(calibration, dropped=n_total - len(estimates))
    logger.info(f"Equivalence number N={calibration.n_equiv} (distance {calibration.distance:.4g})")
    return calibration


# Fiducial draws


def sample_wishart_factor(P: int, N: int, rng: np.random.Generator) -> np.ndarray:
    """
    Lower-triangular Bartlett factor U with UU' ~ Wishart_P(N, I).

    Off-diagonal entries are standard normal; the i-th diagonal entry is chi distributed with N - i + 1
    degrees of freedom.
    """
    if N <= P + 2:
        raise DegreesOfFreedomTooSmall(f"N={N} must exceed P + 2 = {P + 2}")
    U = np.tril(rng.standard_normal((P, P)), k=-1)
    U[np.diag_indices(P)] = np.sqrt(rng.chisquare(N - np.arange(P)))
    return U


def _scaled_cholesky(cov: np.ndarray, N: int) -> np.ndarray:
    """Lower Cholesky factor of N * cov, regularized once by 1e-10 * I."""
    try:
        return linalg.cholesky(N * cov, lower=True)
    except linalg.LinAlgError:
        pass
    try:
        return linalg.cholesky(N * (cov + 1e-10 * np.eye(len(cov))), lower=True)
    except linalg.LinAlgError as e:
        raise CholeskyFailure(f"Covariance is not positive semi-definite: {e}") from e


def _fiducial_shift(t: np.ndarray, N: int, rng, u=None, z=None) -> np.ndarray:
    """
    B Z / sqrt(N) with B = sqrt(N) t U^{-1}: BB'/N is a fiducial quantity for the covariance and the
    shift reproduces the true deviation when U and Z equal their observed counterparts.
    """
    P = t.shape[0]
    U = sample_wishart_factor(P, N, rng) if u is None else np.asarray(u, dtype=float)
    Z = rng.standard_normal(P) if z is None else np.asarray(z, dtype=float)
    return t @ linalg.solve_triangular(U, Z, lower=True)


def fiducial_theta_draw(
    theta_hat: ThetaVector,
    s_star: np.ndarray,
    N: int,
    rng: Optional[np.random.Generator] = None,
    factor: Optional[np.ndarray] = None,
    u: Optional[np.ndarray] = None,
    z: Optional[np.ndarray] = None,
) -> ThetaVector:
    """
    One fiducial draw of the mediator parameters.

    Coordinates pinned at +-inf by the family stay pinned. ``u`` and ``z`` replace the random
    Wishart factor and normal vector (used to check degenerate draws).

    Args:
        theta_hat: Fitted parameters
        s_star: P x P covariance (rows of pinned coordinates ignored)
        N: Equivalence number
        rng: Random generator
        factor: Precomputed Cholesky factor of N * S* restricted to free coordinates

    Returns:
        Drawn ThetaVector with a nonnegative sigma_delta
    """
    v = theta_hat.pack()
    idx = np.flatnonzero(np.isfinite(v))
    t = factor if factor is not None else _scaled_cholesky(np.asarray(s_star)[np.ix_(idx, idx)], N)
    if rng is None and (u is None or z is None):
        raise UsageError("A random generator is required unless both u and z are given")
    v[idx] = v[idx] - _fiducial_shift(t, N, rng, u, z)
    v[-1] = abs(v[-1])
    return ThetaVector.unpack(v, theta_hat.p, theta_hat.r2)


def fiducial_derived_params(theta_tilde: ThetaVector) -> Tuple[np.ndarray, np.ndarray]:
    """Zero-inflation probability pi = expit(beta_z0) and dispersion phi = exp(beta_l0) per taxon."""
    with np.errstate(over="ignore"):
        return expit(theta_tilde.beta_z0), np.exp(theta_tilde.beta_l0)


@dataclass(frozen=True, eq=False)
class FiducialDraws:
    """Fiducial NDE/NIE draws that survived, with their draw indices."""

    nde_draws: np.ndarray
    nie_draws: np.ndarray
    sigma_delta_draws: np.ndarray
    conditional: bool
    requested: int
    n_equiv: int
    index: np.ndarray
    mediator_names: Tuple[str, ...] = field(default=())

    @property
    def k(self) -> int:
        return len(self.nde_draws)

    def to_frame(self) -> pd.DataFrame:
        names = self.mediator_names or tuple(f"taxon_{j + 1}" for j in range(self.nie_draws.shape[1]))
        frame = pd.DataFrame({"k": self.index, "nde": self.nde_draws})
        for j, name in enumerate(names):
            frame[f"nie_{name}"] = self.nie_draws[:, j]
        frame["sigma_delta"] = self.sigma_delta_draws
        return frame


def _marginal_effects(state: AnalysisState, theta: ThetaVector, nodes: np.ndarray, weights: np.ndarray):
    """Average the WLS coefficients and covariances over quadrature nodes of N(0, sigma^2)."""
    points = np.sqrt(2.0) * theta.sigma_delta * nodes
    center, cov = None, None
    for point, w in zip(points, weights):
        est = state.effects_at(theta, delta=point)
        center = w * est.theta if center is None else center + w * est.theta
        cov = w * est.cov if cov is None else cov + w * est.cov
    return center, cov


def _draw_chunk(state: AnalysisState, indices: range, seed: int, N: int, factor: np.ndarray, conditional: bool):
    nodes, gh_weights = hermgauss(GH_NODES)
    gh_weights = gh_weights / np.sqrt(np.pi)
    theta_hat = state.mediator_fit.theta_hat
    p = state.data.p
    out = []
    for k in indices:
        rng = replicate_rng(seed, k)
        stage = "parameters"
        try:
            theta = fiducial_theta_draw(theta_hat, None, N, rng, factor=factor)
            stage = "weights"
            if conditional:
                est = state.effects_at(theta)
                center, cov = est.theta, est.cov
            else:
                center, cov = _marginal_effects(state, theta, nodes, gh_weights)
            stage = "outcome model"
            coef = center - _fiducial_shift(_scaled_cholesky(cov, N), N, rng)
            nde, nie = effects_from_theta(coef[: p + 2])
            if not (np.isfinite(nde) and np.all(np.isfinite(nie))):
                raise CholeskyFailure("non-finite effect draw")
        except ZimedError as e:
            logger.warning(f"Fiducial draw {k} dropped at {stage}: {e}")
            out.append(None)
            continue
        out.append((k, nde, nie, theta.sigma_delta))
    return out


def fiducial_nie_samples(
    state: AnalysisState,
    K: int,
    N: int,
    seed: int,
    conditional: bool = False,
    n_jobs: int = 1,
) -> FiducialDraws:
    """
    K fiducial draws of NDE and per-mediator NIE.

    Each draw takes fiducial mediator parameters, recomputes the weights and the WLS fit, and draws a
    fiducial replicate of the WLS coefficients from their covariance. Unless ``conditional``, each draw
    is averaged over Gauss-Hermite nodes of N(0, sigma_delta^2) for the random effect instead of using
    the empirical Bayes values.

    Args:
        state: Single-pass analysis on the observed data
        K: Number of draws requested
        N: Equivalence number
        seed: Base seed; draw k uses the stream (seed, k)
        conditional: Keep the draws conditional on the empirical Bayes random effects
        n_jobs: joblib parallelism

    Returns:
        FiducialDraws in draw order
    """
    if K < MIN_DRAWS:
        raise InsufficientDraws(f"K must be at least {MIN_DRAWS}, got {K}")
    fit = state.mediator_fit
    free = fit.free_mask
    dim = max(int(free.sum()), len(state.effects.theta))
    if N <= dim + 2:
        raise DegreesOfFreedomTooSmall(f"N={N} must exceed {dim + 2} for {dim} parameters")
    factor = _scaled_cholesky(fit.cov_star[np.ix_(free, free)], N)

    batches = Parallel(n_jobs=n_jobs)(
        delayed(_draw_chunk)(state, chunk, seed, N, factor, conditional) for chunk in index_chunks(K, n_jobs)
    )
    kept = [draw for batch in batches for draw in batch if draw is not None]
    if len(kept) < 0.9 * K:
        raise TooManyFailures(f"Only {len(kept)} of {K} fiducial draws succeeded")
    if len(kept) < K:
        logger.warning(f"Fiducial draws: {K - len(kept)} of {K} dropped; effective K={len(kept)}")

    return FiducialDraws(
        nde_draws=np.array([d[1] for d in kept]),
        nie_draws=np.vstack([d[2] for d in kept]),
        sigma_delta_draws=np.array([d[3] for d in kept]),
        conditional=conditional,
        requested=K,
        n_equiv=N,
        index=np.array([d[0] for d in kept], dtype=np.int64),
        mediator_names=state.data.mediator_names,
    )


# Summaries


def hdi(samples, alpha: float = 0.05) -> Tuple[float, float]:
    """
    Shortest interval holding ceil((1 - alpha) K) sorted samples; ties go to the leftmost window.
    """
    if not 0 < alpha < 1:
        raise UsageError(f"alpha must be in (0, 1), got {alpha}")
    x = np.sort(np.asarray(samples, dtype=float))
    K = len(x)
    if K == 0:
        raise InsufficientDraws("No samples")
    m = max(1, math.ceil((1.0 - alpha) * K - 1e-9))
    widths = x[m - 1 :] - x[: K - m + 1]
    i = int(np.argmin(widths))
    return float(x[i]), float(x[i + m - 1])


def fiducial_mode(samples) -> float:
    """Maximizer of a Silverman-bandwidth Gaussian KDE over a 512-point grid spanning the samples."""
    x = np.asarray(samples, dtype=float)
    lo, hi = float(np.min(x)), float(np.max(x))
    if lo == hi:
        return lo
    grid = np.linspace(lo, hi, 512)
    density = stats.gaussian_kde(x, bw_method="silverman")(grid)
    return float(grid[int(np.argmax(density))])


def generalized_p_value(samples, kappa: float = 0.0) -> float:
    """Two-sided tail probability of ``kappa`` under the empirical fiducial distribution, clamped to [2/K, 1]."""
    x = np.asarray(samples, dtype=float)
    K = len(x)
    F = (np.sum(x < kappa) + 0.5 * np.sum(x == kappa)) / K
    return float(np.clip(2.0 * min(F, 1.0 - F), 2.0 / K, 1.0))


def fiducial_interval(effect: str, samples, alpha: float = 0.05, kappa: float = 0.0) -> IntervalSummary:
    lower, upper = hdi(samples, alpha)
    estimate = fiducial_mode(samples)
    if not lower <= estimate <= upper:
        logger.warning(f"{effect}: fiducial mode {estimate:.6g} outside HDI [{lower:.6g}, {upper:.6g}]; clipped")
        estimate = float(np.clip(estimate, lower, upper))
    return IntervalSummary(
        effect=effect,
        estimate=estimate,
        lower=lower,
        upper=upper,
        alpha=alpha,
        method=IntervalMethod.FIDUCIAL_HDI,
        gen_p_value=generalized_p_value(samples, kappa),
    )


def summarize_draws(draws: FiducialDraws, alpha: float = 0.05, kappa: float = 0.0) -> Dict[str, IntervalSummary]:
    """
    FiducialHDI summaries keyed by effect: "NDE" then one entry per mediator.
    """
    if draws.k < MIN_DRAWS:
        raise InsufficientDraws(f"At least {MIN_DRAWS} draws are needed for intervals, got {draws.k}")
    names = draws.mediator_names or tuple(f"taxon_{j + 1}" for j in range(draws.nie_draws.shape[1]))
    summaries = {"NDE": fiducial_interval("NDE", draws.nde_draws, alpha, kappa)}
    for j, name in enumerate(names):
        summaries[name] = fiducial_interval(name, draws.nie_draws[:, j], alpha, kappa)
    return summaries
