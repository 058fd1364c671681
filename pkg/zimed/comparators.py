"""
Comparator intervals for zimed.
Delta-method Wald intervals and nonparametric bootstrap percentile intervals for NDE and NIE.
"""

import logging
from dataclasses import dataclass, replace
from typing import Callable, Dict, List, Optional

import numpy as np
from joblib import Parallel, delayed
from scipy import stats

from zimed.data import Dataset, ThetaVector
from zimed.errors import InsufficientReplicates, SingularGradient, TooManyFailures, UsageError, ZimedError
from zimed.estimation import FitOptions
from zimed.fiducial import IntervalMethod, IntervalSummary, index_chunks, replicate_rng
from zimed.pipeline import AnalysisState, EffectOptions, estimate_effects

logger = logging.getLogger(__name__)

MIN_NPB_REPS = 200

Resampler = Callable[[np.random.Generator, int], np.ndarray]


@dataclass(frozen=True)
class ComparatorConfig:
    method: IntervalMethod = IntervalMethod.NPB
    npb_reps: int = 1000
    alpha: float = 0.05

    def __post_init__(self):
        object.__setattr__(self, "method", IntervalMethod(self.method))
        if self.method == IntervalMethod.FIDUCIAL_HDI:
            raise UsageError("Comparator method must be Delta or NPB")
        if self.method == IntervalMethod.NPB and self.npb_reps < MIN_NPB_REPS:
            raise InsufficientReplicates(f"npb_reps must be at least {MIN_NPB_REPS}, got {self.npb_reps}")
        if not 0 < self.alpha < 1:
            raise UsageError(f"alpha must be in (0, 1), got {self.alpha}")


def _effect_names(data: Dataset) -> List[str]:
    return ["NDE", *data.mediator_names]


def effects_jacobian(state: AnalysisState, step: float = 1e-5) -> np.ndarray:
    """
    Central-difference Jacobian of (NDE, NIE_1..NIE_p) with respect to the free mediator parameters,
    taken through the full weights and WLS map.
    """
    theta_hat = state.mediator_fit.theta_hat
    v = theta_hat.pack()
    idx = np.flatnonzero(state.mediator_fit.free_mask)
    J = np.zeros((state.data.p + 1, len(idx)))
    for col, k in enumerate(idx):
        if k == len(v) - 1:
            # sigma_delta does not enter the weights, which use the empirical Bayes effects
            continue
        h = step * max(1.0, abs(v[k]))
        up, down = v.copy(), v.copy()
        up[k] += h
        down[k] -= h
        e_up = state.effects_at(ThetaVector.unpack(up, theta_hat.p, theta_hat.r2)).effect_vector()
        e_down = state.effects_at(ThetaVector.unpack(down, theta_hat.p, theta_hat.r2)).effect_vector()
        J[:, col] = (e_up - e_down) / (2 * h)
    if not np.all(np.isfinite(J)):
        raise SingularGradient("Finite-difference gradient of the effects is not finite")
    return J


def delta_ci(state: AnalysisState, alpha: float = 0.05) -> Dict[str, IntervalSummary]:
    """
    Wald intervals with variance J S* J' + V_wls, J the Jacobian of the effects in the mediator parameters.

    Args:
        state: Single-pass analysis on the observed data
        alpha: 1 - confidence level

    Returns:
        Delta IntervalSummary per effect, keyed "NDE" then mediator names
    """
    fit = state.mediator_fit
    free = fit.free_mask
    J = effects_jacobian(state)
    p = state.data.p
    # Effect rows of the WLS covariance: theta_0 and theta_1..theta_p
    v_wls = state.effects.cov[1 : p + 2, 1 : p + 2]
    var = J @ fit.cov_star[np.ix_(free, free)] @ J.T + v_wls
    se = np.sqrt(np.clip(np.diag(var), 0.0, None))
    if not np.all(np.isfinite(se)):
        raise SingularGradient("Delta-method variance is not finite")
    z = stats.norm.ppf(1 - alpha / 2)
    estimates = state.effects.effect_vector()
    return {
        name: IntervalSummary(
            effect=name,
            estimate=float(est),
            lower=float(est - z * s),
            upper=float(est + z * s),
            alpha=alpha,
            method=IntervalMethod.DELTA,
        )
        for name, est, s in zip(_effect_names(state.data), estimates, se)
    }


def _default_resample(rng: np.random.Generator, n: int) -> np.ndarray:
    return rng.integers(0, n, size=n)


def _npb_chunk(data, family, indices, seed, resample, fit_options, options):
    out = []
    for b in indices:
        rows = resample(replicate_rng(seed, b), data.n)
        try:
            state = estimate_effects(data.take(rows), family, fit_options, options)
        except ZimedError as e:
            logger.warning(f"Bootstrap resample {b} dropped: {e}")
            out.append(None)
            continue
        out.append(state.effects.effect_vector())
    return out


def npb_ci(
    data: Dataset,
    family="zinb",
    alpha: float = 0.05,
    reps: int = 1000,
    seed: int = 0,
    n_jobs: int = 1,
    resample: Optional[Resampler] = None,
    fit_options: Optional[FitOptions] = None,
    options: Optional[EffectOptions] = None,
    state: Optional[AnalysisState] = None,
) -> Dict[str, IntervalSummary]:
    """
    Percentile intervals from subject resampling with the full pipeline rerun per resample.

    Args:
        data: Validated dataset
        family: Mediator count family
        alpha: 1 - confidence level
        reps: Number of resamples
        seed: Base seed; resample b uses the stream (seed, b)
        n_jobs: joblib parallelism
        resample: Row sampler (rng, n) -> indices; defaults to sampling with replacement
        state: Original-sample analysis, reused for the point estimates

    Returns:
        NPB IntervalSummary per effect
    """
    if reps < MIN_NPB_REPS:
        raise InsufficientReplicates(f"NPB needs at least {MIN_NPB_REPS} resamples, got {reps}")
    state = state or estimate_effects(data, family, fit_options, options)
    resample = resample or _default_resample
    refit_options = replace(fit_options or FitOptions(), covariance=False)

    batches = Parallel(n_jobs=n_jobs)(
        delayed(_npb_chunk)(data, state.family, chunk, seed, resample, refit_options, options)
        for chunk in index_chunks(reps, n_jobs)
    )
    kept = [est for batch in batches for est in batch if est is not None]
    dropped = reps - len(kept)
    if dropped > 0.1 * reps:
        raise TooManyFailures(f"{dropped} of {reps} bootstrap resamples failed")
    if dropped:
        logger.warning(f"NPB: {dropped} of {reps} resamples dropped; effective {len(kept)}")

    estimates = np.vstack(kept)
    lower = np.quantile(estimates, alpha / 2, axis=0, method="inverted_cdf")
    upper = np.quantile(estimates, 1 - alpha / 2, axis=0, method="inverted_cdf")
    point = state.effects.effect_vector()
    return {
        name: IntervalSummary(
            effect=name,
            estimate=float(est),
            lower=float(lo),
            upper=float(hi),
            alpha=alpha,
            method=IntervalMethod.NPB,
        )
        for name, est, lo, hi in zip(_effect_names(data), point, lower, upper)
    }
