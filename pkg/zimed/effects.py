"""
Natural effects module for zimed.
Builds the counterfactual-expanded dataset, computes mediation weights and fits the marginal
outcome model by weighted least squares.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import linalg

from zimed import counts
from zimed.counts import Family
from zimed.data import Dataset, ExposureFit, ThetaVector
from zimed.errors import NonFiniteWeight, RankDeficient, TooManyMediators, UsageError, ZeroDensity

logger = logging.getLogger(__name__)

P_MAX = 15


def arrangement_bits(p: int) -> np.ndarray:
    """Pseudo-exposure vectors in binary-counting order, mediator 1 as the least significant bit."""
    return ((np.arange(2**p)[:, None] >> np.arange(p)[None, :]) & 1).astype(np.int8)


@dataclass(frozen=True, eq=False)
class ExpandedData:
    """
    The counterfactual-expanded table: 2^p rows per subject, subject-major and arrangement-minor.
    """

    subject: np.ndarray
    arrangement: np.ndarray
    exposure0: np.ndarray
    pseudo: np.ndarray
    outcome: np.ndarray
    n: int
    p: int

    @property
    def rows(self) -> int:
        return len(self.subject)

    @property
    def n_arrangements(self) -> int:
        return 2**self.p

    def design(self, c3: Optional[np.ndarray] = None) -> np.ndarray:
        """Rows (1, A_i0, A_il1..A_ilp[, C3_i])."""
        blocks = [np.ones((self.rows, 1)), self.exposure0[:, None].astype(float), self.pseudo.astype(float)]
        if c3 is not None and c3.shape[1]:
            blocks.append(c3[self.subject])
        return np.hstack(blocks)


def expand_counterfactuals(data: Dataset, p_max: int = P_MAX) -> ExpandedData:
    """
    Replicate each subject once per arrangement of pseudo-exposures over the p mediators.

    Args:
        data: Validated dataset
        p_max: Largest number of mediators accepted

    Returns:
        ExpandedData with n * 2^p rows
    """
    if data.p > p_max:
        raise TooManyMediators(f"{data.p} mediators exceed the limit of {p_max} ({2**data.p} arrangements)")
    L = 2**data.p
    bits = arrangement_bits(data.p)
    expanded = ExpandedData(
        subject=np.repeat(np.arange(data.n), L),
        arrangement=np.tile(np.arange(L), data.n),
        exposure0=np.repeat(data.exposure, L),
        pseudo=np.tile(bits, (data.n, 1)),
        outcome=np.repeat(data.outcome, L),
        n=data.n,
        p=data.p,
    )
    logger.debug(f"Expanded {data.n} subjects to {expanded.rows} rows")
    return expanded


@dataclass(frozen=True, eq=False)
class WeightTable:
    """
    Mediation weights aligned to ExpandedData rows.

    ``log_exposure_factor`` is per subject; ``log_ratio`` holds, per subject and taxon, the log ratio of
    the mediator mass at pseudo-exposure 0 and 1 over the mass at the observed exposure.
    """

    weight: np.ndarray
    log_exposure_factor: np.ndarray
    log_ratio: np.ndarray
    n_clipped: int = 0
    bounds: Optional[Tuple[float, float]] = None

    @property
    def exposure_factor(self) -> np.ndarray:
        return np.exp(self.log_exposure_factor)

    def ratio_factors(self, expanded: ExpandedData) -> np.ndarray:
        """Per-row, per-taxon ratio factors, shape (rows, p)."""
        taxa = np.arange(expanded.p)[None, :]
        return np.exp(self.log_ratio[expanded.subject[:, None], taxa, expanded.pseudo])

    def to_frame(self, expanded: ExpandedData, mediator_names: Optional[Sequence[str]] = None) -> pd.DataFrame:
        names = list(mediator_names or [f"taxon_{j + 1}" for j in range(expanded.p)])
        frame = pd.DataFrame({"subject": expanded.subject, "arrangement": expanded.arrangement})
        for j, name in enumerate(names):
            frame[f"a_{name}"] = expanded.pseudo[:, j]
        frame["weight"] = self.weight
        frame["exposure_factor"] = self.exposure_factor[expanded.subject]
        ratios = self.ratio_factors(expanded)
        for j, name in enumerate(names):
            frame[f"ratio_{name}"] = ratios[:, j]
        return frame


def compute_weights(
    expanded: ExpandedData,
    theta: ThetaVector,
    family,
    exposure: ExposureFit,
    delta_hat,
    data: Dataset,
    truncate: Optional[float] = None,
) -> WeightTable:
    """
    W_il = P(A=A_i0) / P(A=A_i0 | C1_i) * prod_j Pr(M_ij | A_ilj, C2_i, delta_i) / Pr(M_ij | A_i0, C2_i, delta_i).

    Args:
        expanded: Expanded table for ``data``
        theta: Mediator parameters (a fit or a fiducial draw)
        family: Count family of the mediator model
        exposure: Fitted exposure model
        delta_hat: Per-subject random effects (scalar broadcasts)
        data: The dataset the table was expanded from
        truncate: Optional percentile q; weights are capped at the q-th and (100-q)-th percentiles

    Returns:
        WeightTable aligned to the expanded rows
    """
    family = Family.parse(family)
    if expanded.n != data.n or expanded.p != data.p or theta.p != data.p:
        raise UsageError(f"Dimension mismatch: expanded ({expanded.n}, {expanded.p}), data ({data.n}, {data.p}), "
                         f"theta p={theta.p}")
    delta = np.broadcast_to(np.asarray(delta_hat, dtype=float), (data.n,))
    m = data.mediators.astype(float)

    log_mass = []
    for level in (0, 1):
        eta = theta.linear_predictor(data, exposure=np.full(data.n, level), delta=delta)
        logf = counts.log_pmf(m, eta, theta.beta_z0, theta.beta_l0, family)
        if not np.all(np.isfinite(logf)):
            i, j = np.argwhere(~np.isfinite(logf))[0]
            raise ZeroDensity(
                f"Mediator mass underflows for subject {data.subject_id[i]}, taxon {data.mediator_names[j]} "
                f"(count {data.mediators[i, j]}, exposure level {level})",
                subject=int(i),
                taxon=int(j),
            )
        log_mass.append(logf)

    observed = np.where(data.exposure[:, None] == 1, log_mass[1], log_mass[0])
    log_ratio = np.stack([log_mass[0] - observed, log_mass[1] - observed], axis=2)
    log_exposure_factor = exposure.log_marginal_observed(data.exposure) - exposure.log_prob_observed(data.exposure)

    bits = arrangement_bits(data.p).astype(float)
    log_w = log_exposure_factor[:, None] + log_ratio[:, :, 0] @ (1.0 - bits).T + log_ratio[:, :, 1] @ bits.T
    weight = np.exp(log_w).ravel()
    if not np.all(np.isfinite(weight)) or np.any(weight <= 0):
        row = int(np.flatnonzero(~np.isfinite(weight) | (weight <= 0))[0])
        raise NonFiniteWeight(
            f"Weight for subject {data.subject_id[row // expanded.n_arrangements]}, arrangement "
            f"{row % expanded.n_arrangements} is {weight[row]}"
        )

    n_clipped = 0
    bounds = None
    if truncate:
        if not 0 < truncate < 50:
            raise UsageError(f"Truncation percentile must be in (0, 50), got {truncate}")
        lower, upper = np.percentile(weight, [truncate, 100 - truncate])
        n_clipped = int(np.sum((weight < lower) | (weight > upper)))
        weight = np.clip(weight, lower, upper)
        bounds = (float(lower), float(upper))
        logger.info(f"Weight truncation at [{lower:.4g}, {upper:.4g}] clipped {n_clipped} rows")

    return WeightTable(
        weight=weight,
        log_exposure_factor=log_exposure_factor,
        log_ratio=log_ratio,
        n_clipped=n_clipped,
        bounds=bounds,
    )


@dataclass(frozen=True, eq=False)
class EffectEstimates:
    """
    Marginal outcome model fit.

    ``theta`` is (intercept, theta_0, theta_1..theta_p[, C3 terms]); ``cov`` its WLS covariance.
    """

    theta: np.ndarray
    cov: np.ndarray
    nde: float
    nie: np.ndarray
    conditional_on_delta: bool = True

    @property
    def p(self) -> int:
        return len(self.nie)

    def effect_vector(self) -> np.ndarray:
        """(nde, nie_1..nie_p)."""
        return np.concatenate([[self.nde], self.nie])


def effects_from_theta(theta, a: int = 1, a_star: int = 0) -> Tuple[float, np.ndarray]:
    """
    Read NDE and per-mediator NIE off the marginal model coefficients.

    Args:
        theta: (intercept, theta_0, theta_1..theta_p) and optionally trailing covariate terms
        a: Exposed level
        a_star: Reference level

    Returns:
        (nde, nie)
    """
    theta = np.asarray(theta, dtype=float)
    contrast = a - a_star
    return float(theta[1] * contrast), theta[2:] * contrast


def _solve_normal_equations(xtwx: np.ndarray, xtwy: np.ndarray) -> Tuple[np.ndarray, tuple]:
    k = xtwx.shape[0]
    if np.linalg.matrix_rank(xtwx) < k:
        raise RankDeficient(f"Weighted design is rank deficient (rank {np.linalg.matrix_rank(xtwx)} < {k})")
    try:
        factor = linalg.cho_factor(xtwx, lower=True)
    except linalg.LinAlgError as e:
        raise RankDeficient(f"Weighted normal equations are not positive definite: {e}") from e
    return linalg.cho_solve(factor, xtwy), factor


def fit_outcome_wls(
    expanded: ExpandedData,
    weights: WeightTable,
    c3: Optional[np.ndarray] = None,
    a: int = 1,
    a_star: int = 0,
) -> EffectEstimates:
    """
    Weighted least squares fit of Y on (1, A_i0, A_il1..A_ilp) over the expanded table.

    Without covariates the normal equations are accumulated per (A_i0, arrangement) cell, since those
    rows share one design vector.
    """
    w = weights.weight
    y = expanded.outcome
    L = expanded.n_arrangements
    if c3 is None or not c3.shape[1]:
        # Sufficient statistics per design cell, cell = A_i0 * L + l
        cell = expanded.exposure0 * L + expanded.arrangement
        sw = np.bincount(cell, weights=w, minlength=2 * L)
        swy = np.bincount(cell, weights=w * y, minlength=2 * L)
        bits = arrangement_bits(expanded.p).astype(float)
        X_cell = np.hstack([
            np.ones((2 * L, 1)),
            np.repeat([0.0, 1.0], L)[:, None],
            np.tile(bits, (2, 1)),
        ])
        xtwx = (X_cell * sw[:, None]).T @ X_cell
        xtwy = X_cell.T @ swy
        theta, factor = _solve_normal_equations(xtwx, xtwy)
        fitted = (X_cell @ theta)[cell]
    else:
        X = expanded.design(c3)
        xtwx = (X * w[:, None]).T @ X
        xtwy = X.T @ (w * y)
        theta, factor = _solve_normal_equations(xtwx, xtwy)
        fitted = X @ theta

    k = len(theta)
    resid = y - fitted
    sigma2 = float(np.sum(w * resid**2)) / max(expanded.n - k, 1)
    cov = sigma2 * linalg.cho_solve(factor, np.eye(k))
    cov = 0.5 * (cov + cov.T)
    nde, nie = effects_from_theta(theta[: expanded.p + 2], a, a_star)
    return EffectEstimates(theta=theta, cov=cov, nde=nde, nie=nie)


def total_effect(data: Dataset, exposure: ExposureFit) -> float:
    """Coefficient of A in the regression of Y on (1, A) weighted by the stabilized exposure weights only."""
    w = np.exp(exposure.log_marginal_observed(data.exposure) - exposure.log_prob_observed(data.exposure))
    X = np.column_stack([np.ones(data.n), data.exposure.astype(float)])
    coef, _ = _solve_normal_equations((X * w[:, None]).T @ X, X.T @ (w * data.outcome))
    return float(coef[1])
