"""
Pipeline module for zimed.
Runs the single-pass analysis: exposure fit, mediator fit, expansion, weights and WLS.
"""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from zimed.counts import Family
from zimed.data import Dataset, ExposureFit, ThetaVector
from zimed.effects import (
    P_MAX,
    EffectEstimates,
    ExpandedData,
    WeightTable,
    compute_weights,
    expand_counterfactuals,
    fit_outcome_wls,
)
from zimed.estimation import FitOptions, MediatorFit, fit_exposure_model, fit_mediator_model

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class EffectOptions:
    """Options of the weights and outcome model stages."""

    truncate: Optional[float] = None
    include_c3: bool = False
    p_max: int = P_MAX


@dataclass(frozen=True, eq=False)
class AnalysisState:
    """Everything the single-pass pipeline produced for one dataset."""

    data: Dataset
    family: Family
    exposure_fit: ExposureFit
    mediator_fit: MediatorFit
    expanded: ExpandedData
    weights: WeightTable
    effects: EffectEstimates
    options: EffectOptions

    def effects_at(self, theta: ThetaVector, delta=None) -> EffectEstimates:
        """Re-run weights and WLS at other mediator parameters (and optionally other random effects)."""
        delta = self.mediator_fit.delta_hat if delta is None else delta
        weights = compute_weights(
            self.expanded, theta, self.family, self.exposure_fit, delta, self.data, self.options.truncate
        )
        return fit_outcome_wls(self.expanded, weights, self.data.c3 if self.options.include_c3 else None)


def estimate_effects(
    data: Dataset,
    family="zinb",
    fit_options: Optional[FitOptions] = None,
    options: Optional[EffectOptions] = None,
    mediator_fit: Optional[MediatorFit] = None,
    exposure_fit: Optional[ExposureFit] = None,
) -> AnalysisState:
    """
    Estimate NDE and per-mediator NIE with weights evaluated at the fitted parameters.

    Args:
        data: Validated dataset
        family: Mediator count family
        fit_options: Mediator model fitting options
        options: Weight and outcome model options
        mediator_fit: Reuse an existing mediator fit
        exposure_fit: Reuse an existing exposure fit

    Returns:
        AnalysisState holding every intermediate result
    """
    family = Family.parse(family)
    options = options or EffectOptions()
    expanded = expand_counterfactuals(data, options.p_max)
    exposure_fit = exposure_fit or fit_exposure_model(data)
    mediator_fit = mediator_fit or fit_mediator_model(data, family, fit_options)

    weights = compute_weights(
        expanded, mediator_fit.theta_hat, family, exposure_fit, mediator_fit.delta_hat, data, options.truncate
    )
    effects = fit_outcome_wls(expanded, weights, data.c3 if options.include_c3 else None)
    logger.debug(f"Point estimates: NDE={effects.nde:.6f}, NIE={np.round(effects.nie, 6).tolist()}")
    return AnalysisState(
        data=data,
        family=family,
        exposure_fit=exposure_fit,
        mediator_fit=mediator_fit,
        expanded=expanded,
        weights=weights,
        effects=effects,
        options=options,
    )
