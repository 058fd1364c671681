"""
Report module for zimed.
Assembles the mediation report table and the descriptive summary statistics of a dataset.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Mapping, Optional, Tuple

import numpy as np
import pandas as pd
from scipy import stats

from zimed.data import Dataset
from zimed.fiducial import IntervalSummary
from zimed.pipeline import AnalysisState

logger = logging.getLogger(__name__)

REPORT_COLUMNS = (
    "taxon",
    "estimate",
    "gci_lower",
    "gci_upper",
    "gci_width",
    "gen_p_value",
    "point_estimate",
    "delta_lower",
    "delta_upper",
    "delta_width",
    "npb_lower",
    "npb_upper",
    "npb_width",
)


def _finite_or_none(value) -> Optional[float]:
    if value is None:
        return None
    value = float(value)
    return value if np.isfinite(value) else None


@dataclass(frozen=True)
class MediationReport:
    """
    One row per mediator plus an NDE row. Missing comparators are None, never zero.
    """

    rows: Tuple[Dict[str, Any], ...]
    metadata: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {"metadata": dict(self.metadata), "effects": [dict(row) for row in self.rows]}

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(list(self.rows), columns=list(REPORT_COLUMNS))


def build_report(
    state: AnalysisState,
    fiducial: Optional[Mapping[str, IntervalSummary]] = None,
    delta: Optional[Mapping[str, IntervalSummary]] = None,
    npb: Optional[Mapping[str, IntervalSummary]] = None,
    metadata: Optional[Dict[str, Any]] = None,
) -> MediationReport:
    """
    Merge the interval summaries of each method into report rows.

    The estimate column is the fiducial mode when fiducial intervals were computed, otherwise the
    single-pass point estimate.
    """
    point = dict(zip(["NDE", *state.data.mediator_names], state.effects.effect_vector()))
    rows: List[Dict[str, Any]] = []
    for effect in [*state.data.mediator_names, "NDE"]:
        gci = fiducial.get(effect) if fiducial else None
        d = delta.get(effect) if delta else None
        b = npb.get(effect) if npb else None
        rows.append({
            "taxon": effect,
            "estimate": _finite_or_none(gci.estimate if gci else point[effect]),
            "gci_lower": _finite_or_none(gci.lower) if gci else None,
            "gci_upper": _finite_or_none(gci.upper) if gci else None,
            "gci_width": _finite_or_none(gci.width) if gci else None,
            "gen_p_value": _finite_or_none(gci.gen_p_value) if gci else None,
            "point_estimate": _finite_or_none(point[effect]),
            "delta_lower": _finite_or_none(d.lower) if d else None,
            "delta_upper": _finite_or_none(d.upper) if d else None,
            "delta_width": _finite_or_none(d.width) if d else None,
            "npb_lower": _finite_or_none(b.lower) if b else None,
            "npb_upper": _finite_or_none(b.upper) if b else None,
            "npb_width": _finite_or_none(b.width) if b else None,
        })
    return MediationReport(rows=tuple(rows), metadata=dict(metadata or {}))


def emit_summary_stats(data: Dataset) -> Tuple[pd.DataFrame, pd.DataFrame]:
    """
    Descriptive statistics of the mediator counts.

    Returns:
        (per-taxon table, per-subject depth table)
    """
    taxa = []
    for j, name in enumerate(data.mediator_names):
        x = data.mediators[:, j].astype(float)
        q = np.quantile(x, [0.0, 0.25, 0.5, 0.75, 1.0])
        degenerate = bool(np.all(x == x[0]))
        skewness = 0.0 if degenerate else float(stats.skew(x))
        taxa.append({
            "taxon": name,
            "zero_prop": float(np.count_nonzero(x == 0) / data.n),
            "mean": float(x.mean()),
            "min": q[0],
            "q25": q[1],
            "median": q[2],
            "q75": q[3],
            "max": q[4],
            "skewness": skewness,
            "degenerate": degenerate,
        })
    depth = pd.DataFrame({"subject_id": list(data.subject_id), "depth": data.depth(), "offset": data.offset})
    logger.info(f"Summary statistics for {data.p} taxa and {data.n} subjects")
    return pd.DataFrame(taxa), depth
