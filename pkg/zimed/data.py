"""
Data model for zimed.
Validated analysis datasets, the packed mediator parameter vector and the exposure fit record.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from zimed.counts import Family
from zimed.errors import (
    ConstantExposure,
    DataError,
    InvalidExposure,
    LengthMismatch,
    MissingValue,
    NonIntegerCount,
    NonPositiveOffset,
)

logger = logging.getLogger(__name__)


def _frozen(values, dtype) -> np.ndarray:
    arr = np.array(values, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


def _integral(values) -> bool:
    """True when every value is a finite whole number, so an int64 cast loses nothing."""
    arr = np.asarray(values)
    if arr.dtype.kind in "iub":
        return True
    arr = arr.astype(float)
    return bool(np.all(np.isfinite(arr) & (arr == np.round(arr))))


@dataclass(frozen=True)
class Schema:
    """
    Column-role map for an input table.

    Mediator columns are either listed explicitly or selected by prefix, in table order.
    When ``offset`` is None the offset is the subject's total depth: mediator row sums plus
    the ``unassigned`` column when one is given.
    """

    exposure: str = "exposure"
    outcome: str = "outcome"
    id: Optional[str] = "subject_id"
    c1: Tuple[str, ...] = ()
    c2: Tuple[str, ...] = ()
    c3: Tuple[str, ...] = ()
    mediators: Tuple[str, ...] = ()
    mediator_prefix: Optional[str] = None
    offset: Optional[str] = "offset"
    unassigned: Optional[str] = None

    @classmethod
    def from_dict(cls, values: Mapping[str, Any]) -> "Schema":
        """Build a schema from the ``[data]`` config section, ignoring unrelated keys."""
        kwargs: Dict[str, Any] = {}
        for key in ("exposure", "outcome", "id", "offset", "unassigned", "mediator_prefix"):
            if key in values:
                value = values[key]
                kwargs[key] = value if value not in ("", None) else None
        for key in ("c1", "c2", "c3", "mediators"):
            if key in values and values[key] is not None:
                value = values[key]
                if isinstance(value, str):
                    value = [part.strip() for part in value.split(",") if part.strip()]
                kwargs[key] = tuple(value)
        return cls(**kwargs)

    def resolve_mediators(self, columns: Sequence[str]) -> List[str]:
        if self.mediators:
            return list(self.mediators)
        if self.mediator_prefix:
            return [c for c in columns if str(c).startswith(self.mediator_prefix)]
        return []


@dataclass(frozen=True)
class DatasetSummary:
    n: int
    p: int
    zero_proportion: Dict[str, float]
    offset_min: float
    offset_max: float


@dataclass(frozen=True, eq=False)
class Dataset:
    """
    A validated analysis dataset. Immutable: all arrays are read-only.

    Exposure is encoded 0 (reference level a*) / 1 (exposed level a).
    """

    subject_id: Tuple[str, ...]
    exposure: np.ndarray
    c1: np.ndarray
    c2: np.ndarray
    c3: np.ndarray
    mediators: np.ndarray
    offset: np.ndarray
    outcome: np.ndarray
    mediator_names: Tuple[str, ...]
    c1_names: Tuple[str, ...] = ()
    c2_names: Tuple[str, ...] = ()
    c3_names: Tuple[str, ...] = ()
    unassigned: Optional[np.ndarray] = None

    def __post_init__(self):
        n = len(self.subject_id)
        if not _integral(self.mediators):
            raise NonIntegerCount("Mediator counts must be whole numbers")
        if not _integral(self.exposure):
            raise InvalidExposure("Exposure must be coded 0/1")
        object.__setattr__(self, "exposure", _frozen(self.exposure, np.int64))
        object.__setattr__(self, "mediators", _frozen(np.reshape(self.mediators, (n, -1)), np.int64))
        object.__setattr__(self, "offset", _frozen(self.offset, float))
        object.__setattr__(self, "outcome", _frozen(self.outcome, float))
        for name in ("c1", "c2", "c3"):
            block = np.asarray(getattr(self, name), dtype=float)
            object.__setattr__(self, name, _frozen(block.reshape(n, -1) if block.size else np.zeros((n, 0)), float))
            names = getattr(self, f"{name}_names")
            width = getattr(self, name).shape[1]
            if len(names) != width:
                object.__setattr__(self, f"{name}_names", tuple(f"{name}_{k + 1}" for k in range(width)))
        if self.unassigned is not None:
            object.__setattr__(self, "unassigned", _frozen(self.unassigned, float))
        if len(self.mediator_names) != self.mediators.shape[1]:
            object.__setattr__(
                self, "mediator_names", tuple(f"taxon_{j + 1}" for j in range(self.mediators.shape[1]))
            )

    @property
    def n(self) -> int:
        return len(self.subject_id)

    @property
    def p(self) -> int:
        return self.mediators.shape[1]

    @property
    def r2(self) -> int:
        return self.c2.shape[1]

    @property
    def log_offset(self) -> np.ndarray:
        return np.log(self.offset)

    def zero_proportion(self) -> np.ndarray:
        return (self.mediators == 0).sum(axis=0) / self.n

    def depth(self) -> np.ndarray:
        """Per-subject total sequence depth."""
        depth = self.mediators.sum(axis=1).astype(float)
        if self.unassigned is not None:
            depth = depth + self.unassigned
        return depth

    def describe(self) -> DatasetSummary:
        return DatasetSummary(
            n=self.n,
            p=self.p,
            zero_proportion={name: float(z) for name, z in zip(self.mediator_names, self.zero_proportion())},
            offset_min=float(self.offset.min()),
            offset_max=float(self.offset.max()),
        )

    def take(self, indices) -> "Dataset":
        """Row subset (with repetition) as a new dataset, used for subject resampling."""
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(
            subject_id=tuple(self.subject_id[i] for i in idx),
            exposure=self.exposure[idx],
            c1=self.c1[idx],
            c2=self.c2[idx],
            c3=self.c3[idx],
            mediators=self.mediators[idx],
            offset=self.offset[idx],
            outcome=self.outcome[idx],
            mediator_names=self.mediator_names,
            c1_names=self.c1_names,
            c2_names=self.c2_names,
            c3_names=self.c3_names,
            unassigned=None if self.unassigned is None else self.unassigned[idx],
        )

    def with_mediators(self, mediators: np.ndarray, outcome: Optional[np.ndarray] = None) -> "Dataset":
        """Copy with replaced mediator counts (and optionally outcome); used by the parametric bootstrap."""
        return Dataset(
            subject_id=self.subject_id,
            exposure=self.exposure,
            c1=self.c1,
            c2=self.c2,
            c3=self.c3,
            mediators=mediators,
            offset=self.offset,
            outcome=self.outcome if outcome is None else outcome,
            mediator_names=self.mediator_names,
            c1_names=self.c1_names,
            c2_names=self.c2_names,
            c3_names=self.c3_names,
            unassigned=self.unassigned,
        )

    def schema(self) -> Schema:
        """Schema matching the layout of ``to_frame``."""
        return Schema(
            exposure="exposure",
            outcome="outcome",
            id="subject_id",
            c1=self.c1_names,
            c2=self.c2_names,
            c3=self.c3_names,
            mediators=self.mediator_names,
            offset="offset",
            unassigned="unassigned" if self.unassigned is not None else None,
        )

    def to_frame(self) -> pd.DataFrame:
        columns: Dict[str, Any] = {"subject_id": list(self.subject_id), "exposure": self.exposure}
        for block, names in ((self.c1, self.c1_names), (self.c2, self.c2_names), (self.c3, self.c3_names)):
            for k, name in enumerate(names):
                columns[name] = block[:, k]
        for j, name in enumerate(self.mediator_names):
            columns[name] = self.mediators[:, j]
        if self.unassigned is not None:
            columns["unassigned"] = self.unassigned
        columns["offset"] = self.offset
        columns["outcome"] = self.outcome
        return pd.DataFrame(columns)


def _check_dataset(data: Dataset) -> None:
    n = data.n
    for name in ("exposure", "offset", "outcome"):
        if len(getattr(data, name)) != n:
            raise LengthMismatch(f"{name} has {len(getattr(data, name))} rows, expected {n}")
    for name in ("c1", "c2", "c3", "mediators"):
        if getattr(data, name).shape[0] != n:
            raise LengthMismatch(f"{name} has {getattr(data, name).shape[0]} rows, expected {n}")
    if np.any(data.mediators < 0):
        i, j = np.argwhere(data.mediators < 0)[0]
        raise NonIntegerCount(f"Mediator {data.mediator_names[j]} has a negative count at row {i}")
    if not np.all(np.isin(data.exposure, (0, 1))):
        raise InvalidExposure("Exposure must be coded 0/1")
    if np.unique(data.exposure).size < 2:
        raise ConstantExposure(f"Exposure has a single level ({int(data.exposure[0])})")
    if not np.all(np.isfinite(data.offset)) or np.any(data.offset <= 0):
        raise NonPositiveOffset(f"Offsets must be positive; found minimum {np.nanmin(data.offset)}")
    for name in ("c1", "c2", "c3", "outcome"):
        if not np.all(np.isfinite(getattr(data, name))):
            raise MissingValue(f"{name} contains missing or non-finite values")


def _column(table: pd.DataFrame, name: str) -> pd.Series:
    if name not in table.columns:
        raise DataError(f"Column not found in input table: {name}")
    return table[name]


def _numeric_block(table: pd.DataFrame, names: Sequence[str]) -> np.ndarray:
    if not names:
        return np.zeros((len(table), 0))
    block = table[[*names]].apply(pd.to_numeric, errors="coerce")
    if block.isna().any().any():
        bad = block.columns[block.isna().any()].tolist()
        raise MissingValue(f"Non-numeric or missing covariate values in: {', '.join(map(str, bad))}")
    return block.to_numpy(dtype=float)


def validate_dataset(raw: Union[pd.DataFrame, Mapping, Dataset], schema: Optional[Schema] = None) -> Dataset:
    """
    Validate a raw table against a schema and build a Dataset.

    A Dataset passed in is re-checked and returned unchanged.

    Args:
        raw: Parsed table (DataFrame or column mapping) or an existing Dataset
        schema: Column-role map; required for tables

    Returns:
        A Dataset satisfying all invariants
    """
    if isinstance(raw, Dataset):
        _check_dataset(raw)
        return raw
    if schema is None:
        raise DataError("A schema is required to validate a raw table")

    table = raw if isinstance(raw, pd.DataFrame) else pd.DataFrame(dict(raw))
    mediator_cols = schema.resolve_mediators([str(c) for c in table.columns])
    if not mediator_cols:
        raise DataError("Schema selects no mediator columns")

    used = [schema.exposure, schema.outcome, *schema.c1, *schema.c2, *schema.c3, *mediator_cols]
    for optional in (schema.id, schema.offset, schema.unassigned):
        if optional:
            used.append(optional)
    for name in used:
        _column(table, name)
    missing = table[used].isna().sum()
    if missing.any():
        bad = ", ".join(f"{col} ({int(k)})" for col, k in missing[missing > 0].items())
        raise MissingValue(f"Missing values in: {bad}")

    # Mediator counts must be nonnegative integers
    counts = table[mediator_cols].apply(pd.to_numeric, errors="coerce").to_numpy(dtype=float)
    bad = ~np.isfinite(counts) | (counts < 0) | (counts != np.round(counts))
    if bad.any():
        i, j = np.argwhere(bad)[0]
        raise NonIntegerCount(
            f"Mediator {mediator_cols[j]} at row {i} is not a nonnegative integer: {table[mediator_cols[j]].iloc[i]!r}"
        )
    counts = counts.astype(np.int64)

    exposure_raw = table[schema.exposure]
    if exposure_raw.dtype == bool:
        exposure = exposure_raw.to_numpy(dtype=np.int64)
    else:
        exposure_num = pd.to_numeric(exposure_raw, errors="coerce").to_numpy(dtype=float)
        if np.isnan(exposure_num).any() or not np.all(np.isin(exposure_num, (0.0, 1.0))):
            raise InvalidExposure(f"Exposure column {schema.exposure} must be coded 0/1")
        exposure = exposure_num.astype(np.int64)

    unassigned = None
    if schema.unassigned:
        unassigned = _numeric_block(table, [schema.unassigned])[:, 0]

    if schema.offset:
        offset = pd.to_numeric(table[schema.offset], errors="coerce").to_numpy(dtype=float)
    else:
        offset = counts.sum(axis=1).astype(float) + (unassigned if unassigned is not None else 0.0)
    if not np.all(np.isfinite(offset)) or np.any(offset <= 0):
        raise NonPositiveOffset(f"Offsets must be positive; found minimum {np.nanmin(offset)}")

    outcome = _numeric_block(table, [schema.outcome])[:, 0]
    subject_id = (
        tuple(str(v) for v in table[schema.id]) if schema.id else tuple(str(i + 1) for i in range(len(table)))
    )

    data = Dataset(
        subject_id=subject_id,
        exposure=exposure,
        c1=_numeric_block(table, schema.c1),
        c2=_numeric_block(table, schema.c2),
        c3=_numeric_block(table, schema.c3),
        mediators=counts,
        offset=offset,
        outcome=outcome,
        mediator_names=tuple(mediator_cols),
        c1_names=tuple(schema.c1),
        c2_names=tuple(schema.c2),
        c3_names=tuple(schema.c3),
        unassigned=unassigned,
    )
    _check_dataset(data)

    summary = data.describe()
    logger.info(
        f"Validated dataset: n={summary.n}, p={summary.p}, "
        f"offset range [{summary.offset_min:.6g}, {summary.offset_max:.6g}]"
    )
    for name, z in summary.zero_proportion.items():
        logger.debug(f"Zero proportion {name}: {z:.4f}")
    return data


def read_dataset(path, schema: Schema) -> Dataset:
    """Read a CSV file with a header row and validate it."""
    table = pd.read_csv(path)
    return validate_dataset(table, schema)


def theta_size(p: int, r2: int = 1) -> int:
    return (4 + r2) * p + 1


def block_slices(p: int, r2: int = 1) -> Dict[str, slice]:
    """Positions of each parameter block in the packed vector."""
    return {
        "beta_z0": slice(0, p),
        "beta_l0": slice(p, 2 * p),
        "beta_0": slice(2 * p, 3 * p),
        "beta_1": slice(3 * p, 4 * p),
        "beta_2": slice(4 * p, (4 + r2) * p),
        "sigma_delta": slice((4 + r2) * p, (4 + r2) * p + 1),
    }


def parameter_names(mediator_names: Sequence[str], r2: int = 1) -> List[str]:
    names = []
    for block in ("beta_z0", "beta_l0", "beta_0", "beta_1"):
        names.extend(f"{block}[{m}]" for m in mediator_names)
    for k in range(r2):
        suffix = "" if r2 == 1 else f",{k + 1}"
        names.extend(f"beta_2[{m}{suffix}]" for m in mediator_names)
    names.append("sigma_delta")
    return names


@dataclass(frozen=True, eq=False)
class ThetaVector:
    """
    Mediator model parameters.

    Packed layout: beta_z0 (p), beta_l0 (p), beta_0 (p), beta_1 (p), beta_2 (p*r2, covariate-major),
    sigma_delta. With scalar C2 the packed length is 5p + 1.
    """

    beta_z0: np.ndarray
    beta_l0: np.ndarray
    beta_0: np.ndarray
    beta_1: np.ndarray
    beta_2: np.ndarray
    sigma_delta: float

    def __post_init__(self):
        vectors = {name: np.atleast_1d(np.asarray(getattr(self, name), dtype=float)) for name in
                   ("beta_z0", "beta_l0", "beta_0", "beta_1")}
        p = len(vectors["beta_z0"])
        for name, value in vectors.items():
            if value.ndim != 1 or len(value) != p:
                raise LengthMismatch(f"{name} has shape {value.shape}, expected ({p},)")
            object.__setattr__(self, name, _frozen(value, float))
        beta_2 = np.asarray(self.beta_2, dtype=float)
        if beta_2.ndim < 2:
            beta_2 = beta_2.reshape(-1, 1)
        if beta_2.ndim != 2 or beta_2.shape[0] != p:
            raise LengthMismatch(f"beta_2 has shape {beta_2.shape}, expected ({p}, r2)")
        object.__setattr__(self, "beta_2", _frozen(beta_2, float))
        object.__setattr__(self, "sigma_delta", float(self.sigma_delta))

    @property
    def p(self) -> int:
        return len(self.beta_z0)

    @property
    def r2(self) -> int:
        return self.beta_2.shape[1]

    @property
    def size(self) -> int:
        return theta_size(self.p, self.r2)

    def pack(self) -> np.ndarray:
        return np.concatenate(
            [self.beta_z0, self.beta_l0, self.beta_0, self.beta_1, self.beta_2.T.ravel(), [self.sigma_delta]]
        )

    @classmethod
    def unpack(cls, vector, p: int, r2: int = 1) -> "ThetaVector":
        v = np.asarray(vector, dtype=float)
        if v.ndim != 1 or len(v) != theta_size(p, r2):
            raise LengthMismatch(f"Packed vector has length {v.size}, expected {theta_size(p, r2)} for p={p}, r2={r2}")
        s = block_slices(p, r2)
        return cls(
            beta_z0=v[s["beta_z0"]].copy(),
            beta_l0=v[s["beta_l0"]].copy(),
            beta_0=v[s["beta_0"]].copy(),
            beta_1=v[s["beta_1"]].copy(),
            beta_2=v[s["beta_2"]].reshape(r2, p).T.copy(),
            sigma_delta=float(v[s["sigma_delta"]][0]),
        )

    def free_mask(self, family: Family) -> np.ndarray:
        return free_mask(self.p, self.r2, family)

    def pinned(self, family: Family) -> "ThetaVector":
        """Copy with the coordinates a family does not estimate set to their limits."""
        v = self.pack()
        s = block_slices(self.p, self.r2)
        if not family.zero_inflated:
            v[s["beta_z0"]] = -np.inf
        if not family.overdispersed:
            v[s["beta_l0"]] = np.inf
        return ThetaVector.unpack(v, self.p, self.r2)

    def linear_predictor(self, data: Dataset, exposure: Optional[np.ndarray] = None, delta=0.0) -> np.ndarray:
        """eta_ij = beta_0j + beta_1j A_i + beta_2j C2_i + log zeta_i + delta_i, shape (n, p)."""
        a = data.exposure if exposure is None else exposure
        eta = self.beta_0[None, :] + np.multiply.outer(a, self.beta_1) + data.c2 @ self.beta_2.T
        eta = eta + data.log_offset[:, None] + np.reshape(delta, (-1, 1))
        return eta


def free_mask(p: int, r2: int, family: Family) -> np.ndarray:
    mask = np.ones(theta_size(p, r2), dtype=bool)
    s = block_slices(p, r2)
    if not family.zero_inflated:
        mask[s["beta_z0"]] = False
    if not family.overdispersed:
        mask[s["beta_l0"]] = False
    return mask


def pack_theta(theta: ThetaVector) -> np.ndarray:
    return theta.pack()


def unpack_theta(vector, p: int, r2: int = 1) -> ThetaVector:
    return ThetaVector.unpack(vector, p, r2)


@dataclass(frozen=True, eq=False)
class ExposureFit:
    """
    Fitted exposure logistic model.

    ``marginal_prob`` is (P(A=1), P(A=0)), the fitted probabilities averaged over subjects.
    """

    alpha: np.ndarray
    fitted_prob: np.ndarray
    marginal_prob: Tuple[float, float]
    covariates: Tuple[str, ...] = field(default=())

    def log_prob_observed(self, exposure: np.ndarray) -> np.ndarray:
        """log P(A = A_i | C1_i) at each subject's observed exposure."""
        return np.where(exposure == 1, np.log(self.fitted_prob), np.log1p(-self.fitted_prob))

    def log_marginal_observed(self, exposure: np.ndarray) -> np.ndarray:
        """log P(A = A_i) from the averaged probabilities."""
        p1, p0 = self.marginal_prob
        return np.where(exposure == 1, np.log(p1), np.log(p0))
