"""
Simulation module for zimed.
Synthetic data from the zero-inflated mediation generator, closed-form gold-standard effects and
replication studies scoring the fiducial, delta and bootstrap intervals.
"""

import itertools
import logging
from dataclasses import dataclass, field, fields, replace
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy.special import expit, logit

from zimed import counts
from zimed.comparators import delta_ci, npb_ci
from zimed.counts import Family
from zimed.data import Dataset, validate_dataset
from zimed.errors import TooManyFailures, UnsupportedGenerator, UsageError, ZimedError
from zimed.estimation import FitOptions
from zimed.fiducial import (
    DEFAULT_GRID,
    IntervalSummary,
    equivalence_number,
    fiducial_nie_samples,
    index_chunks,
    summarize_draws,
)
from zimed.pipeline import estimate_effects

logger = logging.getLogger(__name__)

METHODS = ("fiducial", "delta", "npb")
PER_TAXON = ("pi", "phi", "beta0", "beta1", "beta2")


def _per_taxon(name: str, value, p: int) -> Tuple[float, ...]:
    values = tuple(float(v) for v in np.atleast_1d(value))
    if len(values) == p:
        return values
    if len(set(values)) == 1:
        return values[:1] * p
    raise UsageError(f"{name} has {len(values)} values, expected 1 or {p}")


@dataclass(frozen=True)
class ScenarioConfig:
    """
    One simulation scenario. Per-taxon parameters accept a scalar or a length-p sequence.

    Defaults: beta = (-3.0, 0.6, 0.5), exposure logit (0.25, -0.5) in C2, outcome
    (gamma_0, gamma_1, gamma_3) = (1.5, 2.0, 1.5) with gamma_2j ~ N(0.9, 0.01), sigma_delta^2 = 0.1.
    """

    n: int = 200
    p: int = 1
    pi: Tuple[float, ...] = (0.2,)
    phi: Tuple[float, ...] = (1.0,)
    beta0: Tuple[float, ...] = (-3.0,)
    beta1: Tuple[float, ...] = (0.6,)
    beta2: Tuple[float, ...] = (0.5,)
    alpha_exposure: Tuple[float, float] = (0.25, -0.5)
    gamma: Tuple[float, float, float] = (1.5, 2.0, 1.5)
    gamma2_mean: float = 0.9
    gamma2_var: float = 0.01
    sigma_delta_sq: float = 0.1
    sigma_c2_sq: float = 1.0
    noise_sd: float = 1.0
    depth: str = "unit"
    generate_family: str = "zinb"
    fit_family: str = "zinb"
    replications: int = 1000
    methods: Tuple[str, ...] = METHODS
    seed: int = 1
    k: int = 1000
    n_equiv: Optional[int] = None
    equiv_grid: Tuple[int, ...] = DEFAULT_GRID
    npb_reps: int = 200
    alpha: float = 0.05
    fix_gamma: bool = False
    quad_nodes: int = 15

    def __post_init__(self):
        if self.p < 1 or self.n < 2:
            raise UsageError(f"Scenario needs p >= 1 and n >= 2, got p={self.p}, n={self.n}")
        for name in PER_TAXON:
            object.__setattr__(self, name, _per_taxon(name, getattr(self, name), self.p))
        if any(not 0 <= v < 1 for v in self.pi):
            raise UsageError(f"pi must lie in [0, 1), got {self.pi}")
        if any(v <= 0 for v in self.phi):
            raise UsageError(f"phi must be positive, got {self.phi}")
        if self.replications < 1:
            raise UsageError(f"replications must be at least 1, got {self.replications}")
        if self.depth not in ("unit", "sequencing"):
            raise UsageError(f"depth must be 'unit' or 'sequencing', got {self.depth}")
        methods = tuple(str(m).strip().lower() for m in self.methods)
        unknown = set(methods) - set(METHODS)
        if unknown:
            raise UsageError(f"Unknown methods: {', '.join(sorted(unknown))}. Must be among {', '.join(METHODS)}")
        object.__setattr__(self, "methods", methods)
        object.__setattr__(self, "generate_family", Family.parse(self.generate_family).value)
        object.__setattr__(self, "fit_family", Family.parse(self.fit_family).value)
        object.__setattr__(self, "alpha_exposure", tuple(float(v) for v in self.alpha_exposure))
        object.__setattr__(self, "gamma", tuple(float(v) for v in self.gamma))
        object.__setattr__(self, "equiv_grid", tuple(int(v) for v in self.equiv_grid))

    @classmethod
    def from_dict(cls, values: Mapping[str, Any]) -> "ScenarioConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(values) - names
        if unknown:
            raise UsageError(f"Unknown scenario settings: {', '.join(sorted(unknown))}")
        kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in values.items()}
        return cls(**kwargs)

    def to_dict(self) -> Dict[str, Any]:
        return {f.name: list(v) if isinstance(v := getattr(self, f.name), tuple) else v for f in fields(self)}


def replicate_seed(base_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([base_seed, index]).generate_state(1)[0])


def draw_gamma2(cfg: ScenarioConfig, rng: np.random.Generator) -> np.ndarray:
    return rng.normal(cfg.gamma2_mean, np.sqrt(cfg.gamma2_var), size=cfg.p)


def generate_dataset(cfg: ScenarioConfig, seed: int) -> Dataset:
    """
    Draw one dataset.

    C1, C3 ~ N(0, 1), C2 ~ N(0, sigma_c2^2), A ~ Bernoulli(expit(alpha_0 + alpha_1 C2)), mediator counts from
    the generator family with log mean beta_0 + beta_1 A + beta_2 C2 + log zeta + delta, and
    Y = gamma_0 + gamma_1 A + sum_j gamma_2j M_j + gamma_3 C3 + eps. The exposure model adjusts for C1 and C2.
    """
    rng = np.random.default_rng(seed)
    n, p = cfg.n, cfg.p
    family = Family.parse(cfg.generate_family)

    c1 = rng.standard_normal(n)
    c2 = rng.standard_normal(n) * np.sqrt(cfg.sigma_c2_sq)
    c3 = rng.standard_normal(n)
    delta = rng.normal(0.0, np.sqrt(cfg.sigma_delta_sq), size=n)
    a0, a1 = cfg.alpha_exposure
    exposure = (rng.random(n) < expit(a0 + a1 * c2)).astype(np.int64)
    if cfg.depth == "unit":
        zeta = np.ones(n)
    else:
        zeta = rng.integers(10_000, 100_001, size=n).astype(float)

    beta0, beta1, beta2 = (np.array(getattr(cfg, name)) for name in ("beta0", "beta1", "beta2"))
    eta = beta0[None, :] + np.outer(exposure, beta1) + np.outer(c2, beta2) + np.log(zeta)[:, None] + delta[:, None]
    with np.errstate(divide="ignore"):
        beta_z0 = logit(np.array(cfg.pi))
    mediators = counts.sample(rng, eta, beta_z0, np.log(np.array(cfg.phi)), family)

    if cfg.fix_gamma:
        gamma2 = draw_gamma2(cfg, np.random.default_rng(np.random.SeedSequence([cfg.seed])))
    else:
        gamma2 = draw_gamma2(cfg, rng)
    g0, g1, g3 = cfg.gamma
    outcome = g0 + g1 * exposure + mediators @ gamma2 + g3 * c3 + rng.normal(0.0, cfg.noise_sd, size=n)

    data = Dataset(
        subject_id=tuple(str(i + 1) for i in range(n)),
        exposure=exposure,
        c1=np.column_stack([c1, c2]),
        c2=c2[:, None],
        c3=c3[:, None],
        mediators=mediators,
        offset=zeta,
        outcome=outcome,
        mediator_names=tuple(f"taxon_{j + 1}" for j in range(p)),
        c1_names=("c1", "c2"),
        c2_names=("c2",),
        c3_names=("c3",),
    )
    return validate_dataset(data)


def gold_standard_nie(cfg: ScenarioConfig, j: int) -> float:
    """
    True NIE of mediator j at unit depth:
    gamma_2j (1 - pi_j) [exp(b0 + b1 + b2^2 s_C2^2 / 2 + s_d^2 / 2) - exp(b0 + b2^2 s_C2^2 / 2 + s_d^2 / 2)]
    with gamma_2j at its mean.
    """
    if cfg.depth != "unit":
        raise UnsupportedGenerator("The closed-form NIE holds only for unit depth (zeta = 1)")
    pi = cfg.pi[j] if Family.parse(cfg.generate_family).zero_inflated else 0.0
    shared = 0.5 * cfg.beta2[j] ** 2 * cfg.sigma_c2_sq + 0.5 * cfg.sigma_delta_sq
    b0, b1 = cfg.beta0[j], cfg.beta1[j]
    return cfg.gamma2_mean * (1.0 - pi) * (np.exp(b0 + b1 + shared) - np.exp(b0 + shared))


def gold_standard_nde(cfg: ScenarioConfig) -> float:
    return cfg.gamma[1]


def gold_standard(cfg: ScenarioConfig) -> Dict[str, float]:
    truth = {"NDE": gold_standard_nde(cfg)}
    for j in range(cfg.p):
        truth[f"taxon_{j + 1}"] = gold_standard_nie(cfg, j)
    return truth


@dataclass(frozen=True)
class IntervalScore:
    covered: bool
    width: float
    excludes_zero: bool
    error: float


def score_interval(summary: IntervalSummary, truth: float) -> IntervalScore:
    return IntervalScore(
        covered=summary.covers(truth),
        width=summary.width,
        excludes_zero=summary.excludes_zero(),
        error=summary.estimate - truth,
    )


def aggregate_scores(scores: Sequence[IntervalScore]) -> Dict[str, float]:
    """Coverage, mean width, sensitivity (share excluding 0) and bias over replications."""
    if not scores:
        return {"coverage": np.nan, "mean_width": np.nan, "sensitivity": np.nan, "bias": np.nan, "effective": 0}
    return {
        "coverage": float(np.mean([s.covered for s in scores])),
        "mean_width": float(np.mean([s.width for s in scores])),
        "sensitivity": float(np.mean([s.excludes_zero for s in scores])),
        "bias": float(np.mean([s.error for s in scores])),
        "effective": len(scores),
    }


@dataclass(frozen=True, eq=False)
class ScenarioResult:
    config: ScenarioConfig
    summary: pd.DataFrame
    replicates: pd.DataFrame
    failures: int
    n_equiv: Optional[int] = None
    notes: Tuple[str, ...] = field(default=())

    def to_frame(self) -> pd.DataFrame:
        """Long format: one row per method x effect, with scenario columns."""
        frame = self.summary.copy()
        cfg = self.config
        scenario = {
            "n": cfg.n,
            "p": cfg.p,
            "pi": cfg.pi[0],
            "phi": cfg.phi[0],
            "generate_family": cfg.generate_family,
            "fit_family": cfg.fit_family,
            "seed": cfg.seed,
            "replications": cfg.replications,
            "failures": self.failures,
            "n_equiv": self.n_equiv,
        }
        for k, (key, value) in enumerate(scenario.items()):
            frame.insert(k, key, value)
        return frame


def calibrate_scenario(cfg: ScenarioConfig, n_jobs: int = 1) -> int:
    """Equivalence number for a scenario from one pilot dataset outside the replication streams."""
    pilot_seed = replicate_seed(cfg.seed, cfg.replications)
    data = generate_dataset(cfg, pilot_seed)
    state = estimate_effects(data, cfg.fit_family, FitOptions(quad_nodes=cfg.quad_nodes, seed=pilot_seed))
    calibration = equivalence_number(
        data, state.mediator_fit, cfg.equiv_grid, seed=pilot_seed, n_jobs=n_jobs,
        options=FitOptions(quad_nodes=cfg.quad_nodes),
    )
    return calibration.n_equiv


def run_replication(cfg: ScenarioConfig, index: int, n_equiv: Optional[int]) -> Dict[str, Dict[str, IntervalSummary]]:
    """All requested intervals for replication ``index``."""
    seed = replicate_seed(cfg.seed, index)
    data = generate_dataset(cfg, seed)
    fit_options = FitOptions(quad_nodes=cfg.quad_nodes, seed=seed)
    state = estimate_effects(data, cfg.fit_family, fit_options)
    intervals: Dict[str, Dict[str, IntervalSummary]] = {}
    if "fiducial" in cfg.methods:
        draws = fiducial_nie_samples(state, cfg.k, n_equiv, seed)
        intervals["fiducial"] = summarize_draws(draws, cfg.alpha)
    if "delta" in cfg.methods:
        intervals["delta"] = delta_ci(state, cfg.alpha)
    if "npb" in cfg.methods:
        intervals["npb"] = npb_ci(data, cfg.fit_family, cfg.alpha, cfg.npb_reps, seed, fit_options=fit_options,
                                  state=state)
    return intervals


def _replication_chunk(cfg, indices, n_equiv):
    out = []
    for index in indices:
        try:
            out.append((index, run_replication(cfg, index, n_equiv)))
        except ZimedError as e:
            logger.warning(f"Replication {index} failed: {e}")
            out.append((index, None))
    return out


def run_scenario(cfg: ScenarioConfig, n_jobs: int = 1) -> ScenarioResult:
    """
    Run ``cfg.replications`` replications and score each interval against the gold standard.

    Raises:
        TooManyFailures: More than 5% of replications failed
    """
    n_equiv = cfg.n_equiv
    if "fiducial" in cfg.methods and n_equiv is None:
        n_equiv = calibrate_scenario(cfg, n_jobs)
    truth = gold_standard(cfg)

    batches = Parallel(n_jobs=n_jobs)(
        delayed(_replication_chunk)(cfg, chunk, n_equiv) for chunk in index_chunks(cfg.replications, n_jobs)
    )
    results = [item for batch in batches for item in batch]
    failures = sum(1 for _, r in results if r is None)
    if failures > 0.05 * cfg.replications:
        raise TooManyFailures(f"{failures} of {cfg.replications} replications failed (n={cfg.n}, pi={cfg.pi[0]})")

    rows = []
    scores: Dict[Tuple[str, str], List[IntervalScore]] = {}
    for index, intervals in results:
        if intervals is None:
            continue
        for method in cfg.methods:
            for effect, summary in intervals[method].items():
                score = score_interval(summary, truth[effect])
                scores.setdefault((method, effect), []).append(score)
                rows.append({
                    "replication": index,
                    "method": method,
                    "effect": effect,
                    "estimate": summary.estimate,
                    "lower": summary.lower,
                    "upper": summary.upper,
                    "width": summary.width,
                    "covered": score.covered,
                })

    summary_rows = []
    for method in cfg.methods:
        for effect, gsv in truth.items():
            agg = aggregate_scores(scores.get((method, effect), []))
            summary_rows.append({"method": method, "effect": effect, "gsv": gsv, **agg})
    logger.info(f"Scenario n={cfg.n}, p={cfg.p}, pi={cfg.pi[0]}: {cfg.replications - failures} replications scored")
    return ScenarioResult(
        config=cfg,
        summary=pd.DataFrame(summary_rows),
        replicates=pd.DataFrame(rows),
        failures=failures,
        n_equiv=n_equiv,
    )


def scenario_grid(base: ScenarioConfig, axes: Mapping[str, Sequence]) -> List[ScenarioConfig]:
    """
    Cartesian product of the axis values over ``base``; cell i gets the seed derived from (base seed, i).
    """
    axes = {k: list(v) for k, v in axes.items() if v is not None and len(v)}
    if not axes:
        return [base]
    names = list(axes)
    configs = []
    for index, values in enumerate(itertools.product(*(axes[k] for k in names))):
        changes = dict(zip(names, values))
        changes["seed"] = replicate_seed(base.seed, index)
        configs.append(replace(base, **changes))
    return configs


PRESETS: Dict[str, Tuple[Dict[str, Any], Dict[str, Sequence]]] = {
    "coverage": ({"phi": 1.0}, {"pi": [0.2, 0.4, 0.6], "n": [20, 40, 80, 200, 300]}),
    "dispersion": ({"pi": 0.2, "n": 200}, {"phi": [0.5, 1.0, 10.0]}),
    "taxa": ({"pi": 0.2, "n": 200}, {"p": [1, 3, 5]}),
    "sensitivity": ({"pi": 0.2, "phi": 0.5}, {"n": [20, 40, 80, 200, 300, 400]}),
    "misspec": (
        {"n": 200, "generate_family": "zinb", "fit_family": "zip", "methods": ("fiducial",)},
        {"pi": [0.2, 0.4, 0.6]},
    ),
}

# Alternate names accepted by --preset
PRESET_ALIASES: Dict[str, str] = {"fig5": "coverage", "fig6": "taxa", "fig7": "sensitivity"}


def preset(name: str, **overrides) -> List[ScenarioConfig]:
    """Scenario list of a named study; overrides (e.g. replications, seed) apply to the base."""
    name = PRESET_ALIASES.get(name, name)
    if name not in PRESETS:
        raise UsageError(f"Unknown preset: {name}. Must be one of: {', '.join([*PRESETS, *PRESET_ALIASES])}")
    base_changes, axes = PRESETS[name]
    base = ScenarioConfig(**{**base_changes, **{k: v for k, v in overrides.items() if v is not None}})
    return scenario_grid(base, axes)
