"""
Count distributions for zimed.
Log-mass functions, derivatives, CDFs and samplers for the four mediator families.

All functions broadcast: ``m`` and ``eta`` share a trailing taxon axis of length p, while
``beta_z0`` and ``beta_l0`` are per-taxon vectors. ``eta`` is the log mean, offset and random
effect included. Dispersion follows variance = lambda + lambda**2 / phi.
"""

from enum import Enum
from typing import NamedTuple

import numpy as np
from scipy import stats
from scipy.special import digamma, expit, gammaln, log_expit

from zimed.errors import UsageError


class Family(str, Enum):
    """Mediator count families."""

    POISSON = "poisson"
    ZIP = "zip"
    ZINB = "zinb"
    NB = "nb"

    @property
    def zero_inflated(self) -> bool:
        return self in (Family.ZIP, Family.ZINB)

    @property
    def overdispersed(self) -> bool:
        return self in (Family.NB, Family.ZINB)

    @property
    def label(self) -> str:
        return {
            Family.POISSON: "Poisson",
            Family.ZIP: "ZIPoisson",
            Family.ZINB: "ZINegBinomial",
            Family.NB: "NegBinomial",
        }[self]

    def n_params(self, p: int, r2: int = 1) -> int:
        """Number of free parameters of the mixed model with p taxa and r2 C2 columns."""
        per_taxon = 2 + r2 + int(self.zero_inflated) + int(self.overdispersed)
        return per_taxon * p + 1

    def n_taxon_shape_params(self) -> int:
        """Per-taxon parameters of the marginal count distribution (mean, zero mass, dispersion)."""
        return 1 + int(self.zero_inflated) + int(self.overdispersed)

    @classmethod
    def parse(cls, name) -> "Family":
        if isinstance(name, Family):
            return name
        key = str(name).strip().lower().replace("-", "").replace("_", "")
        aliases = {
            "poisson": cls.POISSON,
            "zip": cls.ZIP,
            "zipoisson": cls.ZIP,
            "zinb": cls.ZINB,
            "zinegbinomial": cls.ZINB,
            "nb": cls.NB,
            "negbinomial": cls.NB,
            "negativebinomial": cls.NB,
        }
        if key not in aliases:
            raise UsageError(f"Unknown family: {name}. Must be one of: poisson, zip, zinb, nb")
        return aliases[key]


class CountTerms(NamedTuple):
    """Log-mass and its derivatives, all with the broadcast shape of ``m``."""

    logf: np.ndarray
    d_eta: np.ndarray
    d2_eta: np.ndarray
    d_bz: np.ndarray
    d_bl: np.ndarray


def _base_terms(m: np.ndarray, eta: np.ndarray, beta_l0: np.ndarray, family: Family):
    """Log-mass of the count kernel g (no zero inflation) with derivatives."""
    lam = np.exp(eta)
    if family.overdispersed:
        log_phi = beta_l0
        phi = np.exp(log_phi)
        log_phi_lam = np.logaddexp(log_phi, eta)
        logg = (
            gammaln(m + phi)
            - gammaln(phi)
            - gammaln(m + 1.0)
            + phi * (log_phi - log_phi_lam)
            + m * (eta - log_phi_lam)
        )
        shrink = phi / (phi + lam)
        d_eta = shrink * (m - lam)
        d2_eta = -shrink * lam * (phi + m) / (phi + lam)
        d_bl = phi * (digamma(m + phi) - digamma(phi) + log_phi - log_phi_lam + (lam - m) / (phi + lam))
    else:
        logg = m * eta - lam - gammaln(m + 1.0)
        d_eta = m - lam
        d2_eta = -lam
        d_bl = np.zeros_like(logg)
    return logg, d_eta, d2_eta, d_bl


def log_pmf(m, eta, beta_z0, beta_l0, family: Family) -> np.ndarray:
    """Log Pr(M = m) under the mixed zero-inflated model."""
    m = np.asarray(m, dtype=float)
    eta = np.asarray(eta, dtype=float)
    logg, _, _, _ = _base_terms(m, eta, np.asarray(beta_l0, dtype=float), family)
    if not family.zero_inflated:
        return logg
    bz = np.asarray(beta_z0, dtype=float)
    log_pi = log_expit(bz)
    log_1mpi = log_expit(-bz)
    return np.where(m == 0, np.logaddexp(log_pi, log_1mpi + logg), log_1mpi + logg)


def log_pmf_terms(m, eta, beta_z0, beta_l0, family: Family) -> CountTerms:
    """Log-mass with first and second derivatives in eta and first derivatives in beta_z0, beta_l0."""
    m = np.asarray(m, dtype=float)
    eta = np.asarray(eta, dtype=float)
    logg, d_eta, d2_eta, d_bl = _base_terms(m, eta, np.asarray(beta_l0, dtype=float), family)
    if not family.zero_inflated:
        return CountTerms(logg, d_eta, d2_eta, np.zeros_like(logg), d_bl)

    bz = np.broadcast_to(np.asarray(beta_z0, dtype=float), logg.shape)
    pi = expit(bz)
    log_pi = log_expit(bz)
    log_1mpi = log_expit(-bz)
    zero = m == 0

    logf_zero = np.logaddexp(log_pi, log_1mpi + logg)
    # r: posterior probability that an observed zero came from the count kernel
    r = np.exp(log_1mpi + logg - logf_zero)
    q = 1.0 - r

    logf = np.where(zero, logf_zero, log_1mpi + logg)
    new_d_eta = np.where(zero, r * d_eta, d_eta)
    new_d2_eta = np.where(zero, r * d2_eta + r * (1.0 - r) * d_eta**2, d2_eta)
    d_bz = np.where(zero, q - pi, -pi)
    new_d_bl = np.where(zero, r * d_bl, d_bl)
    return CountTerms(logf, new_d_eta, new_d2_eta, d_bz, new_d_bl)


def cdf(k, eta, beta_z0, beta_l0, family: Family) -> np.ndarray:
    """Pr(M <= k) for integer k >= 0."""
    k = np.asarray(k, dtype=float)
    lam = np.exp(np.asarray(eta, dtype=float))
    if family.overdispersed:
        phi = np.exp(np.asarray(beta_l0, dtype=float))
        base = stats.nbinom.cdf(k, phi, phi / (phi + lam))
    else:
        base = stats.poisson.cdf(k, lam)
    if not family.zero_inflated:
        return base
    pi = expit(np.asarray(beta_z0, dtype=float))
    return np.where(k >= 0, pi + (1.0 - pi) * base, 0.0)


def mean(eta, beta_z0, family: Family) -> np.ndarray:
    """E[M] given the linear predictor."""
    lam = np.exp(np.asarray(eta, dtype=float))
    if family.zero_inflated:
        return (1.0 - expit(np.asarray(beta_z0, dtype=float))) * lam
    return lam


def sample(rng: np.random.Generator, eta, beta_z0, beta_l0, family: Family) -> np.ndarray:
    """Draw counts with the shape of ``eta``."""
    eta = np.asarray(eta, dtype=float)
    lam = np.exp(eta)
    if family.overdispersed:
        phi = np.broadcast_to(np.exp(np.asarray(beta_l0, dtype=float)), lam.shape)
        counts = rng.negative_binomial(phi, phi / (phi + lam))
    else:
        counts = rng.poisson(lam)
    if family.zero_inflated:
        pi = np.broadcast_to(expit(np.asarray(beta_z0, dtype=float)), lam.shape)
        counts = np.where(rng.random(lam.shape) < pi, 0, counts)
    return counts.astype(np.int64)
