"""
Estimation module for zimed.
Fits the exposure logistic model and the joint mixed-effects zero-inflated mediator model by maximum
marginal likelihood, with empirical Bayes random effects, AIC model selection and a chi-square
goodness-of-fit test.
"""

import logging
import warnings
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import statsmodels.api as sm
from numpy.polynomial.hermite import hermgauss
from scipy import optimize, stats
from scipy.special import expit, logit, logsumexp
from statsmodels.tools import sm_exceptions

from zimed import counts
from zimed.counts import Family
from zimed.data import Dataset, ExposureFit, ThetaVector, block_slices, free_mask, parameter_names, theta_size
from zimed.errors import (
    Collinear,
    ConvergenceError,
    DegenerateCells,
    NonConvergence,
    Separation,
    UsageError,
    ZimedError,
)

logger = logging.getLogger(__name__)

_SEPARATION_ERRORS = tuple(
    getattr(sm_exceptions, name)
    for name in ("PerfectSeparationError", "PerfectSeparationWarning")
    if hasattr(sm_exceptions, name)
)

# Box bounds on the internal scale (sigma_delta enters as log sigma_delta)
BOUND_ZERO_INFLATION = (-15.0, 15.0)
BOUND_LOG_DISPERSION = (-15.0, 15.0)
BOUND_LOG_SIGMA = (-12.0, 3.0)


def fit_exposure_model(data: Dataset) -> ExposureFit:
    """
    Fit logit P(A=1 | C1) = alpha_0 + alpha' C1 by maximum likelihood.

    Args:
        data: Validated dataset

    Returns:
        ExposureFit with coefficients, fitted and marginal probabilities
    """
    X = np.column_stack([np.ones(data.n), data.c1])
    if np.linalg.matrix_rank(X) < X.shape[1] or np.linalg.cond(X) > 1e10:
        raise Collinear(f"Exposure design [1, C1] is collinear (condition number {np.linalg.cond(X):.3g})")

    with warnings.catch_warnings():
        for category in _SEPARATION_ERRORS:
            if issubclass(category, Warning):
                warnings.simplefilter("error", category)
        warnings.simplefilter("ignore", sm_exceptions.ConvergenceWarning)
        warnings.simplefilter("ignore", RuntimeWarning)
        try:
            result = sm.Logit(data.exposure.astype(float), X).fit(disp=0, maxiter=100)
        except (*_SEPARATION_ERRORS, np.linalg.LinAlgError) as e:
            raise Separation(f"Exposure model separation: {e}") from e

    alpha = np.asarray(result.params, dtype=float)
    if not np.all(np.isfinite(alpha)) or np.max(np.abs(alpha)) > 30:
        raise Separation(f"Exposure coefficients diverge (max |alpha| = {np.max(np.abs(alpha)):.3g})")

    fitted = np.clip(expit(X @ alpha), 1e-12, 1 - 1e-12)
    p1 = float(np.mean(fitted))
    logger.info(f"Exposure model: alpha={np.round(alpha, 4).tolist()}, P(A=1)={p1:.4f}")
    return ExposureFit(alpha=alpha, fitted_prob=fitted, marginal_prob=(p1, 1.0 - p1), covariates=data.c1_names)


class MarginalLikelihood:
    """
    Joint marginal likelihood of the mediator counts with one random effect per subject shared
    across taxa, integrated by adaptive Gauss-Hermite quadrature.
    """

    def __init__(self, data: Dataset, family: Family, quad_nodes: int = 15):
        if quad_nodes < 5:
            raise UsageError(f"quad_nodes must be at least 5, got {quad_nodes}")
        self.data = data
        self.family = Family.parse(family)
        self.m = data.mediators.astype(float)
        self.nodes, weights = hermgauss(quad_nodes)
        self.log_weights = np.log(weights) + self.nodes**2

    def _joint(self, delta: np.ndarray, eta0: np.ndarray, theta: ThetaVector, sigma: float) -> np.ndarray:
        logf = counts.log_pmf(self.m, eta0 + delta[:, None], theta.beta_z0, theta.beta_l0, self.family)
        return logf.sum(axis=1) - 0.5 * delta**2 / sigma**2

    def posterior_mode(
        self, theta: ThetaVector, eta0: Optional[np.ndarray] = None, bound: Optional[float] = None, tol: float = 1e-10
    ) -> Tuple[np.ndarray, np.ndarray]:
        """
        Mode of each subject's random-effect posterior by safeguarded Newton search.

        Returns:
            (mode, curvature) where curvature is minus the second derivative at the mode
        """
        n = self.data.n
        sigma = abs(theta.sigma_delta)
        if sigma == 0.0:
            return np.zeros(n), np.full(n, np.inf)
        if eta0 is None:
            eta0 = theta.linear_predictor(self.data)
        limit = 6.0 * sigma + 5.0 if bound is None else bound
        prior_curv = 1.0 / sigma**2

        delta = np.zeros(n)
        h = self._joint(delta, eta0, theta, sigma)
        for _ in range(100):
            terms = counts.log_pmf_terms(self.m, eta0 + delta[:, None], theta.beta_z0, theta.beta_l0, self.family)
            grad = terms.d_eta.sum(axis=1) - delta * prior_curv
            curv = -terms.d2_eta.sum(axis=1) + prior_curv
            curv = np.where(curv > 0, curv, prior_curv)
            step = grad / curv

            # Backtrack per subject until the joint density does not decrease
            scale = np.ones(n)
            candidate = np.clip(delta + step, -limit, limit)
            h_new = self._joint(candidate, eta0, theta, sigma)
            for _ in range(30):
                worse = h_new < h - 1e-12 * np.abs(h)
                if not worse.any():
                    break
                scale = np.where(worse, 0.5 * scale, scale)
                trial = np.clip(delta + scale * step, -limit, limit)
                candidate = np.where(worse, trial, candidate)
                h_new = np.where(worse, self._joint(candidate, eta0, theta, sigma), h_new)
            worse = h_new < h
            candidate = np.where(worse, delta, candidate)
            h_new = np.where(worse, h, h_new)

            moved = np.max(np.abs(candidate - delta))
            delta, h = candidate, h_new
            if moved < tol:
                break

        terms = counts.log_pmf_terms(self.m, eta0 + delta[:, None], theta.beta_z0, theta.beta_l0, self.family)
        curv = -terms.d2_eta.sum(axis=1) + prior_curv
        curv = np.where(curv > 0, curv, prior_curv)
        return delta, curv

    def evaluate(self, theta: ThetaVector, gradient: bool = True) -> Tuple[float, Optional[np.ndarray]]:
        """
        Log marginal likelihood and its gradient with respect to the packed parameter vector.

        The gradient is the posterior-weighted score evaluated on the same quadrature grid.
        """
        data = self.data
        family = self.family
        p, r2 = theta.p, theta.r2
        s = block_slices(p, r2)
        eta0 = theta.linear_predictor(data)
        sigma = abs(theta.sigma_delta)

        if sigma == 0.0:
            terms = counts.log_pmf_terms(self.m, eta0, theta.beta_z0, theta.beta_l0, family)
            value = float(np.sum(terms.logf))
            if not gradient:
                return value, None
            d_eta = terms.d_eta
            d_bz, d_bl = terms.d_bz.sum(axis=0), terms.d_bl.sum(axis=0)
            d_sigma = 0.0
        else:
            mode, curv = self.posterior_mode(theta, eta0)
            scale = np.sqrt(2.0 / curv)
            delta = mode[:, None] + scale[:, None] * self.nodes[None, :]
            log_prior = -0.5 * np.log(2 * np.pi * sigma**2) - 0.5 * delta**2 / sigma**2
            eta = eta0[:, None, :] + delta[:, :, None]
            mm = self.m[:, None, :]
            if gradient:
                terms = counts.log_pmf_terms(mm, eta, theta.beta_z0, theta.beta_l0, family)
                logf = terms.logf
            else:
                logf = counts.log_pmf(mm, eta, theta.beta_z0, theta.beta_l0, family)
            log_integrand = self.log_weights[None, :] + logf.sum(axis=2) + log_prior
            log_subject = np.log(scale) + logsumexp(log_integrand, axis=1)
            value = float(np.sum(log_subject))
            if not gradient:
                return value, None
            post = np.exp(log_integrand - logsumexp(log_integrand, axis=1, keepdims=True))
            d_eta = np.einsum("ik,ikj->ij", post, terms.d_eta)
            d_bz = np.einsum("ik,ikj->j", post, terms.d_bz)
            d_bl = np.einsum("ik,ikj->j", post, terms.d_bl)
            d_sigma = float(np.sum(post * (-1.0 / sigma + delta**2 / sigma**3)))
            d_sigma *= np.sign(theta.sigma_delta)

        grad = np.zeros(theta_size(p, r2))
        if family.zero_inflated:
            grad[s["beta_z0"]] = d_bz
        if family.overdispersed:
            grad[s["beta_l0"]] = d_bl
        grad[s["beta_0"]] = d_eta.sum(axis=0)
        grad[s["beta_1"]] = data.exposure @ d_eta
        grad[s["beta_2"]] = (data.c2.T @ d_eta).ravel()
        grad[s["sigma_delta"]] = d_sigma
        return value, grad


def log_marginal_likelihood(theta: ThetaVector, data: Dataset, family, quad_nodes: int = 15) -> float:
    """
    Sum over subjects of log integral prod_j Pr(M_ij | delta) N(delta; 0, sigma_delta^2) d delta.
    """
    value, _ = MarginalLikelihood(data, family, quad_nodes).evaluate(theta, gradient=False)
    return value


def log_marginal_likelihood_and_gradient(
    theta: ThetaVector, data: Dataset, family, quad_nodes: int = 15
) -> Tuple[float, np.ndarray]:
    return MarginalLikelihood(data, family, quad_nodes).evaluate(theta, gradient=True)


def numerical_gradient(theta: ThetaVector, data: Dataset, family, quad_nodes: int = 15, step: float = 1e-5):
    """Central-difference gradient of the log marginal likelihood over the family's free coordinates."""
    family = Family.parse(family)
    lik = MarginalLikelihood(data, family, quad_nodes)
    v = theta.pack()
    grad = np.zeros_like(v)
    for k in np.flatnonzero(free_mask(theta.p, theta.r2, family)):
        h = step * max(1.0, abs(v[k]))
        up, down = v.copy(), v.copy()
        up[k] += h
        down[k] -= h
        f_up, _ = lik.evaluate(ThetaVector.unpack(up, theta.p, theta.r2), gradient=False)
        f_down, _ = lik.evaluate(ThetaVector.unpack(down, theta.p, theta.r2), gradient=False)
        grad[k] = (f_up - f_down) / (2 * h)
    return grad


@dataclass(frozen=True)
class FitOptions:
    quad_nodes: int = 15
    tol: float = 1e-6
    max_iter: int = 500
    n_starts: int = 3
    seed: int = 0
    # Bootstrap refits only need the point estimate
    covariance: bool = True


@dataclass(frozen=True, eq=False)
class MediatorFit:
    """Fitted joint mediator model."""

    theta_hat: ThetaVector
    family: Family
    cov_star: np.ndarray
    delta_hat: np.ndarray
    log_lik: float
    aic: float
    converged: bool
    n_iter: int
    grad_norm: float = 0.0
    quad_nodes: int = 15
    mediator_names: Tuple[str, ...] = ()
    warnings: Tuple[str, ...] = field(default=())

    @property
    def free_mask(self) -> np.ndarray:
        return free_mask(self.theta_hat.p, self.theta_hat.r2, self.family)

    @property
    def n_params(self) -> int:
        return self.family.n_params(self.theta_hat.p, self.theta_hat.r2)

    def standard_errors(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.cov_star), 0.0, None))

    def derived(self) -> Tuple[np.ndarray, np.ndarray]:
        """Per-taxon zero-inflation probability pi and dispersion phi."""
        theta = self.theta_hat
        pi = expit(theta.beta_z0) if self.family.zero_inflated else np.zeros(theta.p)
        phi = np.exp(theta.beta_l0) if self.family.overdispersed else np.full(theta.p, np.inf)
        return pi, phi

    def to_dict(self) -> Dict[str, Any]:
        names = parameter_names(self.mediator_names or [f"taxon_{j + 1}" for j in range(self.theta_hat.p)],
                                self.theta_hat.r2)
        values = self.theta_hat.pack()
        se = self.standard_errors()
        mask = self.free_mask
        pi, phi = self.derived()
        return {
            "family": self.family.value,
            "log_lik": self.log_lik,
            "aic": self.aic,
            "n_params": self.n_params,
            "converged": self.converged,
            "n_iter": self.n_iter,
            "grad_norm": self.grad_norm,
            "quad_nodes": self.quad_nodes,
            "warnings": list(self.warnings),
            "parameters": [
                {"name": name, "estimate": float(v) if m else None, "se": float(e) if m else None}
                for name, v, e, m in zip(names, values, se, mask)
            ],
            "pi": [float(x) for x in pi],
            "phi": [float(x) if np.isfinite(x) else None for x in phi],
        }


def _start_values(data: Dataset, family: Family) -> ThetaVector:
    p, r2 = data.p, data.r2
    y = data.mediators.astype(float)
    zeta = data.offset
    exposed = data.exposure == 1

    zero_share = (y == 0).mean(axis=0)
    pi0 = np.clip(zero_share / 2.0, 0.02, 0.8) if family.zero_inflated else np.zeros(p)
    total = y.sum(axis=0)
    rate = np.where(total > 0, total, 0.5) / zeta.sum()
    beta_0 = np.log(rate / (1.0 - pi0))
    rate1 = (y[exposed].sum(axis=0) + 0.5) / zeta[exposed].sum()
    rate0 = (y[~exposed].sum(axis=0) + 0.5) / zeta[~exposed].sum()
    beta_1 = np.clip(np.log(rate1 / rate0), -3.0, 3.0)

    mu = np.outer(zeta, rate)
    excess = np.sum((y - mu) ** 2 - mu, axis=0)
    phi0 = np.clip(np.sum(mu**2, axis=0) / np.maximum(excess, 1e-8), np.exp(-3.0), np.exp(5.0))

    theta = ThetaVector(
        beta_z0=logit(pi0) if family.zero_inflated else np.zeros(p),
        beta_l0=np.log(phi0) if family.overdispersed else np.zeros(p),
        beta_0=beta_0,
        beta_1=beta_1,
        beta_2=np.zeros((p, r2)),
        sigma_delta=0.3,
    )
    return theta.pinned(family)


class _Objective:
    """Negative mean log-likelihood on the internal (free, log sigma) scale."""

    def __init__(self, lik: MarginalLikelihood, template: ThetaVector):
        self.lik = lik
        self.p, self.r2 = template.p, template.r2
        self.template = template.pack()
        self.mask = free_mask(self.p, self.r2, lik.family)
        self.free_idx = np.flatnonzero(self.mask)
        self.sigma_pos = int(np.flatnonzero(self.free_idx == theta_size(self.p, self.r2) - 1)[0])
        self.n = lik.data.n

    def to_theta(self, u: np.ndarray) -> ThetaVector:
        v = self.template.copy()
        v[self.free_idx] = u
        v[-1] = np.exp(u[self.sigma_pos])
        return ThetaVector.unpack(v, self.p, self.r2)

    def to_internal(self, theta: ThetaVector) -> np.ndarray:
        u = theta.pack()[self.free_idx].copy()
        u[self.sigma_pos] = np.log(max(abs(theta.sigma_delta), np.exp(BOUND_LOG_SIGMA[0])))
        return u

    def bounds(self) -> List[Tuple[Optional[float], Optional[float]]]:
        s = block_slices(self.p, self.r2)
        full: List[Tuple[Optional[float], Optional[float]]] = [(None, None)] * len(self.template)
        for k in range(s["beta_z0"].start, s["beta_z0"].stop):
            full[k] = BOUND_ZERO_INFLATION
        for k in range(s["beta_l0"].start, s["beta_l0"].stop):
            full[k] = BOUND_LOG_DISPERSION
        full[-1] = BOUND_LOG_SIGMA
        return [full[k] for k in self.free_idx]

    def internal_gradient(self, u: np.ndarray) -> Tuple[float, np.ndarray]:
        theta = self.to_theta(u)
        value, grad = self.lik.evaluate(theta, gradient=True)
        g = grad[self.free_idx]
        g[self.sigma_pos] *= theta.sigma_delta
        return value, g

    def __call__(self, u: np.ndarray) -> Tuple[float, np.ndarray]:
        value, g = self.internal_gradient(u)
        if not np.isfinite(value):
            return np.inf, np.zeros_like(u)
        return -value / self.n, -g / self.n

    def projected_gradient_norm(self, u: np.ndarray, g: np.ndarray) -> float:
        """Sup-norm of the log-likelihood gradient with components pushing outside active bounds removed."""
        proj = g.copy()
        for k, (lo, hi) in enumerate(self.bounds()):
            if lo is not None and u[k] <= lo + 1e-8 and proj[k] < 0:
                proj[k] = 0.0
            if hi is not None and u[k] >= hi - 1e-8 and proj[k] > 0:
                proj[k] = 0.0
        return float(np.max(np.abs(proj))) if proj.size else 0.0

    def hessian(self, u: np.ndarray) -> np.ndarray:
        """Log-likelihood Hessian on the internal scale by central differences of the analytic gradient."""
        H = np.zeros((len(u), len(u)))
        for k in range(len(u)):
            h = 1e-5 * max(1.0, abs(u[k]))
            up, down = u.copy(), u.copy()
            up[k] += h
            down[k] -= h
            H[:, k] = (self.internal_gradient(up)[1] - self.internal_gradient(down)[1]) / (2 * h)
        return 0.5 * (H + H.T)

    def polish(self, u: np.ndarray, tol: float, max_steps: int = 25) -> np.ndarray:
        """
        Damped Newton steps from ``u`` until the projected gradient meets tol * (1 + |log_lik|).

        Coordinates held at an active bound stay fixed; flat directions are regularized through an eigenvalue
        floor and each step is halved until the log-likelihood does not decrease.
        """
        bounds = self.bounds()
        lo = np.array([-np.inf if b is None else b for b, _ in bounds])
        hi = np.array([np.inf if b is None else b for _, b in bounds])
        log_lik, g = self.internal_gradient(u)
        for _ in range(max_steps):
            if not np.isfinite(log_lik) or self.projected_gradient_norm(u, g) < tol * (1.0 + abs(log_lik)):
                break
            active = ((u <= lo + 1e-8) & (g < 0)) | ((u >= hi - 1e-8) & (g > 0))
            free = np.flatnonzero(~active)
            if not free.size:
                break
            w, V = np.linalg.eigh(-self.hessian(u)[np.ix_(free, free)])
            w = np.maximum(np.abs(w), 1e-8 * max(float(np.max(np.abs(w))), 1.0))
            step = np.zeros_like(u)
            step[free] = V @ ((V.T @ g[free]) / w)
            for _ in range(30):
                trial = np.clip(u + step, lo, hi)
                trial_ll, trial_g = self.internal_gradient(trial)
                if np.isfinite(trial_ll) and trial_ll >= log_lik - 1e-12 * abs(log_lik):
                    break
                step *= 0.5
            else:
                break
            u, log_lik, g = trial, trial_ll, trial_g
        return u

    def gtol(self, u: np.ndarray, tol: float) -> float:
        """Optimizer tolerance on the mean objective matching the acceptance rule on the total gradient."""
        log_lik, _ = self.internal_gradient(u)
        scale = 1.0 + abs(log_lik) if np.isfinite(log_lik) else 1.0
        return tol * scale / self.n


def _observed_information(lik: MarginalLikelihood, theta: ThetaVector) -> np.ndarray:
    """Minus the Hessian over free coordinates, by central differences of the analytic gradient."""
    v = theta.pack()
    idx = np.flatnonzero(free_mask(theta.p, theta.r2, lik.family))
    H = np.zeros((len(idx), len(idx)))
    for col, k in enumerate(idx):
        h = 1e-4 * max(1.0, abs(v[k]))
        up, down = v.copy(), v.copy()
        up[k] += h
        down[k] -= h
        _, g_up = lik.evaluate(ThetaVector.unpack(up, theta.p, theta.r2))
        _, g_down = lik.evaluate(ThetaVector.unpack(down, theta.p, theta.r2))
        H[:, col] = (g_up[idx] - g_down[idx]) / (2 * h)
    H = 0.5 * (H + H.T)
    return -H


def _covariance(info: np.ndarray) -> Tuple[np.ndarray, bool]:
    """Inverse information; pseudo-inverse when not positive definite. Returns (cov, singular)."""
    w, V = np.linalg.eigh(info)
    threshold = 1e-10 * max(np.max(np.abs(w)), 1.0)
    singular = bool(np.any(w <= threshold))
    inv_w = np.where(w > threshold, 1.0 / np.where(w > threshold, w, 1.0), 0.0)
    cov = (V * inv_w) @ V.T
    cov = 0.5 * (cov + cov.T)
    # Clamp tiny negative eigenvalues from rounding
    cw, cV = np.linalg.eigh(cov)
    if np.any(cw < 0):
        cov = (cV * np.clip(cw, 0.0, None)) @ cV.T
        cov = 0.5 * (cov + cov.T)
    return cov, singular


def fit_mediator_model(
    data: Dataset,
    family="zinb",
    options: Optional[FitOptions] = None,
    start: Optional[ThetaVector] = None,
) -> MediatorFit:
    """
    Fit the joint mediator model by maximum marginal likelihood.

    Args:
        data: Validated dataset
        family: Count family (poisson, zip, zinb, nb)
        options: Quadrature, tolerance and iteration settings
        start: Optional starting parameters (e.g. the original fit inside a bootstrap)

    Returns:
        MediatorFit with estimates, covariance S*, empirical Bayes effects and AIC
    """
    family = Family.parse(family)
    options = options or FitOptions()
    lik = MarginalLikelihood(data, family, options.quad_nodes)
    base = (start or _start_values(data, family)).pinned(family)
    objective = _Objective(lik, base)
    bounds = objective.bounds()

    u0 = np.clip(
        objective.to_internal(base),
        [lo if lo is not None else -np.inf for lo, _ in bounds],
        [hi if hi is not None else np.inf for _, hi in bounds],
    )
    rng = np.random.default_rng(options.seed)
    starts = [u0] + [u0 + rng.normal(0.0, 0.1, size=u0.shape) * (1.0 + np.abs(u0)) for _ in range(options.n_starts)]

    best = None
    total_iter = 0
    for attempt, u_start in enumerate(starts):
        res = optimize.minimize(
            objective,
            u_start,
            jac=True,
            method="L-BFGS-B",
            bounds=bounds,
            options={
                "maxiter": options.max_iter,
                "gtol": objective.gtol(u_start, options.tol),
                "ftol": 1e-14,
                "maxcor": 20,
            },
        )
        total_iter += int(res.nit)
        u_fit = objective.polish(res.x, options.tol)
        log_lik, g = objective.internal_gradient(u_fit)
        grad_norm = objective.projected_gradient_norm(u_fit, g)
        converged = bool(np.isfinite(log_lik) and grad_norm < options.tol * (1.0 + abs(log_lik)))
        logger.debug(
            f"{family.label} start {attempt}: log_lik={log_lik:.6f}, grad={grad_norm:.3g}, nit={res.nit}, "
            f"converged={converged}"
        )
        if best is None or (converged and not best[3]) or (converged == best[3] and log_lik > best[1]):
            best = (u_fit, log_lik, grad_norm, converged)
        if converged:
            break
        logger.warning(f"{family.label} fit did not converge from start {attempt} (gradient {grad_norm:.3g}); retrying")

    u_hat, log_lik, grad_norm, converged = best
    if not converged:
        raise NonConvergence(
            f"{family.label} mediator model did not converge after {len(starts)} starts "
            f"(gradient {grad_norm:.3g}, iterations {total_iter})"
        )

    theta_hat = objective.to_theta(u_hat)
    fit_warnings: List[str] = []
    P = theta_hat.size
    cov_star = np.zeros((P, P))
    if options.covariance:
        info = _observed_information(lik, theta_hat)
        cov_free, singular = _covariance(info)
        if singular:
            msg = "SingularHessian: observed information not positive definite; pseudo-inverse used"
            logger.warning(f"{family.label}: {msg}")
            fit_warnings.append(msg)
        idx = objective.free_idx
        cov_star[np.ix_(idx, idx)] = cov_free

    k = family.n_params(theta_hat.p, theta_hat.r2)
    fit = MediatorFit(
        theta_hat=theta_hat,
        family=family,
        cov_star=cov_star,
        delta_hat=np.zeros(data.n),
        log_lik=log_lik,
        aic=2.0 * k - 2.0 * log_lik,
        converged=True,
        n_iter=total_iter,
        grad_norm=grad_norm,
        quad_nodes=options.quad_nodes,
        mediator_names=data.mediator_names,
        warnings=tuple(fit_warnings),
    )
    delta_hat = empirical_bayes_effects(fit, data)
    object.__setattr__(fit, "delta_hat", delta_hat)
    log = logger.info if options.covariance else logger.debug
    log(f"{family.label} fit: log_lik={log_lik:.4f}, AIC={fit.aic:.4f}, sigma_delta={theta_hat.sigma_delta:.4f}")
    return fit


def empirical_bayes_effects(fit: MediatorFit, data: Dataset) -> np.ndarray:
    """
    Posterior-mode random effects given the fitted parameters, searched within +-6 sigma_delta.
    """
    sigma = abs(fit.theta_hat.sigma_delta)
    if sigma == 0.0:
        return np.zeros(data.n)
    lik = MarginalLikelihood(data, fit.family, fit.quad_nodes)
    mode, _ = lik.posterior_mode(fit.theta_hat, bound=6.0 * sigma, tol=1e-10)
    return mode


@dataclass(frozen=True)
class SelectionRow:
    family: Family
    aic: float
    log_lik: float
    n_params: int


def model_selection(
    data: Dataset, families: Sequence, options: Optional[FitOptions] = None
) -> Tuple[List[SelectionRow], Dict[str, MediatorFit]]:
    """
    Fit each family and rank by AIC (ties broken by fewer parameters).

    Returns:
        (ranked rows, fits keyed by family value) for the families that fitted
    """
    if len(families) < 2:
        raise UsageError("Model selection needs at least two families")
    rows: List[Tuple[float, int, int, SelectionRow]] = []
    fits: Dict[str, MediatorFit] = {}
    failures: Dict[str, str] = {}
    for order, name in enumerate(families):
        family = Family.parse(name)
        try:
            fit = fits.get(family.value) or fit_mediator_model(data, family, options)
        except ZimedError as e:
            logger.warning(f"Model selection: {family.label} failed: {e}")
            failures[family.label] = str(e)
            continue
        fits[family.value] = fit
        row = SelectionRow(family=family, aic=fit.aic, log_lik=fit.log_lik, n_params=fit.n_params)
        rows.append((row.aic, row.n_params, order, row))
    if not rows:
        detail = "; ".join(f"{k}: {v}" for k, v in failures.items())
        raise ConvergenceError(f"No family could be fitted ({detail})")
    rows.sort(key=lambda item: item[:3])
    return [item[3] for item in rows], fits


@dataclass(frozen=True)
class TaxonGof:
    taxon: str
    cells: Tuple[Tuple[int, Optional[int]], ...]
    observed: Tuple[int, ...]
    expected: Tuple[float, ...]
    statistic: Optional[float]
    df: Optional[int]
    p_value: Optional[float]
    passed: Optional[bool]
    note: str = ""


@dataclass(frozen=True)
class GofReport:
    taxa: Tuple[TaxonGof, ...]
    alpha: float
    family: Family

    @property
    def n_passed(self) -> int:
        return sum(1 for t in self.taxa if t.passed)

    def to_rows(self) -> List[Dict[str, Any]]:
        rows = []
        for t in self.taxa:
            if not t.cells:
                rows.append({"taxon": t.taxon, "cell": None, "lower": None, "upper": None, "observed": None,
                             "expected": None, "statistic": None, "df": None, "p_value": None, "passed": None,
                             "note": t.note})
            for c, ((lo, hi), o, e) in enumerate(zip(t.cells, t.observed, t.expected)):
                rows.append({
                    "taxon": t.taxon, "cell": c + 1, "lower": lo, "upper": hi, "observed": o, "expected": e,
                    "statistic": t.statistic, "df": t.df, "p_value": t.p_value, "passed": t.passed, "note": t.note,
                })
        return rows


def _mixture_cdf(k: float, eta: np.ndarray, bz: float, bl: float, family: Family) -> float:
    if k < 0:
        return 0.0
    if np.isinf(k):
        return 1.0
    return float(np.mean(counts.cdf(k, eta, bz, bl, family)))


def _smallest_count_reaching(target: float, eta, bz, bl, family, start: int) -> int:
    hi = max(start, 1)
    while _mixture_cdf(hi, eta, bz, bl, family) < target and hi < 2**40:
        hi *= 2
    lo = 1
    while lo < hi:
        mid = (lo + hi) // 2
        if _mixture_cdf(mid, eta, bz, bl, family) >= target:
            hi = mid
        else:
            lo = mid + 1
    return lo


def taxon_goodness_of_fit(fit: MediatorFit, data: Dataset, j: int, alpha: float = 0.05, n_cells: int = 6) -> TaxonGof:
    """
    Chi-square test for one taxon: a zero cell plus equal-probability cells over the positive range.

    Degrees of freedom are the merged cell count minus one minus the taxon-specific parameters of the fitted
    marginal count distribution (mean, zero mass, dispersion as the family has them), floored at 1. The
    exposure and C2 slopes shape the subject-level means but are not estimated from these cells.
    """
    theta = fit.theta_hat
    family = fit.family
    eta = theta.linear_predictor(data, delta=fit.delta_hat)[:, j]
    bz, bl = theta.beta_z0[j], theta.beta_l0[j]
    obs = data.mediators[:, j]
    n = data.n

    F0 = _mixture_cdf(0, eta, bz, bl, family)
    uppers: List[float] = [0]
    for q in range(1, n_cells - 1):
        target = F0 + q / (n_cells - 1) * (1.0 - F0)
        b = _smallest_count_reaching(target, eta, bz, bl, family, int(obs.max()) if obs.max() > 0 else 1)
        if b > uppers[-1]:
            uppers.append(b)
    uppers.append(np.inf)

    cells = []
    lower = 0
    for up in uppers:
        cells.append([lower, up])
        lower = up + 1 if np.isfinite(up) else lower

    def cell_stats(lo, hi):
        o = int(np.sum((obs >= lo) & (obs <= hi)))
        e = n * (_mixture_cdf(hi, eta, bz, bl, family) - _mixture_cdf(lo - 1, eta, bz, bl, family))
        return o, e

    stats_ = [cell_stats(lo, hi) for lo, hi in cells]
    # Merge cells with expected count below 5 into their right neighbour
    c = 0
    while c < len(cells) - 1:
        if stats_[c][1] < 5:
            cells[c + 1][0] = cells[c][0]
            del cells[c]
            del stats_[c]
            stats_[c] = cell_stats(*cells[c])
        else:
            c += 1
    if len(cells) > 1 and stats_[-1][1] < 5:
        cells[-2][1] = cells[-1][1]
        del cells[-1]
        del stats_[-1]
        stats_[-1] = cell_stats(*cells[-1])

    name = data.mediator_names[j]
    if len(cells) < 3:
        raise DegenerateCells(f"Taxon {name}: only {len(cells)} cell(s) with expected count >= 5")

    observed = np.array([o for o, _ in stats_], dtype=float)
    expected = np.array([e for _, e in stats_], dtype=float)
    statistic = float(np.sum((observed - expected) ** 2 / expected))
    df = max(len(cells) - 1 - family.n_taxon_shape_params(), 1)
    p_value = float(stats.chi2.sf(statistic, df))
    return TaxonGof(
        taxon=name,
        cells=tuple((int(lo), int(hi) if np.isfinite(hi) else None) for lo, hi in cells),
        observed=tuple(int(o) for o in observed),
        expected=tuple(float(e) for e in expected),
        statistic=statistic,
        df=df,
        p_value=p_value,
        passed=p_value >= alpha,
    )


def goodness_of_fit(fit: MediatorFit, data: Dataset, alpha: float = 0.05, strict: bool = True) -> GofReport:
    """
    Six-cell chi-square goodness of fit per taxon.

    With ``strict`` a degenerate taxon raises DegenerateCells; otherwise it is reported with a note.
    """
    results = []
    for j in range(data.p):
        try:
            results.append(taxon_goodness_of_fit(fit, data, j, alpha))
        except DegenerateCells as e:
            if strict:
                raise
            logger.warning(str(e))
            results.append(TaxonGof(data.mediator_names[j], (), (), (), None, None, None, None, note=str(e)))
    report = GofReport(taxa=tuple(results), alpha=alpha, family=fit.family)
    logger.info(f"Goodness of fit: {report.n_passed} of {len(results)} taxa passed at alpha={alpha}")
    return report
