"""Step 2: density-ratio-weighted augmentation from a source site.

Everything here sees the target only through its broadcast covariate mean;
no function takes target rows.  A site whose density-ratio fit fails to
converge produces a summary flagged unusable, and aggregation proceeds
without it.
"""

from __future__ import annotations

import logging
import warnings

import numpy as np

from .data import Basis, SiteData, SourceSummary, ValidationError, psi_matrix
from .nuisance import (
    DensityRatioFit,
    density_ratio_weights,
    fit_density_ratio,
    fit_logistic,
    fit_outcome_regression,
    predict_mean,
)
from .target_step import (
    MIN_BOOTSTRAP_REPS,
    PROPENSITY_BOUNDS,
    TruncationWarning,
    aipw_residual_terms,
    truncated_propensity,
)

logger = logging.getLogger(__name__)


def _weighted_terms(data: SiteData, ps, or1, or0, dr: DensityRatioFit, basis: Basis, warn=True):
    design = psi_matrix(data.x, basis)
    pi = truncated_propensity(ps, design, warn=warn)
    m1 = predict_mean(or1, design)
    m0 = predict_mean(or0, design)
    r = aipw_residual_terms(data.y, data.a, pi, m1, m0)
    w = density_ratio_weights(dr, design)
    return design, r, w


def source_augmentation(data: SiteData, ps, or1, or0, dr: DensityRatioFit, basis: Basis) -> float:
    """Transported augmentation: mean of w_i times the AIPW residual term."""
    _, r, w = _weighted_terms(data, ps, or1, or0, dr, basis)
    return float(np.mean(w * r))


def source_d_hat(data: SiteData, ps, or1, or0, dr: DensityRatioFit, basis: Basis) -> np.ndarray:
    """Partial derivative of the augmentation w.r.t. the broadcast mean:
    -(mean w r psi) (mean w psi psi^T)^-1, a q-vector."""
    design, r, w = _weighted_terms(data, ps, or1, or0, dr, basis, warn=False)
    n = data.n
    gram = design.T @ (design * w[:, None]) / n
    moment = design.T @ (w * r) / n
    try:
        return -np.linalg.solve(gram, moment)
    except np.linalg.LinAlgError:
        raise ValidationError("weighted Gram matrix singular; site excluded") from None


def source_sigma2(
    data: SiteData,
    ps,
    or1,
    or0,
    dr: DensityRatioFit,
    basis: Basis,
    psi_bar_target: np.ndarray | None = None,
    method: str = "influence",
    bootstrap_reps: int = 200,
    rng: np.random.Generator | None = None,
) -> float:
    """Conditional variance estimate for the augmentation given target data.

    "influence" uses the plug-in xi_i = w_i r_i - delta and returns
    mean(xi^2)/n; "bootstrap" resamples site rows holding the broadcast mean
    fixed and refits the propensity, outcome, and density-ratio models per
    resample (psi_bar_target required).
    """
    if method == "influence":
        _, r, w = _weighted_terms(data, ps, or1, or0, dr, basis, warn=False)
        xi = w * r - np.mean(w * r)
        return float(np.mean(xi**2) / data.n)
    if method != "bootstrap":
        raise ValueError(f"unknown sigma method {method!r}")
    if bootstrap_reps < MIN_BOOTSTRAP_REPS:
        raise ValidationError(f"bootstrap_reps must be >= {MIN_BOOTSTRAP_REPS}")
    if psi_bar_target is None:
        raise ValidationError("bootstrap sigma2 requires psi_bar_target")
    rng = np.random.default_rng(rng)
    deltas = _bootstrap_augmentations(data, basis, np.asarray(psi_bar_target, float), bootstrap_reps, rng, dr.gamma)
    return float(np.var(deltas, ddof=1))


def _bootstrap_augmentations(
    data: SiteData,
    basis: Basis,
    psi_bar_target: np.ndarray,
    reps: int,
    rng: np.random.Generator,
    gamma_init: np.ndarray,
) -> np.ndarray:
    design = psi_matrix(data.x, basis)
    outcome_type = data.outcome_type
    out = []
    attempts = 0
    max_attempts = 10 * reps
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", TruncationWarning)
        while len(out) < reps and attempts < max_attempts:
            attempts += 1
            idx = rng.integers(0, data.n, size=data.n)
            a_b = data.a[idx]
            if a_b.sum() in (0, data.n):
                continue
            y_b, x_b = data.y[idx], design[idx]
            try:
                ps_b = fit_logistic(a_b, x_b)
                or1_b = fit_outcome_regression(y_b, x_b, np.flatnonzero(a_b == 1), outcome_type)
                or0_b = fit_outcome_regression(y_b, x_b, np.flatnonzero(a_b == 0), outcome_type)
                dr_b = fit_density_ratio(x_b, psi_bar_target, init=gamma_init)
            except (ValidationError, np.linalg.LinAlgError, ValueError):
                continue
            if not dr_b.converged:
                continue
            pi = np.clip(predict_mean(ps_b, x_b), *PROPENSITY_BOUNDS)
            m1 = predict_mean(or1_b, x_b)
            m0 = predict_mean(or0_b, x_b)
            r = aipw_residual_terms(y_b, a_b, pi, m1, m0)
            out.append(np.mean(np.exp(x_b @ dr_b.gamma) * r))
    if len(out) < MIN_BOOTSTRAP_REPS:
        raise RuntimeError(f"bootstrap produced only {len(out)} usable resamples")
    return np.asarray(out)


def unusable_source_summary(site_id: str, n_k: int, q: int) -> SourceSummary:
    """Placeholder emitted when a site cannot contribute (values are ignored)."""
    return SourceSummary(site_id=site_id, n_k=n_k, delta_hat=0.0, sigma2_hat=0.0,
                         d_hat=np.zeros(q), usable=False)


def source_site_summary(
    data: SiteData,
    psi_bar_target: np.ndarray,
    basis: Basis,
    sigma_method: str = "influence",
    bootstrap_reps: int = 200,
    rng: np.random.Generator | None = None,
) -> SourceSummary:
    """Fit all source-side models against the broadcast mean and summarize.

    Density-ratio non-convergence (or a singular weighted Gram matrix) yields
    an unusable summary instead of raising, per the fail-safe overlap policy.
    """
    design = psi_matrix(data.x, basis)
    dr = fit_density_ratio(design, np.asarray(psi_bar_target, float))
    if not dr.converged:
        logger.warning("site %s: density ratio did not converge; marked unusable", data.site_id)
        return unusable_source_summary(data.site_id, data.n, basis.q)
    ps = fit_logistic(data.a, design)
    or1 = fit_outcome_regression(data.y, design, np.flatnonzero(data.a == 1), data.outcome_type)
    or0 = fit_outcome_regression(data.y, design, np.flatnonzero(data.a == 0), data.outcome_type)
    delta = source_augmentation(data, ps, or1, or0, dr, basis)
    try:
        d_hat = source_d_hat(data, ps, or1, or0, dr, basis)
    except ValidationError:
        logger.warning("site %s: singular weighted Gram matrix; marked unusable", data.site_id)
        return unusable_source_summary(data.site_id, data.n, basis.q)
    sigma2 = source_sigma2(
        data, ps, or1, or0, dr, basis,
        psi_bar_target=psi_bar_target, method=sigma_method,
        bootstrap_reps=bootstrap_reps, rng=rng,
    )
    return SourceSummary(
        site_id=data.site_id, n_k=data.n, delta_hat=delta,
        sigma2_hat=sigma2, d_hat=d_hat,
    )
