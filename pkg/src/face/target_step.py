"""Step 1: target-site doubly robust components, covariate summary, covariance.

The plug-in and augmentation components follow the AIPW form; the stored
convention is big_delta_hat = m_hat + delta_hat.  Sigma estimation offers the
plug-in influence-function path (fast, default) and a within-site bootstrap
that refits all nuisance models per resample.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .data import Basis, SiteData, TargetSummary, ValidationError, psi_matrix
from .nuisance import (
    LinearFit,
    LogisticFit,
    fit_logistic,
    fit_outcome_regression,
    predict_mean,
)

PROPENSITY_BOUNDS = (0.01, 0.99)
MIN_BOOTSTRAP_REPS = 50


class TruncationWarning(UserWarning):
    """Fitted propensity fell outside [0.01, 0.99] and was truncated."""


@dataclass(frozen=True)
class InfluenceRows:
    """Per-row plug-in influence contributions (each column mean-centered)."""

    zeta: np.ndarray
    xi: np.ndarray
    psi_rows: np.ndarray


def truncated_propensity(ps: LogisticFit, design: np.ndarray, warn: bool = True) -> np.ndarray:
    """Propensity predictions clipped to [0.01, 0.99]; truncations are counted."""
    pi = predict_mean(ps, design)
    lo, hi = PROPENSITY_BOUNDS
    n_out = int(np.sum((pi < lo) | (pi > hi)))
    if n_out and warn:
        warnings.warn(
            f"{n_out} propensity value(s) outside [{lo}, {hi}] truncated",
            TruncationWarning,
            stacklevel=2,
        )
    return np.clip(pi, lo, hi)


def aipw_residual_terms(
    y: np.ndarray,
    a: np.ndarray,
    pi: np.ndarray,
    m1: np.ndarray,
    m0: np.ndarray,
) -> np.ndarray:
    """Per-row AIPW augmentation summand A/pi (y-m1) - (1-A)/(1-pi) (y-m0)."""
    return a / pi * (y - m1) - (1.0 - a) / (1.0 - pi) * (y - m0)


def _components(data: SiteData, ps, or1, or0, basis: Basis, warn: bool = True):
    design = psi_matrix(data.x, basis)
    pi = truncated_propensity(ps, design, warn=warn)
    m1 = predict_mean(or1, design)
    m0 = predict_mean(or0, design)
    r = aipw_residual_terms(data.y, data.a, pi, m1, m0)
    m_hat = float(np.mean(m1 - m0))
    delta_hat = float(np.mean(r))
    psi_bar = design.mean(axis=0)
    return m_hat, delta_hat, psi_bar, design, m1, m0, r


def influence_rows(data: SiteData, ps, or1, or0, basis: Basis) -> InfluenceRows:
    """Plug-in influence functions: zeta for the plug-in component, xi for the
    augmentation; fitted nuisances are treated as fixed (see target_sigma's
    bootstrap path for the refitting alternative)."""
    m_hat, delta_hat, psi_bar, design, m1, m0, r = _components(data, ps, or1, or0, basis, warn=False)
    zeta = m1 - m0 - m_hat
    xi = r - delta_hat
    return InfluenceRows(zeta=zeta, xi=xi, psi_rows=design - psi_bar)


def target_sigma(
    data: SiteData,
    ps,
    or1,
    or0,
    basis: Basis,
    method: str = "influence",
    bootstrap_reps: int = 200,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """(q+2)x(q+2) covariance of (plug-in, augmentation, covariate mean).

    "influence" forms n^-2 sum U_i U_i^T from the centered plug-in influence
    rows; "bootstrap" refits all nuisance models on within-site resamples and
    takes the empirical covariance of the recomputed components.
    """
    if method == "influence":
        rows = influence_rows(data, ps, or1, or0, basis)
        u = np.column_stack([rows.zeta, rows.xi, rows.psi_rows])
        return u.T @ u / data.n**2
    if method != "bootstrap":
        raise ValueError(f"unknown sigma method {method!r}")
    if bootstrap_reps < MIN_BOOTSTRAP_REPS:
        raise ValidationError(f"bootstrap_reps must be >= {MIN_BOOTSTRAP_REPS}")
    rng = np.random.default_rng(rng)
    stats = _bootstrap_target_components(data, basis, bootstrap_reps, rng)
    return np.cov(stats, rowvar=False, ddof=1)


def _bootstrap_target_components(
    data: SiteData, basis: Basis, reps: int, rng: np.random.Generator
) -> np.ndarray:
    design = psi_matrix(data.x, basis)
    outcome_type = data.outcome_type
    stats = []
    attempts = 0
    max_attempts = 10 * reps
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", TruncationWarning)
        while len(stats) < reps and attempts < max_attempts:
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
            except (ValidationError, np.linalg.LinAlgError, ValueError):
                continue
            pi = np.clip(predict_mean(ps_b, x_b), *PROPENSITY_BOUNDS)
            m1 = predict_mean(or1_b, x_b)
            m0 = predict_mean(or0_b, x_b)
            r = aipw_residual_terms(y_b, a_b, pi, m1, m0)
            stats.append(np.concatenate(([np.mean(m1 - m0), np.mean(r)], x_b.mean(axis=0))))
    if len(stats) < MIN_BOOTSTRAP_REPS:
        raise RuntimeError(f"bootstrap produced only {len(stats)} usable resamples")
    return np.asarray(stats)


def target_components(
    data: SiteData,
    ps,
    or1,
    or0,
    basis: Basis,
    sigma_method: str = "influence",
    bootstrap_reps: int = 200,
    rng: np.random.Generator | None = None,
) -> TargetSummary:
    """Full Step-1 summary for one target site given its fitted nuisances."""
    m_hat, delta_hat, psi_bar, *_ = _components(data, ps, or1, or0, basis)
    sigma = target_sigma(data, ps, or1, or0, basis, sigma_method, bootstrap_reps, rng)
    return TargetSummary(
        site_id=data.site_id,
        n_k=data.n,
        m_hat=m_hat,
        delta_hat=delta_hat,
        big_delta_hat=m_hat + delta_hat,
        psi_bar=psi_bar,
        sigma_hat=sigma,
    )


def fit_site_nuisances(data: SiteData, basis: Basis):
    """Fit the propensity score and both arm-specific outcome regressions."""
    design = psi_matrix(data.x, basis)
    ps = fit_logistic(data.a, design)
    or1 = fit_outcome_regression(data.y, design, np.flatnonzero(data.a == 1), data.outcome_type)
    or0 = fit_outcome_regression(data.y, design, np.flatnonzero(data.a == 0), data.outcome_type)
    return ps, or1, or0


def target_site_summary(
    data: SiteData,
    basis: Basis,
    sigma_method: str = "influence",
    bootstrap_reps: int = 200,
    rng: np.random.Generator | None = None,
) -> TargetSummary:
    """Fit nuisances and compute the Step-1 summary in one call."""
    ps, or1, or0 = fit_site_nuisances(data, basis)
    return target_components(data, ps, or1, or0, basis, sigma_method, bootstrap_reps, rng)


def combine_target_summaries(summaries: list[TargetSummary]) -> TargetSummary:
    """N_T-weighted combination across target sites; covariances add with
    (n_k/N_T)^2 weights, which is exact because the aggregation's h vector is
    site-independent up to that same scale."""
    if not summaries:
        raise ValidationError("at least one target summary required")
    ids = [s.site_id for s in summaries]
    if len(set(ids)) != len(ids):
        raise ValidationError("duplicate target site_id")
    q = summaries[0].q
    if any(s.q != q for s in summaries):
        raise ValidationError("target summaries disagree on basis dimension")
    n_total = sum(s.n_k for s in summaries)
    w = np.array([s.n_k / n_total for s in summaries])
    m_hat = float(sum(wk * s.m_hat for wk, s in zip(w, summaries)))
    delta_hat = float(sum(wk * s.delta_hat for wk, s in zip(w, summaries)))
    psi_bar = sum(wk * s.psi_bar for wk, s in zip(w, summaries))
    sigma = sum(wk**2 * s.sigma_hat for wk, s in zip(w, summaries))
    return TargetSummary(
        site_id="+".join(ids),
        n_k=n_total,
        m_hat=m_hat,
        delta_hat=delta_hat,
        big_delta_hat=m_hat + delta_hat,
        psi_bar=psi_bar,
        sigma_hat=sigma,
    )
