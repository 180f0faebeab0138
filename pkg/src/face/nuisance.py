"""Per-site nuisance models: propensity score, outcome regression, density ratio.

Logistic and density-ratio fits use damped Newton (step halving until the
objective decreases); both objectives are convex and low-dimensional.
Tolerance is 1e-8 on the gradient infinity-norm, 100 iterations max.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import ValidationError

SCORE_TOL = 1e-8
MAX_ITER = 100
_MAX_HALVINGS = 40


class RankDeficiencyError(ValueError):
    """Design matrix does not have full column rank."""


@dataclass(frozen=True)
class LogisticFit:
    coef: np.ndarray
    converged: bool
    iterations: int
    score_norm: float


@dataclass(frozen=True)
class LinearFit:
    coef: np.ndarray
    residual_variance: float


@dataclass(frozen=True)
class DensityRatioFit:
    gamma: np.ndarray
    moment_residual_norm: float
    converged: bool


def expit(z: np.ndarray) -> np.ndarray:
    """Numerically stable logistic link 1 / (1 + exp(-z))."""
    out = np.empty_like(z, dtype=float)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _check_rank(design: np.ndarray) -> None:
    if np.linalg.matrix_rank(design) < design.shape[1]:
        raise RankDeficiencyError(
            f"design has rank < {design.shape[1]} (collinear or constant columns)"
        )


def _apply_subset(arrays, subset):
    if subset is None:
        return arrays
    subset = np.asarray(subset)
    return tuple(a[subset] for a in arrays)


def fit_logistic(
    y: np.ndarray,
    design: np.ndarray,
    subset: np.ndarray | None = None,
    max_iter: int = MAX_ITER,
    tol: float = SCORE_TOL,
    init: np.ndarray | None = None,
) -> LogisticFit:
    """Logistic regression by damped Newton on the mean log-loss.

    ``design`` must already contain the intercept column.  Separation leads to
    a non-converged flag rather than an exception; rank deficiency raises.
    """
    y, design = _apply_subset((np.asarray(y, float), np.asarray(design, float)), subset)
    n, q = design.shape
    classes = np.unique(y)
    if not np.all(np.isin(classes, (0.0, 1.0))) or classes.size < 2:
        raise ValidationError("logistic fit requires both classes present in subset")
    _check_rank(design)

    coef = np.zeros(q) if init is None else np.asarray(init, float).copy()
    lp = design @ coef
    loss = float(np.mean(np.logaddexp(0.0, lp) - y * lp))
    score_norm = np.inf
    iterations = 0
    for iterations in range(1, max_iter + 1):
        prob = expit(lp)
        grad = design.T @ (y - prob) / n
        score_norm = float(np.abs(grad).max())
        if score_norm <= tol:
            return LogisticFit(coef, True, iterations - 1, score_norm)
        w = prob * (1.0 - prob)
        hess = design.T @ (design * w[:, None]) / n
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            # Weights collapsed (separation); stop without converging.
            return LogisticFit(coef, False, iterations, score_norm)
        # Step halving on the convex loss.
        scale = 1.0
        for _ in range(_MAX_HALVINGS):
            trial = coef + scale * step
            lp_trial = design @ trial
            loss_trial = float(np.mean(np.logaddexp(0.0, lp_trial) - y * lp_trial))
            if loss_trial <= loss:
                coef, lp, loss = trial, lp_trial, loss_trial
                break
            scale *= 0.5
        else:
            return LogisticFit(coef, False, iterations, score_norm)
    prob = expit(lp)
    score_norm = float(np.abs(design.T @ (y - prob) / n).max())
    return LogisticFit(coef, score_norm <= tol, max_iter, score_norm)


def fit_linear(
    y: np.ndarray,
    design: np.ndarray,
    subset: np.ndarray | None = None,
) -> LinearFit:
    """Ordinary least squares; raises on rank-deficient designs."""
    y, design = _apply_subset((np.asarray(y, float), np.asarray(design, float)), subset)
    n, q = design.shape
    coef, _, rank, _ = np.linalg.lstsq(design, y, rcond=None)
    if rank < q:
        raise RankDeficiencyError(f"design has rank {rank} < {q}")
    resid = y - design @ coef
    dof = max(n - q, 1)
    return LinearFit(coef, float(resid @ resid / dof))


def fit_density_ratio(
    psi_mat: np.ndarray,
    psi_bar_target: np.ndarray,
    max_iter: int = MAX_ITER,
    tol: float = SCORE_TOL,
    init: np.ndarray | None = None,
) -> DensityRatioFit:
    """Exponential-tilt density ratio by damped Newton on the convex objective
    mean(exp(psi @ gamma)) - gamma @ psi_bar_target.

    At the optimum the moment condition mean(w_i psi_i) = psi_bar_target holds;
    the returned ``moment_residual_norm`` is its infinity-norm.  A target mean
    outside the convex hull of the site's psi values leaves the fit flagged as
    non-converged (downstream excludes the site).
    """
    psi_mat = np.asarray(psi_mat, float)
    psi_bar_target = np.asarray(psi_bar_target, float).ravel()
    n, q = psi_mat.shape
    if psi_bar_target.shape[0] != q:
        raise ValidationError("psi_bar_target dimension does not match basis")
    _check_rank(psi_mat)

    gamma = np.zeros(q) if init is None else np.asarray(init, float).copy()

    def objective(lp: np.ndarray, g: np.ndarray) -> float:
        with np.errstate(over="ignore"):
            return float(np.mean(np.exp(lp)) - g @ psi_bar_target)

    lp = psi_mat @ gamma
    obj = objective(lp, gamma)
    residual_norm = np.inf
    for _ in range(max_iter):
        with np.errstate(over="ignore"):
            w = np.exp(lp)
        if not np.all(np.isfinite(w)):
            return DensityRatioFit(gamma, residual_norm, False)
        moment = psi_mat.T @ w / n
        residual = moment - psi_bar_target
        residual_norm = float(np.abs(residual).max())
        if residual_norm <= tol:
            return DensityRatioFit(gamma, residual_norm, True)
        hess = psi_mat.T @ (psi_mat * w[:, None]) / n
        try:
            step = np.linalg.solve(hess, residual)
        except np.linalg.LinAlgError:
            return DensityRatioFit(gamma, residual_norm, False)
        scale = 1.0
        for _ in range(_MAX_HALVINGS):
            trial = gamma - scale * step
            lp_trial = psi_mat @ trial
            obj_trial = objective(lp_trial, trial)
            if np.isfinite(obj_trial) and obj_trial <= obj:
                gamma, lp, obj = trial, lp_trial, obj_trial
                break
            scale *= 0.5
        else:
            return DensityRatioFit(gamma, residual_norm, False)
    with np.errstate(over="ignore"):
        w = np.exp(psi_mat @ gamma)
    residual_norm = float(np.abs(psi_mat.T @ w / n - psi_bar_target).max())
    return DensityRatioFit(gamma, residual_norm, residual_norm <= tol)


def density_ratio_weights(fit: DensityRatioFit, psi_mat: np.ndarray) -> np.ndarray:
    """Evaluate w_i = exp(gamma @ psi_i); all positive by construction."""
    return np.exp(np.asarray(psi_mat, float) @ fit.gamma)


def predict_mean(fit, design: np.ndarray) -> np.ndarray:
    """Fitted conditional mean under either outcome-regression family."""
    design = np.asarray(design, float)
    if isinstance(fit, LogisticFit):
        return expit(design @ fit.coef)
    if isinstance(fit, LinearFit):
        return design @ fit.coef
    raise TypeError(f"unsupported fit type {type(fit).__name__}")


def fit_outcome_regression(
    y: np.ndarray,
    design: np.ndarray,
    subset: np.ndarray,
    outcome_type: str,
):
    """Dispatch on the outcome type: logistic for binary, OLS for continuous."""
    if outcome_type == "binary":
        return fit_logistic(y, design, subset=subset)
    return fit_linear(y, design, subset=subset)
