"""Step 3: adaptive L1-penalized aggregation of target and source summaries.

The objective N [ sum_k eta_k^2 sigma2_k + h(eta)^T Sigma h(eta) ]
+ lambda sum_k w_k |eta_k| is quadratic in each coordinate, so cyclic
coordinate descent with exact soft-threshold updates solves it; a KKT
residual is checked post hoc.  Penalty weights are
w_k = (Delta_hat_k - Delta_hat_target)^2 = (delta_k - delta_target)^2.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from .data import SourceSummary, TargetSummary, ValidationError

DEFAULT_LAMBDA_GRID = (0.0, 1e-4, 1e-3, 1e-2, 0.1, 0.25, 0.5, 1.0, 2.0, 5.0, 10.0)
COORD_TOL = 1e-10
MAX_SWEEPS = 10_000
KKT_TOL = 1e-6


@dataclass(frozen=True)
class AggregationProblem:
    """Inputs to the leading-site solve: combined target summary, usable
    source summaries, penalty level, and the total sample size N."""

    target: TargetSummary
    sources: tuple[SourceSummary, ...]
    lam: float
    n_total: int

    def __post_init__(self) -> None:
        if self.lam < 0:
            raise ValidationError("lambda must be nonnegative")
        expected = self.target.n_k + sum(s.n_k for s in self.sources)
        if self.n_total != expected:
            raise ValidationError(f"n_total {self.n_total} != N_T + sum n_k = {expected}")
        if any(not s.usable for s in self.sources):
            raise ValidationError("AggregationProblem sources must all be usable")


@dataclass
class AggregationResult:
    eta: np.ndarray
    delta_face: float
    v_hat: float
    ci: tuple[float, float]
    lambda_used: float
    selected: set[str]
    objective_trace: list[float]
    site_ids: list[str] = field(default_factory=list)
    kkt_residual: float = 0.0
    sweeps: int = 0
    lambda_curve: list[tuple[float, float]] | None = None

    def to_dict(self) -> dict:
        out = {
            "eta": {sid: float(e) for sid, e in zip(self.site_ids, self.eta)},
            "delta_face": self.delta_face,
            "v_hat": self.v_hat,
            "ci": [self.ci[0], self.ci[1]],
            "lambda_used": self.lambda_used,
            "selected": sorted(self.selected),
            "kkt_residual": self.kkt_residual,
            "sweeps": self.sweeps,
            "objective_trace": self.objective_trace,
        }
        if self.lambda_curve is not None:
            out["lambda_curve"] = [[lam, loss] for lam, loss in self.lambda_curve]
        return out


def _repaired_sigma(sigma: np.ndarray) -> np.ndarray:
    """Symmetrize and floor eigenvalues at zero, warning when repair bites."""
    sym = (sigma + sigma.T) / 2.0
    vals, vecs = np.linalg.eigh(sym)
    if vals.min() < 0:
        floor = -vals.min()
        scale = max(float(np.abs(vals).max()), 1.0)
        if floor > 1e-10 * scale:
            warnings.warn(f"target covariance repaired: eigenvalue floor {floor:.3e}", UserWarning)
        sym = vecs @ np.diag(np.maximum(vals, 0.0)) @ vecs.T
    return sym


def _quadratic_parts(target: TargetSummary, sources, n_total: int):
    """Quadratic objective eta^T A eta + b^T eta + c with
    A = N (diag(sigma2) + G^T S G), b = 2 N G^T S u, c = N u^T S u, where
    u = (1, 1, 0..0) and column k of G is (0, -1, d_k^T)^T."""
    q = target.q
    k = len(sources)
    s_mat = _repaired_sigma(target.sigma_hat)
    u = np.zeros(q + 2)
    u[0] = u[1] = 1.0
    g = np.zeros((q + 2, k))
    if k:
        g[1, :] = -1.0
        g[2:, :] = np.column_stack([s.d_hat for s in sources])
    sigma2 = np.array([s.sigma2_hat for s in sources])
    a_mat = n_total * (np.diag(sigma2) + g.T @ s_mat @ g)
    b_vec = 2.0 * n_total * (g.T @ (s_mat @ u))
    c_val = float(n_total * (u @ s_mat @ u))
    return a_mat, b_vec, c_val


def penalty_weights(target: TargetSummary, sources) -> np.ndarray:
    """w_k = (Delta_hat_k - Delta_hat_target)^2; the M-hat anchor cancels."""
    return np.array([(s.delta_hat - target.delta_hat) ** 2 for s in sources])


def _objective(eta, a_mat, b_vec, c_val, lam, w) -> float:
    return float(eta @ a_mat @ eta + b_vec @ eta + c_val + lam * (w @ np.abs(eta)))


def _soft(z: float, thresh: float) -> float:
    return np.sign(z) * max(abs(z) - thresh, 0.0)


def _coordinate_descent(a_mat, b_vec, c_val, lam, w):
    k = b_vec.shape[0]
    eta = np.zeros(k)
    trace = [_objective(eta, a_mat, b_vec, c_val, lam, w)]
    sweeps = 0
    for sweeps in range(1, MAX_SWEEPS + 1):
        max_change = 0.0
        for j in range(k):
            ajj = a_mat[j, j]
            if ajj <= 0.0:
                new = 0.0
            else:
                partial = b_vec[j] + 2.0 * (a_mat[j] @ eta - ajj * eta[j])
                new = _soft(-partial, lam * w[j]) / (2.0 * ajj)
            max_change = max(max_change, abs(new - eta[j]))
            eta[j] = new
        trace.append(_objective(eta, a_mat, b_vec, c_val, lam, w))
        if max_change <= COORD_TOL:
            break
    grad = 2.0 * a_mat @ eta + b_vec
    kkt = 0.0
    for j in range(k):
        if eta[j] != 0.0:
            kkt = max(kkt, abs(grad[j] + lam * w[j] * np.sign(eta[j])))
        else:
            kkt = max(kkt, max(abs(grad[j]) - lam * w[j], 0.0))
    return eta, trace, float(kkt), sweeps


def face_estimate(eta: np.ndarray, target: TargetSummary, sources) -> float:
    """FACE point estimate M + (1 - sum eta) delta_target + sum eta_k delta_k."""
    eta = np.asarray(eta, float)
    delta_sources = np.array([s.delta_hat for s in sources]) if len(sources) else np.zeros(0)
    return float(
        target.m_hat + (1.0 - eta.sum()) * target.delta_hat + eta @ delta_sources
    )


def face_estimate_convex_form(eta: np.ndarray, target: TargetSummary, sources) -> float:
    """Equivalent first form of the combination: (1 - sum eta) Delta_target
    + sum eta_k (M + delta_k); used to cross-check the algebraic identity."""
    eta = np.asarray(eta, float)
    big_delta_sources = np.array([target.m_hat + s.delta_hat for s in sources]) if len(sources) else np.zeros(0)
    return float((1.0 - eta.sum()) * target.big_delta_hat + eta @ big_delta_sources)


def face_variance(eta: np.ndarray, target: TargetSummary, sources, n_total: int) -> float:
    """Stabilized variance N [ sum eta_k^2 sigma2_k + h^T Sigma h ]."""
    eta = np.asarray(eta, float)
    a_mat, b_vec, c_val = _quadratic_parts(target, sources, n_total)
    return float(max(eta @ a_mat @ eta + b_vec @ eta + c_val, 0.0))


def face_ci(delta_face: float, v_hat: float, n_total: int, alpha: float = 0.05):
    """Normal interval delta +- z_{alpha/2} sqrt(V/N); alpha=1 degenerates."""
    if not 0.0 < alpha <= 1.0:
        raise ValidationError("alpha must be in (0, 1]")
    if alpha == 1.0:
        return (delta_face, delta_face)
    half = float(norm.ppf(1.0 - alpha / 2.0) * np.sqrt(v_hat / n_total))
    return (delta_face - half, delta_face + half)


def solve_eta(problem: AggregationProblem, alpha: float = 0.05) -> AggregationResult:
    """Coordinate-descent solve of the penalized aggregation, then the FACE
    point estimate, variance, and confidence interval at the solution."""
    sources = problem.sources
    target = problem.target
    a_mat, b_vec, c_val = _quadratic_parts(target, sources, problem.n_total)
    w = penalty_weights(target, sources)
    eta, trace, kkt, sweeps = _coordinate_descent(a_mat, b_vec, c_val, problem.lam, w)
    delta = face_estimate(eta, target, sources)
    v_hat = float(max(eta @ a_mat @ eta + b_vec @ eta + c_val, 0.0))
    ci = face_ci(delta, v_hat, problem.n_total, alpha)
    return AggregationResult(
        eta=eta,
        delta_face=delta,
        v_hat=v_hat,
        ci=ci,
        lambda_used=problem.lam,
        selected={s.site_id for s, e in zip(sources, eta) if e != 0.0},
        objective_trace=trace,
        site_ids=[s.site_id for s in sources],
        kkt_residual=kkt,
        sweeps=sweeps,
    )


def default_lambda(n_total: int) -> float:
    """N^(1/3), inside the theoretical window N^nu with nu in (0, 1/2)."""
    return float(n_total) ** (1.0 / 3.0)


@dataclass(frozen=True)
class SplitSummaries:
    """One half of the distributed cross-validation split."""

    target: TargetSummary
    sources: tuple[SourceSummary, ...]

    @property
    def n_total(self) -> int:
        return self.target.n_k + sum(s.n_k for s in self.sources)


@dataclass
class LambdaSelection:
    lambda_opt: float
    curve: list[tuple[float, float]]


def select_lambda(train: SplitSummaries, validation: SplitSummaries, grid) -> LambdaSelection:
    """Distributed cross-validation: solve eta on training-half summaries per
    lambda, score with the unpenalized quadratic loss on validation-half
    summaries, and return the minimizer (ties go to the smaller lambda)."""
    grid = sorted(float(g) for g in grid)
    if not grid:
        raise ValidationError("lambda grid is empty")
    if any(g < 0 for g in grid):
        raise ValidationError("lambda grid values must be nonnegative")
    train_ids = {s.site_id for s in train.sources if s.usable}
    val_ids = {s.site_id for s in validation.sources if s.usable}
    common = train_ids & val_ids
    tr_sources = tuple(s for s in train.sources if s.site_id in common)
    va_by_id = {s.site_id: s for s in validation.sources}
    va_sources = tuple(va_by_id[s.site_id] for s in tr_sources)

    a_tr, b_tr, c_tr = _quadratic_parts(train.target, tr_sources, train.n_total)
    w_tr = penalty_weights(train.target, tr_sources)
    a_va, b_va, c_va = _quadratic_parts(validation.target, va_sources, validation.n_total)

    best_lam, best_loss = grid[0], np.inf
    curve = []
    for lam in grid:
        eta, _, _, _ = _coordinate_descent(a_tr, b_tr, c_tr, lam, w_tr)
        loss = float(eta @ a_va @ eta + b_va @ eta + c_va)
        curve.append((lam, loss))
        if loss < best_loss:
            best_lam, best_loss = lam, loss
    return LambdaSelection(lambda_opt=best_lam, curve=curve)
