"""Scikit-learn style front end for the full in-process pipeline."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .data import Basis, SiteData, ValidationError
from .pipeline import (
    PipelineConfig,
    aggregate_bundles,
    combine_broadcast,
    source_site_bundle,
    target_site_bundle,
)


def check_sites(sites) -> tuple[list[SiteData], list[SiteData]]:
    """Validate a collection of SiteData: unique ids, shared covariate
    dimension, at least one target site.  Returns (targets, sources)."""
    sites = list(sites)
    if not sites:
        raise ValidationError("no sites given")
    if not all(isinstance(s, SiteData) for s in sites):
        raise ValidationError("fit expects a sequence of SiteData")
    ids = [s.site_id for s in sites]
    if len(set(ids)) != len(ids):
        raise ValidationError("duplicate site_id")
    p = sites[0].p
    if any(s.p != p for s in sites):
        raise ValidationError("sites disagree on covariate dimension")
    targets = [s for s in sites if s.role == "target"]
    sources = [s for s in sites if s.role == "source"]
    if not targets:
        raise ValidationError("at least one target site required")
    return targets, sources


class FaceEstimator(BaseEstimator):
    """Federated adaptive TATE estimator over a list of SiteData.

    Parameters
    ----------
    lam : "cv", float, or None
        Penalty level; "cv" runs the distributed split selection, None uses
        the N^(1/3) default.
    lambda_grid : sequence of float, optional
        Grid for "cv"; defaults to the standard 11-point grid.
    alpha : float
        Confidence level is 1 - alpha.
    sigma_method : {"influence", "bootstrap"}
        Variance path for site summaries.
    bootstrap_reps : int
        Resamples per site when sigma_method="bootstrap".
    random_state : int
        Master seed for splits and bootstraps.
    """

    def __init__(self, lam="cv", lambda_grid=None, alpha=0.05,
                 sigma_method="influence", bootstrap_reps=200, random_state=0):
        self.lam = lam
        self.lambda_grid = lambda_grid
        self.alpha = alpha
        self.sigma_method = sigma_method
        self.bootstrap_reps = bootstrap_reps
        self.random_state = random_state

    def fit(self, sites, y=None):
        targets, sources = check_sites(sites)
        basis = Basis.identity(targets[0].p)
        cfg = PipelineConfig(
            sigma_method=self.sigma_method,
            bootstrap_reps=self.bootstrap_reps,
            cv=(self.lam == "cv"),
            seed=self.random_state,
        )
        target_bundles = [target_site_bundle(s, basis, cfg) for s in targets]
        broadcast = combine_broadcast(target_bundles)
        source_bundles = [source_site_bundle(s, broadcast, basis, cfg) for s in sources]
        result = aggregate_bundles(
            target_bundles, source_bundles,
            lambda_spec=self.lam, lambda_grid=self.lambda_grid, alpha=self.alpha,
        )
        self.basis_ = basis
        self.broadcast_ = broadcast
        self.result_ = result
        self.delta_face_ = result.delta_face
        self.v_hat_ = result.v_hat
        self.ci_ = result.ci
        self.eta_ = result.eta
        self.lambda_used_ = result.lambda_used
        self.selected_ = result.selected
        self.n_total_ = sum(s.n for s in targets) + sum(
            b.summary.n_k for b in source_bundles if b.summary.usable
        )
        self.target_bundles_ = target_bundles
        self.source_bundles_ = source_bundles
        return self

    def _check_fitted(self):
        if not hasattr(self, "result_"):
            raise NotFittedError("FaceEstimator is not fitted; call fit(sites) first")

    def predict(self, sites=None) -> float:
        """The fitted TATE point estimate (sites are ignored; the estimand is
        a population scalar, kept for interface compatibility)."""
        self._check_fitted()
        return self.delta_face_

    def confidence_interval(self) -> tuple[float, float]:
        self._check_fitted()
        return self.ci_

    def standard_error(self) -> float:
        self._check_fitted()
        return float(np.sqrt(self.v_hat_ / self.n_total_))
