"""Site-level orchestration shared by the in-process estimator, the
file-mediated federation layer, and the simulation harness.

Each site produces a bundle holding its full summary plus train/validation
half summaries for the distributed lambda cross-validation; the broadcast
carries the target covariate means for all three.  Every random element
(splits, bootstraps) is seeded from (master seed, sha256(site_id)) so a
federated run and an in-process run agree bit for bit.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .aggregate import (
    AggregationProblem,
    AggregationResult,
    LambdaSelection,
    SplitSummaries,
    default_lambda,
    select_lambda,
    solve_eta,
)
from .data import Basis, SiteData, SourceSummary, TargetSummary, ValidationError
from .source_step import source_site_summary, unusable_source_summary
from .target_step import combine_target_summaries, target_site_summary


@dataclass(frozen=True)
class PipelineConfig:
    sigma_method: str = "influence"
    bootstrap_reps: int = 200
    cv: bool = True
    seed: int = 0


def _site_rng(seed: int, site_id: str, purpose: str) -> np.random.Generator:
    digest = hashlib.sha256(f"{seed}:{site_id}:{purpose}".encode()).digest()
    return np.random.default_rng(np.random.SeedSequence(int.from_bytes(digest[:8], "big")))


def split_indices(data: SiteData, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic 50/50 split, stratified by treatment arm so both halves
    keep both arms whenever the site has at least two units per arm."""
    rng = _site_rng(seed, data.site_id, "split")
    train_parts, val_parts = [], []
    for arm in (1, 0):
        idx = np.flatnonzero(data.a == arm)
        idx = idx[rng.permutation(idx.shape[0])]
        half = (idx.shape[0] + 1) // 2
        train_parts.append(idx[:half])
        val_parts.append(idx[half:])
    return np.sort(np.concatenate(train_parts)), np.sort(np.concatenate(val_parts))


@dataclass(frozen=True)
class TargetBundle:
    summary: TargetSummary
    train: TargetSummary | None = None
    validation: TargetSummary | None = None


@dataclass(frozen=True)
class SourceBundle:
    summary: SourceSummary
    train: SourceSummary | None = None
    validation: SourceSummary | None = None


@dataclass(frozen=True)
class Broadcast:
    """Target covariate means (full and CV halves) with their sample sizes."""

    psi_bar: np.ndarray
    n: int
    train_psi_bar: np.ndarray | None = None
    train_n: int = 0
    val_psi_bar: np.ndarray | None = None
    val_n: int = 0

    def to_dict(self) -> dict:
        out = {"psi_bar": np.asarray(self.psi_bar).tolist(), "n": self.n}
        if self.train_psi_bar is not None:
            out["train"] = {"psi_bar": np.asarray(self.train_psi_bar).tolist(), "n": self.train_n}
            out["validation"] = {"psi_bar": np.asarray(self.val_psi_bar).tolist(), "n": self.val_n}
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "Broadcast":
        kwargs = {"psi_bar": np.asarray(d["psi_bar"], float), "n": int(d["n"])}
        if "train" in d:
            kwargs.update(
                train_psi_bar=np.asarray(d["train"]["psi_bar"], float),
                train_n=int(d["train"]["n"]),
                val_psi_bar=np.asarray(d["validation"]["psi_bar"], float),
                val_n=int(d["validation"]["n"]),
            )
        return cls(**kwargs)


def target_site_bundle(data: SiteData, basis: Basis, cfg: PipelineConfig) -> TargetBundle:
    """Step 1 for one target site: full summary plus CV half summaries."""
    rng = _site_rng(cfg.seed, data.site_id, "target-boot")
    summary = target_site_summary(
        data, basis, sigma_method=cfg.sigma_method, bootstrap_reps=cfg.bootstrap_reps, rng=rng
    )
    if not cfg.cv:
        return TargetBundle(summary=summary)
    train_idx, val_idx = split_indices(data, cfg.seed)
    halves = []
    for name, idx in (("train", train_idx), ("validation", val_idx)):
        try:
            half = target_site_summary(data.subset(idx), basis, sigma_method="influence")
        except (ValidationError, ValueError) as exc:
            raise ValidationError(
                f"site {data.site_id}: cannot compute {name} half summary ({exc})"
            ) from exc
        halves.append(half)
    return TargetBundle(summary=summary, train=halves[0], validation=halves[1])


def combine_broadcast(bundles: list[TargetBundle]) -> Broadcast:
    """N_T-weighted covariate means across target sites, full and per half."""
    full = combine_target_summaries([b.summary for b in bundles])
    if all(b.train is not None for b in bundles):
        train = combine_target_summaries([b.train for b in bundles])
        val = combine_target_summaries([b.validation for b in bundles])
        return Broadcast(
            psi_bar=full.psi_bar, n=full.n_k,
            train_psi_bar=train.psi_bar, train_n=train.n_k,
            val_psi_bar=val.psi_bar, val_n=val.n_k,
        )
    return Broadcast(psi_bar=full.psi_bar, n=full.n_k)


def source_site_bundle(data: SiteData, broadcast: Broadcast, basis: Basis,
                       cfg: PipelineConfig) -> SourceBundle:
    """Step 2 for one source site against the broadcast; each half summary
    degrades to unusable independently of the full one."""
    rng = _site_rng(cfg.seed, data.site_id, "source-boot")
    summary = source_site_summary(
        data, broadcast.psi_bar, basis,
        sigma_method=cfg.sigma_method, bootstrap_reps=cfg.bootstrap_reps, rng=rng,
    )
    if not cfg.cv or broadcast.train_psi_bar is None:
        return SourceBundle(summary=summary)
    train_idx, val_idx = split_indices(data, cfg.seed)
    halves = []
    for idx, psi_bar_half in ((train_idx, broadcast.train_psi_bar), (val_idx, broadcast.val_psi_bar)):
        try:
            half = source_site_summary(data.subset(idx), psi_bar_half, basis, sigma_method="influence")
        except (ValidationError, ValueError):
            half = unusable_source_summary(data.site_id, max(len(idx), 1), basis.q)
        halves.append(half)
    return SourceBundle(summary=summary, train=halves[0], validation=halves[1])


def resolve_lambda(
    lambda_spec,
    target_bundles: list[TargetBundle],
    source_bundles: list[SourceBundle],
    lambda_grid=None,
) -> tuple[float, LambdaSelection | None]:
    """Turn a lambda request ("cv", a number, or None) into a value.

    None falls back to N^(1/3).  "cv" runs the distributed split selection and
    requires the bundles to carry half summaries.
    """
    from .aggregate import DEFAULT_LAMBDA_GRID

    usable = [b.summary for b in source_bundles if b.summary.usable]
    n_total = sum(b.summary.n_k for b in target_bundles) + sum(s.n_k for s in usable)
    if lambda_spec is None:
        return default_lambda(n_total), None
    if isinstance(lambda_spec, (int, float)):
        return float(lambda_spec), None
    if lambda_spec != "cv":
        raise ValidationError(f"lambda must be 'cv' or a nonnegative number, got {lambda_spec!r}")
    if any(b.train is None for b in target_bundles):
        raise ValidationError("cv lambda selection requires half summaries on every target site")
    grid = DEFAULT_LAMBDA_GRID if lambda_grid is None else lambda_grid
    train = SplitSummaries(
        target=combine_target_summaries([b.train for b in target_bundles]),
        sources=tuple(b.train for b in source_bundles if b.train is not None),
    )
    validation = SplitSummaries(
        target=combine_target_summaries([b.validation for b in target_bundles]),
        sources=tuple(b.validation for b in source_bundles if b.validation is not None),
    )
    selection = select_lambda(train, validation, grid)
    return selection.lambda_opt, selection


def aggregate_bundles(
    target_bundles: list[TargetBundle],
    source_bundles: list[SourceBundle],
    lambda_spec="cv",
    lambda_grid=None,
    alpha: float = 0.05,
) -> AggregationResult:
    """Leading-site block: combine target summaries, pick lambda, solve.

    Bundles are sorted by site_id up front so the coordinate-descent float
    path is identical regardless of how the caller discovered the sites.
    """
    target_bundles = sorted(target_bundles, key=lambda b: b.summary.site_id)
    source_bundles = sorted(source_bundles, key=lambda b: b.summary.site_id)
    lam, selection = resolve_lambda(lambda_spec, target_bundles, source_bundles, lambda_grid)
    target = combine_target_summaries([b.summary for b in target_bundles])
    sources = tuple(b.summary for b in source_bundles if b.summary.usable)
    n_total = target.n_k + sum(s.n_k for s in sources)
    problem = AggregationProblem(target=target, sources=sources, lam=lam, n_total=n_total)
    result = solve_eta(problem, alpha=alpha)
    if selection is not None:
        result.lambda_curve = selection.curve
    return result
