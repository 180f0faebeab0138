"""Site-local data containers, cross-site summary types, and CSV ingestion.

``SiteData`` never leaves the site that owns it; the only objects that cross
site boundaries are ``TargetSummary`` and ``SourceSummary``, which hold
aggregates only.  All types are immutable after construction.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np


class ValidationError(ValueError):
    """Input data violates a structural requirement (bad arm counts, NaN, ...)."""


class ParseError(ValidationError):
    """A file could not be parsed; the message names the offending row/column."""


def _freeze(arr: np.ndarray) -> np.ndarray:
    out = np.array(arr, dtype=float, copy=True)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class SiteData:
    """One site's raw records: outcome, binary treatment, covariate matrix."""

    site_id: str
    y: np.ndarray
    a: np.ndarray
    x: np.ndarray
    role: str

    def __post_init__(self) -> None:
        if self.role not in ("target", "source"):
            raise ValidationError(f"role must be 'target' or 'source', got {self.role!r}")
        y = np.asarray(self.y, dtype=float)
        a = np.asarray(self.a, dtype=float)
        x = np.atleast_2d(np.asarray(self.x, dtype=float))
        if y.ndim != 1 or a.ndim != 1:
            raise ValidationError("y and a must be one-dimensional")
        n = y.shape[0]
        if n < 1:
            raise ValidationError("site has no rows")
        if a.shape[0] != n or x.shape[0] != n:
            raise ValidationError("y, a, x must have the same number of rows")
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(a)) and np.all(np.isfinite(x))):
            raise ValidationError("NaN present in site data")
        if not np.all((a == 0) | (a == 1)):
            raise ValidationError("treatment a must be binary 0/1")
        n_treated = int(a.sum())
        if n_treated == 0 or n_treated == n:
            raise ValidationError("single treatment arm: both arms required")
        object.__setattr__(self, "y", _freeze(y))
        object.__setattr__(self, "a", _freeze(a))
        object.__setattr__(self, "x", _freeze(x))

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def p(self) -> int:
        return self.x.shape[1]

    @property
    def outcome_type(self) -> str:
        """'binary' when every outcome is 0/1, else 'continuous'."""
        return "binary" if np.all((self.y == 0) | (self.y == 1)) else "continuous"

    def subset(self, idx: np.ndarray) -> "SiteData":
        """Row subset as a new SiteData (used for train/validation splits)."""
        return SiteData(self.site_id, self.y[idx], self.a[idx], self.x[idx], self.role)


@dataclass(frozen=True)
class Basis:
    """Covariate expansion for the density-ratio model; identity keeps (1, x)."""

    expansion: str = "identity"
    q: int = 1

    def __post_init__(self) -> None:
        if self.expansion != "identity":
            raise ValidationError(f"unsupported basis expansion {self.expansion!r}")
        if self.q < 1:
            raise ValidationError("basis dimension q must be >= 1")

    @classmethod
    def identity(cls, p: int) -> "Basis":
        return cls(expansion="identity", q=p + 1)


def psi(x_row: np.ndarray, basis: Basis) -> np.ndarray:
    """Expand one covariate row to (1, x)."""
    x_row = np.asarray(x_row, dtype=float).ravel()
    if x_row.shape[0] + 1 != basis.q:
        raise ValidationError(f"row has {x_row.shape[0]} covariates, basis expects {basis.q - 1}")
    return np.concatenate(([1.0], x_row))


def psi_matrix(x: np.ndarray, basis: Basis) -> np.ndarray:
    """Expand an n-by-p covariate matrix to the n-by-q basis matrix (1, x)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[1] + 1 != basis.q:
        raise ValidationError(f"matrix has {x.shape[1]} covariates, basis expects {basis.q - 1}")
    return np.column_stack([np.ones(x.shape[0]), x])


_IDENTITY_TOL = 1e-12


@dataclass(frozen=True)
class TargetSummary:
    """Step-1 site summary: plug-in, augmentation, covariate mean, covariance.

    ``big_delta_hat`` satisfies M̂ + δ̂ (the Eq.-7-consistent convention);
    ``sigma_hat`` is the (q+2)x(q+2) covariance of the stacked estimator
    (plug-in, augmentation, covariate-mean) on the estimator scale (~1/n).
    """

    site_id: str
    n_k: int
    m_hat: float
    delta_hat: float
    big_delta_hat: float
    psi_bar: np.ndarray
    sigma_hat: np.ndarray

    def __post_init__(self) -> None:
        psi_bar = np.asarray(self.psi_bar, dtype=float).ravel()
        sigma = np.atleast_2d(np.asarray(self.sigma_hat, dtype=float))
        q = psi_bar.shape[0]
        if self.n_k < 1:
            raise ValidationError("n_k must be >= 1")
        if sigma.shape != (q + 2, q + 2):
            raise ValidationError(f"sigma_hat must be {(q + 2, q + 2)}, got {sigma.shape}")
        if abs(self.big_delta_hat - (self.m_hat + self.delta_hat)) > _IDENTITY_TOL:
            raise ValidationError("big_delta_hat must equal m_hat + delta_hat")
        if abs(psi_bar[0] - 1.0) > _IDENTITY_TOL:
            raise ValidationError("first coordinate of psi_bar must be the intercept 1")
        if not np.allclose(sigma, sigma.T, atol=1e-10):
            raise ValidationError("sigma_hat must be symmetric")
        scale = max(float(np.abs(sigma).max()), 1.0)
        if np.linalg.eigvalsh(sigma).min() < -1e-8 * scale:
            raise ValidationError("sigma_hat must be positive semidefinite")
        object.__setattr__(self, "psi_bar", _freeze(psi_bar))
        object.__setattr__(self, "sigma_hat", _freeze(sigma))

    @property
    def q(self) -> int:
        return self.psi_bar.shape[0]

    def to_dict(self) -> dict:
        return {
            "site_id": self.site_id,
            "n_k": self.n_k,
            "m_hat": self.m_hat,
            "delta_hat": self.delta_hat,
            "big_delta_hat": self.big_delta_hat,
            "psi_bar": self.psi_bar.tolist(),
            "sigma_hat": self.sigma_hat.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TargetSummary":
        return cls(
            site_id=d["site_id"],
            n_k=int(d["n_k"]),
            m_hat=float(d["m_hat"]),
            delta_hat=float(d["delta_hat"]),
            big_delta_hat=float(d["big_delta_hat"]),
            psi_bar=np.asarray(d["psi_bar"], dtype=float),
            sigma_hat=np.asarray(d["sigma_hat"], dtype=float),
        )


@dataclass(frozen=True)
class SourceSummary:
    """Step-2 site summary: transported augmentation, its conditional variance,
    and the sensitivity d̂ of the augmentation to the target covariate mean."""

    site_id: str
    n_k: int
    delta_hat: float
    sigma2_hat: float
    d_hat: np.ndarray
    usable: bool = True

    def __post_init__(self) -> None:
        d_hat = np.asarray(self.d_hat, dtype=float).ravel()
        if self.n_k < 1:
            raise ValidationError("n_k must be >= 1")
        if self.usable:
            if self.sigma2_hat < 0:
                raise ValidationError("sigma2_hat must be nonnegative")
            if not (np.all(np.isfinite(d_hat)) and math.isfinite(self.delta_hat)):
                raise ValidationError("source summary fields must be finite")
        object.__setattr__(self, "d_hat", _freeze(d_hat))

    @property
    def q(self) -> int:
        return self.d_hat.shape[0]

    def to_dict(self) -> dict:
        return {
            "site_id": self.site_id,
            "n_k": self.n_k,
            "delta_hat": self.delta_hat,
            "sigma2_hat": self.sigma2_hat,
            "d_hat": self.d_hat.tolist(),
            "usable": self.usable,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SourceSummary":
        return cls(
            site_id=d["site_id"],
            n_k=int(d["n_k"]),
            delta_hat=float(d["delta_hat"]),
            sigma2_hat=float(d["sigma2_hat"]),
            d_hat=np.asarray(d["d_hat"], dtype=float),
            usable=bool(d.get("usable", True)),
        )


def load_site_csv(path, role: str) -> SiteData:
    """Read one site's records from a CSV with columns y, a, x1..xp (in order).

    The site id is the file's stem.  Raises ParseError for malformed cells
    (naming the data row and column) and ValidationError for structural
    problems (missing values, non-binary treatment, a single treatment arm).
    """
    import pathlib

    path = pathlib.Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path.name}: empty file") from None
        header = [h.strip() for h in header]
        p = len(header) - 2
        expected = ["y", "a"] + [f"x{j}" for j in range(1, p + 1)]
        if p < 0 or header != expected:
            raise ParseError(
                f"{path.name}: header must be y,a,x1..xp in order, got {','.join(header)}"
            )
        rows = []
        for row_num, row in enumerate(reader, start=1):
            if len(row) != len(header):
                raise ParseError(f"{path.name}: row {row_num} has {len(row)} fields, expected {len(header)}")
            values = []
            for col_name, cell in zip(header, row):
                cell = cell.strip()
                if cell == "":
                    raise ValidationError(f"{path.name}: row {row_num}, column {col_name}: missing value")
                try:
                    value = float(cell)
                except ValueError:
                    raise ParseError(
                        f"{path.name}: row {row_num}, column {col_name}: could not parse {cell!r}"
                    ) from None
                if not math.isfinite(value):
                    raise ValidationError(f"{path.name}: row {row_num}, column {col_name}: NaN present")
                values.append(value)
            if values[1] not in (0.0, 1.0):
                raise ValidationError(
                    f"{path.name}: row {row_num}, column a: treatment must be 0 or 1, got {values[1]}"
                )
            rows.append(values)
    if not rows:
        raise ValidationError(f"{path.name}: no data rows")
    arr = np.asarray(rows, dtype=float)
    return SiteData(site_id=path.stem, y=arr[:, 0], a=arr[:, 1], x=arr[:, 2:], role=role)
