"""Subject-level design matrices with cached normal-equation products."""

from __future__ import annotations

import csv
import dataclasses

import numpy as np
from scipy import linalg

__all__ = [
    "SingularDesignError",
    "DesignMatrix",
    "fit_design",
    "coeff_selector",
    "load_covariates",
]

COND_THRESHOLD = 1e12


class SingularDesignError(ValueError):
    """Design matrix is rank deficient or numerically unusable."""


def _dependent_columns(x: np.ndarray, names) -> list:
    """Best-effort identification of the redundant column set via pivoted QR."""
    _, r, piv = linalg.qr(x, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    tol = diag.max() * max(x.shape) * np.finfo(float).eps if diag.size else 0.0
    rank = int((diag > tol).sum())
    return [names[j] for j in sorted(piv[rank:])]


@dataclasses.dataclass(frozen=True)
class DesignMatrix:
    """Fixed-effect design shared by all voxels.

    Attributes
    ----------
    x : ndarray, shape (n, p)
        One row per subject.
    names : tuple of str
        Column labels.
    omega : ndarray, shape (p, p)
        Moment matrix ``sum_i x_i x_i^T``.
    omega_inv : ndarray, shape (p, p)
        Its inverse, computed once via a Cholesky solve.
    """

    x: np.ndarray
    names: tuple

    def __post_init__(self):
        x = np.ascontiguousarray(np.asarray(self.x, dtype=np.float64))
        if x.ndim != 2:
            raise ValueError(f"design must be 2-D, got shape {x.shape}")
        if not np.isfinite(x).all():
            bad = np.argwhere(~np.isfinite(x))[0]
            raise ValueError(f"design has a non-finite entry at row {bad[0]}, column {bad[1]}")
        names = tuple(self.names)
        if len(names) != x.shape[1]:
            raise ValueError(f"{len(names)} names for {x.shape[1]} columns")
        omega = x.T @ x
        omega = (omega + omega.T) / 2.0
        cond = np.linalg.cond(omega)
        if not np.isfinite(cond) or cond > COND_THRESHOLD:
            raise SingularDesignError(
                "design moment matrix is singular or ill-conditioned "
                f"(cond={cond:.3e}); dependent columns: {_dependent_columns(x, names)}"
            )
        cho = linalg.cho_factor(omega, lower=True)
        omega_inv = linalg.cho_solve(cho, np.eye(x.shape[1]))
        omega_inv = (omega_inv + omega_inv.T) / 2.0
        for arr in (x, omega, omega_inv):
            arr.setflags(write=False)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "omega", omega)
        object.__setattr__(self, "omega_inv", omega_inv)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def p(self) -> int:
        return self.x.shape[1]


def fit_design(x: np.ndarray, names=None) -> DesignMatrix:
    """Validate covariate rows and precompute the moment matrix products.

    Parameters
    ----------
    x : array-like, shape (n, p)
        Subject covariates, including any intercept column.
    names : sequence of str, optional
        Column labels; defaults to ``x0 .. x{p-1}``.

    Raises
    ------
    SingularDesignError
        If ``x^T x`` has condition number above ``COND_THRESHOLD``; the
        message names the offending column set.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if names is None:
        names = tuple(f"x{j}" for j in range(x.shape[1]))
    return DesignMatrix(x=x, names=names)


def coeff_selector(design: DesignMatrix, j: int) -> np.ndarray:
    """Unit vector selecting coefficient ``j`` (0-based) as a contrast row."""
    if not 0 <= j < design.p:
        raise ValueError(f"coefficient index {j} out of range for p={design.p}")
    e = np.zeros(design.p)
    e[j] = 1.0
    return e


def load_covariates(path, add_intercept: bool = True):
    """Read a covariate table from CSV.

    The file must have a header; the first column holds subject identifiers
    (matched positionally against the volume list), remaining columns are
    numeric covariates.

    Returns
    -------
    (ids, design) : (list of str, DesignMatrix)
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty covariate file") from None
        if len(header) < 2:
            raise ValueError(f"{path}: need an id column plus at least one covariate")
        ids = []
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ValueError(
                    f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}"
                )
            ids.append(row[0].strip())
            try:
                rows.append([float(c) for c in row[1:]])
            except ValueError:
                raise ValueError(f"{path}:{lineno}: non-numeric covariate value") from None
    if not rows:
        raise ValueError(f"{path}: no data rows")
    x = np.asarray(rows, dtype=np.float64)
    names = [c.strip() for c in header[1:]]
    if add_intercept:
        x = np.hstack([np.ones((x.shape[0], 1)), x])
        names = ["intercept"] + names
    return ids, fit_design(x, names=tuple(names))
