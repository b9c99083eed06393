"""Voxel-wise least squares: the raw coefficient fields everything else refines."""

from __future__ import annotations

import dataclasses
import logging

import numpy as np

from .design import DesignMatrix
from .grid import Grid3, Mask

__all__ = [
    "VARIANCE_FLOOR",
    "SubjectStack",
    "CoefficientField",
    "ls_fit",
    "residuals",
    "raw_variance",
    "plug_in_sigma_y",
]

log = logging.getLogger(__name__)

# Lower clamp applied to every per-voxel variance before it is used as a
# denominator; keeps similarity statistics finite on degenerate data.
VARIANCE_FLOOR = 1e-12


@dataclasses.dataclass(frozen=True)
class SubjectStack:
    """Response images for all subjects, restricted to active voxels.

    ``y[i, r]`` is subject i's value at the voxel with dense rank r.
    """

    grid: Grid3
    mask: Mask
    y: np.ndarray

    def __post_init__(self):
        y = np.ascontiguousarray(np.asarray(self.y, dtype=np.float64))
        if y.ndim != 2:
            raise ValueError(f"stack must be 2-D (subjects, voxels), got shape {y.shape}")
        if y.shape[1] != self.mask.n_active:
            raise ValueError(
                f"stack has {y.shape[1]} voxels but mask has {self.mask.n_active} active"
            )
        if not np.isfinite(y).all():
            i, r = np.argwhere(~np.isfinite(y))[0]
            raise ValueError(f"non-finite response for subject {i} at voxel rank {r}")
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.y.shape[0]


@dataclasses.dataclass(frozen=True)
class CoefficientField:
    """Per-voxel coefficient estimates with their variance diagonal.

    ``beta[j, r]`` and ``var[j, r]`` hold the estimate and estimated variance
    of coefficient j at dense rank r; ``label`` records the producing stage
    (for example ``"h0"`` or ``"mass_s10"``) and ``names`` optionally carries
    the design's coefficient names for output files.
    """

    beta: np.ndarray
    var: np.ndarray
    label: str = "h0"
    names: tuple | None = None

    def __post_init__(self):
        beta = np.ascontiguousarray(np.asarray(self.beta, dtype=np.float64))
        var = np.ascontiguousarray(np.asarray(self.var, dtype=np.float64))
        if beta.ndim != 2 or var.shape != beta.shape:
            raise ValueError(
                f"beta and var must be matching 2-D arrays, got {beta.shape} and {var.shape}"
            )
        if self.names is not None and len(self.names) != beta.shape[0]:
            raise ValueError(f"{len(self.names)} names for {beta.shape[0]} coefficients")
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "var", var)

    def coef_names(self) -> tuple:
        if self.names is not None:
            return tuple(self.names)
        return tuple(f"b{j}" for j in range(self.p))

    @property
    def p(self) -> int:
        return self.beta.shape[0]

    @property
    def n_voxels(self) -> int:
        return self.beta.shape[1]


def ls_fit(stack: SubjectStack, design: DesignMatrix) -> CoefficientField:
    """Ordinary least squares at every voxel.

    Solves ``omega @ beta(d) = sum_i x_i y_i(d)`` with the design's cached
    inverse; the variance slots are left at zero and filled by
    :func:`raw_variance` once a noise model is available.
    """
    if design.n != stack.n:
        raise ValueError(f"design has {design.n} rows but stack has {stack.n} subjects")
    beta = design.omega_inv @ (design.x.T @ stack.y)
    return CoefficientField(beta=beta, var=np.zeros_like(beta), label="h0")


def residuals(stack: SubjectStack, design: DesignMatrix, field: CoefficientField) -> np.ndarray:
    """Per-subject residual images ``y_i - x_i^T beta``, shape (n, n_voxels)."""
    return stack.y - design.x @ field.beta


def plug_in_sigma_y(resids: np.ndarray) -> np.ndarray:
    """First-pass total-variance diagonal ``n^-1 sum_i r_i(d)^2``."""
    resids = np.asarray(resids)
    return np.mean(resids * resids, axis=0)


def raw_variance(design: DesignMatrix, sigma_y: np.ndarray, floor: float = VARIANCE_FLOOR) -> np.ndarray:
    """Variance diagonal of the raw estimates, ``(omega^-1)_jj * sigma_y(d)``.

    ``sigma_y`` is the per-voxel total variance (noise-model diagonal or the
    plug-in residual mean square).  Entries below ``floor`` are clamped and
    counted in a warning.
    """
    sigma_y = np.asarray(sigma_y, dtype=np.float64).reshape(-1)
    clamped = int((sigma_y < floor).sum())
    if clamped:
        log.warning("raw_variance: clamped %d voxel variances to the %.1e floor", clamped, floor)
    sigma_y = np.maximum(sigma_y, floor)
    return np.outer(np.diag(design.omega_inv), sigma_y)
