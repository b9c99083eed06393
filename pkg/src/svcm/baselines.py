"""Reference smoothers the adaptive pipeline is judged against.

LCE smooths the raw coefficient maps with a fixed Epanechnikov kernel and
reports classical kernel-regression standard errors that treat voxel
estimates as uncorrelated — faithfully reproducing that method's tendency to
understate uncertainty as the bandwidth grows.  GKS Gaussian-smooths the
response images first and refits least squares, so its plug-in errors stay
calibrated but activation edges blur.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from .design import DesignMatrix
from .fpca import _FftCorrelator
from .grid import Grid3, Mask, neighbor_table, _axis_bound
from .leastsq import (
    CoefficientField,
    SubjectStack,
    ls_fit,
    plug_in_sigma_y,
    raw_variance,
    residuals,
)
from .mass import _table_csr

__all__ = ["BaselineConfig", "lce_smooth", "gks_pipeline", "epanechnikov_weights"]


@dataclasses.dataclass(frozen=True)
class BaselineConfig:
    """Which reference smoother to run and at what width."""

    method: str
    bandwidth: float
    truncate: float = 3.0

    def __post_init__(self):
        if self.method not in ("lce", "gks"):
            raise ValueError(f"method must be 'lce' or 'gks', got {self.method!r}")
        if self.bandwidth <= 0:
            raise ValueError(f"bandwidth must be positive, got {self.bandwidth}")


def epanechnikov_weights(mask: Mask, h: float):
    """Row-normalized Epanechnikov ball weights as a CSR matrix."""
    table = neighbor_table(mask, h)
    u = table.dist / h
    kv = 0.75 * (1.0 - u * u)
    w = np.where(table.valid, kv[None, :], 0.0)
    wt = w / w.sum(axis=1, keepdims=True)
    return _table_csr(table, wt, mask.n_active)


def lce_smooth(raw: CoefficientField, sigma_y: np.ndarray, design: DesignMatrix,
               mask: Mask, h: float) -> CoefficientField:
    """Local-constant smoothing of the raw coefficient maps.

    The reported variance keeps only the diagonal of the voxel covariance,
    ``var_j(d) = (omega_inv)_jj * sum_m w(d,m)^2 sigma_y(m)``, i.e. the
    classical form that ignores cross-voxel correlation of the raw
    estimates.
    """
    w = epanechnikov_weights(mask, h)
    beta = np.vstack([w @ raw.beta[j] for j in range(raw.p)])
    w2_sigma = w.multiply(w) @ np.asarray(sigma_y, dtype=np.float64)
    var = np.outer(np.diag(design.omega_inv), w2_sigma)
    return CoefficientField(beta=beta, var=var, label=f"lce_h{h:g}")


def _gaussian_kernel(grid: Grid3, sigma: float, truncate: float):
    s = grid.spacing
    bounds = [int(np.floor(truncate * sigma / s[k] + 1e-12)) for k in range(3)]
    bx, by, bz = bounds
    dz, dy, dx = np.meshgrid(
        np.arange(-bz, bz + 1), np.arange(-by, by + 1), np.arange(-bx, bx + 1),
        indexing="ij",
    )
    offsets = np.stack([dx.reshape(-1), dy.reshape(-1), dz.reshape(-1)], axis=1)
    r2 = ((offsets * np.asarray(s)) ** 2).sum(axis=1)
    return offsets, np.exp(-r2 / (2.0 * sigma * sigma))


def gks_pipeline(stack: SubjectStack, design: DesignMatrix, sigma: float,
                 truncate: float = 3.0) -> CoefficientField:
    """Gaussian-smooth the responses, then refit voxel-wise least squares.

    The kernel is truncated at ``truncate * sigma`` per axis and renormalized
    over the mask, so edge voxels average only in-mask contributors.  The
    variance diagonal uses the plug-in residual mean square of the smoothed
    fit, which is what keeps this baseline's standard errors calibrated.
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    offsets, kval = _gaussian_kernel(stack.grid, sigma, truncate)
    corr = _FftCorrelator(stack.mask, offsets, [kval])
    den = corr.extract(corr.transform(np.ones(stack.mask.n_active)), 0)[0]
    num = corr.extract(corr.transform(stack.y), 0)
    smoothed = SubjectStack(grid=stack.grid, mask=stack.mask, y=num / den)
    field = ls_fit(smoothed, design)
    sigma_y = plug_in_sigma_y(residuals(smoothed, design, field))
    var = raw_variance(design, sigma_y)
    return CoefficientField(beta=field.beta, var=var, label=f"gks_s{sigma:g}")
