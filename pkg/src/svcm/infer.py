"""Wald inference on smoothed coefficient fields, clusters, and prediction."""

from __future__ import annotations

import dataclasses

import numpy as np

from .design import DesignMatrix
from .fpca import NoiseModel
from .grid import Mask, connected_components
from .leastsq import VARIANCE_FLOOR, CoefficientField
from .mass import MassState, chi2_survival

__all__ = [
    "Hypothesis",
    "WaldMap",
    "Cluster",
    "mass_covariance",
    "wald_test",
    "detect_clusters",
    "predict_subject",
]


@dataclasses.dataclass(frozen=True)
class Hypothesis:
    """Linear hypothesis ``rows @ beta(d) = b0`` tested voxel-wise.

    ``b0`` defaults to the zero vector.
    """

    rows: np.ndarray
    b0: np.ndarray | None = None
    name: str = "hypothesis"

    def __post_init__(self):
        rows = np.atleast_2d(np.asarray(self.rows, dtype=np.float64))
        b0 = np.zeros(rows.shape[0]) if self.b0 is None else \
            np.atleast_1d(np.asarray(self.b0, dtype=np.float64))
        if not np.isfinite(rows).all() or not np.isfinite(b0).all():
            raise ValueError("hypothesis rows and b0 must be finite")
        if b0.size != rows.shape[0]:
            raise ValueError(f"{rows.shape[0]} rows but {b0.size} b0 entries")
        if np.linalg.matrix_rank(rows) < rows.shape[0]:
            raise ValueError("hypothesis rows must have full row rank")
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "b0", b0)

    @property
    def r(self) -> int:
        return self.rows.shape[0]


@dataclasses.dataclass(frozen=True)
class WaldMap:
    """Per-voxel Wald statistics and chi-square p-values."""

    stats: np.ndarray
    pvalues: np.ndarray
    hypothesis: Hypothesis
    label: str = ""


def mass_covariance(state: MassState, noise: NoiseModel, design: DesignMatrix,
                    rank: int) -> np.ndarray:
    """Covariance of the final coefficient vector at one voxel.

    Each coefficient carries the aggregation weights of the scale it stopped
    at.  The double sum of the total response covariance over the two weight
    rows collapses, via the Hadamard/selection identity, to
    ``omega_inv * (G G^T/(n-p) + sum_m w(m) w(m)^T sigma_eps(m))`` with
    ``G[j, i] = sum_m w_j(m) eta_i(m)``; the smoothed-effect covariance is
    therefore evaluated through the subject images, never materialized.
    """
    p = state.p
    rows = [state.weights[j].getrow(rank) for j in range(p)]
    members = np.unique(np.concatenate([r.indices for r in rows]))
    pos = {m: i for i, m in enumerate(members)}
    om = np.zeros((p, members.size))
    for j, r in enumerate(rows):
        for m, v in zip(r.indices, r.data):
            om[j, pos[m]] = v
    g = om @ noise.eta_hat[:, members].T
    eps = (om * noise.sigma_eps[members]) @ om.T
    return design.omega_inv * (g @ g.T / noise.dof + eps)


def _covariance_maps_state(state: MassState, noise: NoiseModel,
                           design: DesignMatrix) -> np.ndarray:
    """All-voxel version of :func:`mass_covariance`, shape (n_voxels, p, p)."""
    p, n_vox = state.beta.shape
    eta_t = np.ascontiguousarray(noise.eta_hat.T)
    g = [state.weights[j] @ eta_t for j in range(p)]
    cov = np.empty((n_vox, p, p))
    for j in range(p):
        for k in range(j, p):
            eps_jk = state.weights[j].multiply(state.weights[k]) @ noise.sigma_eps
            vals = design.omega_inv[j, k] * (
                np.einsum("ni,ni->n", g[j], g[k]) / noise.dof + eps_jk
            )
            cov[:, j, k] = vals
            cov[:, k, j] = vals
    return cov


def _covariance_maps_raw(field: CoefficientField, noise: NoiseModel,
                         design: DesignMatrix) -> np.ndarray:
    """Per-voxel covariance of a field estimated by one shared smoother.

    For the raw fit and both reference smoothers every coefficient at a
    voxel is smoothed identically, so the covariance is a per-voxel scalar
    times ``omega_inv``.  The scalar is recovered from the field's variance
    diagonal when present (falling back to the noise model's total
    variance), and consistency across coefficients is checked.
    """
    if field.var.any():
        scal = field.var / np.diag(design.omega_inv)[:, None]
        if not np.allclose(scal, scal[:1], rtol=1e-6, atol=1e-30):
            raise ValueError(
                f"field {field.label!r} variance is not a scalar multiple of the "
                "design covariance; cross-coefficient covariance is undefined"
            )
        c = scal[0]
    else:
        c = noise.sigma_y_diag()
    return c[:, None, None] * design.omega_inv[None, :, :]


def wald_test(source, noise: NoiseModel, design: DesignMatrix,
              hypothesis: Hypothesis) -> WaldMap:
    """Voxel-wise Wald test of a linear hypothesis.

    ``source`` is either a :class:`MassState` (the covariance then uses each
    coefficient's final aggregation weights) or a raw
    :class:`CoefficientField` (single-voxel covariance).  The statistic
    follows a chi-square with ``r`` degrees of freedom under the null; the
    covariance diagonal is floored to keep the quadratic form well posed on
    degenerate (noise-free) inputs.
    """
    if isinstance(source, MassState):
        beta = source.beta
        cov = _covariance_maps_state(source, noise, design)
        label = f"mass_s{source.s_done}"
    elif isinstance(source, CoefficientField):
        beta = source.beta
        cov = _covariance_maps_raw(source, noise, design)
        label = source.label
    else:
        raise TypeError(f"source must be MassState or CoefficientField, got {type(source)!r}")
    if hypothesis.rows.shape[1] != beta.shape[0]:
        raise ValueError(
            f"hypothesis has {hypothesis.rows.shape[1]} columns for p={beta.shape[0]}"
        )
    r1 = hypothesis.rows
    delta = (r1 @ beta - hypothesis.b0[:, None]).T
    m = np.einsum("ab,nbc,dc->nad", r1, cov, r1)
    diag = np.arange(hypothesis.r)
    m[:, diag, diag] = np.maximum(m[:, diag, diag], VARIANCE_FLOOR)
    sol = np.linalg.solve(m, delta[:, :, None])[:, :, 0]
    stats = np.einsum("nr,nr->n", delta, sol)
    pvalues = chi2_survival(hypothesis.r, stats)
    return WaldMap(stats=stats, pvalues=pvalues, hypothesis=hypothesis, label=label)


@dataclasses.dataclass(frozen=True)
class Cluster:
    """Suprathreshold connected component of a significance map."""

    voxels: np.ndarray
    size: int
    peak: int
    peak_p: float


def detect_clusters(wald: WaldMap, mask: Mask, alpha: float = 0.05,
                    min_size: int = 50, connectivity: int = 6):
    """Connected clusters of voxels with ``p < alpha`` of at least ``min_size``.

    Returns clusters ordered by decreasing size (ties by smallest first
    voxel); each cluster's ``peak`` is its smallest-p voxel (flat index,
    ties resolved toward the smaller index).
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    selected = wald.pvalues < alpha
    clusters = []
    for comp in connected_components(mask, selected, connectivity):
        if comp.size < min_size:
            continue
        ranks = mask.rank_of[comp]
        pvals = wald.pvalues[ranks]
        best = int(np.lexsort((comp, pvals))[0])
        clusters.append(Cluster(
            voxels=comp, size=int(comp.size),
            peak=int(comp[best]), peak_p=float(pvals[best]),
        ))
    return clusters


def predict_subject(x_row: np.ndarray, field: CoefficientField) -> np.ndarray:
    """Fixed-effect prediction ``x^T beta(d)`` over all voxels.

    Subject-specific spatial effects are not part of the prediction; for a
    new subject their best guess is zero by construction.
    """
    x_row = np.asarray(x_row, dtype=np.float64).reshape(-1)
    if x_row.size != field.p:
        raise ValueError(f"covariate row has {x_row.size} entries for p={field.p}")
    return x_row @ field.beta
