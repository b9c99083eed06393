"""Stage-one noise decomposition.

Local-linear smoothing of subject residuals with a compact triangular product
kernel, GCV bandwidth selection, the per-voxel measurement-error variance,
and a Gram-trick eigendecomposition of the smoothed subject effects.

The smoothing weights depend only on mask geometry, never on data, so one
smoother plan serves every subject.  The plan evaluates the local-linear
normal equations by correlating the mask indicator with the ten kernel
moment products, then combines four kernel correlations of each residual
image with the first row of the per-voxel inverse moment matrix; this equals
the explicit per-voxel weighted least-squares solve to round-off.
"""

from __future__ import annotations

import dataclasses
import logging

import numpy as np
from scipy import fft as sfft

from .design import DesignMatrix
from .grid import Grid3, Mask, _axis_bound
from .leastsq import CoefficientField, SubjectStack, residuals

__all__ = [
    "LocalLinearWeights",
    "GcvError",
    "GcvCandidate",
    "GcvResult",
    "EigenModel",
    "NoiseModel",
    "default_gcv_grid",
    "local_linear_weights",
    "smooth_residuals",
    "gcv_select",
    "estimate_sigma_eps",
    "sigma_eta_at",
    "eigendecompose",
    "fpc_scores",
    "build_noise_model",
]

log = logging.getLogger(__name__)

# Moment matrices with condition number above this fall back to
# local-constant (Nadaraya-Watson) weights at the affected voxel.
FALLBACK_COND = 1e12


def default_gcv_grid(base: float = 1.0, ratio: float = 1.25, count: int = 9) -> tuple:
    """Geometric bandwidth grid ``base * ratio**k`` for k = 0..count-1."""
    if base <= 0 or ratio <= 1 or count < 1:
        raise ValueError("grid needs base > 0, ratio > 1, count >= 1")
    return tuple(base * ratio**k for k in range(count))


def _box_kernel(grid: Grid3, h: float):
    """Product-kernel stencil: offsets, kernel values, and scaled monomials.

    Returns offsets sorted by (dz, dy, dx), the triangular product kernel
    value at each offset (all strictly positive), and the design monomials
    ``z = (1, dx*sx/h, dy*sy/h, dz*sz/h)``.
    """
    if h <= 0:
        raise ValueError(f"bandwidth must be positive, got {h}")
    s = grid.spacing
    bx, by, bz = (_axis_bound(h, s[k]) for k in range(3))
    dz, dy, dx = np.meshgrid(
        np.arange(-bz, bz + 1), np.arange(-by, by + 1), np.arange(-bx, bx + 1),
        indexing="ij",
    )
    offsets = np.stack([dx.reshape(-1), dy.reshape(-1), dz.reshape(-1)], axis=1)
    u = offsets * np.asarray(s) / h
    kval = np.prod(1.0 - np.abs(u), axis=1)
    z = np.hstack([np.ones((offsets.shape[0], 1)), u])
    return offsets, kval, z


@dataclasses.dataclass(frozen=True)
class LocalLinearWeights:
    """Effective smoothing weights of one voxel over its kernel support."""

    center: int
    center_rank: int
    h: float
    ranks: np.ndarray
    weights: np.ndarray
    fallback: bool


def local_linear_weights(mask: Mask, center: int, h: float) -> LocalLinearWeights:
    """Explicit local-linear weight row for a single voxel.

    Solves the 4x4 weighted moment system over the in-mask kernel support.
    If the system is singular (fewer than four affinely independent
    contributors, or condition above ``FALLBACK_COND``) the voxel falls back
    to local-constant weights and is flagged.
    """
    rank = mask.require_active(center)
    grid = mask.grid
    offsets, kval, z = _box_kernel(grid, float(h))
    cx, cy, cz = grid.unravel(center)
    nx, ny, nz = grid.dims
    px = offsets[:, 0] + cx
    py = offsets[:, 1] + cy
    pz = offsets[:, 2] + cz
    inb = (px >= 0) & (px < nx) & (py >= 0) & (py < ny) & (pz >= 0) & (pz < nz)
    lin = grid.linear_index(px[inb], py[inb], pz[inb])
    ranks = mask.rank_of[lin]
    act = ranks >= 0
    ranks = ranks[act]
    kv = kval[inb][act]
    zm = z[inb][act]
    m = (kv[:, None] * zm).T @ zm
    w_eig = np.linalg.eigvalsh(m)
    fallback = not (w_eig[0] > 0 and w_eig[0] > w_eig[-1] / FALLBACK_COND)
    if fallback:
        weights = kv / kv.sum()
    else:
        a = np.linalg.solve(m, np.array([1.0, 0.0, 0.0, 0.0]))
        weights = kv * (zm @ a)
    return LocalLinearWeights(
        center=int(center), center_rank=rank, h=float(h),
        ranks=ranks.astype(np.int64), weights=weights, fallback=bool(fallback),
    )


class _FftCorrelator:
    """Batched correlation of masked fields with a set of compact kernels.

    Fields are zero-embedded on the full grid and correlated circularly on a
    padded box large enough that wraparound never touches valid voxels, which
    reproduces the "sum over in-mask contributors" semantics exactly.
    """

    def __init__(self, mask: Mask, offsets: np.ndarray, kernels):
        self.mask = mask
        nz, ny, nx = mask.grid.shape3
        bx = int(np.abs(offsets[:, 0]).max(initial=0))
        by = int(np.abs(offsets[:, 1]).max(initial=0))
        bz = int(np.abs(offsets[:, 2]).max(initial=0))
        self.pad = (
            sfft.next_fast_len(nz + 2 * bz),
            sfft.next_fast_len(ny + 2 * by),
            sfft.next_fast_len(nx + 2 * bx),
        )
        izw = offsets[:, 2] % self.pad[0]
        iyw = offsets[:, 1] % self.pad[1]
        ixw = offsets[:, 0] % self.pad[2]
        self.kf_conj = []
        for vals in kernels:
            cube = np.zeros(self.pad)
            cube[izw, iyw, ixw] = vals
            self.kf_conj.append(np.conj(np.fft.rfftn(cube)))

    def transform(self, fields: np.ndarray) -> np.ndarray:
        """Forward transform of dense-rank fields, shape (batch, *pad_freq)."""
        fields = np.atleast_2d(np.asarray(fields, dtype=np.float64))
        nz, ny, nx = self.mask.grid.shape3
        dense = np.zeros((fields.shape[0],) + self.pad)
        full = self.mask.scatter(fields)
        dense[:, :nz, :ny, :nx] = full.reshape(fields.shape[0], nz, ny, nx)
        return np.fft.rfftn(dense, axes=(1, 2, 3))

    def extract(self, transformed: np.ndarray, k: int) -> np.ndarray:
        """Correlation with kernel ``k``, gathered back to active voxels."""
        nz, ny, nx = self.mask.grid.shape3
        out = np.fft.irfftn(transformed * self.kf_conj[k], s=self.pad, axes=(1, 2, 3))
        out = out[:, :nz, :ny, :nx].reshape(transformed.shape[0], -1)
        return self.mask.gather(out)


class _SmootherPlan:
    """Geometry-only local-linear smoother for one (mask, bandwidth) pair.

    Exposes the per-voxel combination coefficients (first row of the inverse
    moment matrix), the smoother trace, and the fallback count; ``apply``
    smooths any batch of fields with identical weights.
    """

    def __init__(self, mask: Mask, h: float):
        self.mask = mask
        self.h = float(h)
        offsets, kval, z = _box_kernel(mask.grid, self.h)
        self._offsets = offsets
        pair_kernels = []
        pairs = [(a, b) for a in range(4) for b in range(a, 4)]
        for a, b in pairs:
            pair_kernels.append(kval * z[:, a] * z[:, b])
        moment_corr = _FftCorrelator(mask, offsets, pair_kernels)
        f_mask = moment_corr.transform(np.ones(mask.n_active))
        m = np.empty((mask.n_active, 4, 4))
        for idx, (a, b) in enumerate(pairs):
            vals = moment_corr.extract(f_mask, idx)[0]
            m[:, a, b] = vals
            m[:, b, a] = vals
        w_eig = np.linalg.eigvalsh(m)
        good = (w_eig[:, 0] > 0) & (w_eig[:, 0] > w_eig[:, -1] / FALLBACK_COND)
        a_rows = np.zeros((mask.n_active, 4))
        if good.any():
            e0 = np.zeros((int(good.sum()), 4, 1))
            e0[:, 0, 0] = 1.0
            a_rows[good] = np.linalg.solve(m[good], e0)[:, :, 0]
        a_rows[~good, 0] = 1.0 / m[~good, 0, 0]
        self.a_rows = a_rows
        self.fallback = ~good
        self.n_fallback = int((~good).sum())
        # Self-weight of voxel d is a_rows[d, 0] * K(0) with K(0) = 1.
        self.trace = float(a_rows[:, 0].sum())
        self._corr = _FftCorrelator(mask, offsets, [kval * z[:, a] for a in range(4)])

    def apply(self, fields: np.ndarray) -> np.ndarray:
        """Smooth dense-rank fields (batch, n_active) -> same shape."""
        fields = np.atleast_2d(np.asarray(fields, dtype=np.float64))
        transformed = self._corr.transform(fields)
        out = np.zeros_like(fields)
        for a in range(4):
            out += self.a_rows[:, a][None, :] * self._corr.extract(transformed, a)
        return out


def smooth_residuals(resids: np.ndarray, mask: Mask, h: float) -> np.ndarray:
    """Local-linear smooth of every subject's residual image at bandwidth h.

    Returns the smoothed-effect images ``eta_hat``, shape (n, n_active).
    The smoothing matrix is identical across subjects because its weights
    are a function of mask geometry only.
    """
    plan = _SmootherPlan(mask, h)
    return plan.apply(resids)


class GcvError(RuntimeError):
    """No GCV candidate bandwidth produced a usable smoother."""


@dataclasses.dataclass(frozen=True)
class GcvCandidate:
    h: float
    score: float
    trace: float
    n_fallback: int
    disqualified: bool


@dataclasses.dataclass(frozen=True)
class GcvResult:
    candidates: tuple
    h_opt: float
    opt_index: int

    def as_rows(self):
        return [
            (c.h, c.score, c.trace, c.n_fallback, int(c.disqualified))
            for c in self.candidates
        ]


def gcv_select(resids: np.ndarray, mask: Mask, candidates=None, plans=None,
               return_eta: bool = False):
    """Pooled generalized cross-validation over a bandwidth grid.

    ``GCV(h) = sum_i ||r_i - S_h r_i||^2 / (1 - trace(S_h)/N)^2`` with the
    subject-shared smoother ``S_h``.  Candidates whose trace reaches the
    number of active voxels are disqualified (their denominator vanishes).
    Ties select the smaller bandwidth.

    Returns a :class:`GcvResult`; with ``return_eta=True`` also returns the
    smoothed residuals at the selected bandwidth.
    """
    resids = np.atleast_2d(np.asarray(resids, dtype=np.float64))
    if candidates is None:
        candidates = default_gcv_grid()
    candidates = [float(h) for h in candidates]
    if sorted(set(candidates)) != candidates:
        raise ValueError("GCV candidates must be strictly increasing")
    n_act = mask.n_active
    rows = []
    best = None
    best_eta = None
    for i, h in enumerate(candidates):
        plan = plans[i] if plans is not None else _SmootherPlan(mask, h)
        eta = plan.apply(resids)
        trace = plan.trace
        if trace >= n_act:
            rows.append(GcvCandidate(h, np.inf, trace, plan.n_fallback, True))
            continue
        rss = float(((resids - eta) ** 2).sum())
        score = rss / (1.0 - trace / n_act) ** 2
        rows.append(GcvCandidate(h, score, trace, plan.n_fallback, False))
        if best is None or score < rows[best].score:
            best = i
            if return_eta:
                best_eta = eta
    if best is None:
        raise GcvError(
            "every candidate bandwidth was disqualified (smoother trace >= "
            f"{n_act} active voxels); grid: {candidates}"
        )
    result = GcvResult(candidates=tuple(rows), h_opt=rows[best].h, opt_index=best)
    if return_eta:
        return result, best_eta
    return result


def estimate_sigma_eps(resids: np.ndarray, eta_hat: np.ndarray) -> np.ndarray:
    """Measurement-error variance diagonal ``n^-1 sum_i (r_i - eta_i)^2``."""
    diff = np.asarray(resids) - np.asarray(eta_hat)
    return np.mean(diff * diff, axis=0)


def sigma_eta_at(eta_hat: np.ndarray, dof: int, rank0: int, rank1: int) -> float:
    """Smoothed-effect covariance between two voxels, ``(n-p)^-1`` normalized."""
    return float(eta_hat[:, rank0] @ eta_hat[:, rank1]) / dof


@dataclasses.dataclass(frozen=True)
class EigenModel:
    """Eigenpairs of the smoothed-effect covariance under the discrete measure.

    ``values`` are descending and carry the voxel measure, so that
    ``sum_l values[l] * funcs[l, r] * funcs[l, r']`` reproduces
    ``(n-p)^-1 sum_i eta_i(r) eta_i(r')`` exactly over the retained rank.
    ``funcs`` have unit discrete norm ``sum_r funcs[l, r]^2 * voxel_volume = 1``
    and their largest-magnitude entry is positive.  ``l_s`` is the smallest
    count whose eigenvalues reach the cumulative-fraction threshold.
    """

    values: np.ndarray
    funcs: np.ndarray
    l_s: int
    voxel_volume: float
    cum_threshold: float

    @property
    def n_components(self) -> int:
        return int(self.values.size)


def eigendecompose(eta_hat: np.ndarray, voxel_volume: float, dof: int,
                   cum_threshold: float = 0.8, center: bool = False) -> EigenModel:
    """Eigendecomposition of the smoothed-effect covariance via the n x n Gram.

    Works on ``G = eta_hat @ eta_hat.T`` instead of the voxel-by-voxel
    covariance, which is exact because the two share nonzero spectrum.
    ``center=True`` subtracts the across-subject mean image first (off by
    default).
    """
    eta = np.asarray(eta_hat, dtype=np.float64)
    if center:
        eta = eta - eta.mean(axis=0, keepdims=True)
    if dof < 1:
        raise ValueError(f"need positive degrees of freedom, got {dof}")
    gram = eta @ eta.T
    mu, xi = np.linalg.eigh(gram)
    mu = mu[::-1]
    xi = xi[:, ::-1]
    tiny = (mu[0] if mu.size else 0.0) * 1e-12
    keep = mu > max(tiny, 0.0)
    mu = mu[keep]
    xi = xi[:, keep]
    values = mu * voxel_volume / dof
    funcs = (xi.T @ eta) / np.sqrt(mu * voxel_volume)[:, None] if mu.size else np.zeros((0, eta.shape[1]))
    # Sign convention: the entry of largest magnitude is positive.
    if funcs.size:
        peak = np.argmax(np.abs(funcs), axis=1)
        flip = funcs[np.arange(funcs.shape[0]), peak] < 0
        funcs[flip] *= -1.0
    total = values.sum()
    if total > 0:
        cum = np.cumsum(values) / total
        l_s = int(np.searchsorted(cum, cum_threshold - 1e-12) + 1)
        l_s = min(l_s, values.size)
    else:
        l_s = 0
    return EigenModel(values=values, funcs=funcs, l_s=l_s,
                      voxel_volume=float(voxel_volume), cum_threshold=float(cum_threshold))


def fpc_scores(eta_hat: np.ndarray, model: EigenModel, n_components=None) -> np.ndarray:
    """Subject scores ``xi_hat[i, l] = sum_r eta_i(r) psi_l(r) * voxel_volume``."""
    n_components = model.l_s if n_components is None else int(n_components)
    n_components = min(n_components, model.n_components)
    funcs = model.funcs[:n_components]
    return np.asarray(eta_hat) @ funcs.T * model.voxel_volume


@dataclasses.dataclass(frozen=True)
class NoiseModel:
    """Everything stage two and three need to know about the noise.

    ``sigma_eps`` is the per-voxel measurement-error variance; ``eta_hat``
    the smoothed subject effects whose cross products give the effect
    covariance lazily; ``eigen``/``scores`` the retained low-rank summary.
    """

    sigma_eps: np.ndarray
    eta_hat: np.ndarray
    dof: int
    eigen: EigenModel
    scores: np.ndarray
    h_opt: float
    gcv: GcvResult | None = None

    def sigma_eta_diag(self) -> np.ndarray:
        return np.einsum("ir,ir->r", self.eta_hat, self.eta_hat) / self.dof

    def sigma_y_diag(self) -> np.ndarray:
        return self.sigma_eta_diag() + self.sigma_eps


def build_noise_model(stack: SubjectStack, design: DesignMatrix, field: CoefficientField,
                      candidates=None, cum_threshold: float = 0.8,
                      center: bool = False, plans=None) -> NoiseModel:
    """Residual smoothing, GCV selection, and eigenstructure in one pass."""
    resid = residuals(stack, design, field)
    gcv, eta = gcv_select(resid, stack.mask, candidates, plans=plans, return_eta=True)
    sigma_eps = estimate_sigma_eps(resid, eta)
    dof = stack.n - design.p
    eigen = eigendecompose(eta, stack.grid.voxel_volume, dof,
                           cum_threshold=cum_threshold, center=center)
    scores = fpc_scores(eta, eigen)
    return NoiseModel(sigma_eps=sigma_eps, eta_hat=eta, dof=dof, eigen=eigen,
                      scores=scores, h_opt=gcv.h_opt, gcv=gcv)
