"""Multiscale adaptive smoothing of the raw coefficient fields.

Each scale aggregates the *raw* voxel-wise estimates inside a growing
Euclidean ball, weighting members by a spatial triangular kernel times a
similarity kernel driven by the previous scale's estimates.  A per-voxel,
per-coefficient stop check freezes voxels whose aggregate drifts too far
from the raw estimate, which is what preserves jumps across activation
boundaries.
"""

from __future__ import annotations

import dataclasses

import numpy as np
from scipy import sparse
from scipy import special

from .design import DesignMatrix
from .fpca import NoiseModel
from .grid import Mask, NeighborTable, neighbor_table
from .leastsq import VARIANCE_FLOOR, CoefficientField, raw_variance

__all__ = [
    "chi2_upper_quantile",
    "chi2_lower_quantile",
    "chi2_survival",
    "ScaleSchedule",
    "MassState",
    "SweepResult",
    "similarity",
    "adaptive_weight",
    "mass_sweep",
    "stop_check",
    "run_mass",
]


def chi2_upper_quantile(df: float, a: float) -> float:
    """Upper a-quantile of chi-square: the q with ``P(X > q) = a``.

    Evaluated by inverting the regularized incomplete gamma survival
    function (absolute accuracy well below 1e-10 over the usable range).
    """
    if not 0.0 < a < 1.0:
        raise ValueError(f"tail probability must lie in (0, 1), got {a}")
    if df <= 0:
        raise ValueError(f"degrees of freedom must be positive, got {df}")
    return float(2.0 * special.gammainccinv(df / 2.0, a))


def chi2_lower_quantile(df: float, a: float) -> float:
    """Lower a-quantile of chi-square: the q with ``P(X <= q) = a``."""
    if not 0.0 < a < 1.0:
        raise ValueError(f"probability must lie in (0, 1), got {a}")
    if df <= 0:
        raise ValueError(f"degrees of freedom must be positive, got {df}")
    return float(2.0 * special.gammaincinv(df / 2.0, a))


def chi2_survival(df: float, x) -> np.ndarray:
    """``P(X > x)`` for chi-square, via the regularized incomplete gamma."""
    return special.gammaincc(df / 2.0, np.asarray(x, dtype=np.float64) / 2.0)


def _kst_exp(u):
    return np.exp(-u)


def _kst_front(u):
    # min(1, 2(1-u))_+ : flat near zero, linear shoulder, hard cutoff at 1.
    return np.clip(2.0 * (1.0 - np.asarray(u)), 0.0, 1.0)


_KST = {"exp": _kst_exp, "front": _kst_front}


@dataclasses.dataclass(frozen=True)
class ScaleSchedule:
    """Bandwidth ladder and stopping thresholds for the adaptive sweeps.

    ``bandwidth(s) = c_h**s`` for s = 1..n_scales.  ``c_n`` scales the
    similarity statistic inside the weight kernel; ``cs[s-1]`` is the stop
    threshold at scale s.  With the default (formula-literal) upper-quantile
    convention the thresholds increase with s.
    """

    c_h: float
    n_scales: int
    c_n: float
    cs: tuple
    kst: str = "exp"
    variance_floor: float = VARIANCE_FLOOR
    first_check: int = 2

    def __post_init__(self):
        if self.c_h <= 1.0:
            raise ValueError(f"c_h must exceed 1, got {self.c_h}")
        if self.n_scales < 0:
            raise ValueError(f"n_scales must be >= 0, got {self.n_scales}")
        if len(self.cs) != self.n_scales:
            raise ValueError(f"{len(self.cs)} thresholds for {self.n_scales} scales")
        if self.kst not in _KST:
            raise ValueError(f"kst must be one of {sorted(_KST)}, got {self.kst!r}")
        if self.c_n <= 0:
            raise ValueError(f"c_n must be positive, got {self.c_n}")
        if self.first_check < 1:
            raise ValueError(f"first_check must be >= 1, got {self.first_check}")

    @classmethod
    def default(cls, n: int, c_h: float = 1.1, n_scales: int = 10,
                cs_convention: str = "upper", cn_convention: str = "lower",
                kst: str = "exp", c_n=None, first_check: int = 2,
                variance_floor: float = VARIANCE_FLOOR) -> "ScaleSchedule":
        """Schedule with ``C_n = n**0.4 * chi2_1(0.8)`` and ``C_s = chi2_1(0.8/s)``.

        ``cs_convention`` / ``cn_convention`` pick whether each chi-square
        probability is read as an upper-tail mass or as a lower-tail quantile
        level.  The stop thresholds default to the upper-tail (increasing)
        sequence, while ``c_n`` defaults to the lower-tail value: an
        upper-tail ``C_n`` is so small that the similarity gate passes only
        neighbours whose estimates happen to agree with the centre voxel's own
        noise, and that selection destroys the variance reduction the ladder
        exists to deliver.

        ``first_check`` is the first scale at which the freeze test applies.
        It defaults to the second sweep because the first upper-tail
        threshold, ``chi2_1(0.8) ~= 0.064``, sits far inside the null spread
        of the freeze statistic: checking against it right after the first
        sweep freezes roughly a third of the voxels of a perfectly
        homogeneous region at the raw noise level, and those voxels never
        recover.  Deferring the first check by one sweep keeps deep-interior
        voxels propagating (well over 95% reach the final scale) while
        boundary voxels still stop early.
        """
        if c_n is None:
            if cn_convention == "upper":
                c_n = n**0.4 * chi2_upper_quantile(1, 0.8)
            elif cn_convention == "lower":
                c_n = n**0.4 * chi2_lower_quantile(1, 0.8)
            else:
                raise ValueError(
                    f"cn_convention must be 'upper' or 'lower', got {cn_convention!r}")
        if cs_convention == "upper":
            cs = tuple(chi2_upper_quantile(1, 0.8 / s) for s in range(1, n_scales + 1))
        elif cs_convention == "lower":
            cs = tuple(chi2_lower_quantile(1, 0.8 / s) for s in range(1, n_scales + 1))
        else:
            raise ValueError(f"cs_convention must be 'upper' or 'lower', got {cs_convention!r}")
        return cls(c_h=float(c_h), n_scales=int(n_scales), c_n=float(c_n),
                   cs=cs, kst=kst, variance_floor=variance_floor,
                   first_check=int(first_check))

    def bandwidth(self, s: int) -> float:
        if not 1 <= s <= self.n_scales:
            raise ValueError(f"scale {s} outside 1..{self.n_scales}")
        return self.c_h**s

    @property
    def bandwidths(self) -> tuple:
        return tuple(self.c_h**s for s in range(1, self.n_scales + 1))


def similarity(beta_j: np.ndarray, var_j: np.ndarray, rank0: int, rank1: int,
               floor: float = VARIANCE_FLOOR) -> float:
    """Similarity statistic between two voxels for one coefficient.

    ``D = (beta_j(d0) - beta_j(d0'))^2 / var_j(d0)`` — note the variance is
    taken at the *center* voxel only, so the statistic is not symmetric.
    """
    num = (float(beta_j[rank0]) - float(beta_j[rank1])) ** 2
    return num / max(float(var_j[rank0]), floor)


def adaptive_weight(dist: float, h: float, d_sim: float, c_n: float,
                    kst: str = "exp") -> float:
    """Unnormalized member weight: triangular-in-distance times similarity kernel."""
    kloc = max(0.0, 1.0 - dist / h)
    return kloc * float(_KST[kst](d_sim / c_n))


@dataclasses.dataclass
class MassState:
    """Evolving per-coefficient estimates across scales.

    ``weights[j]`` holds, as a CSR matrix over dense ranks, the normalized
    aggregation weights behind each voxel's currently accepted estimate of
    coefficient j (identity rows at scale 0).  ``stopped_at`` records the
    scale at which a (coefficient, voxel) froze, or ``n_scales`` if it never
    did; frozen entries keep the estimate from the scale before the freeze.
    """

    raw_beta: np.ndarray
    raw_var: np.ndarray
    beta: np.ndarray
    var: np.ndarray
    frozen: np.ndarray
    stopped_at: np.ndarray
    weights: list
    s_done: int = 0
    snapshots: dict = dataclasses.field(default_factory=dict)

    @property
    def p(self) -> int:
        return self.beta.shape[0]

    @property
    def n_voxels(self) -> int:
        return self.beta.shape[1]


@dataclasses.dataclass(frozen=True)
class SweepResult:
    """Candidate estimates produced by one scale's aggregation."""

    s: int
    beta: np.ndarray
    var: np.ndarray
    weights: list


def _table_csr(table: NeighborTable, weights: np.ndarray, n_cols: int) -> sparse.csr_matrix:
    """Row-normalized weights into CSR (row entries already rank-sorted)."""
    valid = table.valid
    counts = valid.sum(axis=1)
    indptr = np.concatenate([[0], np.cumsum(counts)])
    return sparse.csr_matrix(
        (weights[valid], table.idx[valid], indptr),
        shape=(weights.shape[0], n_cols),
    )


def _sweep_one(bprev, vprev, braw, table, h, c_n, kst_fn, floor):
    """Normalized adaptive weights and the aggregated raw estimate."""
    kloc = np.clip(1.0 - table.dist / h, 0.0, None)
    vc = np.maximum(vprev, floor)
    bn = bprev[table.idx]
    d = (bprev[:, None] - bn) ** 2 / vc[:, None]
    w = np.where(table.valid, kloc[None, :] * kst_fn(d / c_n), 0.0)
    wt = w / w.sum(axis=1, keepdims=True)
    beta_c = np.einsum("nk,nk->n", wt, braw[table.idx])
    return wt, beta_c


def mass_sweep(state: MassState, s: int, table: NeighborTable, noise: NoiseModel,
               design: DesignMatrix, schedule: ScaleSchedule) -> SweepResult:
    """One scale of adaptive aggregation for every coefficient and voxel.

    The new estimate is the weight-normalized sum of the *raw* estimates in
    the ball; the variance is the weighted double sum of the total response
    covariance, evaluated through the smoothed-effect images so the effect
    cross-covariance is never materialized.  Frozen entries are computed and
    then overwritten by the caller; membership of frozen voxels in their
    neighbors' windows is unaffected by freezing.
    """
    h = schedule.bandwidth(s)
    kst_fn = _KST[schedule.kst]
    p, n_vox = state.beta.shape
    eta_t = np.ascontiguousarray(noise.eta_hat.T)
    beta_new = np.empty_like(state.beta)
    var_new = np.empty_like(state.var)
    weights = []
    for j in range(p):
        wt, beta_c = _sweep_one(state.beta[j], state.var[j], state.raw_beta[j],
                                table, h, schedule.c_n, kst_fn, schedule.variance_floor)
        w_csr = _table_csr(table, wt, n_vox)
        t = w_csr @ eta_t
        var_eta = np.einsum("ni,ni->n", t, t) / noise.dof
        var_eps = np.einsum("nk,nk->n", wt * wt, noise.sigma_eps[table.idx])
        beta_new[j] = beta_c
        var_new[j] = design.omega_inv[j, j] * (var_eta + var_eps)
        weights.append(w_csr)
    return SweepResult(s=s, beta=beta_new, var=var_new, weights=weights)


def stop_check(state: MassState, sweep: SweepResult, schedule: ScaleSchedule) -> np.ndarray:
    """Entries that must freeze at this scale.

    ``D = (beta_raw - beta_candidate)^2 / var_raw`` compared against the
    scale's threshold; already-frozen entries are never re-checked, and no
    entry freezes before ``schedule.first_check``.
    """
    if sweep.s < schedule.first_check:
        return np.zeros_like(state.frozen)
    c_s = schedule.cs[sweep.s - 1]
    vr = np.maximum(state.raw_var, schedule.variance_floor)
    d = (state.raw_beta - sweep.beta) ** 2 / vr
    return (d > c_s) & ~state.frozen


def run_mass(raw: CoefficientField, noise: NoiseModel, design: DesignMatrix,
             mask: Mask, schedule: ScaleSchedule, tables=None, snapshots=()):
    """Full multiscale sweep; returns the final field and the end state.

    ``tables`` may supply prebuilt :class:`NeighborTable` objects keyed by
    scale index to amortize geometry across runs.  ``snapshots`` lists scale
    indices (0 = raw) whose fields are copied into ``state.snapshots``.
    Voxels frozen at scale s revert to their scale s-1 estimate, variance,
    and weights, and stay fixed afterwards.
    """
    p, n_vox = raw.beta.shape
    raw_var = raw.var
    if not raw_var.any():
        raw_var = raw_variance(design, noise.sigma_y_diag(), schedule.variance_floor)
    state = MassState(
        raw_beta=raw.beta.copy(),
        raw_var=raw_var.copy(),
        beta=raw.beta.copy(),
        var=raw_var.copy(),
        frozen=np.zeros((p, n_vox), dtype=bool),
        stopped_at=np.full((p, n_vox), -1, dtype=np.int16),
        weights=[sparse.identity(n_vox, format="csr") for _ in range(p)],
    )
    snapshots = set(int(s) for s in snapshots)
    if 0 in snapshots:
        state.snapshots[0] = CoefficientField(state.beta.copy(), state.var.copy(), label="h0")
    for s in range(1, schedule.n_scales + 1):
        table = tables[s] if tables is not None else neighbor_table(mask, schedule.bandwidth(s))
        sweep = mass_sweep(state, s, table, noise, design, schedule)
        newly_frozen = stop_check(state, sweep, schedule)
        accept = ~state.frozen & ~newly_frozen
        state.beta[accept] = sweep.beta[accept]
        state.var[accept] = sweep.var[accept]
        for j in range(p):
            keep = sparse.diags((~accept[j]).astype(np.float64))
            take = sparse.diags(accept[j].astype(np.float64))
            merged = take @ sweep.weights[j] + keep @ state.weights[j]
            merged.eliminate_zeros()
            state.weights[j] = merged.tocsr()
        state.frozen |= newly_frozen
        state.stopped_at[newly_frozen] = s
        state.s_done = s
        if s in snapshots:
            state.snapshots[s] = CoefficientField(
                state.beta.copy(), state.var.copy(), label=f"mass_s{s}")
        if state.frozen.all():
            break
    # A full freeze before a requested snapshot scale leaves the field
    # constant from then on, so later snapshots are copies of the end state.
    for s in sorted(snapshots):
        if s > state.s_done:
            state.snapshots[s] = CoefficientField(
                state.beta.copy(), state.var.copy(), label=f"mass_s{s}")
    state.stopped_at[state.stopped_at < 0] = schedule.n_scales
    final = CoefficientField(state.beta.copy(), state.var.copy(),
                             label=f"mass_s{schedule.n_scales}")
    return final, state
