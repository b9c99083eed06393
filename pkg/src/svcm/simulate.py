"""Synthetic activation phantom and the Monte-Carlo study harness.

The phantom places four shapes (square, disk, ring, triangle) at increasing
effect levels in the quadrants of every axial slice, shifts each
coefficient's shapes sideways so the maps differ, and layers three smooth
principal patterns plus voxel noise on top.  The study engine runs many
seeded replicates through the full pipeline (and optional reference
smoothers), accumulating per-voxel moments so bias/RMS/SD/RE tables and
rejection rates can be read off afterwards.
"""

from __future__ import annotations

import dataclasses
import multiprocessing
import os
import time

import numpy as np
from scipy import ndimage

from .design import DesignMatrix, fit_design
from .fpca import (
    NoiseModel,
    _SmootherPlan,
    default_gcv_grid,
    eigendecompose,
    estimate_sigma_eps,
    fpc_scores,
)
from .grid import Grid3, Mask, neighbor_table
from .leastsq import CoefficientField, SubjectStack, ls_fit, plug_in_sigma_y, raw_variance, residuals
from .mass import ScaleSchedule, chi2_survival, run_mass
from .baselines import _gaussian_kernel, epanechnikov_weights, gks_pipeline
from .fpca import _FftCorrelator

__all__ = [
    "PhantomSpec",
    "Truth",
    "Replicate",
    "RoiMetrics",
    "PowerMetrics",
    "StudyRequest",
    "StudyResult",
    "generate",
    "build_truth",
    "resolve_threads",
    "run_study",
    "run_table1",
    "run_table2",
]

N_COEF = 3


@dataclasses.dataclass(frozen=True)
class PhantomSpec:
    """Geometry and distributional knobs of the synthetic study.

    ``standardize=True`` codes the group indicator as +/-1 and scales the
    uniform covariate to zero mean and unit variance, which is what makes
    the raw per-voxel standard errors land near 0.14 at n=60.  ``noise``
    picks the voxel error law: unit Gaussian or a centered chi-square(3)
    (summed squares of three unit normals, minus 3); ``noise_scale``
    multiplies the draw and may be zero for noise-free checks.
    """

    dims: tuple = (64, 64, 8)
    spacing: tuple = (1.0, 1.0, 1.0)
    n: int = 60
    noise: str = "gaussian"
    noise_scale: float = 1.0
    score_vars: tuple = (0.6, 0.3, 0.1)
    levels: tuple = (0.2, 0.4, 0.6, 0.8)
    coef_shift: int = 2
    standardize: bool = True

    def __post_init__(self):
        if self.noise not in ("gaussian", "chisq3"):
            raise ValueError(f"noise must be 'gaussian' or 'chisq3', got {self.noise!r}")
        if self.n < N_COEF + 1:
            raise ValueError(f"need at least {N_COEF + 1} subjects, got {self.n}")
        if len(self.levels) != 4:
            raise ValueError("exactly four activation levels are required")
        if self.noise_scale < 0:
            raise ValueError("noise_scale must be nonnegative")

    @property
    def grid(self) -> Grid3:
        return Grid3(dims=self.dims, spacing=self.spacing)


@dataclasses.dataclass(frozen=True)
class Truth:
    """Ground truth evaluated on the grid (dense-rank order)."""

    beta: np.ndarray
    roi: np.ndarray
    psi: np.ndarray
    boundary_dist: np.ndarray
    level_values: tuple


def _shape_maps(nx: int, ny: int, levels, shift: int):
    """Level-index map (ny, nx) for one coefficient, shapes shifted by ``shift``.

    Quadrant layout: square (levels[0]) top-left, disk (levels[1]) top-right,
    ring (levels[2]) bottom-left, triangle (levels[3]) bottom-right, with
    proportions taken from a 64x64 slice.  Later shapes win on (unexpected)
    overlap.
    """
    yy, xx = np.meshgrid(np.arange(ny), np.arange(nx), indexing="ij")
    out = np.zeros((ny, nx), dtype=np.int8)
    cxs = (nx // 4, 3 * nx // 4, nx // 4, 3 * nx // 4)
    cys = (ny // 4, ny // 4, 3 * ny // 4, 3 * ny // 4)

    side = max(2, int(round(12 * nx / 64)))
    x0 = cxs[0] + shift - side // 2
    y0 = cys[0] - side // 2
    sq = (xx >= x0) & (xx < x0 + side) & (yy >= y0) & (yy < y0 + side)
    out[sq] = 1

    r_disk = 7 * nx / 64
    dx = xx - (cxs[1] + shift)
    dy = yy - cys[1]
    out[dx * dx + dy * dy <= r_disk * r_disk] = 2

    r_in, r_out = 5 * nx / 64, 9 * nx / 64
    dx = xx - (cxs[2] + shift)
    dy = yy - cys[2]
    rr = dx * dx + dy * dy
    out[(rr > r_in * r_in) & (rr <= r_out * r_out)] = 3

    height = max(3, int(round(14 * ny / 64)))
    half_max = 8 * nx / 64
    y_apex = cys[3] - height // 2
    rel = yy - y_apex
    half = rel * half_max / (height - 1)
    tri = (rel >= 0) & (rel < height) & (np.abs(xx - (cxs[3] + shift)) <= half)
    out[tri] = 4
    return out


def build_truth(spec: PhantomSpec) -> Truth:
    """Coefficient maps, ROI labels, principal patterns, boundary distances."""
    grid = spec.grid
    nx, ny, nz = grid.dims
    level_values = (0.0,) + tuple(spec.levels)
    roi = np.empty((N_COEF, nz, ny, nx), dtype=np.int8)
    for j in range(N_COEF):
        slice_map = _shape_maps(nx, ny, spec.levels, shift=j * spec.coef_shift)
        roi[j] = slice_map[None, :, :]
    beta = np.asarray(level_values, dtype=np.float64)[roi]

    # Principal patterns on 1-based voxel coordinates; at dims (64, 64, 8)
    # these are exactly 0.5*sin(2*pi*d1/64), 0.5*cos(2*pi*d2/64) and
    # sqrt(1/2.625)*(9/8 - d3/4), mutually orthogonal with mean-square 1/8.
    d1 = np.arange(1, nx + 1)
    d2 = np.arange(1, ny + 1)
    d3 = np.arange(1, nz + 1)
    psi = np.empty((3, nz, ny, nx))
    psi[0] = np.broadcast_to(0.5 * np.sin(2 * np.pi * d1 / nx), (nz, ny, nx))
    psi[1] = np.broadcast_to(0.5 * np.cos(2 * np.pi * d2 / ny)[None, :, None], (nz, ny, nx))
    c3 = np.sqrt(3.0 / (2.0 * (nz * nz - 1.0))) if nz > 1 else 0.0
    psi[2] = np.broadcast_to((c3 * ((nz + 1) / 2.0 - d3))[:, None, None], (nz, ny, nx))

    sampling = (spec.spacing[2], spec.spacing[1], spec.spacing[0])
    dist = np.empty((N_COEF, nz, ny, nx))
    for j in range(N_COEF):
        dj = np.empty((nz, ny, nx))
        for idx in range(len(level_values)):
            region = roi[j] == idx
            if region.any():
                dj[region] = ndimage.distance_transform_edt(region, sampling=sampling)[region]
        dist[j] = dj

    flat = lambda a: a.reshape(a.shape[0], -1)
    return Truth(
        beta=flat(beta), roi=flat(roi), psi=flat(psi),
        boundary_dist=flat(dist), level_values=level_values,
    )


@dataclasses.dataclass(frozen=True)
class Replicate:
    stack: SubjectStack
    design: DesignMatrix
    scores: np.ndarray


def _covariates(spec: PhantomSpec, rng) -> np.ndarray:
    b = (rng.random(spec.n) < 0.5).astype(np.float64)
    u = 1.0 + rng.random(spec.n)
    if spec.standardize:
        group = 2.0 * b - 1.0
        age = (u - 1.5) * np.sqrt(12.0)
    else:
        group, age = b, u
    return np.column_stack([np.ones(spec.n), group, age])


def generate(spec: PhantomSpec, seed: int, rep: int = 0) -> Replicate:
    """One seeded dataset: covariates, scores, and per-subject noise.

    Streams are derived as ``SeedSequence(seed, spawn_key=(rep, k))`` with
    k = 0 for covariates and scores and k = i + 1 for subject i's noise, so
    replicates are reproducible independently of execution order.
    """
    grid = spec.grid
    mask = Mask.full(grid)
    truth = build_truth(spec)
    rng = np.random.Generator(np.random.Philox(
        np.random.SeedSequence(seed, spawn_key=(rep, 0))))
    x = _covariates(spec, rng)
    scores = rng.standard_normal((spec.n, 3)) * np.sqrt(np.asarray(spec.score_vars))
    y = x @ truth.beta + scores @ truth.psi
    n_vox = grid.n_voxels
    for i in range(spec.n):
        rng_i = np.random.Generator(np.random.Philox(
            np.random.SeedSequence(seed, spawn_key=(rep, i + 1))))
        if spec.noise == "gaussian":
            eps = rng_i.standard_normal(n_vox)
        else:
            draws = rng_i.standard_normal((3, n_vox))
            eps = np.einsum("kn,kn->n", draws, draws) - 3.0
        if spec.noise_scale != 1.0:
            eps = eps * spec.noise_scale
        y[i] += eps
    stack = SubjectStack(grid=grid, mask=mask, y=y)
    design = fit_design(x, names=("intercept", "group", "age"))
    return Replicate(stack=stack, design=design, scores=scores)


# ---------------------------------------------------------------------------
# Monte-Carlo study engine


def resolve_threads(threads=None) -> int:
    """Worker count: explicit argument, else SVCM_THREADS, else cpu-capped 4."""
    if threads is None:
        env = os.environ.get("SVCM_THREADS", "").strip()
        if env:
            try:
                threads = int(env)
            except ValueError:
                raise ValueError(f"SVCM_THREADS must be an integer, got {env!r}") from None
        else:
            threads = min(4, os.cpu_count() or 1)
    if threads < 1:
        raise ValueError(f"thread count must be >= 1, got {threads}")
    return threads


@dataclasses.dataclass(frozen=True)
class StudyRequest:
    """What the replicate engine should run and record."""

    spec: PhantomSpec
    schedule: ScaleSchedule
    reps: int = 50
    seed: int = 0
    scales: tuple = (0, 5, 10)
    coef: int = 1
    alpha: float = 0.05
    gcv_candidates: tuple = dataclasses.field(default_factory=default_gcv_grid)
    cum_threshold: float = 0.8
    lce_bandwidths: tuple = (1.1, 2.0, 4.0)
    gks_sigma: float = 2.0
    with_baselines: bool = True

    def __post_init__(self):
        if self.reps < 1:
            raise ValueError("need at least one replicate")
        bad = [s for s in self.scales if not 0 <= s <= self.schedule.n_scales]
        if bad:
            raise ValueError(f"recorded scales {bad} outside 0..{self.schedule.n_scales}")
        if not 0 <= self.coef < N_COEF:
            raise ValueError(f"coef must be 0..{N_COEF - 1}, got {self.coef}")


class _Geometry:
    """Data-independent products shared by every replicate (fork-inherited)."""

    def __init__(self, req: StudyRequest):
        spec = req.spec
        self.mask = Mask.full(spec.grid)
        self.truth = build_truth(spec)
        self.tables = {
            s: neighbor_table(self.mask, req.schedule.bandwidth(s))
            for s in range(1, req.schedule.n_scales + 1)
        }
        self.plans = []
        for h in req.gcv_candidates:
            plan = _SmootherPlan(self.mask, h)
            if plan.trace < self.mask.n_active:
                self.plans.append((h, plan))
        if not self.plans:
            raise ValueError("no usable GCV candidate bandwidth for this phantom")
        self.lce = {}
        if req.with_baselines:
            for h in req.lce_bandwidths:
                w = epanechnikov_weights(self.mask, h)
                self.lce[h] = (w, w.multiply(w).tocsr())
            offsets, kval = _gaussian_kernel(spec.grid, req.gks_sigma, 3.0)
            self.gks_corr = _FftCorrelator(self.mask, offsets, [kval])
            self.gks_den = self.gks_corr.extract(
                self.gks_corr.transform(np.ones(self.mask.n_active)), 0)[0]
        # Unit-norm truth patterns for cosine comparisons.
        psi = self.truth.psi
        self.psi_unit = psi / np.linalg.norm(psi, axis=1, keepdims=True)


_GEO: _Geometry | None = None
_REQ: StudyRequest | None = None


def _one_replicate(rep: int) -> dict:
    geo, req = _GEO, _REQ
    spec, schedule = req.spec, req.schedule
    data = generate(spec, req.seed, rep)
    stack, dm = data.stack, data.design
    raw = ls_fit(stack, dm)
    resid = residuals(stack, dm, raw)
    n_act = geo.mask.n_active

    best_score = np.inf
    best_h = None
    best_eta = None
    for h, plan in geo.plans:
        eta = plan.apply(resid)
        rss = float(((resid - eta) ** 2).sum())
        score = rss / (1.0 - plan.trace / n_act) ** 2
        if score < best_score:
            best_score, best_h, best_eta = score, h, eta

    sigma_eps = estimate_sigma_eps(resid, best_eta)
    dof = stack.n - dm.p
    eigen = eigendecompose(best_eta, spec.grid.voxel_volume, dof, req.cum_threshold)
    noise = NoiseModel(sigma_eps=sigma_eps, eta_hat=best_eta, dof=dof, eigen=eigen,
                       scores=fpc_scores(best_eta, eigen), h_opt=best_h)
    sigma_y = noise.sigma_y_diag()
    raw = CoefficientField(raw.beta, raw_variance(dm, sigma_y), label="h0")
    _, state = run_mass(raw, noise, dm, geo.mask, schedule,
                        tables=geo.tables, snapshots=req.scales)

    j = req.coef
    n_rec = len(req.scales)
    beta_rec = np.empty((n_rec, n_act))
    sd_rec = np.empty((n_rec, n_act))
    reject = np.empty((n_rec, n_act), dtype=bool)
    for k, s in enumerate(req.scales):
        snap = state.snapshots[s]
        beta_rec[k] = snap.beta[j]
        sd_rec[k] = np.sqrt(snap.var[j])
        w = snap.beta[j] ** 2 / np.maximum(snap.var[j], schedule.variance_floor)
        reject[k] = chi2_survival(1, w) < req.alpha

    k_eig = min(3, eigen.n_components)
    cos_mat = np.abs(eigen.funcs[:k_eig] / np.linalg.norm(
        eigen.funcs[:k_eig], axis=1, keepdims=True) @ geo.psi_unit.T)
    cos_diag = np.zeros(3)
    cos_diag[:k_eig] = np.diag(cos_mat)
    order_ok = k_eig == 3 and (np.argmax(cos_mat, axis=1) == np.arange(3)).all()
    lambdas = np.zeros(3)
    lambdas[:k_eig] = eigen.values[:k_eig]

    out = {
        "beta": beta_rec, "sd": sd_rec, "reject": reject,
        "h_opt": best_h, "cos": cos_diag, "order_ok": order_ok, "lambdas": lambdas,
        "stopped": state.stopped_at[j].astype(np.int16),
    }
    if req.with_baselines:
        lce = {}
        for h, (w, w2) in geo.lce.items():
            b = w @ raw.beta[j]
            sd = np.sqrt(dm.omega_inv[j, j] * (w2 @ sigma_y))
            lce[h] = (b, sd)
        out["lce"] = lce
        num = geo.gks_corr.extract(geo.gks_corr.transform(stack.y), 0)
        smoothed = SubjectStack(grid=spec.grid, mask=geo.mask, y=num / geo.gks_den)
        gfield = ls_fit(smoothed, dm)
        gsig = plug_in_sigma_y(residuals(smoothed, dm, gfield))
        gvar = raw_variance(dm, gsig)
        out["gks"] = (gfield.beta[j], np.sqrt(gvar[j]))
    return out


@dataclasses.dataclass
class StudyResult:
    """Accumulated per-voxel moments and per-replicate scalars."""

    request: StudyRequest
    truth: Truth
    reps: int
    sum_beta: np.ndarray
    sum_beta2: np.ndarray
    sum_sd: np.ndarray
    reject_count: np.ndarray
    h_opt: np.ndarray
    cos: np.ndarray
    order_ok: np.ndarray
    lambdas: np.ndarray
    stopped_count_s: np.ndarray
    lce: dict
    gks: tuple | None
    elapsed: float

    def scale_index(self, s: int) -> int:
        return self.request.scales.index(s)

    def mean_beta(self, s: int) -> np.ndarray:
        return self.sum_beta[self.scale_index(s)] / self.reps

    def bias(self, s: int) -> np.ndarray:
        return self.mean_beta(s) - self.truth.beta[self.request.coef]

    def mc_sd(self, s: int) -> np.ndarray:
        k = self.scale_index(s)
        mean = self.sum_beta[k] / self.reps
        var = (self.sum_beta2[k] - self.reps * mean * mean) / max(self.reps - 1, 1)
        return np.sqrt(np.maximum(var, 0.0))

    def mean_sd(self, s: int) -> np.ndarray:
        return self.sum_sd[self.scale_index(s)] / self.reps

    def reject_rate(self, s: int) -> np.ndarray:
        return self.reject_count[self.scale_index(s)] / self.reps

    def roi_mask(self, level_idx: int) -> np.ndarray:
        return self.truth.roi[self.request.coef] == level_idx

    def lce_mc_sd(self, h: float) -> np.ndarray:
        sb, sb2, _ = self.lce[h]
        mean = sb / self.reps
        var = (sb2 - self.reps * mean * mean) / max(self.reps - 1, 1)
        return np.sqrt(np.maximum(var, 0.0))

    def lce_mean_sd(self, h: float) -> np.ndarray:
        return self.lce[h][2] / self.reps

    def lce_bias(self, h: float) -> np.ndarray:
        return self.lce[h][0] / self.reps - self.truth.beta[self.request.coef]

    def gks_bias(self) -> np.ndarray:
        return self.gks[0] / self.reps - self.truth.beta[self.request.coef]

    def gks_mc_sd(self) -> np.ndarray:
        sb, sb2, _ = self.gks
        mean = sb / self.reps
        var = (sb2 - self.reps * mean * mean) / max(self.reps - 1, 1)
        return np.sqrt(np.maximum(var, 0.0))

    def gks_mean_sd(self) -> np.ndarray:
        return self.gks[2] / self.reps


def run_study(req: StudyRequest, threads=None) -> StudyResult:
    """Run all replicates (optionally in a fork pool) and accumulate.

    Results are reduced in replicate order whatever the worker count, and
    every replicate derives its streams from (seed, rep) alone, so repeat
    runs are bit-identical regardless of parallelism.
    """
    global _GEO, _REQ
    started = time.perf_counter()
    _GEO = _Geometry(req)
    _REQ = req
    threads = min(resolve_threads(threads), req.reps)
    n_act = _GEO.mask.n_active
    n_rec = len(req.scales)
    acc = StudyResult(
        request=req, truth=_GEO.truth, reps=req.reps,
        sum_beta=np.zeros((n_rec, n_act)), sum_beta2=np.zeros((n_rec, n_act)),
        sum_sd=np.zeros((n_rec, n_act)), reject_count=np.zeros((n_rec, n_act)),
        h_opt=np.empty(req.reps), cos=np.empty((req.reps, 3)),
        order_ok=np.empty(req.reps, dtype=bool), lambdas=np.empty((req.reps, 3)),
        stopped_count_s=np.zeros(req.schedule.n_scales + 1),
        lce={h: [np.zeros(n_act), np.zeros(n_act), np.zeros(n_act)]
             for h in (req.lce_bandwidths if req.with_baselines else ())},
        gks=[np.zeros(n_act), np.zeros(n_act), np.zeros(n_act)]
        if req.with_baselines else None,
        elapsed=0.0,
    )

    def _fold(rep, out):
        acc.sum_beta += out["beta"]
        acc.sum_beta2 += out["beta"] ** 2
        acc.sum_sd += out["sd"]
        acc.reject_count += out["reject"]
        acc.h_opt[rep] = out["h_opt"]
        acc.cos[rep] = out["cos"]
        acc.order_ok[rep] = out["order_ok"]
        acc.lambdas[rep] = out["lambdas"]
        acc.stopped_count_s += np.bincount(out["stopped"],
                                           minlength=req.schedule.n_scales + 1)
        if req.with_baselines:
            for h, (b, sd) in out["lce"].items():
                acc.lce[h][0] += b
                acc.lce[h][1] += b * b
                acc.lce[h][2] += sd
            gb, gsd = out["gks"]
            acc.gks[0] += gb
            acc.gks[1] += gb * gb
            acc.gks[2] += gsd

    if threads > 1 and hasattr(os, "fork"):
        ctx = multiprocessing.get_context("fork")
        with ctx.Pool(processes=threads) as pool:
            for rep, out in enumerate(pool.imap(_one_replicate, range(req.reps))):
                _fold(rep, out)
    else:
        for rep in range(req.reps):
            _fold(rep, _one_replicate(rep))

    acc.elapsed = time.perf_counter() - started
    _GEO = None
    _REQ = None
    return acc


@dataclasses.dataclass(frozen=True)
class RoiMetrics:
    """Estimation quality of one activation level at one scale."""

    level: float
    scale: int
    bandwidth: float
    n_voxels: int
    bias: float
    rms: float
    sd: float
    re: float


@dataclasses.dataclass(frozen=True)
class PowerMetrics:
    """Rejection rate of the per-voxel 5% Wald test for one level/scale."""

    level: float
    scale: int
    bandwidth: float
    n_voxels: int
    reject_rate: float


def _bandwidth_of(schedule: ScaleSchedule, s: int) -> float:
    return 0.0 if s == 0 else schedule.bandwidth(s)


def run_table1(spec: PhantomSpec = None, schedule: ScaleSchedule = None,
               reps: int = 50, seed: int = 0, scales=(0, 5, 10), coef: int = 1,
               threads=None, result: StudyResult = None):
    """ROI-level bias/RMS/SD/RE of one coefficient across scales.

    RMS is the across-replicate sample standard deviation of the estimate
    (bias is reported separately); SD is the mean of the estimated standard
    errors; RE their ratio.  Pass ``result`` to reuse a finished study.
    """
    if result is None:
        spec = spec or PhantomSpec()
        schedule = schedule or ScaleSchedule.default(spec.n)
        req = StudyRequest(spec=spec, schedule=schedule, reps=reps, seed=seed,
                           scales=tuple(scales), coef=coef, with_baselines=False)
        result = run_study(req, threads=threads)
    req = result.request
    rows = []
    for s in req.scales:
        rms = result.mc_sd(s)
        sd = result.mean_sd(s)
        bias = result.bias(s)
        for idx, level in enumerate(result.truth.level_values):
            sel = result.roi_mask(idx)
            if not sel.any():
                continue
            rms_m = float(rms[sel].mean())
            sd_m = float(sd[sel].mean())
            rows.append(RoiMetrics(
                level=level, scale=s, bandwidth=_bandwidth_of(req.schedule, s),
                n_voxels=int(sel.sum()), bias=float(bias[sel].mean()),
                rms=rms_m, sd=sd_m, re=rms_m / sd_m if sd_m > 0 else np.inf,
            ))
    return rows, result


def run_table2(spec: PhantomSpec = None, schedule: ScaleSchedule = None,
               reps: int = 50, seed: int = 0, scales=(0, 10), coef: int = 1,
               levels=(0.0, 0.2, 0.4), alpha: float = 0.05,
               threads=None, result: StudyResult = None):
    """Empirical size/power of the voxel-wise Wald test by activation level."""
    if result is None:
        spec = spec or PhantomSpec()
        schedule = schedule or ScaleSchedule.default(spec.n)
        req = StudyRequest(spec=spec, schedule=schedule, reps=reps, seed=seed,
                           scales=tuple(scales), coef=coef, alpha=alpha,
                           with_baselines=False)
        result = run_study(req, threads=threads)
    req = result.request
    rows = []
    for s in req.scales:
        rate = result.reject_rate(s)
        for level in levels:
            try:
                idx = result.truth.level_values.index(level)
            except ValueError:
                raise ValueError(f"level {level} is not one of {result.truth.level_values}")
            sel = result.roi_mask(idx)
            if not sel.any():
                continue
            rows.append(PowerMetrics(
                level=level, scale=s, bandwidth=_bandwidth_of(req.schedule, s),
                n_voxels=int(sel.sum()), reject_rate=float(rate[sel].mean()),
            ))
    return rows, result
