"""Adaptive multiscale aggregation: kernels, sweeps, stopping, quantiles."""

import numpy as np
import pytest
from scipy import sparse

from svcm.design import DesignMatrix
from svcm.fpca import NoiseModel, eigendecompose, fpc_scores
from svcm.grid import Grid3, Mask, neighbor_table
from svcm.leastsq import CoefficientField
from svcm.mass import (
    MassState,
    ScaleSchedule,
    adaptive_weight,
    chi2_lower_quantile,
    chi2_survival,
    chi2_upper_quantile,
    mass_sweep,
    run_mass,
    similarity,
    stop_check,
)

from oracles import (
    adaptive_sweep,
    aggregate_variance,
    chi2_cdf,
    chi2_quantile_bisect,
)

RNG_SEED = 311

# Frozen expectations for the chi-square(1) quantiles the schedule is built
# from, checked to more digits than the schedule ever needs.
CHI2_UPPER_1 = {
    0.5: 0.4549364231195724,
    0.05: 3.8414588206941285,
    0.8: 0.06418475466730152,
}


# ---------------------------------------------------------------------------
# chi-square quantiles and survival


@pytest.mark.parametrize("a,want", sorted(CHI2_UPPER_1.items()))
def test_chi2_upper_quantile_frozen_values(a, want):
    assert chi2_upper_quantile(1, a) == pytest.approx(want, abs=1e-12)


@pytest.mark.parametrize("df", [1, 2, 3, 7])
@pytest.mark.parametrize("a", [0.01, 0.2, 0.5, 0.8, 0.99])
def test_chi2_quantiles_match_bisection_oracle(df, a):
    assert chi2_upper_quantile(df, a) == pytest.approx(
        chi2_quantile_bisect(df, a, upper=True), abs=1e-10)
    assert chi2_lower_quantile(df, a) == pytest.approx(
        chi2_quantile_bisect(df, a, upper=False), abs=1e-10)


def test_chi2_quantiles_are_inverse_pairs():
    for a in (0.05, 0.3, 0.9):
        assert chi2_lower_quantile(1, a) == pytest.approx(
            chi2_upper_quantile(1, 1.0 - a), rel=1e-12)


@pytest.mark.parametrize("x", [0.1, 1.0, 3.84, 10.0])
def test_chi2_survival_matches_cdf_oracle(x):
    for df in (1, 4):
        assert chi2_survival(df, x) == pytest.approx(1.0 - chi2_cdf(df, x), abs=1e-12)


def test_chi2_rejects_bad_arguments():
    with pytest.raises(ValueError):
        chi2_upper_quantile(1, 0.0)
    with pytest.raises(ValueError):
        chi2_upper_quantile(1, 1.0)
    with pytest.raises(ValueError):
        chi2_lower_quantile(0, 0.5)


# ---------------------------------------------------------------------------
# schedule construction


def test_default_schedule_quantile_rules():
    sched = ScaleSchedule.default(60)
    # C_n = n^0.4 times the lower-tail 0.8 quantile.
    assert sched.c_n == pytest.approx(60**0.4 * chi2_lower_quantile(1, 0.8), rel=1e-12)
    assert sched.c_n == pytest.approx(8.44758696, abs=1e-6)
    # C_s = chi2_1(0.8/s) upper-tail values, increasing in s.
    want = [chi2_upper_quantile(1, 0.8 / s) for s in range(1, 11)]
    np.testing.assert_allclose(sched.cs, want, rtol=1e-12)
    assert all(a < b for a, b in zip(sched.cs, sched.cs[1:]))
    assert sched.cs[0] == pytest.approx(CHI2_UPPER_1[0.8], abs=1e-12)
    assert sched.first_check == 2


def test_default_schedule_alternative_conventions():
    up = ScaleSchedule.default(60, cn_convention="upper")
    assert up.c_n == pytest.approx(60**0.4 * CHI2_UPPER_1[0.8], rel=1e-12)
    lo = ScaleSchedule.default(60, cs_convention="lower")
    want = [chi2_lower_quantile(1, 0.8 / s) for s in range(1, 11)]
    np.testing.assert_allclose(lo.cs, want, rtol=1e-12)
    assert all(a > b for a, b in zip(lo.cs, lo.cs[1:]))  # decreasing ladder
    override = ScaleSchedule.default(60, c_n=2.5)
    assert override.c_n == 2.5
    with pytest.raises(ValueError):
        ScaleSchedule.default(60, cs_convention="sideways")
    with pytest.raises(ValueError):
        ScaleSchedule.default(60, cn_convention="sideways")


def test_schedule_bandwidths_and_validation():
    sched = ScaleSchedule.default(60, c_h=1.1, n_scales=10)
    assert sched.bandwidth(1) == pytest.approx(1.1)
    assert sched.bandwidth(10) == pytest.approx(1.1**10)
    assert sched.bandwidths == tuple(1.1**s for s in range(1, 11))
    with pytest.raises(ValueError):
        sched.bandwidth(0)
    with pytest.raises(ValueError):
        sched.bandwidth(11)
    with pytest.raises(ValueError):
        ScaleSchedule(c_h=1.0, n_scales=1, c_n=1.0, cs=(1.0,))
    with pytest.raises(ValueError):
        ScaleSchedule(c_h=1.1, n_scales=2, c_n=1.0, cs=(1.0,))
    with pytest.raises(ValueError):
        ScaleSchedule(c_h=1.1, n_scales=1, c_n=0.0, cs=(1.0,))
    with pytest.raises(ValueError):
        ScaleSchedule(c_h=1.1, n_scales=1, c_n=1.0, cs=(1.0,), kst="boxcar")
    with pytest.raises(ValueError):
        ScaleSchedule(c_h=1.1, n_scales=1, c_n=1.0, cs=(1.0,), first_check=0)


# ---------------------------------------------------------------------------
# similarity statistic and member weights


def test_similarity_examples():
    beta = np.array([1.0, 1.0, 1.2, 0.4])
    var = np.array([0.04, 0.09, 0.04, 0.01])
    assert similarity(beta, var, 0, 1) == 0.0
    # diff = 0.2, variance at the center = 0.04 -> D = 1.0
    assert similarity(beta, var, 0, 2) == pytest.approx(1.0, rel=1e-12)
    # asymmetric: denominator switches to the other voxel's variance
    assert similarity(beta, var, 2, 0) == pytest.approx(0.04 / 0.04)
    assert similarity(beta, var, 3, 0) == pytest.approx(0.36 / 0.01)
    # flooring keeps zero-variance centers finite
    var0 = np.array([0.0, 1.0])
    assert np.isfinite(similarity(np.array([0.0, 1.0]), var0, 0, 1))


def test_adaptive_weight_examples():
    assert adaptive_weight(0.0, 2.0, 0.0, 5.0) == 1.0
    assert adaptive_weight(2.0, 2.0, 0.0, 5.0) == 0.0
    assert adaptive_weight(2.5, 2.0, 0.0, 5.0) == 0.0
    # distance h/2 and D = C_n: 0.5 * exp(-1)
    got = adaptive_weight(1.0, 2.0, 5.0, 5.0)
    assert got == pytest.approx(0.5 * np.exp(-1.0), rel=1e-12)
    assert got == pytest.approx(0.1839397, abs=1e-6)


def test_adaptive_weight_front_kernel():
    # min(1, 2(1-u))_+ : flat to u = 1/2, linear to zero at u = 1.
    assert adaptive_weight(0.0, 2.0, 1.0, 4.0, kst="front") == 1.0
    assert adaptive_weight(0.0, 2.0, 3.0, 4.0, kst="front") == pytest.approx(0.5)
    assert adaptive_weight(0.0, 2.0, 8.0, 4.0, kst="front") == 0.0


# ---------------------------------------------------------------------------
# sweeps against the dense oracle

P = 2
N_SUB = 4
N_VOX_1D = 8


def _line_fixture(jump=0.0, seed=RNG_SEED):
    """1D 8-voxel toy problem with a dense-oracle-compatible layout."""
    rng = np.random.default_rng(seed)
    grid = Grid3(dims=(N_VOX_1D, 1, 1), spacing=(1.0, 1.0, 1.0))
    mask = Mask.full(grid)
    coords = np.stack([np.arange(N_VOX_1D), np.zeros(N_VOX_1D, dtype=int),
                       np.zeros(N_VOX_1D, dtype=int)], axis=1)
    x = np.hstack([np.ones((N_SUB, 1)), rng.normal(size=(N_SUB, 1))])
    design = DesignMatrix(x, names=("b0", "b1"))
    raw_beta = rng.normal(size=(P, N_VOX_1D))
    raw_beta[:, N_VOX_1D // 2:] += jump
    raw_var = 0.05 + 0.02 * rng.random((P, N_VOX_1D))
    eta = rng.normal(size=(N_SUB, N_VOX_1D)) * 0.3
    sigma_eps = 0.5 + 0.1 * rng.random(N_VOX_1D)
    dof = N_SUB - P
    eigen = eigendecompose(eta, grid.voxel_volume, dof)
    noise = NoiseModel(sigma_eps=sigma_eps, eta_hat=eta, dof=dof, eigen=eigen,
                       scores=fpc_scores(eta, eigen), h_opt=1.5)
    return grid, mask, coords, design, raw_beta, raw_var, noise


def _fresh_state(raw_beta, raw_var):
    p, n_vox = raw_beta.shape
    return MassState(
        raw_beta=raw_beta.copy(), raw_var=raw_var.copy(),
        beta=raw_beta.copy(), var=raw_var.copy(),
        frozen=np.zeros((p, n_vox), dtype=bool),
        stopped_at=np.full((p, n_vox), -1, dtype=np.int16),
        weights=[sparse.identity(n_vox, format="csr") for _ in range(p)],
    )


@pytest.mark.parametrize("kst", ["exp", "front"])
def test_mass_sweep_matches_dense_oracle(kst):
    grid, mask, coords, design, raw_beta, raw_var, noise = _line_fixture()
    sched = ScaleSchedule.default(N_SUB, c_h=1.7, n_scales=2, c_n=2.0, kst=kst)
    state = _fresh_state(raw_beta, raw_var)
    table = neighbor_table(mask, sched.bandwidth(1))
    sweep = mass_sweep(state, 1, table, noise, design, sched)
    for j in range(P):
        want_beta, w_mat = adaptive_sweep(
            coords, grid.spacing, raw_beta[j], raw_var[j], raw_beta[j],
            sched.bandwidth(1), sched.c_n, kst=kst)
        np.testing.assert_allclose(sweep.beta[j], want_beta, atol=1e-10)
        np.testing.assert_allclose(sweep.weights[j].toarray(), w_mat, atol=1e-12)
        want_var = [aggregate_variance(w_mat[r], noise.eta_hat, noise.sigma_eps,
                                       noise.dof, design.omega_inv[j, j])
                    for r in range(N_VOX_1D)]
        np.testing.assert_allclose(sweep.var[j], want_var, atol=1e-10)


def test_two_scale_propagation_matches_oracle_chain():
    # Second sweep gates on the first sweep's estimates but still aggregates
    # the raw field; the oracle chain mirrors that by hand.
    grid, mask, coords, design, raw_beta, raw_var, noise = _line_fixture()
    big = tuple([1e9] * 2)  # no freezing
    sched = ScaleSchedule(c_h=1.6, n_scales=2, c_n=3.0, cs=big)
    final, state = run_mass(
        CoefficientField(raw_beta, raw_var), noise, design, mask, sched)
    for j in range(P):
        b1, _ = adaptive_sweep(coords, grid.spacing, raw_beta[j], raw_var[j],
                               raw_beta[j], sched.bandwidth(1), sched.c_n)
        w1 = adaptive_sweep(coords, grid.spacing, raw_beta[j], raw_var[j],
                            raw_beta[j], sched.bandwidth(1), sched.c_n)[1]
        v1 = np.array([aggregate_variance(w1[r], noise.eta_hat, noise.sigma_eps,
                                          noise.dof, design.omega_inv[j, j])
                       for r in range(N_VOX_1D)])
        b2, _ = adaptive_sweep(coords, grid.spacing, b1, v1, raw_beta[j],
                               sched.bandwidth(2), sched.c_n)
        np.testing.assert_allclose(final.beta[j], b2, atol=1e-10)


def test_sweep_reduces_to_location_kernel_when_cn_infinite():
    grid, mask, coords, design, raw_beta, raw_var, noise = _line_fixture()
    sched = ScaleSchedule.default(N_SUB, c_h=2.2, n_scales=1, c_n=1e30)
    state = _fresh_state(raw_beta, raw_var)
    table = neighbor_table(mask, sched.bandwidth(1))
    sweep = mass_sweep(state, 1, table, noise, design, sched)
    h = sched.bandwidth(1)
    for j in range(P):
        want = np.empty(N_VOX_1D)
        for r in range(N_VOX_1D):
            dist = np.abs(np.arange(N_VOX_1D) - r).astype(float)
            kloc = np.maximum(0.0, 1.0 - dist / h)
            want[r] = kloc @ raw_beta[j] / kloc.sum()
        np.testing.assert_allclose(sweep.beta[j], want, atol=1e-12)


def test_weight_rows_are_normalized_and_bounded():
    grid, mask, coords, design, raw_beta, raw_var, noise = _line_fixture()
    sched = ScaleSchedule.default(N_SUB, c_h=1.9, n_scales=1)
    state = _fresh_state(raw_beta, raw_var)
    table = neighbor_table(mask, sched.bandwidth(1))
    sweep = mass_sweep(state, 1, table, noise, design, sched)
    for j in range(P):
        w = sweep.weights[j]
        np.testing.assert_allclose(np.asarray(w.sum(axis=1)).ravel(), 1.0, atol=1e-12)
        assert (w.data >= 0).all() and (w.data <= 1 + 1e-12).all()


def test_cross_boundary_weights_vanish_for_large_jumps():
    # With D/C_n > 14 the similarity kernel alone is below exp(-14) < 1e-6.
    grid, mask, coords, design, raw_beta, raw_var, noise = _line_fixture(jump=10.0)
    c_n = 2.0
    d_min = 10.0**2 / raw_var.max() / 2  # worst-case D across the jump, halved
    assert d_min / c_n > 14
    sched = ScaleSchedule.default(N_SUB, c_h=3.0, n_scales=1, c_n=c_n)
    state = _fresh_state(raw_beta, raw_var)
    table = neighbor_table(mask, sched.bandwidth(1))
    sweep = mass_sweep(state, 1, table, noise, design, sched)
    half = N_VOX_1D // 2
    for j in range(P):
        w = sweep.weights[j].toarray()
        assert w[:half, half:].max() < 1e-6
        assert w[half:, :half].max() < 1e-6


def test_noise_free_piecewise_constant_is_reproduced_inside_regions():
    grid = Grid3(dims=(12, 1, 1), spacing=(1.0, 1.0, 1.0))
    mask = Mask.full(grid)
    beta = np.where(np.arange(12) < 6, 1.0, 3.0)[None, :]
    var = np.full_like(beta, 0.04)
    eta = np.zeros((3, 12))
    noise = NoiseModel(sigma_eps=np.zeros(12), eta_hat=eta, dof=2,
                       eigen=eigendecompose(eta + 1e-9, 1.0, 2),
                       scores=np.zeros((3, 1)), h_opt=1.0)
    design = DesignMatrix(np.ones((3, 1)), names=("b0",))
    sched = ScaleSchedule(c_h=2.0, n_scales=1, c_n=1e30, cs=(1e9,))
    final, _ = run_mass(CoefficientField(beta, var), noise, design, mask, sched)
    interior = np.r_[0:4, 8:12]  # farther than h = 2 from the jump at 5|6
    np.testing.assert_allclose(final.beta[0, interior], beta[0, interior], atol=1e-12)


def test_homogeneous_variance_never_exceeds_raw_with_open_gate():
    rng = np.random.default_rng(RNG_SEED + 9)
    grid = Grid3(dims=(7, 7, 3), spacing=(1.0, 1.0, 1.0))
    mask = Mask.full(grid)
    n_vox = mask.n_active
    eta = rng.normal(size=(6, n_vox)) * 0.2
    sigma_eps = np.ones(n_vox)
    design = DesignMatrix(np.hstack([np.ones((6, 1)), rng.normal(size=(6, 1))]),
                          names=("b0", "b1"))
    dof = 4
    noise = NoiseModel(sigma_eps=sigma_eps, eta_hat=eta, dof=dof,
                       eigen=eigendecompose(eta, 1.0, dof),
                       scores=np.zeros((6, 1)), h_opt=1.0)
    raw_beta = rng.normal(size=(2, n_vox))
    sigma_y = np.einsum("ir,ir->r", eta, eta) / dof + sigma_eps
    raw_var = np.outer(np.diag(design.omega_inv), sigma_y)
    sched = ScaleSchedule(c_h=1.8, n_scales=1, c_n=1e30, cs=(1e9,))
    final, _ = run_mass(CoefficientField(raw_beta, raw_var), noise, design, mask, sched)
    assert (final.var <= raw_var + 1e-12).all()


# ---------------------------------------------------------------------------
# stopping


def _stop_fixture():
    grid, mask, coords, design, raw_beta, raw_var, noise = _line_fixture()
    state = _fresh_state(raw_beta, raw_var)
    return state, raw_beta, raw_var


def test_stop_check_threshold_rule():
    from svcm.mass import SweepResult

    state, raw_beta, raw_var = _stop_fixture()
    cs = (0.5, 0.5)
    sched = ScaleSchedule(c_h=1.5, n_scales=2, c_n=1.0, cs=cs, first_check=1)
    # candidate equal to raw: D = 0, nothing freezes
    sweep = SweepResult(s=1, beta=raw_beta.copy(), var=raw_var.copy(), weights=[])
    assert not stop_check(state, sweep, sched).any()
    # diff^2 = 2 * C_s * var: D = 2 C_s > C_s freezes exactly those entries
    shifted = raw_beta + np.sqrt(2 * cs[0] * raw_var)
    sweep = SweepResult(s=1, beta=shifted, var=raw_var.copy(), weights=[])
    assert stop_check(state, sweep, sched).all()
    # below the threshold nothing freezes: diff^2 = C_s * var / 2
    below = raw_beta + np.sqrt(0.5 * cs[0] * raw_var)
    sweep = SweepResult(s=1, beta=below, var=raw_var.copy(), weights=[])
    assert not stop_check(state, sweep, sched).any()


def test_stop_check_honors_first_check_and_frozen():
    from svcm.mass import SweepResult

    state, raw_beta, raw_var = _stop_fixture()
    sched = ScaleSchedule(c_h=1.5, n_scales=3, c_n=1.0, cs=(0.1,) * 3, first_check=3)
    wild = raw_beta + 100.0
    for s in (1, 2):
        sweep = SweepResult(s=s, beta=wild, var=raw_var, weights=[])
        assert not stop_check(state, sweep, sched).any()
    sweep = SweepResult(s=3, beta=wild, var=raw_var, weights=[])
    flags = stop_check(state, sweep, sched)
    assert flags.all()
    # already-frozen entries are not re-flagged
    state.frozen[0, 2] = True
    flags = stop_check(state, sweep, sched)
    assert not flags[0, 2]
    assert flags[1, 2]


def test_run_mass_revert_and_freeze_semantics():
    grid, mask, coords, design, raw_beta, raw_var, noise = _line_fixture()
    # Freeze everything at s = 2 via an impossible second threshold; the
    # final field must then be the s = 1 sweep.
    sched2 = ScaleSchedule(c_h=1.6, n_scales=2, c_n=3.0, cs=(1e9, -0.0 + 1e-300),
                           first_check=1)
    final2, state2 = run_mass(CoefficientField(raw_beta, raw_var), noise,
                              design, mask, sched2, snapshots=(1, 2))
    sched1 = ScaleSchedule(c_h=1.6, n_scales=1, c_n=3.0, cs=(1e9,), first_check=1)
    final1, _ = run_mass(CoefficientField(raw_beta, raw_var), noise,
                         design, mask, sched1)
    np.testing.assert_array_equal(final2.beta, final1.beta)
    np.testing.assert_array_equal(final2.var, final1.var)
    assert (state2.stopped_at == 2).all()
    assert (state2.frozen).all()
    # snapshots: scale 2 equals the reverted field, bit for bit
    np.testing.assert_array_equal(state2.snapshots[2].beta, final2.beta)


def test_run_mass_zero_scales_returns_raw():
    grid, mask, coords, design, raw_beta, raw_var, noise = _line_fixture()
    sched = ScaleSchedule(c_h=1.5, n_scales=0, c_n=1.0, cs=())
    final, state = run_mass(CoefficientField(raw_beta, raw_var), noise,
                            design, mask, sched, snapshots=(0,))
    np.testing.assert_array_equal(final.beta, raw_beta)
    np.testing.assert_array_equal(final.var, raw_var)
    np.testing.assert_array_equal(state.snapshots[0].beta, raw_beta)


def test_run_mass_frozen_entries_bit_identical_across_scales():
    grid, mask, coords, design, raw_beta, raw_var, noise = _line_fixture()
    # Small threshold at s = 2 freezes a subset; later scales are generous.
    cs = (1e9, 0.05, 1e9, 1e9)
    sched = ScaleSchedule(c_h=1.4, n_scales=4, c_n=3.0, cs=cs, first_check=1)
    final, state = run_mass(CoefficientField(raw_beta, raw_var), noise,
                            design, mask, sched, snapshots=(2, 3, 4))
    frozen2 = state.stopped_at == 2
    assert frozen2.any(), "fixture should freeze at least one entry at s=2"
    for s in (3, 4):
        snap = state.snapshots[s]
        np.testing.assert_array_equal(snap.beta[frozen2],
                                      state.snapshots[2].beta[frozen2])
        np.testing.assert_array_equal(snap.var[frozen2],
                                      state.snapshots[2].var[frozen2])
    untouched = state.stopped_at == 4
    assert untouched.any()


def test_run_mass_deep_interior_rarely_freezes():
    # Homogeneous truth, default-style thresholds: interior voxels should
    # nearly always ride the full ladder.
    rng = np.random.default_rng(RNG_SEED + 5)
    grid = Grid3(dims=(10, 10, 4), spacing=(1.0, 1.0, 1.0))
    mask = Mask.full(grid)
    n_vox, n, p = mask.n_active, 24, 2
    design = DesignMatrix(np.hstack([np.ones((n, 1)),
                                     rng.choice([-1.0, 1.0], size=(n, 1))]),
                          names=("b0", "b1"))
    sched = ScaleSchedule.default(n, n_scales=6)
    reps, frac = 8, []
    for _ in range(reps):
        eta = rng.normal(size=(n, n_vox)) * 0.3
        eps = rng.normal(size=(n, n_vox))
        y = eta + eps  # beta = 0 everywhere
        bhat = np.linalg.solve(design.x.T @ design.x, design.x.T @ y)
        sigma_y = ((y - design.x @ bhat) ** 2).mean(axis=0)
        raw_var = np.outer(np.diag(design.omega_inv), sigma_y)
        noise = NoiseModel(sigma_eps=np.ones(n_vox) * 0.9, eta_hat=eta * 0.9,
                           dof=n - p, eigen=eigendecompose(eta, 1.0, n - p),
                           scores=np.zeros((n, 1)), h_opt=2.0)
        _, state = run_mass(CoefficientField(bhat, raw_var), noise, design,
                            mask, sched)
        frac.append((state.stopped_at == sched.n_scales).mean())
    assert np.mean(frac) >= 0.95
