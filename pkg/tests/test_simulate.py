import numpy as np
import pytest

from svcm.mass import ScaleSchedule
from svcm.simulate import (
    PhantomSpec,
    StudyRequest,
    build_truth,
    generate,
    resolve_threads,
    run_study,
    run_table1,
    run_table2,
)


class TestPhantomSpec:
    def test_rejects_bad_noise(self):
        with pytest.raises(ValueError, match="noise"):
            PhantomSpec(noise="laplace")

    def test_rejects_too_few_subjects(self):
        with pytest.raises(ValueError, match="subjects"):
            PhantomSpec(n=3)

    def test_rejects_wrong_level_count(self):
        with pytest.raises(ValueError, match="four"):
            PhantomSpec(levels=(0.2, 0.4))

    def test_rejects_negative_noise_scale(self):
        with pytest.raises(ValueError, match="nonnegative"):
            PhantomSpec(noise_scale=-0.5)


@pytest.fixture(scope="module")
def default_truth():
    return build_truth(PhantomSpec())


class TestTruth:
    def test_level_values_and_beta_lookup(self, default_truth):
        t = default_truth
        assert t.level_values == (0.0, 0.2, 0.4, 0.6, 0.8)
        np.testing.assert_array_equal(
            t.beta, np.asarray(t.level_values)[t.roi])
        assert t.roi.shape == (3, 64 * 64 * 8)
        assert set(np.unique(t.roi)) == {0, 1, 2, 3, 4}

    def test_slices_are_identical_through_z(self, default_truth):
        t = default_truth
        roi = t.roi.reshape(3, 8, 64, 64)
        dist = t.boundary_dist.reshape(3, 8, 64, 64)
        for z in range(1, 8):
            np.testing.assert_array_equal(roi[:, z], roi[:, 0])
            np.testing.assert_array_equal(dist[:, z], dist[:, 0])

    def test_square_region_is_a_12x12_block(self, default_truth):
        sl = default_truth.roi.reshape(3, 8, 64, 64)[0, 0]
        ys, xs = np.nonzero(sl == 1)
        assert len(ys) == 144
        assert xs.max() - xs.min() == 11 and ys.max() - ys.min() == 11

    def test_coef_maps_shift_in_x(self):
        t0 = build_truth(PhantomSpec(coef_shift=0))
        np.testing.assert_array_equal(t0.roi[1], t0.roi[0])
        np.testing.assert_array_equal(t0.roi[2], t0.roi[0])
        t2 = build_truth(PhantomSpec(coef_shift=2))
        a = t2.roi.reshape(3, 8, 64, 64)
        np.testing.assert_array_equal(a[1, 0, :, 2:], a[0, 0, :, :-2])
        np.testing.assert_array_equal(a[2, 0, :, 4:], a[0, 0, :, :-4])

    def test_principal_patterns_closed_forms(self, default_truth):
        psi = default_truth.psi.reshape(3, 8, 64, 64)
        d1 = np.arange(1, 65)
        d2 = np.arange(1, 65)
        d3 = np.arange(1, 9)
        np.testing.assert_allclose(
            psi[0], np.broadcast_to(0.5 * np.sin(2 * np.pi * d1 / 64), (8, 64, 64)),
            atol=1e-15)
        np.testing.assert_allclose(
            psi[1],
            np.broadcast_to((0.5 * np.cos(2 * np.pi * d2 / 64))[None, :, None], (8, 64, 64)),
            atol=1e-15)
        np.testing.assert_allclose(
            psi[2],
            np.broadcast_to(
                (np.sqrt(1.0 / 2.625) * (9.0 / 8.0 - d3 / 4.0))[:, None, None],
                (8, 64, 64)),
            atol=1e-12)

    def test_patterns_orthonormal_in_mean_square(self, default_truth):
        psi = default_truth.psi
        gram = psi @ psi.T / psi.shape[1]
        np.testing.assert_allclose(gram, np.eye(3) / 8.0, atol=1e-12)

    def test_boundary_distances(self, default_truth):
        t = default_truth
        dist = t.boundary_dist[0]
        assert np.all(dist > 0)
        # disk of radius 7: its center voxel sits at least 6 voxels inside
        sl = t.roi.reshape(3, 8, 64, 64)[0, 0]
        d0 = t.boundary_dist.reshape(3, 8, 64, 64)[0, 0]
        assert d0[sl == 2].max() >= 6.0
        # voxels one step from a different label have distance exactly 1
        assert d0.min() == 1.0


class TestGenerate:
    def test_deterministic_per_seed_and_rep(self):
        spec = PhantomSpec(dims=(8, 8, 2), n=6)
        a = generate(spec, seed=5, rep=2)
        b = generate(spec, seed=5, rep=2)
        np.testing.assert_array_equal(a.stack.y, b.stack.y)
        np.testing.assert_array_equal(a.design.x, b.design.x)
        c = generate(spec, seed=5, rep=3)
        d = generate(spec, seed=6, rep=2)
        assert not np.array_equal(a.stack.y, c.stack.y)
        assert not np.array_equal(a.stack.y, d.stack.y)

    def test_standardized_covariates(self):
        spec = PhantomSpec(dims=(8, 8, 2), n=400)
        x = generate(spec, seed=1).design.x
        np.testing.assert_array_equal(x[:, 0], 1.0)
        assert set(np.unique(x[:, 1])) == {-1.0, 1.0}
        assert abs(x[:, 2].mean()) < 0.2
        assert abs(x[:, 2].var() - 1.0) < 0.15
        assert x[:, 2].min() >= -np.sqrt(3.0) and x[:, 2].max() <= np.sqrt(3.0)

    def test_plain_covariates(self):
        spec = PhantomSpec(dims=(8, 8, 2), n=200, standardize=False)
        x = generate(spec, seed=1).design.x
        assert set(np.unique(x[:, 1])) == {0.0, 1.0}
        assert x[:, 2].min() >= 1.0 and x[:, 2].max() <= 2.0

    def test_noise_free_model_structure(self):
        spec = PhantomSpec(dims=(16, 16, 4), n=8, noise_scale=0.0)
        data = generate(spec, seed=11)
        truth = build_truth(spec)
        want = data.design.x @ truth.beta + data.scores @ truth.psi
        np.testing.assert_allclose(data.stack.y, want, atol=1e-12)

    def test_score_variances(self):
        spec = PhantomSpec(dims=(4, 4, 2), n=8000, noise_scale=0.0)
        scores = generate(spec, seed=3).scores
        np.testing.assert_allclose(scores.var(axis=0), (0.6, 0.3, 0.1), rtol=0.1)

    def test_chisq3_noise_moments(self):
        spec = PhantomSpec(dims=(16, 16, 4), n=6, noise="chisq3",
                           noise_scale=0.5, score_vars=(0.0, 0.0, 0.0))
        data = generate(spec, seed=7)
        truth = build_truth(spec)
        eps = data.stack.y - data.design.x @ truth.beta
        # centered chi-square(3), scaled: support bounded below at -3*scale
        assert eps.min() >= -1.5 - 1e-12
        assert abs(eps.mean()) < 0.05
        np.testing.assert_allclose(eps.var(), 6.0 * 0.25, rtol=0.15)
        assert ((eps / 0.5) ** 3).mean() > 1.0  # right-skewed


class TestResolveThreads:
    def test_explicit_wins(self, monkeypatch):
        monkeypatch.setenv("SVCM_THREADS", "7")
        assert resolve_threads(2) == 2

    def test_env_variable(self, monkeypatch):
        monkeypatch.setenv("SVCM_THREADS", "3")
        assert resolve_threads() == 3

    def test_env_must_be_integer(self, monkeypatch):
        monkeypatch.setenv("SVCM_THREADS", "many")
        with pytest.raises(ValueError, match="SVCM_THREADS"):
            resolve_threads()

    def test_default_capped(self, monkeypatch):
        monkeypatch.delenv("SVCM_THREADS", raising=False)
        got = resolve_threads()
        assert 1 <= got <= 4

    def test_rejects_nonpositive(self):
        with pytest.raises(ValueError, match=">= 1"):
            resolve_threads(0)


@pytest.fixture(scope="module")
def small_study():
    spec = PhantomSpec(dims=(16, 16, 2), n=12)
    req = StudyRequest(spec=spec, schedule=ScaleSchedule.default(12, n_scales=4),
                       reps=2, seed=4, scales=(0, 2, 4), with_baselines=True)
    return req, run_study(req, threads=1)


class TestRunStudy:
    def test_thread_count_does_not_change_results(self, small_study):
        req, res1 = small_study
        res2 = run_study(req, threads=2)
        for s in req.scales:
            np.testing.assert_array_equal(res1.mean_beta(s), res2.mean_beta(s))
            np.testing.assert_array_equal(res1.mean_sd(s), res2.mean_sd(s))
        np.testing.assert_array_equal(res1.h_opt, res2.h_opt)
        np.testing.assert_array_equal(res1.cos, res2.cos)
        for h in req.lce_bandwidths:
            np.testing.assert_array_equal(res1.lce_mean_sd(h), res2.lce_mean_sd(h))
        np.testing.assert_array_equal(res1.gks_bias(), res2.gks_bias())

    def test_accumulator_consistency(self, small_study):
        req, res = small_study
        assert res.reps == 2
        k = res.scale_index(2)
        assert k == 1
        mean = res.sum_beta[k] / 2
        np.testing.assert_allclose(res.mean_beta(2), mean, atol=0)
        # two-replicate sample SD has a closed form from the running sums
        var = res.sum_beta2[k] - 2 * mean * mean
        np.testing.assert_allclose(res.mc_sd(2) ** 2, np.maximum(var, 0), atol=1e-12)
        rate = res.reject_rate(4)
        assert rate.min() >= 0 and rate.max() <= 1
        assert np.all(res.h_opt > 0)
        assert res.stopped_count_s.sum() == 2 * res.truth.beta.shape[1]

    def test_roi_masks_partition_the_grid(self, small_study):
        _, res = small_study
        total = sum(int(res.roi_mask(i).sum()) for i in range(5))
        assert total == res.truth.beta.shape[1]

    def test_table1_rows(self, small_study):
        req, res = small_study
        rows, back = run_table1(result=res)
        assert back is res
        assert [r.scale for r in rows[:5]] == [0] * 5
        levels_seen = {(r.scale, r.level) for r in rows}
        assert len(levels_seen) == 3 * 5
        for r in rows:
            assert r.n_voxels == int(res.roi_mask(
                res.truth.level_values.index(r.level)).sum())
            assert r.rms > 0 and r.sd > 0
            np.testing.assert_allclose(r.re, r.rms / r.sd, rtol=1e-12)
            want_h = 0.0 if r.scale == 0 else req.schedule.bandwidth(r.scale)
            assert r.bandwidth == want_h

    def test_table2_rows(self, small_study):
        _, res = small_study
        rows, _ = run_table2(result=res, levels=(0.0, 0.4))
        assert [(r.scale, r.level) for r in rows] == [
            (0, 0.0), (0, 0.4), (2, 0.0), (2, 0.4), (4, 0.0), (4, 0.4)]
        for r in rows:
            assert 0.0 <= r.reject_rate <= 1.0

    def test_table2_rejects_unknown_level(self, small_study):
        _, res = small_study
        with pytest.raises(ValueError, match="0.3"):
            run_table2(result=res, levels=(0.3,))
