import warnings

import numpy as np
import pytest

from cfisac.baselines import (BASELINE_LABEL, benchmark_compare, constrained_ssnr_opt, max_min_sinr_surrogate,
                              null_space_project, nullspace_sensing_beams, run_baseline, ssnr_upper_bound,
                              zero_forcing_beams)
from cfisac.metrics import min_sinr, sinr_all, ssnr
from cfisac.model import cnn1d_spec, init_model
from cfisac.scenario import SystemConfig, build_channels, generate_dataset, sample_positions, scene_rng

from conftest import random_beams


def powers(W):
    return np.sum(np.abs(W) ** 2, axis=(1, 2))


class TestBound:
    def test_default(self, system):
        assert ssnr_upper_bound(system) == pytest.approx(3.2)

    def test_scales(self):
        cfg = SystemConfig(num_aps=3, antennas_per_ap=8, power_budget=(1.0, 2.0, 3.0),
                           sensing_gain_var=0.5, ap_noise_var=2.0)
        assert ssnr_upper_bound(cfg) == pytest.approx(3 * 0.5 * 8 * 6 / (3 * 2.0))

    def test_random_feasible_beams_below_bound(self, system):
        rng = np.random.default_rng(0)
        for i in range(300):
            sc = build_channels(sample_positions(system, scene_rng(1, i)), system)
            W = random_beams(rng, 2, 16, 6, power=rng.uniform(0, 1))
            assert ssnr(sc, W, 0.1, 1.0) <= 3.2 + 1e-9


class TestNullSpace:
    def test_properties(self, scene):
        H = scene.comm_channels[0]
        v = null_space_project(H, scene.sensing_steering[0])
        np.testing.assert_allclose(H.conj().T @ v, 0, atol=1e-10)
        # idempotent and never longer than the input
        np.testing.assert_allclose(null_space_project(H, v), v, atol=1e-10)
        assert np.linalg.norm(v) <= np.linalg.norm(scene.sensing_steering[0]) + 1e-12

    def test_against_pinv_projector(self, scene):
        H = scene.comm_channels[1]
        x = np.random.default_rng(0).standard_normal(16) + 0j
        P = np.eye(16) - H @ np.linalg.pinv(H)
        np.testing.assert_allclose(null_space_project(H, x), P @ x, atol=1e-9)

    def test_full_rank_warns(self):
        H = np.eye(3, dtype=complex)
        with pytest.warns(RuntimeWarning):
            out = null_space_project(H, np.ones(3, complex))
        np.testing.assert_array_equal(out, 0)

    def test_sensing_beams_budget(self, scene):
        S = nullspace_sensing_beams(scene, np.array([0.5, 0.25]))
        np.testing.assert_allclose(np.sum(np.abs(S) ** 2, axis=1), [0.5, 0.25], atol=1e-12)
        np.testing.assert_allclose(np.einsum("lmn,lm->ln", scene.comm_channels.conj(), S), 0, atol=1e-10)


class TestSurrogate:
    def test_single_user_matched_filter(self):
        cfg = SystemConfig(num_aps=1, antennas_per_ap=16, num_ues=1, ap_positions=((25.0, 0.0),))
        sc = build_channels(sample_positions(cfg, scene_rng(0, 0)), cfg)
        res = max_min_sinr_surrogate(sc, cfg, rho=0.5)
        assert res.gamma_high == pytest.approx(0.5 * 1.0 * 16 / 1.0, rel=1e-3)

    @pytest.mark.parametrize("i", range(3))
    def test_feasible_and_beats_zero_forcing(self, system, i):
        sc = build_channels(sample_positions(system, scene_rng(5, i)), system)
        res = max_min_sinr_surrogate(sc, system, rho=0.5)
        W = res.beams
        assert np.all(powers(res.comm_beams) <= 0.5 + 1e-9)
        assert np.all(np.sum(np.abs(res.sensing_beams) ** 2, axis=1) <= 0.5 + 1e-9)
        assert res.gamma_high == pytest.approx(min_sinr(sc, W, 1.0), rel=1e-9)
        zf = zero_forcing_beams(sc, np.array([0.5, 0.5]))
        assert np.all(powers(zf) <= 0.5 + 1e-9)
        zf_full = np.concatenate([zf, res.sensing_beams[:, :, None]], axis=2)
        assert res.gamma_high >= min_sinr(sc, zf_full, 1.0) - 1e-9

    def test_zero_rho(self, scene, system):
        res = max_min_sinr_surrogate(scene, system, rho=0.0)
        assert res.gamma_high == 0.0 and np.all(res.comm_beams == 0)
        with pytest.raises(ValueError):
            max_min_sinr_surrogate(scene, system, rho=1.5)


class TestConstrained:
    def test_no_sinr_target_reaches_bound(self, scene, system):
        res = constrained_ssnr_opt(scene, system, 0.0)
        assert res.g1 >= 0.95 * 3.2 and res.g1 <= 3.2 + 1e-9
        assert np.all(powers(res.beams) <= 1.0 + 1e-9)

    def test_history_monotone(self, scene, system):
        sur = max_min_sinr_surrogate(scene, system, rho=0.5)
        res = constrained_ssnr_opt(scene, system, sur.gamma_high, init=sur.beams, max_iter=300)
        h = np.array(res.history)
        h = h[~np.isnan(h)]
        assert h.size and np.all(np.diff(h) >= 0)
        assert res.feasible and res.g2 >= 0.98 * sur.gamma_high
        assert res.g1 >= ssnr(scene, sur.beams, 0.1, 1.0) - 1e-9

    def test_unreachable_target_reports_infeasible(self, scene, system):
        res = constrained_ssnr_opt(scene, system, 1e6, max_iter=60)
        assert not res.feasible

    def test_run_baseline(self, scene, system):
        res = run_baseline(scene, system)
        assert res.seconds > 0 and res.feasible
        assert res.g2 >= 0.98 * res.gamma_high
        assert res.g1 == pytest.approx(ssnr(scene, res.beams, 0.1, 1.0))
        assert res.g2 == pytest.approx(sinr_all(scene, res.beams, 1.0).min())


def test_benchmark_small(system):
    ds = generate_dataset(system, 4, seed=0)
    model = init_model(cnn1d_spec(), system, seed=0)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        rep = benchmark_compare(ds, model, system, n_points=6)
    assert any("n_points" in str(w.message) for w in caught)
    assert rep.summary["n_points"] == 4 and rep.summary["baseline_label"] == BASELINE_LABEL
    assert len(rep.rows) == 8
    lines = rep.to_csv().splitlines()
    assert lines[0] == "scene_id,method,g1,g2,seconds" and len(lines) == 9
    assert rep.summary["speedup"] == pytest.approx(
        rep.summary["baseline_mean_seconds"] / rep.summary["student_mean_seconds"])
