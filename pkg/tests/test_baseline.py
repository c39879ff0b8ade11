import math

import numpy as np
import pytest

from mrblat.baseline import (
    FilterError,
    KFModel,
    capon_spectrum,
    estimate_doa_capon,
    estimate_range,
    estimate_range_bin,
    kf_backward_smooth,
    kf_forward,
    measure,
    measurement_covariance,
    measurement_to_global,
    run_baseline,
)
from mrblat.geometry import GlobalPoint, RadarPose, global_to_local
from mrblat.kinematics import KinematicMatrices
from mrblat.waveform import ObservationBlock, synthesize_observation

ORIGIN = RadarPose((0.0, 0.0), 0.0)


def _clean(model, phi, pose=ORIGIN):
    return synthesize_observation(phi, pose, model, 0.05, add_noise=False)


def test_range_noise_free(model):
    obs = _clean(model, [0.0, 100.0, 0, 0])
    assert abs(estimate_range(obs, model.cfg) - 100.0) <= 3e8 / (2 * model.cfg.bandwidth)
    assert abs(estimate_range(obs, model.cfg) - 100.0) <= model.cfg.range_bin


def test_range_zero_delay_bin(model):
    obs = _clean(model, [0.0, 0.01, 0, 0])
    assert estimate_range_bin(obs, model.cfg) == 0
    assert estimate_range(obs, model.cfg) == 0.0


def test_range_median_robust(model):
    obs = _clean(model, [5.0, 140.0, 0, 0])
    k = estimate_range_bin(obs, model.cfg)
    rng = np.random.default_rng(0)
    z = obs.z.copy()
    z[[0, 3, 5, 8]] = rng.normal(size=(4, z.shape[1])) * np.abs(z).max() * 10
    assert estimate_range_bin(ObservationBlock(z, obs.noise_precision), model.cfg) == k


def test_range_phase_invariant(model):
    obs = synthesize_observation([5.0, 140.0, 0, 0], ORIGIN, model, 0.05, rng_seed=4)
    rotated = ObservationBlock(obs.z * np.exp(1.234j), obs.noise_precision)
    assert estimate_range_bin(rotated, model.cfg) == estimate_range_bin(obs, model.cfg)


def test_doa_boresight(model):
    obs = _clean(model, [0.0, 120.0, 0, 0])
    assert abs(estimate_doa_capon(obs, model.array, model.cfg)) <= math.radians(0.5)


def test_doa_sign_symmetric(model):
    th = math.radians(20)
    a = estimate_doa_capon(_clean(model, [120 * math.sin(th), 120 * math.cos(th), 0, 0]), model.array, model.cfg)
    b = estimate_doa_capon(_clean(model, [-120 * math.sin(th), 120 * math.cos(th), 0, 0]), model.array, model.cfg)
    assert a == pytest.approx(-b, abs=1e-12)
    assert a == pytest.approx(th, abs=math.radians(0.5))


def test_capon_spectrum_positive_and_scale_invariant(model, rng):
    snap = rng.normal(size=9) + 1j * rng.normal(size=9)
    grid = np.deg2rad(np.arange(-60, 60.25, 0.5))
    spec = capon_spectrum(snap, grid, model.array, model.cfg)
    assert np.all(np.isreal(spec)) and np.all(spec > 0)
    spec2 = capon_spectrum(3.7 * snap, grid, model.array, model.cfg)
    assert np.argmax(spec2) == np.argmax(spec)


def test_capon_singular_snapshot(model):
    with pytest.raises(np.linalg.LinAlgError):
        capon_spectrum(np.zeros(9, complex), np.zeros(3), model.array, model.cfg)


def test_measurement_to_global():
    assert measurement_to_global(100.0, 0.0, ORIGIN).as_array() == pytest.approx([0.0, 100.0])
    assert measurement_to_global(100.0, math.pi / 2, ORIGIN).as_array() == pytest.approx([100.0, 0.0])
    pose = RadarPose((50.0, 0.0), 0.3)
    g = measurement_to_global(87.0, -0.4, pose)
    loc = global_to_local(g, pose)
    assert loc.range == pytest.approx(87.0) and loc.azimuth == pytest.approx(-0.4)


def test_measure_noise_free(model):
    pose = RadarPose((50.0, 0.0), math.radians(10))
    truth = np.array([20.0, 150.0, 0, 0])
    m = measure(_clean(model, truth, pose), pose, model.array, model.cfg)
    loc = global_to_local(GlobalPoint(*truth[:2]), pose)
    assert abs(m.range - loc.range) <= model.cfg.range_bin
    assert abs(m.azimuth - loc.azimuth) <= math.radians(0.5)


def test_measurement_covariance_spd():
    from mrblat.waveform import WaveformConfig
    cov = measurement_covariance(120.0, 0.2, RadarPose((0.0, 0.0), 0.5), WaveformConfig())
    np.linalg.cholesky(cov)


def _cv_truth(n, dt=0.1):
    t = np.arange(n) * dt
    return np.stack([3 + 5 * t, 100 + 2 * t, np.full(n, 5.0), np.full(n, 2.0)], axis=1)


def test_kf_converges_on_consistent_data(kin):
    truth = _cv_truth(40)
    model = KFModel(2, kin, np.full(4, 1e-6))
    z = np.hstack([truth[:, :2], truth[:, :2]])
    R = [np.eye(4) * 1e-10] * len(z)
    res = kf_forward(z, model, R, np.array([0.0, 90.0, 0.0, 0.0]), np.diag([1e4, 1e4, 100, 100]))
    assert np.max(np.abs(res.filtered_means[10:, :2] - truth[10:, :2])) < 1e-6


def test_kf_single_radar_and_information_gain(kin, rng):
    truth = _cv_truth(30)
    model = KFModel(1, kin, np.ones(4))
    assert model.H.shape == (2, 4)
    z = truth[:, :2] + rng.normal(0, 0.5, (30, 2))
    res = kf_forward(z, model, [np.eye(2) * 0.25] * 30, np.zeros(4), np.eye(4) * 1e4)
    for k in range(30):
        assert np.trace(res.filtered_covs[k]) <= np.trace(res.predicted_covs[k]) + 1e-12


def test_kf_non_spd_innovation(kin):
    model = KFModel(1, kin, np.ones(4))
    with pytest.raises(FilterError):
        kf_forward(np.zeros((2, 2)), model, [-np.eye(2) * 10] * 2, np.zeros(4), np.eye(4) * 1e-3)


def _batch_map(z, model, R, x0, P0):
    """Dense weighted least squares over the stacked trajectory."""
    n = len(z)
    T, H, Q = model.T, model.H, model.Q
    rows, rhs, weights = [], [], []

    def add(block_cols, value, cov):
        row = np.zeros((block_cols[0][1].shape[0], 4 * n))
        for idx, mat in block_cols:
            row[:, 4 * idx:4 * idx + 4] += mat
        rows.append(row)
        rhs.append(value)
        weights.append(np.linalg.inv(cov))

    add([(0, np.eye(4))], x0, P0)
    for k in range(n):
        add([(k, H)], z[k], R[k])
        if k:
            add([(k, np.eye(4)), (k - 1, -T)], np.zeros(4), Q)
    A = np.vstack(rows)
    b = np.concatenate(rhs)
    from scipy.linalg import block_diag
    W = block_diag(*weights)
    return np.linalg.solve(A.T @ W @ A, A.T @ W @ b).reshape(n, 4)


def test_smoother_matches_batch_map(kin, rng):
    truth = _cv_truth(25)
    model = KFModel(2, kin, np.array([0.5, 2.0, 1.0, 3.0]))
    z = np.hstack([truth[:, :2], truth[:, :2]]) + rng.normal(0, 0.3, (25, 4))
    R = []
    for _ in range(25):
        a = rng.normal(size=(4, 4)) * 0.1
        R.append(a @ a.T + 0.05 * np.eye(4))
    x0 = np.array([1.0, 99.0, 4.0, 1.0])
    P0 = np.diag([4.0, 4.0, 1.0, 1.0])
    fwd = kf_forward(z, model, R, x0, P0)
    xs, Ps = kf_backward_smooth(fwd, model)
    oracle = _batch_map(z, model, R, x0, P0)
    assert np.max(np.abs(xs - oracle)) < 1e-8
    # boundary condition and covariance reduction
    assert np.array_equal(xs[-1], fwd.filtered_means[-1])
    for k in range(25):
        assert np.trace(Ps[k]) <= np.trace(fwd.filtered_covs[k]) + 1e-12


def test_baseline_high_snr(model):
    kin = KinematicMatrices(0.1)
    poses = [RadarPose((0.0, 0.0), -0.1), RadarPose((50.0, 0.0), 0.0), RadarPose((100.0, 0.0), 0.1)]
    truth = _cv_truth(40) + [20.0, -40.0, 0, 0]  # within ~70 m: > 15 dB everywhere
    points = [[measure(synthesize_observation(s, p, model, 0.05, rng_seed=(1, k, n)), p, model.array, model.cfg)
               for k, p in enumerate(poses)] for n, s in enumerate(truth)]
    xs, _ = run_baseline(points, poses, model.cfg, kin, np.ones(4))
    rmse = np.sqrt(np.mean(np.sum((xs[:, :2] - truth[:, :2]) ** 2, axis=1)))
    assert rmse < 2 * model.cfg.range_bin
