import json
import math

import numpy as np
import pytest

from mrblat.baseline import measure
from mrblat.geometry import GlobalPoint, RadarPose, global_to_local
from mrblat.inference import (
    GammaSurrogate,
    GaussianMessage,
    SingularPrecisionError,
    combine_gaussians,
    prediction_message,
    smoothing_message,
)
from mrblat.kinematics import KinematicMatrices
from mrblat.node import (
    PAYLOAD,
    BroadcastBus,
    RadarNode,
    build_nodes,
    decode_message,
    encode_message,
    local_message_passing,
    local_message_to_global,
    process_pulse,
    run_tracker,
    write_track_csv,
)
from mrblat.waveform import synthesize_observation

POSES = [RadarPose((0.0, 0.0), -0.15), RadarPose((50.0, 0.0), 0.0), RadarPose((100.0, 0.0), 0.15),
         RadarPose((150.0, 0.0), 0.3), RadarPose((-50.0, 0.0), -0.3)]


def cv_truth(n, start=(40.0, 70.0), vel=(4.0, 3.0), dt=0.1):
    t = np.arange(n)[:, None] * dt
    pos = np.asarray(start) + t * np.asarray(vel)
    return np.hstack([pos, np.tile(vel, (n, 1))])


def stream_for(truth, poses, model, seed=0):
    return [[synthesize_observation(s, p, model, 0.05, rng_seed=(seed, k, n)) for k, p in enumerate(poses)]
            for n, s in enumerate(truth)]


def test_payload_size_and_round_trip():
    assert PAYLOAD.size == 71 <= 96
    pose = RadarPose((50.0, 0.0), 0.4)
    local = GaussianMessage([3.0, 120.0, 1.0, -2.0], np.diag([4.0, 25.0, 0.0, 0.0]), low_confidence=True)
    glob = local_message_to_global(local, pose)
    payload = encode_message(2, 17, glob, pose)
    assert len(payload) == 71
    sender, pulse, msg = decode_message(payload, [pose, pose, pose])
    assert (sender, pulse, msg.low_confidence) == (2, 17, True)
    assert np.array_equal(msg.mean, glob.mean)
    assert np.allclose(msg.precision, glob.precision, rtol=1e-12, atol=1e-15)


def test_pulse_zero_within_conventional_cell(model, kin):
    pose = POSES[1]
    truth = np.array([12.0, 140.0, 0.0, 0.0])
    obs = synthesize_observation(truth, pose, model, 0.05, add_noise=False)
    node = RadarNode(pose, model, kin, n_radar=1)
    msg = process_pulse(node, obs, 0)
    r = global_to_local(GlobalPoint(*truth[:2]), pose).range
    assert np.hypot(*(msg.mean[:2] - truth[:2])) <= model.cfg.range_bin + r * math.radians(0.5)
    # and much closer than the conventional estimate cell would guarantee
    conv = measure(obs, pose, model.array, model.cfg).position
    assert np.hypot(*(msg.mean[:2] - truth[:2])) <= np.hypot(*(conv - truth[:2])) + 1e-9


def test_bus_bytes_linear_in_radars(model, kin):
    truth = cv_truth(2)
    per_radar = []
    for k in (1, 2, 3, 5):
        nodes, bus = build_nodes(POSES[:k], model, kin, n_ite=1)
        run_tracker(nodes, bus, stream_for(truth, POSES[:k], model))
        per_radar.append(bus.bytes_for_pulse(1))
        assert bus.bytes_sent == 2 * bus.bytes_for_pulse(0)
    c = per_radar[0]
    assert per_radar == [c * k for k in (1, 2, 3, 5)]


def test_bus_log_json_lines(tmp_path, model, kin):
    nodes, bus = build_nodes(POSES[:2], model, kin)
    run_tracker(nodes, bus, stream_for(cv_truth(2), POSES[:2], model))
    bus.write_log(tmp_path / "bus.jsonl")
    lines = [json.loads(x) for x in (tmp_path / "bus.jsonl").read_text().splitlines()]
    assert lines[0] == {"pulse": 0, "sender": 0, "payload_bytes": 71}
    assert len(lines) == 4


def test_memory_equal_length(model, kin):
    nodes, bus = build_nodes(POSES[:3], model, kin)
    run_tracker(nodes, bus, stream_for(cv_truth(3), POSES[:3], model))
    for node in nodes:
        assert len(node.memory) == 3
        assert all(len(row) == 3 and all(m is not None for m in row) for row in node.memory)


def test_n0_single_radar_position_marginal(model, kin):
    node = RadarNode(POSES[0], model, kin, n_radar=1)
    msg = GaussianMessage([10.0, 100.0, 0.0, 0.0], np.diag([4.0, 9.0, 0.0, 0.0]))
    node.receive(0, 0, msg)
    post = local_message_passing(node, 0)
    assert post.means[0, :2] == pytest.approx([10.0, 100.0])
    assert np.allclose(post.covariances[0, :2, :2], np.diag([0.25, 1 / 9]))
    assert np.all(np.isinf(np.diag(post.covariances[0])[2:]))


def test_n1_keeps_lambda_init(model, kin):
    lam = np.array([0.5, 0.5, 2.0, 2.0])
    node = RadarNode(POSES[0], model, kin, n_radar=1, lambda_init=lam)
    for n in range(2):
        node.receive(0, n, GaussianMessage([n * 0.5, 100.0, 0, 0], np.diag([4.0, 4.0, 0, 0])))
        local_message_passing(node, n)
    assert np.array_equal(node.gamma.mean, lam)
    node.receive(0, 2, GaussianMessage([1.0, 100.0, 0, 0], np.diag([4.0, 4.0, 0, 0])))
    local_message_passing(node, 2)
    assert not np.array_equal(node.gamma.mean, lam)


def test_singular_slice_named(model, kin):
    node = RadarNode(POSES[0], model, kin, n_radar=1)
    node.receive(0, 0, GaussianMessage([0, 100.0, 0, 0], np.diag([1.0, 0.0, 0, 0])))
    with pytest.raises(SingularPrecisionError, match="slice 0") as info:
        local_message_passing(node, 0)
    assert info.value.slice_index == 0


def _messages(n, rng):
    out = []
    for k in range(n):
        a = rng.normal(size=(2, 2))
        prec = np.zeros((4, 4))
        prec[:2, :2] = a @ a.T + np.eye(2)
        out.append(GaussianMessage(np.array([k * 0.4, 80 + k * 0.3, 0, 0]) + rng.normal(0, 0.2, 4), prec))
    return out


def _node_with(msgs, model, kin, **kw):
    node = RadarNode(POSES[0], model, kin, n_radar=1, **kw)
    for n, m in enumerate(msgs):
        node.receive(0, n, m)
        local_message_passing(node, n)
    return node


def test_identical_memory_bit_identical(model, kin, rng):
    msgs = _messages(30, rng)
    a = _node_with(msgs, model, kin)
    b = _node_with(msgs, model, kin)
    assert np.array_equal(a.posterior.means, b.posterior.means)
    assert np.array_equal(a.posterior.covariances, b.posterior.covariances)


def test_exact_means_are_sweep_fixed_point(model, kin, rng):
    """Each slice mean equals combine_gaussians of its data, prediction and smoothing messages."""
    msgs = _messages(20, rng)
    node = _node_with(msgs, model, kin)
    N = 19
    gamma = node.gamma
    # rerun one sweep with the final gamma held fixed to check the fixed point
    node.n_ite = 1
    node.gamma = gamma
    post = local_message_passing(node, N)
    means = post.means
    from mrblat.kinematics import process_noise_precision
    q_gamma = GammaSurrogate(gamma.shape, gamma.rate)  # gamma used inside that sweep
    for n in range(N + 1):
        parts = [msgs[n]]
        if n >= 1:
            parts.append(prediction_message(means[n - 1], q_gamma, kin))
        if n < N:
            parts.append(smoothing_message(means[n + 1], q_gamma, kin))
        sl = combine_gaussians(parts)
        assert np.allclose(sl.mean, means[n], atol=1e-8)
        assert np.allclose(sl.covariance, post.covariances[n], rtol=1e-9, atol=1e-12)


def test_sweep_converges_to_exact(model, kin, rng):
    msgs = _messages(2, rng)
    exact = _node_with(msgs, model, kin, n_ite=1).posterior.means
    errs = []
    # slow contraction: velocity is only observed through the coupling
    for sweeps in (10, 100, 1000, 10000, 100000):
        node = _node_with(msgs, model, kin, n_ite=sweeps, mean_solver="sweep")
        errs.append(np.abs(node.posterior.means - exact).max())
    assert all(b < a for a, b in zip(errs, errs[1:]))
    assert errs[-1] < 1e-2


def test_bad_mean_solver(model, kin):
    with pytest.raises(ValueError):
        RadarNode(POSES[0], model, kin, n_radar=1, mean_solver="newton")


def test_window_covering_history_matches_full(model, kin, rng):
    msgs = _messages(15, rng)
    full = _node_with(msgs, model, kin)
    win = _node_with(msgs, model, kin, window=100)
    assert np.allclose(full.posterior.means, win.posterior.means)
    short = _node_with(msgs, model, kin, window=5)
    assert np.all(np.isfinite(short.posterior.means))


def test_objective_proxy_shrinks_with_iterations(model, kin, rng):
    msgs = _messages(40, rng)
    proxies = []
    for n_ite in range(1, 7):
        node = _node_with(msgs[:39], model, kin)
        node.receive(0, 39, msgs[39])
        post = local_message_passing(node, 39, n_ite=n_ite)
        proxies.append(-0.5 * np.sum(np.linalg.slogdet(post.covariances)[1]))
    steps = np.abs(np.diff(proxies))
    assert np.all(np.diff(steps) <= 1e-12)


def test_run_tracker_cv_high_snr(model, kin):
    truth = cv_truth(40)
    nodes, bus = build_nodes(POSES[:3], model, kin)
    posts = run_tracker(nodes, bus, stream_for(truth, POSES[:3], model, seed=3))
    err = posts[0].means[:, :2] - truth[:, :2]
    assert np.sqrt(np.mean(np.sum(err**2, axis=1))) < 0.5
    for p in posts[1:]:
        assert np.array_equal(p.means, posts[0].means)
        assert np.array_equal(p.covariances, posts[0].covariances)


def test_single_radar_runs(model, kin):
    truth = cv_truth(15)
    nodes, bus = build_nodes(POSES[1:2], model, kin)
    post = run_tracker(nodes, bus, stream_for(truth, POSES[1:2], model))[0]
    assert post.means.shape == (15, 4)
    assert np.all(np.isfinite(post.means))
    for c in post.covariances[1:]:
        np.linalg.cholesky(c)


def test_stream_mismatch(model, kin):
    nodes, bus = build_nodes(POSES[:2], model, kin)
    stream = stream_for(cv_truth(2), POSES[:1], model)
    with pytest.raises(ValueError, match="pulse 0"):
        run_tracker(nodes, bus, stream)


@pytest.mark.slow
def test_adding_radar_shrinks_covariance(model, kin):
    # target within about 15 degrees of every boresight
    truth = cv_truth(8, start=(50.0, 120.0))
    traces = {2: [], 3: []}
    for run in range(64):
        for k in (2, 3):
            nodes, bus = build_nodes(POSES[:k], model, kin, n_ite=3)
            post = run_tracker(nodes, bus, stream_for(truth, POSES[:k], model, seed=run))[0]
            traces[k].append(np.trace(post.covariances[1:-1, :2, :2], axis1=1, axis2=2))
    assert np.all(np.mean(traces[3], axis=0) <= np.mean(traces[2], axis=0))


def test_adding_radar_shrinks_covariance_fixed_lambda(model, kin):
    """With the process-noise precision held at lambda_init, extra data precision can only shrink covariance."""
    truth = cv_truth(2, start=(30.0, 120.0))
    covs = {}
    for k in (1, 2, 3):
        nodes, bus = build_nodes(POSES[:k], model, kin)
        covs[k] = run_tracker(nodes, bus, stream_for(truth, POSES[:k], model))[0].covariances
    for n in range(2):
        for a, b in ((1, 2), (2, 3)):
            assert np.linalg.eigvalsh(covs[a][n, :2, :2] - covs[b][n, :2, :2]).min() >= -1e-15


def test_write_track_csv(tmp_path, model, kin, rng):
    node = _node_with(_messages(4, rng), model, kin)
    write_track_csv(tmp_path / "t.csv", node.posterior, full_covariance=True)
    rows = (tmp_path / "t.csv").read_text().splitlines()
    assert rows[0].startswith("n,x,y,vx,vy,var_x")
    assert len(rows) == 5 and len(rows[1].split(",")) == 1 + 4 + 4 + 16
