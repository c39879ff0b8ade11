"""Per-radar MRBLaT nodes, the broadcast bus and the tracking loop.

Every pulse each node fits its own data message, broadcasts a fixed-size
payload, stores the payloads of all radars, and re-runs the local
message-passing smoother over the whole history. Nodes that received the
same payloads compute bit-identical posteriors.
"""

from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import linalg

from . import baseline
from .geometry import RadarPose, state_to_global, state_to_local
from .inference import (
    GammaSurrogate,
    GaussianMessage,
    OptimizerOptions,
    Posterior,
    SingularPrecisionError,
    describe_null_space,
    fit_data_message,
    update_lambda_a,
)
from .kinematics import KinematicMatrices, process_noise_precision
from .waveform import ObservationBlock, SignalModel

# sender id, pulse index, flags, global mean (4), local diagonal covariance (4)
PAYLOAD = struct.Struct("<HIB8d")
FLAG_LOW_CONFIDENCE = 0x01


def _rotate_block(pose: RadarPose) -> np.ndarray:
    R = np.zeros((4, 4))
    R[:2, :2] = R[2:, 2:] = pose.R
    return R


def local_message_to_global(msg: GaussianMessage, pose: RadarPose) -> GaussianMessage:
    """Rotate a local-frame message into the global frame."""
    R = _rotate_block(pose)
    return GaussianMessage(state_to_global(msg.mean, pose), R @ msg.precision @ R.T, msg.low_confidence)


def encode_message(sender: int, pulse: int, msg: GaussianMessage, pose: RadarPose) -> bytes:
    """Pack a global-frame data message; the covariance travels diagonal in the sender frame."""
    R = _rotate_block(pose)
    local_prec = np.diag(R.T @ msg.precision @ R)
    with np.errstate(divide="ignore"):
        local_var = np.where(local_prec > 0, 1.0 / local_prec, np.inf)
    flags = FLAG_LOW_CONFIDENCE if msg.low_confidence else 0
    return PAYLOAD.pack(sender, pulse, flags, *msg.mean, *local_var)


def decode_message(payload: bytes, poses: Sequence[RadarPose]) -> tuple[int, int, GaussianMessage]:
    sender, pulse, flags, *vals = PAYLOAD.unpack(payload)
    mean = np.array(vals[:4])
    var = np.array(vals[4:])
    local_prec = np.diag(np.where(np.isfinite(var), 1.0 / var, 0.0))
    R = _rotate_block(poses[sender])
    msg = GaussianMessage(mean, R @ local_prec @ R.T, bool(flags & FLAG_LOW_CONFIDENCE))
    return sender, pulse, msg


class BroadcastBus:
    """Lossless, ordered, synchronous broadcast between registered nodes."""

    def __init__(self):
        self.nodes: list[RadarNode] = []
        self.bytes_sent = 0
        self.log: list[dict] = []
        self._pending: list[bytes] = []

    def register(self, node: "RadarNode") -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1

    @property
    def poses(self) -> list[RadarPose]:
        return [n.pose for n in self.nodes]

    def broadcast(self, sender: int, pulse: int, payload: bytes) -> None:
        self._pending.append(payload)
        self.bytes_sent += len(payload)
        self.log.append({"pulse": pulse, "sender": sender, "payload_bytes": len(payload)})

    def deliver(self) -> None:
        """Barrier: hand every pending payload to every node, in sender order."""
        pending = sorted(self._pending, key=lambda p: PAYLOAD.unpack_from(p)[0])
        self._pending = []
        poses = self.poses
        for node in self.nodes:
            for payload in pending:
                sender, pulse, msg = decode_message(payload, poses)
                node.receive(sender, pulse, msg)

    def bytes_for_pulse(self, pulse: int) -> int:
        return sum(e["payload_bytes"] for e in self.log if e["pulse"] == pulse)

    def write_log(self, path) -> None:
        with open(path, "w") as fh:
            for entry in self.log:
                fh.write(json.dumps(entry) + "\n")


@dataclass
class RadarNode:
    """State held by one radar: its memory of all data messages and its smoother."""

    pose: RadarPose
    model: SignalModel
    kinematics: KinematicMatrices
    n_radar: int
    index: int = 0
    n_ite: int = 5
    lambda_init: np.ndarray = field(default_factory=lambda: np.ones(4))
    optimizer: OptimizerOptions = field(default_factory=OptimizerOptions)
    window: int | None = None
    mean_solver: str = "exact"
    memory: list = field(default_factory=list)
    posterior: Posterior = field(default_factory=lambda: Posterior(np.zeros((0, 4)), np.zeros((0, 4, 4))))
    gamma: GammaSurrogate = None
    last_fit: object = None

    def __post_init__(self):
        self.lambda_init = np.broadcast_to(np.asarray(self.lambda_init, dtype=float), (4,)).copy()
        if self.mean_solver not in ("exact", "sweep"):
            raise ValueError(f"mean_solver must be 'exact' or 'sweep', got {self.mean_solver!r}")
        if self.gamma is None:
            self.gamma = GammaSurrogate.from_mean(self.lambda_init)
        self._data_prec = np.zeros((0, 4, 4))
        self._data_info = np.zeros((0, 4))

    def receive(self, sender: int, pulse: int, msg: GaussianMessage) -> None:
        while len(self.memory) <= pulse:
            self.memory.append([None] * self.n_radar)
        if self.memory[pulse][sender] is not None:
            raise RuntimeError(f"duplicate message from radar {sender} for pulse {pulse}")
        self.memory[pulse][sender] = msg

    def _data_arrays(self, N: int) -> tuple[np.ndarray, np.ndarray]:
        """Summed data precision and information vector per slice 0..N."""
        have = len(self._data_prec)
        if have <= N:
            prec = np.zeros((N + 1 - have, 4, 4))
            info = np.zeros((N + 1 - have, 4))
            for i, n in enumerate(range(have, N + 1)):
                msgs = self.memory[n]
                if any(m is None for m in msgs):
                    missing = [k for k, m in enumerate(msgs) if m is None]
                    raise RuntimeError(f"memory incomplete at pulse {n}: missing radars {missing}")
                # fixed sender order keeps every node's sums bit-identical
                for m in msgs:
                    prec[i] += m.precision
                    info[i] += m.precision @ m.mean
            self._data_prec = np.concatenate([self._data_prec, prec])
            self._data_info = np.concatenate([self._data_info, info])
        return self._data_prec[:N + 1], self._data_info[:N + 1]


def initial_local_state(node: RadarNode, obs: ObservationBlock, N: int) -> np.ndarray:
    """Optimizer start: conventional estimate at pulse 0, else T * previous posterior mean."""
    if N == 0:
        cfg, arr = node.model.cfg, node.model.array
        point = baseline.measure(obs, node.pose, arr, cfg)
        r = max(point.range, cfg.range_bin)
        return np.array([r * math.sin(point.azimuth), r * math.cos(point.azimuth), 0.0, 0.0])
    prev = node.posterior.means[N - 1]
    return state_to_local(node.kinematics.T @ prev, node.pose)


def process_pulse(node: RadarNode, obs: ObservationBlock, N: int) -> GaussianMessage:
    """Fit this radar's data message for pulse N and return it in the global frame."""
    if len(node.posterior) < N:
        raise RuntimeError(f"node {node.index} has no posterior for pulse {N - 1}")
    init = initial_local_state(node, obs, N)
    fit = fit_data_message(obs, init, node.model, node.optimizer)
    node.last_fit = fit
    return local_message_to_global(fit.message, node.pose)


def _slice_precisions(D: np.ndarray, Q: np.ndarray, TQT: np.ndarray, lo: int, N: int) -> np.ndarray:
    """Mean-field precision of every slice lo..N: data + prediction + smoothing terms."""
    prec = D[lo:N + 1].copy()
    prec[max(lo, 1) - lo:] += Q
    prec[:N - lo] += TQT
    return prec


def _check_slices(prec: np.ndarray, lo: int) -> None:
    """Raise SingularPrecisionError naming the first slice that is not positive definite."""
    try:
        chol = np.linalg.cholesky(prec)
        diag = np.diagonal(chol, axis1=1, axis2=2)
        scale = np.sqrt(np.max(np.abs(np.diagonal(prec, axis1=1, axis2=2)), axis=1))
        if np.all(diag.min(axis=1) > 1e-6 * scale):
            return
    except np.linalg.LinAlgError:
        pass
    w = np.linalg.eigvalsh(prec)
    bad = np.nonzero(w[:, 0] <= 1e-12 * np.abs(w[:, -1]))[0]
    if bad.size:
        n_bad = lo + int(bad[0])
        null, desc = describe_null_space(prec[bad[0]])
        raise SingularPrecisionError(f"slice {n_bad}: combined precision singular along {desc}",
                                     null, n_bad)


def _banded_chain(prec: np.ndarray, off: np.ndarray) -> np.ndarray:
    """Upper banded storage of the block-tridiagonal joint precision.

    ``prec`` holds the diagonal 4x4 blocks, ``off`` the block coupling
    slice n-1 (rows) to slice n (columns).
    """
    n = len(prec)
    u = 7
    ab = np.zeros((u + 1, 4 * n))
    cols = 4 * np.arange(n)[:, None]
    a, b = np.triu_indices(4)
    ab[u + a - b, cols + b] = prec[:, a, b]
    a, b = np.indices((4, 4)).reshape(2, -1)
    ab[u + a - b - 4, cols[1:] + b] = off[a, b]
    return ab


def _gauss_seidel_means(means, cov, h, Q, T, lo, N):
    c = np.einsum("nij,nj->ni", cov, h)
    A = cov @ (Q @ T)
    B = cov @ (T.T @ Q)
    for i, n in enumerate(range(lo, N + 1)):
        mu = c[i]
        if n >= 1:
            mu = mu + A[i] @ means[n - 1]
        if n < N:
            mu = mu + B[i] @ means[n + 1]
        means[n] = mu


def local_message_passing(node: RadarNode, N: int, n_ite: int | None = None) -> Posterior:
    """Run ``n_ite`` mean-field iterations over slices 0..N and update the gamma surrogate.

    Each slice combines all radars' data messages with the prediction
    (n >= 1) and smoothing (n <= N-1) messages of its neighbours. With the
    process-noise precision held fixed, the slice means of the mean-field
    iteration converge to the solution of one block-tridiagonal system;
    ``mean_solver="exact"`` solves it directly, ``"sweep"`` performs a single
    Gauss-Seidel pass n = 0..N per iteration. Covariances are the inverse
    slice precisions either way.
    """
    n_ite = node.n_ite if n_ite is None else n_ite
    m = node.kinematics
    T = m.T
    D, h = node._data_arrays(N)

    means = np.zeros((N + 1, 4))
    covs = np.zeros((N + 1, 4, 4))
    have = min(len(node.posterior), N)
    means[:have] = node.posterior.means[:have]
    covs[:have] = node.posterior.covariances[:have]
    if N > 0 and have == N:
        means[N] = T @ means[N - 1]

    if N == 0:
        # no temporal messages: only the position marginal is defined
        pos = D[0, :2, :2]
        null, desc = describe_null_space(pos)
        if null.shape[1]:
            raise SingularPrecisionError(f"slice 0: combined precision singular along {desc}", null, 0)
        cov_pos = np.linalg.inv(pos)
        means[0, :2] = cov_pos @ h[0, :2]
        covs[0] = np.diag([0.0, 0.0, np.inf, np.inf])
        covs[0, :2, :2] = cov_pos
        node.gamma = GammaSurrogate.from_mean(node.lambda_init)
        node.posterior = Posterior(means, covs)
        return node.posterior

    lo = 0 if node.window is None else max(0, N - node.window + 1)
    gamma = node.gamma if N > 1 else GammaSurrogate.from_mean(node.lambda_init)
    for _ in range(n_ite):
        Q = process_noise_precision(gamma.mean, m)
        TQT = T.T @ Q @ T
        prec = _slice_precisions(D, Q, TQT, lo, N)
        _check_slices(prec, lo)
        cov = np.linalg.inv(prec)
        cov = 0.5 * (cov + np.swapaxes(cov, 1, 2))
        info = h[lo:N + 1].copy()
        if lo > 0:
            info[0] += Q @ T @ means[lo - 1]
        if node.mean_solver == "exact":
            try:
                sol = linalg.solveh_banded(_banded_chain(prec, -(T.T @ Q)), info.ravel())
            except linalg.LinAlgError:
                raise SingularPrecisionError(
                    f"joint precision over slices {lo}..{N} is not positive definite", None, None
                ) from None
            means[lo:N + 1] = sol.reshape(-1, 4)
        else:
            _gauss_seidel_means(means, cov, info, Q, T, lo, N)
        covs[lo:N + 1] = cov
        if N > 1:
            gamma = update_lambda_a(means, covs, m, gamma.prior_shape, gamma.prior_rate)
    node.gamma = gamma
    node.posterior = Posterior(means, covs)
    return node.posterior


def build_nodes(poses: Sequence[RadarPose], model: SignalModel, kinematics: KinematicMatrices,
                **node_kwargs) -> tuple[list[RadarNode], BroadcastBus]:
    bus = BroadcastBus()
    nodes = []
    for k, pose in enumerate(poses):
        node = RadarNode(pose, model, kinematics, n_radar=len(poses), **node_kwargs)
        node.index = bus.register(node)
        nodes.append(node)
    return nodes, bus


def run_tracker(nodes: Sequence[RadarNode], bus: BroadcastBus,
                observation_stream: Iterable[Sequence[ObservationBlock]]) -> list[Posterior]:
    """Process a stream of per-pulse observation lists (one block per radar, node order)."""
    for N, blocks in enumerate(observation_stream):
        if len(blocks) != len(nodes):
            raise ValueError(f"pulse {N}: got {len(blocks)} observation blocks for {len(nodes)} radars")
        for node, obs in zip(nodes, blocks):
            msg = process_pulse(node, obs, N)
            bus.broadcast(node.index, N, encode_message(node.index, N, msg, node.pose))
        bus.deliver()
        for node in nodes:
            local_message_passing(node, N)
    return [node.posterior for node in nodes]


def write_track_csv(path, posterior: Posterior, full_covariance: bool = False) -> None:
    """One row per slice: index, mean[4], covariance diagonal[4] (optionally all 16 entries)."""
    labels = ("x", "y", "vx", "vy")
    header = ["n"] + list(labels) + [f"var_{a}" for a in labels]
    if full_covariance:
        header += [f"cov_{a}_{b}" for a in labels for b in labels]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for n, (mean, cov) in enumerate(zip(posterior.means, posterior.covariances)):
            row = [n, *mean, *np.diagonal(cov)]
            if full_covariance:
                row += list(cov.ravel())
            w.writerow([repr(float(v)) if i else v for i, v in enumerate(row)])
