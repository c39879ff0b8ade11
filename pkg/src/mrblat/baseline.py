"""Conventional per-radar point estimates and a multi-input Kalman smoother.

Each radar produces a range from the matched-filter peak and an azimuth from
a Capon beamformer at that range bin; the resulting points are fused by a
linear Kalman filter with a stacked position observation matrix and smoothed
backwards (RTS).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import SPEED_OF_LIGHT, GlobalPoint, LocalPoint, RadarPose, local_to_global
from .kinematics import KinematicMatrices
from .waveform import ArrayGeometry, ObservationBlock, WaveformConfig


class FilterError(np.linalg.LinAlgError):
    """Kalman recursion hit a non-positive-definite matrix."""


@dataclass(frozen=True)
class PointMeasurement:
    range: float
    azimuth: float
    position: np.ndarray
    range_bin: int = 0


def compressed_pulses(obs: ObservationBlock) -> np.ndarray:
    """Inverse DFT of every virtual channel (delay-domain matched-filter output)."""
    return np.fft.ifft(obs.z, axis=1, norm="ortho")


def max_range_bin(cfg: WaveformConfig) -> int:
    """Number of delay bins below the unambiguous range."""
    return min(int(math.ceil(cfg.max_range / cfg.range_bin)), cfg.num_samples)


def estimate_range_bin(obs: ObservationBlock, cfg: WaveformConfig) -> int:
    """Median over channels of the per-channel peak delay bin."""
    pulses = np.abs(compressed_pulses(obs))[:, :max_range_bin(cfg)]
    peaks = np.argmax(pulses, axis=1)  # first index wins ties
    return int(np.median(peaks))


def estimate_range(obs: ObservationBlock, cfg: WaveformConfig) -> float:
    return estimate_range_bin(obs, cfg) * cfg.range_bin


def steering_vector(theta, arr: ArrayGeometry, cfg: WaveformConfig) -> np.ndarray:
    """Virtual-array steering vectors, shape (n_channels,) or (len(theta), n_channels)."""
    k = 2.0 * np.pi / cfg.wavelength
    return np.exp(1j * k * np.multiply.outer(np.sin(theta), arr.virtual_offsets()))


def capon_spectrum(snapshot: np.ndarray, grid: np.ndarray, arr: ArrayGeometry, cfg: WaveformConfig,
                   loading: float = 1e-3) -> np.ndarray:
    """1 / (a^H C^-1 a) over ``grid`` for a single diagonally loaded snapshot."""
    x = np.asarray(snapshot).reshape(-1, 1)
    cov = x @ x.conj().T
    dim = cov.shape[0]
    cov = cov + loading * np.real(np.trace(cov)) / dim * np.eye(dim)
    try:
        cinv = np.linalg.inv(cov)
        if not np.all(np.isfinite(cinv)) or np.linalg.cond(cov) > 1e14:
            raise np.linalg.LinAlgError
    except np.linalg.LinAlgError:
        raise np.linalg.LinAlgError("snapshot covariance singular even after diagonal loading") from None
    a = steering_vector(grid, arr, cfg)
    denom = np.einsum("gi,ij,gj->g", a.conj(), cinv, a)
    return 1.0 / np.real(denom)


def estimate_doa_capon(obs: ObservationBlock, arr: ArrayGeometry, cfg: WaveformConfig,
                       range_bin: int | None = None, step_deg: float = 0.5,
                       limit_deg: float = 60.0) -> float:
    """Azimuth (radians) of the Capon peak at the detected range bin."""
    if range_bin is None:
        range_bin = estimate_range_bin(obs, cfg)
    snapshot = compressed_pulses(obs)[:, range_bin]
    grid = np.deg2rad(np.arange(-limit_deg, limit_deg + step_deg / 2, step_deg))
    spec = capon_spectrum(snapshot, grid, arr, cfg)
    return float(grid[np.argmax(spec)])


def measurement_to_global(r: float, theta: float, pose: RadarPose) -> GlobalPoint:
    if r < 0:
        raise ValueError("range must be non-negative")
    return local_to_global(LocalPoint(r * math.sin(theta), r * math.cos(theta)), pose)


def measure(obs: ObservationBlock, pose: RadarPose, arr: ArrayGeometry, cfg: WaveformConfig,
            step_deg: float = 0.5) -> PointMeasurement:
    """Range, Capon azimuth and global position for one radar and pulse."""
    k = estimate_range_bin(obs, cfg)
    r = k * cfg.range_bin
    theta = estimate_doa_capon(obs, arr, cfg, range_bin=k, step_deg=step_deg)
    return PointMeasurement(r, theta, measurement_to_global(r, theta, pose).as_array(), k)


def measurement_covariance(r: float, theta: float, pose: RadarPose, cfg: WaveformConfig,
                           step_deg: float = 0.5) -> np.ndarray:
    """Global-frame position covariance from range-bin and angle-grid quantisation."""
    var_r = cfg.range_bin**2 / 12.0
    var_t = math.radians(step_deg) ** 2 / 12.0
    # d(u, v)/d(r, theta)
    jac = np.array([[math.sin(theta), r * math.cos(theta)],
                    [math.cos(theta), -r * math.sin(theta)]])
    local = jac @ np.diag([var_r, var_t]) @ jac.T
    R = pose.R
    return R @ local @ R.T


@dataclass
class KFModel:
    """Stacked linear-Gaussian model for ``n_radar`` position measurements."""

    n_radar: int
    kinematics: KinematicMatrices
    process_variance: np.ndarray  # per-axis variance of the process noise a

    @property
    def T(self) -> np.ndarray:
        return self.kinematics.T

    @property
    def H(self) -> np.ndarray:
        h = np.zeros((2, 4))
        h[0, 0] = h[1, 1] = 1.0
        return np.vstack([h] * self.n_radar)

    @property
    def Q(self) -> np.ndarray:
        G = self.kinematics.G
        return G @ np.diag(np.broadcast_to(self.process_variance, (4,))) @ G.T


@dataclass
class KFResult:
    filtered_means: np.ndarray
    filtered_covs: np.ndarray
    predicted_means: np.ndarray
    predicted_covs: np.ndarray


def _check_spd(mat: np.ndarray, what: str, step: int):
    try:
        np.linalg.cholesky(mat)
    except np.linalg.LinAlgError:
        raise FilterError(f"{what} is not positive definite at step {step}") from None


def kf_forward(measurements: np.ndarray, model: KFModel, measurement_covs: Sequence[np.ndarray],
               x0: np.ndarray, P0: np.ndarray) -> KFResult:
    """Kalman filter over stacked measurements (n, 2*n_radar).

    ``measurement_covs[n]`` is the full (2K, 2K) covariance of pulse ``n``.
    The first pulse is an update of the prior ``(x0, P0)``.
    """
    z = np.asarray(measurements, dtype=float)
    n = len(z)
    H, T, Q = model.H, model.T, model.Q
    xs = np.empty((n, 4))
    Ps = np.empty((n, 4, 4))
    xp = np.empty((n, 4))
    Pp = np.empty((n, 4, 4))
    x, P = np.asarray(x0, dtype=float), np.asarray(P0, dtype=float)
    for k in range(n):
        if k > 0:
            x = T @ x
            P = T @ P @ T.T + Q
        xp[k], Pp[k] = x, P
        S = H @ P @ H.T + measurement_covs[k]
        _check_spd(S, "innovation covariance", k)
        K = np.linalg.solve(S, H @ P).T
        x = x + K @ (z[k] - H @ x)
        I_KH = np.eye(4) - K @ H
        P = I_KH @ P @ I_KH.T + K @ measurement_covs[k] @ K.T  # Joseph form
        xs[k], Ps[k] = x, P
    return KFResult(xs, Ps, xp, Pp)


def kf_backward_smooth(forward: KFResult, model: KFModel) -> tuple[np.ndarray, np.ndarray]:
    """RTS fixed-interval smoother; returns smoothed means and covariances."""
    T = model.T
    xs = forward.filtered_means.copy()
    Ps = forward.filtered_covs.copy()
    for k in range(len(xs) - 2, -1, -1):
        Pf = forward.filtered_covs[k]
        gain = np.linalg.solve(forward.predicted_covs[k + 1], T @ Pf).T
        xs[k] = forward.filtered_means[k] + gain @ (xs[k + 1] - forward.predicted_means[k + 1])
        Ps[k] = Pf + gain @ (Ps[k + 1] - forward.predicted_covs[k + 1]) @ gain.T
        Ps[k] = 0.5 * (Ps[k] + Ps[k].T)
    return xs, Ps


def run_baseline(points: Sequence[Sequence[PointMeasurement]], poses: Sequence[RadarPose],
                 cfg: WaveformConfig, kin: KinematicMatrices, process_variance,
                 initial_position_var: float = 1e4, initial_velocity_var: float = 100.0,
                 step_deg: float = 0.5):
    """KF + RTS over per-pulse lists of per-radar point measurements."""
    n_radar = len(poses)
    z = np.array([np.concatenate([p.position for p in pulse]) for pulse in points])
    covs = []
    for pulse in points:
        blocks = [measurement_covariance(p.range, p.azimuth, pose, cfg, step_deg)
                  for p, pose in zip(pulse, poses)]
        cov = np.zeros((2 * n_radar, 2 * n_radar))
        for i, b in enumerate(blocks):
            cov[2 * i:2 * i + 2, 2 * i:2 * i + 2] = b
        covs.append(cov)
    model = KFModel(n_radar, kin, np.asarray(process_variance, dtype=float))
    # vague prior centred on the first fix; the first update carries the information
    x0 = np.concatenate([z[0].reshape(n_radar, 2).mean(axis=0), [0.0, 0.0]])
    P0 = np.diag([initial_position_var, initial_position_var, initial_velocity_var, initial_velocity_var])
    fwd = kf_forward(z, model, covs, x0, P0)
    return kf_backward_smooth(fwd, model)
