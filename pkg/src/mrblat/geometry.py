"""Radar poses and conversions between radar-local and global coordinates.

Each radar has a local frame ``(u, v)`` with ``v`` along the boresight and
``u`` along the antenna face. The global frame ``(x, y)`` is shared by all
radars. A pose is the radar position ``p`` in the global frame and the
boresight angle ``psi`` measured counter-clockwise from the global y-axis.

    global = R(psi) @ local + p
    local  = R(psi).T @ (global - p)
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.constants import speed_of_light

SPEED_OF_LIGHT = speed_of_light


class GeometryError(ValueError):
    """Raised for degenerate geometric configurations."""


def wrap_angle(angle: float) -> float:
    """Wrap an angle into [-pi, pi)."""
    return (angle + math.pi) % (2.0 * math.pi) - math.pi


def rotation(psi: float) -> np.ndarray:
    """Counter-clockwise 2x2 rotation matrix."""
    c, s = math.cos(psi), math.sin(psi)
    return np.array([[c, -s], [s, c]])


@dataclass(frozen=True)
class RadarPose:
    """Radar position (global frame, meters) and boresight angle (radians)."""

    position: tuple[float, float]
    boresight_angle: float = 0.0

    def __post_init__(self):
        pos = tuple(float(p) for p in self.position)
        if len(pos) != 2 or not all(math.isfinite(p) for p in pos):
            raise GeometryError(f"radar position must be a finite 2-vector, got {self.position!r}")
        if not math.isfinite(self.boresight_angle):
            raise GeometryError("boresight angle must be finite")
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "boresight_angle", wrap_angle(float(self.boresight_angle)))

    @property
    def p(self) -> np.ndarray:
        return np.asarray(self.position, dtype=float)

    @property
    def R(self) -> np.ndarray:
        return rotation(self.boresight_angle)


@dataclass(frozen=True)
class GlobalPoint:
    x: float
    y: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y], dtype=float)


@dataclass(frozen=True)
class LocalPoint:
    u: float
    v: float

    def as_array(self) -> np.ndarray:
        return np.array([self.u, self.v], dtype=float)

    @property
    def range(self) -> float:
        return math.hypot(self.u, self.v)

    @property
    def azimuth(self) -> float:
        """Angle from boresight, positive towards +u."""
        return math.atan2(self.u, self.v)


def local_to_global(pt: LocalPoint, pose: RadarPose) -> GlobalPoint:
    if not isinstance(pt, LocalPoint):
        raise TypeError(f"expected LocalPoint, got {type(pt).__name__}")
    x, y = pose.R @ pt.as_array() + pose.p
    return GlobalPoint(float(x), float(y))


def global_to_local(pt: GlobalPoint, pose: RadarPose) -> LocalPoint:
    if not isinstance(pt, GlobalPoint):
        raise TypeError(f"expected GlobalPoint, got {type(pt).__name__}")
    u, v = pose.R.T @ (pt.as_array() - pose.p)
    return LocalPoint(float(u), float(v))


def state_to_local(phi: np.ndarray, pose: RadarPose) -> np.ndarray:
    """Map a global kinematic state [x, y, vx, vy] into the radar frame."""
    phi = np.asarray(phi, dtype=float)
    Rt = pose.R.T
    return np.concatenate([Rt @ (phi[:2] - pose.p), Rt @ phi[2:4]])


def state_to_global(phi_local: np.ndarray, pose: RadarPose) -> np.ndarray:
    """Inverse of :func:`state_to_local`."""
    phi_local = np.asarray(phi_local, dtype=float)
    R = pose.R
    return np.concatenate([R @ phi_local[:2] + pose.p, R @ phi_local[2:4]])


def two_way_delay(target: GlobalPoint, pose: RadarPose) -> float:
    """Round-trip propagation delay in seconds."""
    rng = float(np.hypot(*(target.as_array() - pose.p)))
    if rng == 0.0:
        raise GeometryError("target coincides with radar position (zero range)")
    return 2.0 * rng / SPEED_OF_LIGHT
