"""Linear kinematic model and ground-truth track generation.

States are 4-vectors ``[x, y, vx, vy]`` (global frame, SI units); sequences
of states are ``(n, 4)`` arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class TrackError(ValueError):
    """Invalid track specification."""


@dataclass(frozen=True)
class KinematicMatrices:
    """Transition ``T`` and process-noise ``G`` for a pulse interval ``dt``."""

    dt: float

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt!r}")

    @classmethod
    def from_prf(cls, prf: float) -> "KinematicMatrices":
        return cls(1.0 / prf)

    @property
    def T(self) -> np.ndarray:
        dt = self.dt
        return np.array([
            [1.0, 0.0, dt, 0.0],
            [0.0, 1.0, 0.0, dt],
            [0.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ])

    @property
    def G(self) -> np.ndarray:
        dt = self.dt
        return np.diag([dt**2 / 2, dt**2 / 2, dt, dt])

    @property
    def T_inv(self) -> np.ndarray:
        return _t_inverse(self.dt)

    @property
    def G_inv(self) -> np.ndarray:
        dt = self.dt
        return np.diag([2 / dt**2, 2 / dt**2, 1 / dt, 1 / dt])


def _t_inverse(dt: float) -> np.ndarray:
    T = np.eye(4)
    T[0, 2] = T[1, 3] = -dt
    return T


def predict(phi, m: KinematicMatrices) -> np.ndarray:
    """Noise-free propagation one pulse ahead."""
    return m.T @ np.asarray(phi, dtype=float)


def process_noise_precision(lambda_a, m: KinematicMatrices) -> np.ndarray:
    """G^-T diag(lambda_a) G^-1, the precision of phi_n given phi_{n-1}."""
    lam = np.asarray(lambda_a, dtype=float)
    if lam.shape != (4,):
        raise ValueError(f"lambda_a must be a 4-vector, got shape {lam.shape}")
    if not np.all(lam > 0):
        raise ValueError(f"lambda_a entries must be positive, got {lam}")
    g_inv = np.diag(m.G_inv)
    return np.diag(g_inv * lam * g_inv)


# --------------------------------------------------------------------------
# Tracks
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Arc:
    """Constant-speed circular segment. ``sweep`` > 0 is counter-clockwise."""

    center: tuple[float, float]
    radius: float
    start_angle: float
    sweep: float
    speed: float

    @property
    def duration(self) -> float:
        return abs(self.sweep) * self.radius / self.speed

    def state(self, t: float) -> np.ndarray:
        sign = math.copysign(1.0, self.sweep)
        a = self.start_angle + sign * self.speed * t / self.radius
        cx, cy = self.center
        return np.array([
            cx + self.radius * math.cos(a),
            cy + self.radius * math.sin(a),
            -sign * self.speed * math.sin(a),
            sign * self.speed * math.cos(a),
        ])


@dataclass(frozen=True)
class LinearStop:
    """Straight braking to rest at constant deceleration, then re-acceleration.

    The target brakes from ``start_velocity`` to zero, then accelerates at the
    same rate along ``end_velocity`` until it reaches that velocity. ``start``
    is only needed when the stop opens the track.
    """

    start_velocity: tuple[float, float]
    deceleration: float
    end_velocity: tuple[float, float] = (0.0, 0.0)
    start: tuple[float, float] | None = None

    @property
    def _brake_time(self) -> float:
        return math.hypot(*self.start_velocity) / self.deceleration

    @property
    def _accel_time(self) -> float:
        return math.hypot(*self.end_velocity) / self.deceleration

    @property
    def duration(self) -> float:
        return self._brake_time + self._accel_time

    def displacement(self, t: float) -> np.ndarray:
        return self._kinematics(t, np.zeros(2))[:2]

    def _kinematics(self, t: float, origin: np.ndarray) -> np.ndarray:
        v0 = np.asarray(self.start_velocity, dtype=float)
        v1 = np.asarray(self.end_velocity, dtype=float)
        a = self.deceleration
        t1 = self._brake_time
        s0 = np.linalg.norm(v0)
        u0 = v0 / s0 if s0 > 0 else np.zeros(2)
        tb = min(t, t1)
        pos = origin + v0 * tb - 0.5 * a * tb**2 * u0
        vel = v0 - a * tb * u0
        if t > t1:
            s1 = np.linalg.norm(v1)
            u1 = v1 / s1 if s1 > 0 else np.zeros(2)
            ta = min(t - t1, self._accel_time)
            pos = pos + 0.5 * a * ta**2 * u1
            vel = a * ta * u1
        return np.concatenate([pos, vel])


@dataclass(frozen=True)
class TrackSpec:
    segments: tuple
    pulse_rate: float = 10.0
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "segments", tuple(self.segments))
        if not self.segments:
            raise TrackError("track needs at least one segment")
        if not self.pulse_rate > 0:
            raise TrackError("pulse_rate must be positive")


def _segment_origins(spec: TrackSpec, tol: float = 1e-6) -> list[np.ndarray]:
    """Start position of every segment, checking continuity of joins."""
    origins = []
    prev_end = None
    for i, seg in enumerate(spec.segments):
        if isinstance(seg, Arc):
            if seg.radius <= 0 or seg.speed <= 0:
                raise TrackError(f"segment {i}: arc needs positive radius and speed")
            start = seg.state(0.0)[:2]
            if prev_end is not None and np.linalg.norm(start - prev_end) > tol:
                raise TrackError(
                    f"segment {i}: arc starts at {start.round(6).tolist()} but previous segment ends at "
                    f"{prev_end.round(6).tolist()}"
                )
            end = seg.state(seg.duration)[:2]
        elif isinstance(seg, LinearStop):
            if seg.deceleration <= 0:
                raise TrackError(f"segment {i}: deceleration must be positive")
            if prev_end is None:
                if seg.start is None:
                    raise TrackError(f"segment {i}: a leading stop needs an explicit start position")
                start = np.asarray(seg.start, dtype=float)
            else:
                start = prev_end
                if seg.start is not None and np.linalg.norm(np.asarray(seg.start) - prev_end) > tol:
                    raise TrackError(f"segment {i}: stop start does not match previous segment end")
            end = start + seg.displacement(seg.duration)
        else:
            raise TrackError(f"segment {i}: unknown segment type {type(seg).__name__}")
        origins.append(start)
        prev_end = end
    return origins


def generate_track(spec: TrackSpec) -> np.ndarray:
    """Sample the piecewise path every 1/PRF seconds, returning an (n, 4) array."""
    origins = _segment_origins(spec)
    durations = [seg.duration for seg in spec.segments]
    bounds = np.concatenate([[0.0], np.cumsum(durations)])
    dt = 1.0 / spec.pulse_rate
    n = int(math.floor(bounds[-1] / dt + 1e-9)) + 1
    states = np.empty((n, 4))
    for k in range(n):
        t = k * dt
        i = min(int(np.searchsorted(bounds, t, side="right")) - 1, len(durations) - 1)
        seg = spec.segments[i]
        local_t = min(t - bounds[i], durations[i])
        if isinstance(seg, Arc):
            states[k] = seg.state(local_t)
        else:
            states[k] = seg._kinematics(local_t, origins[i])
    return states


# --------------------------------------------------------------------------
# Presets
# --------------------------------------------------------------------------

def chain_track(start, heading: float, pieces, speed: float = 10.0, deceleration: float = 10.0,
                pulse_rate: float = 10.0, name: str = "") -> TrackSpec:
    """Build a continuous TrackSpec from turtle-style pieces.

    ``pieces`` holds ``("arc", radius, sweep)`` (sweep in radians, positive
    turns left) and ``("stop", new_heading)``. Stops brake along the current
    heading and re-accelerate along ``new_heading``.
    """
    pos = np.asarray(start, dtype=float)
    segments = []
    for piece in pieces:
        kind = piece[0]
        if kind == "arc":
            _, radius, sweep = piece
            sign = math.copysign(1.0, sweep)
            # centre lies to the left (ccw) or right (cw) of the heading
            normal = np.array([-math.sin(heading), math.cos(heading)]) * sign
            center = pos + radius * normal
            start_angle = math.atan2(pos[1] - center[1], pos[0] - center[0])
            arc = Arc(tuple(center), radius, start_angle, sweep, speed)
            segments.append(arc)
            pos = arc.state(arc.duration)[:2]
            heading += sweep
        elif kind == "stop":
            _, new_heading = piece
            v0 = speed * np.array([math.cos(heading), math.sin(heading)])
            v1 = speed * np.array([math.cos(new_heading), math.sin(new_heading)])
            stop = LinearStop(tuple(v0), deceleration, tuple(v1), start=tuple(pos) if not segments else None)
            segments.append(stop)
            pos = pos + stop.displacement(stop.duration)
            heading = new_heading
        else:
            raise TrackError(f"unknown piece {kind!r}")
    return TrackSpec(tuple(segments), pulse_rate, name)


def preset_track(name: str) -> TrackSpec:
    """Named reference tracks for the three-radar layout (radars at x = 0, 50, 100 m).

    Both start at high SNR near the radars and spend part of the track where
    the weakest radar link drops to 1-5 dB per channel.
    """
    d = math.radians
    if name == "track-a-like":
        # out to ~250 m, full stop, tight loop, back, second stop, turn
        return chain_track(
            (30.0, 120.0), d(80),
            [("arc", 600.0, d(-10)), ("stop", d(100)), ("arc", 28.0, d(170)),
             ("arc", 600.0, d(10)), ("stop", d(0)), ("arc", 40.0, d(90))],
            name=name,
        )
    if name == "track-b-like":
        # S-bend at the far edge of the scene (~260 m) between two stops
        return chain_track(
            (75.0, 110.0), d(95),
            [("arc", 150.0, d(-12)), ("stop", d(150)), ("arc", 30.0, d(-150)),
             ("arc", 30.0, d(150)), ("stop", d(-70)), ("arc", 150.0, d(-30))],
            name=name,
        )
    raise KeyError(f"unknown track preset {name!r}")


PRESET_TRACKS = ("track-a-like", "track-b-like")
