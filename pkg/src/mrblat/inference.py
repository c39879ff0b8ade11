"""Variational messages for joint localization and tracking.

The data message of one radar/pulse is a Gaussian fitted to the likelihood
``p(Z | phi)`` by minimising a Delta-method approximation of the KL
divergence. Everything in the data-message part works in the radar's local
frame ``[u, v, vu, vv]``; the signal only depends on position, so the
velocity block of a data message always has zero precision.

Temporal messages, the Gaussian product and the gamma update for the
process-noise precision work on global states and are frame agnostic.
"""

from __future__ import annotations

import functools
import logging
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from scipy import optimize

from .geometry import SPEED_OF_LIGHT
from .kinematics import KinematicMatrices, process_noise_precision
from .waveform import ObservationBlock, SignalModel

log = logging.getLogger(__name__)

STATE_LABELS = ("x", "y", "vx", "vy")
_LOG_2PI_E = math.log(2.0 * math.pi) + 1.0


class ObjectiveError(FloatingPointError):
    """A term of the KL objective became non-finite."""


class SingularPrecisionError(np.linalg.LinAlgError):
    """Summed message precision has a null space."""

    def __init__(self, message: str, null_space: np.ndarray | None = None, slice_index: int | None = None):
        super().__init__(message)
        self.null_space = null_space
        self.slice_index = slice_index


@dataclass(frozen=True, eq=False)
class GaussianMessage:
    """Gaussian in information form (mean + precision)."""

    mean: np.ndarray
    precision: np.ndarray
    low_confidence: bool = False

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=float))
        object.__setattr__(self, "precision", np.asarray(self.precision, dtype=float))


@dataclass
class GammaSurrogate:
    """Independent gamma posteriors over the four process-noise precisions."""

    shape: np.ndarray
    rate: np.ndarray
    prior_shape: float = 1.0
    prior_rate: float = 1.0

    def __post_init__(self):
        self.shape = np.broadcast_to(np.asarray(self.shape, dtype=float), (4,)).copy()
        self.rate = np.broadcast_to(np.asarray(self.rate, dtype=float), (4,)).copy()
        if np.any(self.shape <= 0) or np.any(self.rate <= 0):
            raise ValueError("gamma shape and rate must be positive")

    @classmethod
    def from_mean(cls, lambda_a, prior_shape: float = 1.0, prior_rate: float = 1.0) -> "GammaSurrogate":
        lam = np.broadcast_to(np.asarray(lambda_a, dtype=float), (4,))
        return cls(np.ones(4), 1.0 / lam, prior_shape, prior_rate)

    @property
    def mean(self) -> np.ndarray:
        """E[lambda_a] = shape / rate."""
        return self.shape / self.rate


class PosteriorSlice(NamedTuple):
    mean: np.ndarray
    precision: np.ndarray
    covariance: np.ndarray


@dataclass
class Posterior:
    """Per-slice means (n, 4) and covariances (n, 4, 4)."""

    means: np.ndarray
    covariances: np.ndarray

    def __len__(self):
        return len(self.means)

    def copy(self) -> "Posterior":
        return Posterior(self.means.copy(), self.covariances.copy())


# --------------------------------------------------------------------------
# Data message
# --------------------------------------------------------------------------

def _polar_derivatives(u: float, v: float):
    """sin(theta), tau and their first and second derivatives w.r.t. (u, v).

    Returns ``sin_t, tau, s, t, ds, dt`` with ``s[p] = d sin_t / dp``,
    ``t[p] = d tau / dp`` and ``ds[p, q] = d s[p] / dq`` (same for ``dt``).
    """
    r2 = u * u + v * v
    r = math.sqrt(r2)
    if r == 0.0:
        raise ObjectiveError("state at the radar position (zero range)")
    r3 = r2 * r
    r5 = r3 * r2
    k = 2.0 / SPEED_OF_LIGHT
    sin_t = u / r
    tau = k * r
    s = np.array([v * v / r3, -u * v / r3])
    t = k * np.array([u / r, v / r])
    ds = np.array([
        [-3.0 * u * v * v / r5, 2.0 * v / r3 - 3.0 * v**3 / r5],
        [-v / r3 + 3.0 * u * u * v / r5, -u / r3 + 3.0 * u * v * v / r5],
    ])
    dt = k * np.array([
        [v * v / r3, -u * v / r3],
        [-u * v / r3, u * u / r3],
    ])
    return sin_t, tau, s, t, ds, dt


@functools.lru_cache(maxsize=16)
def _sorted_bins(model: SignalModel):
    order = np.argsort(model.freqs, kind="stable")
    return order, _PhaseRamp(model.freqs[order])


class _PhaseRamp:
    """exp(2j*pi*f*tau) over a sorted frequency grid.

    On a uniform grid ``f = df * (k0 + k)`` the ramp is an outer product of
    two short exponentials, which is much cheaper than one long complex exp.
    """

    def __init__(self, freqs: np.ndarray):
        self.freqs = freqs
        n = len(freqs)
        self.block = 0
        if n >= 4:
            df = freqs[1] - freqs[0]
            k = np.arange(n)
            if df > 0 and np.allclose(freqs, freqs[0] + df * k, rtol=0, atol=1e-9 * abs(df) * n):
                b = int(round(math.sqrt(n)))
                while b > 1 and n % b:
                    b -= 1
                if b > 1:
                    self.block = b
                    self.df, self.f0 = df, freqs[0]
                    self.outer = 2.0 * np.pi * df * b * np.arange(n // b)
                    self.inner = 2.0 * np.pi * df * np.arange(b)

    def __call__(self, tau: float) -> np.ndarray:
        if not self.block:
            return np.exp(2j * np.pi * self.freqs * tau)
        start = complex(math.cos(2 * math.pi * self.f0 * tau), math.sin(2 * math.pi * self.f0 * tau))
        ramp = np.multiply.outer(np.exp(1j * tau * self.outer), start * np.exp(1j * tau * self.inner))
        return ramp.ravel()


class DataLikelihood:
    """Signal-dependent pieces of the data-message objective for one block.

    ``S~`` denotes the signal with unit path loss. Precomputes the weighted
    observation ``Y = |U|^2 Lambda_Z Z`` so that

        <S~(u, v)|Lambda_Z|Z> = sum_f exp(2j pi f tau) sum_c exp(-1j g_c sin theta) Y[c, f]
    """

    def __init__(self, obs: ObservationBlock, model: SignalModel):
        if obs.z.shape != (model.n_channels, model.cfg.num_samples):
            raise ValueError(f"observation shape {obs.z.shape} does not match the signal model")
        self.model = model
        if obs.noise_precision is model.channel_precision:
            weight = model.matched_weight
            self.energy = model.signal_energy
            self.k_gg, self.k_gf, self.k_ff = model.jacobian_moments
        else:
            weight = model.channel_power * obs.noise_precision
            self.energy = float(np.sum(model.channel_power * weight))
            self.k_gg, self.k_gf, self.k_ff = self._moments(model.channel_power * weight)
        if not self.energy > 0:
            raise ObjectiveError("zero signal energy <S|Lambda_Z|S>")
        # bins sorted by frequency so the delay phase ramp can be factorised
        order, self._ramp = _sorted_bins(model)
        self.y = (weight * obs.z)[:, order]
        self.g = model.wavenumber_offsets
        self.freqs = self._ramp.freqs
        self._y_yf = np.concatenate([self.y, self.y * self.freqs[None, :]])

    def _moments(self, w: np.ndarray):
        g = self.model.wavenumber_offsets[:, None]
        f = self.model.freqs[None, :]
        return float(np.sum(w * g**2)), float(np.sum(w * g * f)), float(np.sum(w * f**2))

    def correlation(self, u: float, v: float, with_grad: bool = False):
        """<S~|Lambda_Z|Z> at (u, v) and optionally its gradient (complex 2-vector)."""
        sin_t, tau, s, t, _, _ = _polar_derivatives(u, v)
        steer = np.exp(-1j * self.g * sin_t)
        delay = self._ramp(tau)
        if not with_grad:
            return steer @ (self.y @ delay)
        # per-channel delay-domain sums for Y and f*Y in one pass
        per_chan = self._y_yf @ delay
        n = len(self.g)
        beam, beam_f = per_chan[:n], per_chan[n:]
        c = steer @ beam
        d_sin = (-1j * self.g * steer) @ beam
        d_tau = 2j * np.pi * (steer @ beam_f)
        return c, d_sin * s + d_tau * t

    def gram(self, u: float, v: float) -> np.ndarray:
        """Position block of Re <grad S~|Lambda_Z|grad S~> (2x2)."""
        _, _, s, t, _, _ = _polar_derivatives(u, v)
        two_pi = 2.0 * np.pi
        return (self.k_gg * np.outer(s, s)
                - two_pi * self.k_gf * (np.outer(s, t) + np.outer(t, s))
                + two_pi**2 * self.k_ff * np.outer(t, t))

    def gram_diag_and_grad(self, u: float, v: float):
        """diag of :meth:`gram` and d diag / d(u, v) as a (2, 2) array [p, q]."""
        _, _, s, t, ds, dt = _polar_derivatives(u, v)
        two_pi = 2.0 * np.pi
        diag = self.k_gg * s * s - 2 * two_pi * self.k_gf * s * t + two_pi**2 * self.k_ff * t * t
        grad = (2 * self.k_gg * s[:, None] * ds
                - 2 * two_pi * self.k_gf * (ds * t[:, None] + s[:, None] * dt)
                + 2 * two_pi**2 * self.k_ff * t[:, None] * dt)
        return diag, grad


def alpha_ml_estimate(obs: ObservationBlock, phi_init, model: SignalModel,
                      likelihood: DataLikelihood | None = None) -> complex:
    """ML path loss at a fixed local state: <S~|L|Z> / <S~|L|S~>."""
    lk = likelihood or DataLikelihood(obs, model)
    phi_init = np.asarray(phi_init, dtype=float)
    return complex(lk.correlation(phi_init[0], phi_init[1]) / lk.energy)


def _objective(lk: DataLikelihood, alpha_hat: complex, mean, logvar, with_grad: bool):
    a2 = abs(alpha_hat) ** 2
    u, v = float(mean[0]), float(mean[1])
    logvar = np.asarray(logvar, dtype=float)
    if with_grad:
        c, dc = lk.correlation(u, v, with_grad=True)
    else:
        c = lk.correlation(u, v)
    abs_c = abs(c)
    fit = -2.0 * abs(alpha_hat) * abs_c
    energy = a2 * lk.energy
    diag, d_diag = lk.gram_diag_and_grad(u, v)
    with np.errstate(over="ignore"):
        var = np.exp(logvar[:2])
    trace = a2 * float(var @ diag)
    entropy = 0.5 * float(np.sum(logvar + _LOG_2PI_E))
    terms = {"fit": fit, "energy": energy, "trace": trace, "entropy": entropy}
    for name, val in terms.items():
        if not math.isfinite(val):
            raise ObjectiveError(f"non-finite {name} term in KL objective: {val!r}")
    value = fit + energy + trace - entropy
    if not with_grad:
        return value
    grad = np.zeros(6)
    if abs_c > 0:
        grad[:2] = -2.0 * abs(alpha_hat) * np.real(np.conj(c) * dc) / abs_c
    grad[:2] += a2 * (var @ d_diag)
    grad[4:6] = a2 * var * diag - 0.5
    return value, grad


def kl_objective(epsilon_mean, epsilon_logvar, obs: ObservationBlock, alpha_hat: complex,
                 model: SignalModel, likelihood: DataLikelihood | None = None) -> float:
    """Delta-method KL objective with the carrier phase removed by a modulus.

    ``-2|a <S~|L|Z>| + |a|^2 <S~|L|S~> + |a|^2 tr(Sigma <dS~|L|dS~>) - H(Sigma)``
    for a diagonal Gaussian with ``Sigma = diag(exp(epsilon_logvar))``.
    ``epsilon_mean`` and ``epsilon_logvar`` are local-frame 4-vectors.
    """
    lk = likelihood or DataLikelihood(obs, model)
    return _objective(lk, alpha_hat, epsilon_mean, epsilon_logvar, with_grad=False)


def kl_gradient(epsilon_mean, epsilon_logvar, obs: ObservationBlock, alpha_hat: complex,
                model: SignalModel, likelihood: DataLikelihood | None = None) -> np.ndarray:
    """Gradient of :func:`kl_objective` w.r.t. (mean[0:4], logvar[0:4]) as an 8-vector.

    Mean velocity components have zero gradient. Velocity log-variances only
    enter through the entropy, giving a constant -1/2.
    """
    lk = likelihood or DataLikelihood(obs, model)
    _, g = _objective(lk, alpha_hat, epsilon_mean, epsilon_logvar, with_grad=True)
    return np.concatenate([g[:4], g[4:6], [-0.5, -0.5]])


@dataclass(frozen=True)
class OptimizerOptions:
    max_iter: int = 200
    gtol: float = 1e-6
    # variance of the unobservable velocity components (reported as zero precision)
    velocity_logvar: float = math.log(1e12)


@dataclass
class DataMessageFit:
    message: GaussianMessage
    alpha_hat: complex
    objective: float
    initial_objective: float
    iterations: int
    converged: bool
    trace: list = field(default_factory=list)


def fit_data_message(obs: ObservationBlock, phi_init, model: SignalModel,
                     opts: OptimizerOptions | None = None, record_trace: bool = False) -> DataMessageFit:
    """Minimise the KL objective over the position mean and log-variances.

    ``phi_init`` is a local-frame state; its velocity passes through to the
    returned mean. Positions are optimised in units of the initial
    closed-form standard deviation so the problem is well scaled.
    """
    opts = opts or OptimizerOptions()
    phi_init = np.asarray(phi_init, dtype=float)
    lk = DataLikelihood(obs, model)
    alpha_hat = alpha_ml_estimate(obs, phi_init, model, likelihood=lk)
    a2 = abs(alpha_hat) ** 2
    if a2 == 0.0:
        raise ObjectiveError("estimated path loss is zero")

    diag0, _ = lk.gram_diag_and_grad(phi_init[0], phi_init[1])
    logvar0 = -np.log(2.0 * a2 * np.maximum(diag0, 1e-300))
    scale = np.exp(0.5 * logvar0)
    vel_logvar = np.full(2, opts.velocity_logvar)

    def unpack(x):
        mean = phi_init.copy()
        mean[:2] = phi_init[:2] + scale * x[:2]
        return mean, np.concatenate([x[2:4], vel_logvar])

    trace = []

    def fun(x):
        mean, logvar = unpack(x)
        val, g = _objective(lk, alpha_hat, mean, logvar, with_grad=True)
        if record_trace:
            trace.append((len(trace), val, *mean, *logvar))
        return val, np.concatenate([g[:2] * scale, g[4:6]])

    x0 = np.concatenate([np.zeros(2), logvar0])
    f0, _ = fun(x0)
    res = optimize.minimize(fun, x0, jac=True, method="BFGS",
                            options={"maxiter": opts.max_iter, "gtol": opts.gtol})
    x_best, f_best = (res.x, float(res.fun)) if res.fun <= f0 else (x0, f0)
    grad_norm = float(np.linalg.norm(res.jac)) if res.jac is not None else np.inf
    # BFGS reports precision loss at a stationary point; accept small gradients
    converged = bool(res.success or grad_norm < 1e-4)
    if not converged:
        log.debug("data-message fit not converged: %s (|g|=%.3g)", res.message, grad_norm)

    mean, logvar = unpack(x_best)
    precision = np.zeros((4, 4))
    precision[0, 0], precision[1, 1] = np.exp(-logvar[:2])
    msg = GaussianMessage(mean, precision, low_confidence=not converged)
    return DataMessageFit(msg, alpha_hat, f_best, f0, int(res.nit), converged, trace)


def minimize_data_message(obs: ObservationBlock, phi_init, model: SignalModel,
                          opts: OptimizerOptions | None = None) -> GaussianMessage:
    """Local-frame Gaussian data message (diagonal, zero velocity precision)."""
    return fit_data_message(obs, phi_init, model, opts).message


# --------------------------------------------------------------------------
# Temporal messages and fusion
# --------------------------------------------------------------------------

def _lambda(gamma) -> np.ndarray:
    return gamma.mean if isinstance(gamma, GammaSurrogate) else np.asarray(gamma, dtype=float)


def prediction_message(prev_mean, gamma, m: KinematicMatrices) -> GaussianMessage:
    """Message phi_{n-1} -> phi_n: N(T mean_{n-1}, G^-T E[Lambda_a] G^-1)."""
    return GaussianMessage(m.T @ np.asarray(prev_mean, dtype=float),
                           process_noise_precision(_lambda(gamma), m))


def smoothing_message(next_mean, gamma, m: KinematicMatrices) -> GaussianMessage:
    """Message phi_{n+1} -> phi_n: N(T^-1 mean_{n+1}, T^T G^-T E[Lambda_a] G^-1 T)."""
    q = process_noise_precision(_lambda(gamma), m)
    return GaussianMessage(m.T_inv @ np.asarray(next_mean, dtype=float), m.T.T @ q @ m.T)


def describe_null_space(precision: np.ndarray, rtol: float = 1e-12) -> tuple[np.ndarray, str]:
    w, vecs = np.linalg.eigh(0.5 * (precision + precision.T))
    scale = max(float(np.max(np.abs(w))), 1e-300)
    null = vecs[:, w <= rtol * scale]
    parts = []
    for col in null.T:
        comps = [f"{c:+.3g}*{lbl}" for c, lbl in zip(col, STATE_LABELS) if abs(c) > 1e-6]
        parts.append("[" + " ".join(comps) + "]")
    return null, ", ".join(parts)


def combine_gaussians(messages: Sequence[GaussianMessage]) -> PosteriorSlice:
    """Product of Gaussians: precisions add, means are precision-weighted."""
    if not messages:
        raise SingularPrecisionError("no messages to combine")
    total = np.zeros_like(messages[0].precision)
    info = np.zeros_like(messages[0].mean)
    for msg in messages:
        total += msg.precision
        info += msg.precision @ msg.mean
    null, desc = describe_null_space(total)
    if null.shape[1]:
        raise SingularPrecisionError(f"combined precision is singular along {desc}", null)
    cov = np.linalg.inv(total)
    cov = 0.5 * (cov + cov.T)
    return PosteriorSlice(cov @ info, total, cov)


def update_lambda_a(means, covariances, m: KinematicMatrices, prior_shape: float = 1.0,
                    prior_rate: float = 1.0) -> GammaSurrogate:
    """Gamma surrogate of the process-noise precision from slices 0..N.

    shape = (N + zeta) / 2, rate = (chi + sum_n V_n) / 2 with
    V_n,i = [G^-1 (r r^T + C_n + T C_{n-1} T^T) G^-T]_ii, r = m_n - T m_{n-1}.
    """
    means = np.asarray(means, dtype=float)
    covs = np.asarray(covariances, dtype=float)
    if len(means) < 2:
        raise ValueError("gamma update needs at least two slices; keep the initial Lambda_a")
    T = m.T
    resid = means[1:] - means[:-1] @ T.T
    # only the diagonal of r r^T + C_n + T C_{n-1} T^T is needed
    prop = np.diagonal(T @ covs[:-1] @ T.T, axis1=1, axis2=2)
    second = resid**2 + np.diagonal(covs[1:], axis1=1, axis2=2) + prop
    g_inv2 = np.diag(m.G_inv) ** 2
    v = second * g_inv2
    n = len(means) - 1
    return GammaSurrogate((n + prior_shape) / 2.0, (prior_rate + v.sum(axis=0)) / 2.0,
                          prior_shape, prior_rate)
