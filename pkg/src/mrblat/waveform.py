"""MIMO radar signal synthesis in the matched-filtered frequency domain.

Observation for one radar and one MIMO pulse::

    Z[c, f] = alpha * A[j, m] * |U[m, f]|**2 * exp(-2j*pi*f*tau) + W[c, f]

with virtual channel ``c = j * N_T + m`` (receiver ``j``, transmitter ``m``),
``f`` the physical frequency of DFT bin ``f`` and ``W[c, f] ~ CN(0, sigma_w**2
* |U[m, f]|**2)``. Transmitters are time-division multiplexed, so each virtual
channel only carries its own transmitter's echo.

All DFTs are unitary (``norm="ortho"``), so a white time-domain noise of
variance ``sigma_w**2`` per sample keeps that variance per frequency bin.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy import signal as sps
from scipy.constants import Boltzmann

from .geometry import SPEED_OF_LIGHT, GlobalPoint, LocalPoint, RadarPose, global_to_local, two_way_delay


class ConfigurationError(ValueError):
    """Invalid waveform, array or scenario parameters."""


class RangeAmbiguityError(ValueError):
    """Target beyond the unambiguous range."""


def thermal_noise_variance(bandwidth: float, temperature: float = 290.0) -> float:
    return bandwidth * Boltzmann * temperature


@dataclass(frozen=True)
class WaveformConfig:
    """Radar waveform and link-budget parameters (defaults: the reference setup).

    ``tx_power`` is treated as the total power of one MIMO pulse.
    ``noise_variance=None`` resolves to ``bandwidth * k_B * 290``.
    """

    carrier_freq: float = 10e9
    bandwidth: float = 20e6
    pulse_duration: float = 16e-6
    sample_rate: float = 256e6
    noise_variance: float | None = None
    tx_power: float = 6.99
    antenna_gain: float = 1.0
    max_range: float = 300.0

    def __post_init__(self):
        if self.noise_variance is None:
            object.__setattr__(self, "noise_variance", thermal_noise_variance(self.bandwidth))
        for name in ("carrier_freq", "bandwidth", "pulse_duration", "sample_rate",
                     "tx_power", "antenna_gain", "max_range"):
            val = getattr(self, name)
            if not (math.isfinite(val) and val > 0):
                raise ConfigurationError(f"{name} must be positive and finite, got {val!r}")
        if not (math.isfinite(self.noise_variance) and self.noise_variance >= 0):
            raise ConfigurationError(f"noise_variance must be >= 0, got {self.noise_variance!r}")
        if self.bandwidth > self.sample_rate / 2:
            raise ConfigurationError(
                f"bandwidth {self.bandwidth:g} Hz exceeds half the sample rate {self.sample_rate:g} Hz"
            )
        if self.num_samples < 1:
            raise ConfigurationError("pulse_duration * sample_rate must give at least one sample")

    @property
    def num_samples(self) -> int:
        return int(round(self.pulse_duration * self.sample_rate))

    @property
    def wavelength(self) -> float:
        return SPEED_OF_LIGHT / self.carrier_freq

    @property
    def range_bin(self) -> float:
        """Range spanned by one delay sample."""
        return SPEED_OF_LIGHT / (2.0 * self.sample_rate)

    def frequencies(self) -> np.ndarray:
        """Physical frequency of each DFT bin (wraps at N_s/2)."""
        return np.fft.fftfreq(self.num_samples, d=1.0 / self.sample_rate)


@dataclass(frozen=True)
class ArrayGeometry:
    """Colinear transmit/receive element offsets (meters) along the radar face."""

    tx_positions: tuple[float, ...]
    rx_positions: tuple[float, ...]

    def __post_init__(self):
        tx = tuple(float(d) for d in self.tx_positions)
        rx = tuple(float(d) for d in self.rx_positions)
        if not tx or not rx:
            raise ConfigurationError("array needs at least one transmitter and one receiver")
        if not all(math.isfinite(d) for d in tx + rx):
            raise ConfigurationError("antenna offsets must be finite")
        object.__setattr__(self, "tx_positions", tx)
        object.__setattr__(self, "rx_positions", rx)

    @classmethod
    def virtual_ula(cls, wavelength: float, n_tx: int = 3, n_rx: int = 3) -> "ArrayGeometry":
        """Receivers at lambda/2, transmitters at n_rx*lambda/2: a filled virtual ULA."""
        d = wavelength / 2.0
        rx = (np.arange(n_rx) - (n_rx - 1) / 2.0) * d
        tx = (np.arange(n_tx) - (n_tx - 1) / 2.0) * n_rx * d
        return cls(tuple(tx), tuple(rx))

    @property
    def n_tx(self) -> int:
        return len(self.tx_positions)

    @property
    def n_rx(self) -> int:
        return len(self.rx_positions)

    def virtual_offsets(self) -> np.ndarray:
        """d_j + d_m for virtual channel c = j * N_T + m."""
        return (np.asarray(self.rx_positions)[:, None] + np.asarray(self.tx_positions)[None, :]).ravel()


@dataclass(frozen=True, eq=False)
class ChirpBank:
    """Frequency-domain transmit pulses, one row per transmitter (N_T x N_s)."""

    spectra: np.ndarray

    @property
    def n_tx(self) -> int:
        return self.spectra.shape[0]

    @property
    def num_samples(self) -> int:
        return self.spectra.shape[1]

    def time_signals(self) -> np.ndarray:
        return np.fft.ifft(self.spectra, axis=1, norm="ortho")


def make_chirp_bank(cfg: WaveformConfig, n_tx: int, amplitude: float = 1.0) -> ChirpBank:
    """Linear up-chirp over [-BW/2, BW/2] filling the pulse, one per TDM slot.

    Every transmitter uses the same chirp in its own time slot; slot
    separation is what makes the channels orthogonal (see
    :func:`slot_cross_correlation_db`).
    """
    if n_tx < 1:
        raise ConfigurationError("n_tx must be >= 1")
    if cfg.bandwidth > cfg.sample_rate:
        raise ConfigurationError("bandwidth exceeds sample rate")
    n = cfg.num_samples
    t = np.arange(n) / cfg.sample_rate - cfg.pulse_duration / 2.0
    rate = cfg.bandwidth / cfg.pulse_duration
    u = amplitude * np.exp(1j * np.pi * rate * t**2)
    spectrum = np.fft.fft(u, norm="ortho")
    return ChirpBank(np.tile(spectrum, (n_tx, 1)))


def slot_cross_correlation_db(bank: ChirpBank, max_lag: int) -> float:
    """Worst TDM cross-talk relative to the autocorrelation peak, in dB.

    Each row is placed in its own slot of an ``N_T * N_s`` frame and the
    cross-correlation between distinct rows is scanned over ``|lag| <= max_lag``
    (the echo delays a receive window can contain).
    """
    n_tx, n = bank.spectra.shape
    pulses = bank.time_signals()
    frames = np.zeros((n_tx, n_tx * n), dtype=complex)
    for m in range(n_tx):
        frames[m, m * n:(m + 1) * n] = pulses[m]
    mid = n_tx * n - 1
    lags = slice(mid - max_lag, mid + max_lag + 1)
    auto = max(np.abs(sps.correlate(frames[m], frames[m], method="fft")).max() for m in range(n_tx))
    worst = 0.0
    for a in range(n_tx):
        for b in range(n_tx):
            if a != b:
                xc = np.abs(sps.correlate(frames[a], frames[b], method="fft")[lags]).max()
                worst = max(worst, xc)
    if worst == 0.0:
        return -np.inf
    return 20.0 * np.log10(worst / auto)


def steering_matrix(target_local: LocalPoint, arr: ArrayGeometry, cfg: WaveformConfig) -> np.ndarray:
    """Far-field two-way steering matrix A[j, m] (N_R x N_T)."""
    k = 2.0 * np.pi / cfg.wavelength
    sin_theta = math.sin(target_local.azimuth)
    offsets = np.asarray(arr.rx_positions)[:, None] + np.asarray(arr.tx_positions)[None, :]
    return np.exp(1j * k * offsets * sin_theta)


def path_loss(tau: float, cfg: WaveformConfig, rcs: float, gain: float | None = None,
              power: float | None = None) -> complex:
    """Complex amplitude from the radar range equation with carrier phase -w_c*tau."""
    if not tau > 0:
        raise ValueError(f"delay must be positive, got {tau!r}")
    gain = cfg.antenna_gain if gain is None else gain
    power = cfg.tx_power if power is None else power
    r = SPEED_OF_LIGHT * tau / 2.0
    mag2 = power * gain**2 * cfg.wavelength**2 * rcs / ((4.0 * np.pi) ** 3 * r**4)
    phase = -2.0 * np.pi * cfg.carrier_freq * tau
    return complex(np.sqrt(mag2) * np.exp(1j * math.remainder(phase, 2.0 * np.pi)))


def noise_precision(bank: ChirpBank, cfg: WaveformConfig) -> np.ndarray:
    """Per-transmitter, per-bin precision of the matched-filter noise (N_T x N_s).

    Bins where the transmit spectrum vanishes get zero precision.
    """
    power = np.abs(bank.spectra) ** 2
    out = np.zeros_like(power)
    support = power > 0
    with np.errstate(divide="ignore"):
        out[support] = 1.0 / (cfg.noise_variance * power[support])
    return out


@dataclass(frozen=True, eq=False)
class ObservationBlock:
    """Matched-filter output of one radar for one MIMO pulse."""

    z: np.ndarray                 # (N_R*N_T, N_s) complex
    noise_precision: np.ndarray   # (N_R*N_T, N_s) real, >= 0

    @property
    def shape(self) -> tuple[int, int]:
        return self.z.shape


@dataclass(frozen=True, eq=False)
class SignalModel:
    """Waveform, array and chirp bank of one radar, with cached derived arrays.

    Serves as the model context for inference: all inner products
    ``<X|Lambda_Z|Y>`` are weighted sums over channels and bins.
    """

    cfg: WaveformConfig
    array: ArrayGeometry
    bank: ChirpBank = field(default=None)

    def __post_init__(self):
        if self.bank is None:
            object.__setattr__(self, "bank", make_chirp_bank(self.cfg, self.array.n_tx))
        if self.bank.n_tx != self.array.n_tx:
            raise ConfigurationError("chirp bank rows must match the number of transmitters")
        if self.bank.num_samples != self.cfg.num_samples:
            raise ConfigurationError("chirp bank length must match num_samples")

    @classmethod
    def default(cls, cfg: WaveformConfig | None = None, n_tx: int = 3, n_rx: int = 3) -> "SignalModel":
        cfg = cfg or WaveformConfig()
        return cls(cfg, ArrayGeometry.virtual_ula(cfg.wavelength, n_tx, n_rx))

    @property
    def n_channels(self) -> int:
        return self.array.n_rx * self.array.n_tx

    @cached_property
    def freqs(self) -> np.ndarray:
        return self.cfg.frequencies()

    @cached_property
    def wavenumber_offsets(self) -> np.ndarray:
        """(2*pi/lambda) * (d_j + d_m) per virtual channel."""
        return 2.0 * np.pi / self.cfg.wavelength * self.array.virtual_offsets()

    @cached_property
    def channel_power(self) -> np.ndarray:
        """|U[m, f]|^2 expanded to virtual channels (N_R*N_T, N_s)."""
        return np.tile(np.abs(self.bank.spectra) ** 2, (self.array.n_rx, 1))

    @cached_property
    def channel_precision(self) -> np.ndarray:
        return np.tile(noise_precision(self.bank, self.cfg), (self.array.n_rx, 1))

    @cached_property
    def matched_weight(self) -> np.ndarray:
        """|U|^2 * Lambda_Z: weight applied to Z in <S~|Lambda_Z|Z>."""
        return self.channel_power * self.channel_precision

    @cached_property
    def signal_energy(self) -> float:
        """<S~|Lambda_Z|S~> for unit path loss (independent of the state)."""
        return float(np.sum(self.channel_power**2 * self.channel_precision))

    @cached_property
    def jacobian_moments(self) -> tuple[float, float, float]:
        """(K_gg, K_gf, K_ff): sums of |U|^4 Lambda weighted by g^2, g*f, f^2.

        With d/dp S~ = i (g*ds/dp - 2*pi*f*dtau/dp) S~ these give the Gram
        matrix <grad S~|Lambda_Z|grad S~> in closed form.
        """
        w = self.channel_power**2 * self.channel_precision
        g = self.wavenumber_offsets[:, None]
        f = self.freqs[None, :]
        return float(np.sum(w * g**2)), float(np.sum(w * g * f)), float(np.sum(w * f**2))


def _local_target(phi, pose: RadarPose) -> LocalPoint:
    if isinstance(phi, GlobalPoint):
        target = phi
    else:
        phi = np.asarray(phi, dtype=float)
        target = GlobalPoint(float(phi[0]), float(phi[1]))
    return global_to_local(target, pose), two_way_delay(target, pose)


def noiseless_signal(local: LocalPoint, tau: float, model: SignalModel, alpha: complex = 1.0) -> np.ndarray:
    """S(phi) for a target at ``local`` with round-trip delay ``tau``."""
    steer = np.exp(1j * model.wavenumber_offsets * math.sin(local.azimuth))
    delay = np.exp(-2j * np.pi * model.freqs * tau)
    return alpha * steer[:, None] * model.channel_power * delay[None, :]


def synthesize_observation(phi, pose: RadarPose, model: SignalModel, rcs: float,
                           rng_seed=None, add_noise: bool = True) -> ObservationBlock:
    """Matched-filter output of radar ``pose`` for a target at state ``phi``.

    ``rng_seed`` may be anything :func:`numpy.random.default_rng` accepts;
    identical seeds give bit-identical blocks.
    """
    cfg = model.cfg
    local, tau = _local_target(phi, pose)
    if local.range >= cfg.max_range:
        raise RangeAmbiguityError(
            f"target range {local.range:.2f} m is not below the unambiguous range {cfg.max_range:g} m"
        )
    alpha = path_loss(tau, cfg, rcs)
    z = noiseless_signal(local, tau, model, alpha)
    if add_noise and cfg.noise_variance > 0:
        rng = np.random.default_rng(rng_seed)
        w = rng.standard_normal((2,) + z.shape)
        w = (w[0] + 1j * w[1]) * math.sqrt(cfg.noise_variance / 2.0)
        z = z + w * np.conj(np.tile(model.bank.spectra, (model.array.n_rx, 1)))
    return ObservationBlock(z=z, noise_precision=model.channel_precision)


def snr_at(phi, pose: RadarPose, model: SignalModel, rcs: float) -> float:
    """Post-matched-filter SNR per virtual channel in dB: <S|Lambda_Z|S> / (N_R N_T)."""
    _, tau = _local_target(phi, pose)
    alpha = path_loss(tau, model.cfg, rcs)
    return 10.0 * np.log10(abs(alpha) ** 2 * model.signal_energy / model.n_channels)


def snr_from_range(ranges, model: SignalModel, rcs: float) -> np.ndarray:
    """Vectorised :func:`snr_at` over an array of ranges (meters)."""
    cfg = model.cfg
    r = np.asarray(ranges, dtype=float)
    with np.errstate(divide="ignore"):
        mag2 = cfg.tx_power * cfg.antenna_gain**2 * cfg.wavelength**2 * rcs / ((4 * np.pi) ** 3 * r**4)
        return 10.0 * np.log10(mag2 * model.signal_energy / model.n_channels)


_HEADER = struct.Struct("<QQ")


def write_observation(path, obs: ObservationBlock) -> None:
    """Debug dump: 16-byte header (rows, cols as uint64 LE) + complex64 row-major."""
    rows, cols = obs.z.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(rows, cols))
        fh.write(np.ascontiguousarray(obs.z, dtype="<c8").tobytes())


def read_observation(path) -> np.ndarray:
    data = Path(path).read_bytes()
    rows, cols = _HEADER.unpack_from(data)
    z = np.frombuffer(data, dtype="<c8", offset=_HEADER.size)
    if z.size != rows * cols:
        raise ValueError(f"{path}: expected {rows * cols} samples, found {z.size}")
    return z.reshape(rows, cols)
