"""Scenario configuration, Monte Carlo execution, metrics and result files."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from scipy import stats

from . import baseline
from .geometry import RadarPose
from .inference import Posterior
from .kinematics import PRESET_TRACKS, KinematicMatrices, generate_track, preset_track
from .node import build_nodes, run_tracker, write_track_csv
from .waveform import ArrayGeometry, ConfigurationError, SignalModel, WaveformConfig, snr_at, \
    synthesize_observation

log = logging.getLogger(__name__)

CHI2_2_95 = float(stats.chi2.ppf(0.95, df=2))  # 5.9915
ALGORITHMS = ("mrblat", "kf")


class HarnessError(RuntimeError):
    """A module error inside a Monte Carlo run, tagged with run and pulse index."""

    def __init__(self, message: str, run: int | None = None, pulse: int | None = None):
        super().__init__(message)
        self.run = run
        self.pulse = pulse


# --------------------------------------------------------------------------
# Configuration
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class RadarSpec:
    position: tuple[float, float]
    boresight_deg: float = 0.0

    @property
    def pose(self) -> RadarPose:
        return RadarPose(self.position, math.radians(self.boresight_deg))


DEFAULT_RADARS = (
    RadarSpec((0.0, 0.0), -10.0),
    RadarSpec((50.0, 0.0), 0.0),
    RadarSpec((100.0, 0.0), 10.0),
)


@dataclass(frozen=True)
class ScenarioConfig:
    """Everything needed to reproduce an experiment; defaults are the reference setup."""

    radars: tuple[RadarSpec, ...] = DEFAULT_RADARS
    waveform: WaveformConfig = field(default_factory=WaveformConfig)
    n_tx: int = 3
    n_rx: int = 3
    pulse_rate: float = 10.0
    track: str = "track-a-like"
    max_pulses: int | None = None
    rcs: float = 0.05
    runs: int = 32
    seed: int = 0
    algorithms: tuple[str, ...] = ALGORITHMS
    n_ite: int = 5
    lambda_init: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)
    window: int | None = None
    kf_process_variance: tuple[float, float, float, float] | None = None
    workers: int = 1

    def __post_init__(self):
        if not self.radars:
            raise ConfigurationError("at least one radar is required")
        if self.n_tx < 1 or self.n_rx < 1:
            raise ConfigurationError("n_tx and n_rx must be >= 1")
        if not self.pulse_rate > 0:
            raise ConfigurationError("pulse_rate must be positive")
        if self.track not in PRESET_TRACKS:
            raise ConfigurationError(f"unknown track {self.track!r}; choose from {list(PRESET_TRACKS)}")
        if self.max_pulses is not None and self.max_pulses < 1:
            raise ConfigurationError("max_pulses must be >= 1")
        if not self.rcs > 0:
            raise ConfigurationError("rcs must be positive")
        if self.runs < 1:
            raise ConfigurationError("runs must be >= 1")
        if self.seed < 0:
            raise ConfigurationError("seed must be a non-negative integer")
        bad = [a for a in self.algorithms if a not in ALGORITHMS]
        if bad or not self.algorithms:
            raise ConfigurationError(f"algorithms must be a non-empty subset of {list(ALGORITHMS)}, got {bad}")
        if self.n_ite < 1:
            raise ConfigurationError("n_ite must be >= 1")
        if len(self.lambda_init) != 4 or not all(v > 0 for v in self.lambda_init):
            raise ConfigurationError("lambda_init must be four positive numbers")
        if self.kf_process_variance is not None and (
                len(self.kf_process_variance) != 4 or not all(v > 0 for v in self.kf_process_variance)):
            raise ConfigurationError("kf_process_variance must be four positive numbers")
        if self.window is not None and self.window < 2:
            raise ConfigurationError("window must be >= 2")
        if self.workers < 1:
            raise ConfigurationError("workers must be >= 1")

    # -- derived objects ---------------------------------------------------
    @property
    def poses(self) -> list[RadarPose]:
        return [r.pose for r in self.radars]

    @property
    def kinematics(self) -> KinematicMatrices:
        return KinematicMatrices.from_prf(self.pulse_rate)

    def signal_model(self) -> SignalModel:
        arr = ArrayGeometry.virtual_ula(self.waveform.wavelength, self.n_tx, self.n_rx)
        return SignalModel(self.waveform, arr)

    def truth(self) -> np.ndarray:
        spec = preset_track(self.track)
        spec = dataclasses.replace(spec, pulse_rate=self.pulse_rate)
        states = generate_track(spec)
        return states[:self.max_pulses] if self.max_pulses else states

    def process_variance(self) -> np.ndarray:
        if self.kf_process_variance is not None:
            return np.asarray(self.kf_process_variance, dtype=float)
        return 1.0 / np.asarray(self.lambda_init, dtype=float)

    # -- (de)serialisation -------------------------------------------------
    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["radars"] = [{"position": list(r.position), "boresight_deg": r.boresight_deg} for r in self.radars]
        d["algorithms"] = list(self.algorithms)
        d["lambda_init"] = list(self.lambda_init)
        if self.kf_process_variance is not None:
            d["kf_process_variance"] = list(self.kf_process_variance)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "ScenarioConfig":
        data = dict(data)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigurationError(f"unknown config keys: {unknown}")
        try:
            if "radars" in data:
                data["radars"] = tuple(
                    RadarSpec(tuple(float(v) for v in r["position"]), float(r.get("boresight_deg", 0.0)))
                    for r in data["radars"]
                )
                for r in data["radars"]:
                    if len(r.position) != 2:
                        raise ConfigurationError("radar position must have two coordinates")
            if "waveform" in data:
                wf = dict(data["waveform"])
                wknown = {f.name for f in dataclasses.fields(WaveformConfig)}
                wunknown = sorted(set(wf) - wknown)
                if wunknown:
                    raise ConfigurationError(f"unknown waveform keys: {wunknown}")
                data["waveform"] = WaveformConfig(**wf)
            for key in ("algorithms", "lambda_init", "kf_process_variance"):
                if data.get(key) is not None:
                    data[key] = tuple(data[key])
            return cls(**data)
        except (KeyError, TypeError) as exc:
            raise ConfigurationError(f"malformed config: {exc}") from None

    @classmethod
    def from_file(cls, path) -> "ScenarioConfig":
        path = Path(path)
        text = path.read_text()
        if path.suffix.lower() == ".toml":
            try:
                import tomllib
            except ModuleNotFoundError:  # Python < 3.11
                import tomli as tomllib
            try:
                data = tomllib.loads(text)
            except tomllib.TOMLDecodeError as exc:
                raise ConfigurationError(f"{path}: invalid TOML: {exc}") from None
        else:
            try:
                data = json.loads(text)
            except json.JSONDecodeError as exc:
                raise ConfigurationError(f"{path}: invalid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigurationError(f"{path}: top level must be a table/object")
        return cls.from_dict(data)

    def replace(self, **changes) -> "ScenarioConfig":
        return dataclasses.replace(self, **changes)


# --------------------------------------------------------------------------
# Metrics
# --------------------------------------------------------------------------

def compute_rmse(estimates, truth) -> np.ndarray:
    """Per-index sqrt(mean over runs of |position error|^2).

    ``estimates`` is (runs, n, >=2), ``truth`` is (n, >=2); only the first
    two columns (position) are used.
    """
    est = np.asarray(estimates, dtype=float)
    tru = np.asarray(truth, dtype=float)
    if est.ndim != 3:
        raise ValueError(f"estimates must be (runs, n, d), got shape {est.shape}")
    if est.shape[0] < 2:
        raise ValueError("RMSE needs at least two Monte Carlo runs")
    if est.shape[1] != tru.shape[0]:
        raise ValueError(f"length mismatch: {est.shape[1]} estimates vs {tru.shape[0]} truth states")
    err2 = np.sum((est[:, :, :2] - tru[None, :, :2]) ** 2, axis=2)
    return np.sqrt(err2.mean(axis=0))


def coverage_mask(means, covariances, truth, level: float = 0.95) -> np.ndarray:
    """Boolean per index: truth inside the ``level`` position ellipse."""
    mu = np.asarray(means, dtype=float)[:, :2]
    cov = np.asarray(covariances, dtype=float)[:, :2, :2]
    tru = np.asarray(truth, dtype=float)[:, :2]
    if not (len(mu) == len(cov) == len(tru)):
        raise ValueError("means, covariances and truth must have equal length")
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise ValueError("position covariance is not positive definite at some index") from None
    e = tru - mu
    z = np.linalg.solve(chol, e[:, :, None])[:, :, 0]
    threshold = CHI2_2_95 if level == 0.95 else float(stats.chi2.ppf(level, df=2))
    return np.sum(z**2, axis=1) <= threshold


def compute_coverage(means, covariances, truth, level: float = 0.95) -> float:
    return float(coverage_mask(means, covariances, truth, level).mean())


def min_snr_series(truth, cfg: ScenarioConfig, model: SignalModel | None = None) -> np.ndarray:
    """Minimum over radars of the per-channel SNR (dB) at each truth state."""
    model = model or cfg.signal_model()
    return np.array([min(snr_at(s, pose, model, cfg.rcs) for pose in cfg.poses) for s in truth])


def snr_map(cfg: ScenarioConfig, xs, ys, model: SignalModel | None = None):
    """SNR in dB on the grid ``xs`` x ``ys``: (per-radar (K, ny, nx), max over radars (ny, nx))."""
    model = model or cfg.signal_model()
    from .waveform import snr_from_range
    X, Y = np.meshgrid(np.asarray(xs, dtype=float), np.asarray(ys, dtype=float))
    per = np.stack([snr_from_range(np.hypot(X - p.position[0], Y - p.position[1]), model, cfg.rcs)
                    for p in cfg.radars])
    return per, per.max(axis=0)


def write_snr_map_csv(path, xs, ys, per: np.ndarray, combined: np.ndarray) -> None:
    X, Y = np.meshgrid(xs, ys)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y"] + [f"snr_db_radar{k}" for k in range(len(per))] + ["snr_db_max"])
        for idx in np.ndindex(X.shape):
            w.writerow([X[idx], Y[idx], *(p[idx] for p in per), combined[idx]])


# --------------------------------------------------------------------------
# Monte Carlo
# --------------------------------------------------------------------------

def observation_seed(master: int, run: int, radar: int, pulse: int) -> np.random.SeedSequence:
    """Counter-based seed: independent of how many radars or runs exist."""
    return np.random.SeedSequence(master, spawn_key=(run, radar, pulse))


@dataclass
class SingleRun:
    run: int
    mrblat_means: np.ndarray | None = None
    mrblat_covs: np.ndarray | None = None
    kf_means: np.ndarray | None = None
    kf_covs: np.ndarray | None = None
    node_tracks: list[Posterior] | None = None
    bytes_on_bus: int = 0
    wall_clock: float = 0.0


def run_single(cfg: ScenarioConfig, run: int, truth: np.ndarray | None = None,
               keep_node_tracks: bool = False) -> SingleRun:
    """Synthesize one realisation and run the enabled trackers on it."""
    t0 = time.perf_counter()
    truth = cfg.truth() if truth is None else truth
    model = cfg.signal_model()
    poses = cfg.poses
    out = SingleRun(run)

    def blocks_for(n):
        try:
            return [synthesize_observation(truth[n], pose, model, cfg.rcs,
                                           rng_seed=observation_seed(cfg.seed, run, k, n))
                    for k, pose in enumerate(poses)]
        except Exception as exc:
            raise HarnessError(f"run {run}, pulse {n}: {exc}", run, n) from exc

    observations = [blocks_for(n) for n in range(len(truth))]

    if "mrblat" in cfg.algorithms:
        nodes, bus = build_nodes(poses, model, cfg.kinematics, n_ite=cfg.n_ite,
                                 lambda_init=np.asarray(cfg.lambda_init), window=cfg.window)
        pulse = [0]

        def stream():
            for n, blocks in enumerate(observations):
                pulse[0] = n
                yield blocks

        try:
            tracks = run_tracker(nodes, bus, stream())
        except Exception as exc:
            raise HarnessError(f"run {run}, pulse {pulse[0]}: {type(exc).__name__}: {exc}", run, pulse[0]) from exc
        out.mrblat_means = tracks[0].means
        out.mrblat_covs = tracks[0].covariances
        out.bytes_on_bus = bus.bytes_sent
        if keep_node_tracks:
            out.node_tracks = tracks

    if "kf" in cfg.algorithms:
        points = []
        for n, blocks in enumerate(observations):
            try:
                points.append([baseline.measure(obs, pose, model.array, model.cfg)
                               for obs, pose in zip(blocks, poses)])
            except Exception as exc:
                raise HarnessError(f"run {run}, pulse {n}: {type(exc).__name__}: {exc}", run, n) from exc
        try:
            out.kf_means, out.kf_covs = baseline.run_baseline(points, poses, model.cfg, cfg.kinematics,
                                                              cfg.process_variance())
        except baseline.FilterError as exc:
            raise HarnessError(f"run {run}: {exc}", run, None) from exc

    out.wall_clock = time.perf_counter() - t0
    return out


@dataclass
class RunResult:
    config: ScenarioConfig
    truth: np.ndarray
    min_snr_db: np.ndarray
    means: dict[str, np.ndarray]          # algo -> (runs, n, 4)
    covariances: dict[str, np.ndarray]    # algo -> (runs, n, 4, 4)
    rmse: dict[str, np.ndarray | None]
    max_rmse: dict[str, float | None]
    coverage_first_run: dict[str, float]
    coverage_mean: dict[str, float]
    coverage_per_run: dict[str, np.ndarray]
    bytes_on_bus: int
    wall_clock: float
    run_times: list[float]

    def summary(self) -> dict:
        return {
            "track": self.config.track,
            "runs": self.config.runs,
            "pulses": int(len(self.truth)),
            "seed": self.config.seed,
            "max_rmse": self.max_rmse,
            "coverage_first_run": self.coverage_first_run,
            "coverage_mean_over_runs": self.coverage_mean,
            "min_snr_db": {"min": float(self.min_snr_db.min()), "max": float(self.min_snr_db.max())},
            "bytes_on_bus_per_run": self.bytes_on_bus,
            "wall_clock_s": self.wall_clock,
            "mean_run_time_s": float(np.mean(self.run_times)),
        }


def _run_worker(args):
    cfg, run, truth = args
    return run_single(cfg, run, truth)


def run_montecarlo(cfg: ScenarioConfig, progress=None) -> RunResult:
    """Run ``cfg.runs`` independent realisations; deterministic for a fixed master seed."""
    t0 = time.perf_counter()
    truth = cfg.truth()
    model = cfg.signal_model()
    jobs = [(cfg, r, truth) for r in range(cfg.runs)]
    if cfg.workers > 1 and cfg.runs > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(_run_worker, jobs))
    else:
        results = []
        for job in jobs:
            results.append(_run_worker(job))
            if progress:
                progress(job[1], results[-1])
    results.sort(key=lambda r: r.run)

    means, covs, rmse, max_rmse = {}, {}, {}, {}
    cov_first, cov_mean, cov_runs = {}, {}, {}
    for algo in cfg.algorithms:
        means[algo] = np.stack([getattr(r, f"{algo}_means") for r in results])
        covs[algo] = np.stack([getattr(r, f"{algo}_covs") for r in results])
        if cfg.runs >= 2:
            rmse[algo] = compute_rmse(means[algo], truth)
            max_rmse[algo] = float(rmse[algo].max())
        else:
            rmse[algo] = max_rmse[algo] = None
        per_run = np.array([compute_coverage(m, c, truth) for m, c in zip(means[algo], covs[algo])])
        cov_runs[algo] = per_run
        cov_first[algo] = float(per_run[0])
        cov_mean[algo] = float(per_run.mean())
    if cfg.runs < 2:
        warnings.warn("runs < 2: RMSE is undefined, producing tracks only", RuntimeWarning, stacklevel=2)

    return RunResult(
        config=cfg, truth=truth, min_snr_db=min_snr_series(truth, cfg, model),
        means=means, covariances=covs, rmse=rmse, max_rmse=max_rmse,
        coverage_first_run=cov_first, coverage_mean=cov_mean, coverage_per_run=cov_runs,
        bytes_on_bus=results[0].bytes_on_bus, wall_clock=time.perf_counter() - t0,
        run_times=[r.wall_clock for r in results],
    )


# --------------------------------------------------------------------------
# Output
# --------------------------------------------------------------------------

def _fmt(v) -> str:
    return repr(float(v))


def write_truth_csv(path, truth: np.ndarray, min_snr_db: np.ndarray | None = None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["n", "x", "y", "vx", "vy"] + (["min_snr_db"] if min_snr_db is not None else []))
        for n, s in enumerate(truth):
            extra = [_fmt(min_snr_db[n])] if min_snr_db is not None else []
            w.writerow([n, *map(_fmt, s), *extra])


def write_rmse_csv(path, result: RunResult) -> None:
    algos = [a for a in result.config.algorithms if result.rmse.get(a) is not None]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["n"] + [f"rmse_{a}" for a in algos] + ["min_snr_db"])
        for n in range(len(result.truth)):
            w.writerow([n, *(_fmt(result.rmse[a][n]) for a in algos), _fmt(result.min_snr_db[n])])


def scene_grid(cfg: ScenarioConfig, truth: np.ndarray, step: float = 2.0, margin: float = 20.0):
    """Grid covering the radars and the track, avoiding the radar positions themselves."""
    pts = np.vstack([truth[:, :2], [r.position for r in cfg.radars]])
    lo = np.floor((pts.min(axis=0) - margin) / step) * step
    hi = np.ceil((pts.max(axis=0) + margin) / step) * step
    xs = np.arange(lo[0], hi[0] + step / 2, step) + step / 2
    ys = np.arange(max(lo[1], step / 2), hi[1] + step / 2, step) + step / 2
    return xs, ys


def write_outputs(result: RunResult, out_dir) -> Path:
    """Write the experiment directory and return its path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = result.config
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")
    write_truth_csv(out / "truth.csv", result.truth, result.min_snr_db)
    for algo in cfg.algorithms:
        name = "mrblat_track.csv" if algo == "mrblat" else "kf_track.csv"
        write_track_csv(out / name, Posterior(result.means[algo][0], result.covariances[algo][0]))
    if cfg.runs >= 2:
        write_rmse_csv(out / "rmse.csv", result)
    xs, ys = scene_grid(cfg, result.truth)
    per, combined = snr_map(cfg, xs, ys)
    write_snr_map_csv(out / "snr_map.csv", xs, ys, per, combined)
    (out / "summary.json").write_text(json.dumps(result.summary(), indent=2) + "\n")
    return out


def load_config(path: str | None, **overrides: Any) -> ScenarioConfig:
    cfg = ScenarioConfig.from_file(path) if path else ScenarioConfig()
    changes = {k: v for k, v in overrides.items() if v is not None}
    if changes:
        cfg = cfg.replace(**changes)
    return cfg
