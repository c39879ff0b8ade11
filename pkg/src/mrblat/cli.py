"""Command-line entry point: ``mrblat <subcommand> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from . import harness
from .harness import ScenarioConfig, load_config
from .node import write_track_csv
from .inference import Posterior
from .waveform import ConfigurationError

ALGO_CHOICES = {"mrblat": ("mrblat",), "kf": ("kf",), "both": ("mrblat", "kf")}


def _add_common(p: argparse.ArgumentParser, runs: bool = True, out: bool = True) -> None:
    p.add_argument("--config", help="scenario file (.json or .toml); defaults to the reference setup")
    p.add_argument("--seed", type=int, help="master seed")
    if runs:
        p.add_argument("--runs", type=int, help="number of Monte Carlo runs")
    p.add_argument("--algo", choices=sorted(ALGO_CHOICES), help="trackers to run")
    p.add_argument("--workers", type=int, help="parallel worker processes")
    if out:
        p.add_argument("--out", default="results", help="output directory (default: %(default)s)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mrblat", description="Multi-radar Bayesian localization and tracking")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    _add_common(sub.add_parser("simulate", help="one realisation; dump truth, tracks and bus log"), runs=False)
    _add_common(sub.add_parser("montecarlo", help="Monte Carlo RMSE and coverage study"))
    p = sub.add_parser("snr-map", help="per-radar and combined SNR over the scene")
    p.add_argument("--config")
    p.add_argument("--step", type=float, default=2.0, help="grid spacing in meters")
    p.add_argument("--out", default="results")
    p = sub.add_parser("validate-config", help="check a scenario file and print the resolved config")
    p.add_argument("--config", required=True)
    return parser


def _config_from_args(args) -> ScenarioConfig:
    algos = ALGO_CHOICES[args.algo] if getattr(args, "algo", None) else None
    return load_config(args.config, seed=getattr(args, "seed", None), runs=getattr(args, "runs", None),
                       algorithms=algos, workers=getattr(args, "workers", None))


def cmd_simulate(args) -> dict:
    cfg = _config_from_args(args).replace(runs=1)
    truth = cfg.truth()
    res = harness.run_single(cfg, 0, truth, keep_node_tracks=True)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")
    snr = harness.min_snr_series(truth, cfg)
    harness.write_truth_csv(out / "truth.csv", truth, snr)
    summary = {"pulses": len(truth), "run_time_s": res.wall_clock}
    if res.node_tracks is not None:
        for k, track in enumerate(res.node_tracks):
            write_track_csv(out / f"mrblat_node{k}_track.csv", track)
        write_track_csv(out / "mrblat_track.csv", res.node_tracks[0])
        summary["bytes_on_bus"] = res.bytes_on_bus
        summary["mrblat_coverage"] = harness.compute_coverage(res.mrblat_means, res.mrblat_covs, truth)
        summary["mrblat_max_error_m"] = float(np.linalg.norm(res.mrblat_means[:, :2] - truth[:, :2], axis=1).max())
    if res.kf_means is not None:
        write_track_csv(out / "kf_track.csv", Posterior(res.kf_means, res.kf_covs))
        summary["kf_max_error_m"] = float(np.linalg.norm(res.kf_means[:, :2] - truth[:, :2], axis=1).max())
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return summary


def cmd_montecarlo(args) -> dict:
    cfg = _config_from_args(args)
    log = logging.getLogger("mrblat")
    result = harness.run_montecarlo(cfg, progress=lambda r, s: log.info("run %d done in %.1f s", r, s.wall_clock))
    harness.write_outputs(result, args.out)
    return result.summary()


def cmd_snr_map(args) -> dict:
    cfg = load_config(args.config)
    truth = cfg.truth()
    xs, ys = harness.scene_grid(cfg, truth, step=args.step)
    per, combined = harness.snr_map(cfg, xs, ys)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    harness.write_snr_map_csv(out / "snr_map.csv", xs, ys, per, combined)
    snr = harness.min_snr_series(truth, cfg)
    return {"grid": [len(ys), len(xs)], "track_min_snr_db": [float(snr.min()), float(snr.max())]}


def cmd_validate(args) -> dict:
    return ScenarioConfig.from_file(args.config).to_dict()


COMMANDS = {"simulate": cmd_simulate, "montecarlo": cmd_montecarlo, "snr-map": cmd_snr_map,
            "validate-config": cmd_validate}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            out = COMMANDS[args.command](args)
    except (ConfigurationError, FileNotFoundError, harness.HarnessError, ValueError) as exc:
        err = {"error": type(exc).__name__, "message": str(exc)}
        if isinstance(exc, harness.HarnessError):
            err.update(run=exc.run, pulse=exc.pulse)
        print(json.dumps(err), file=sys.stderr)
        return 2 if isinstance(exc, (ConfigurationError, FileNotFoundError)) else 1
    print(json.dumps(out, indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(main())
