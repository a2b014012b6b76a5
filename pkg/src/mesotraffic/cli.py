"""Command-line driver: simulate, estimate, evaluate, fd and sweep.

Exit codes: 0 success, 2 bad configuration, 3 bad input data, 4 degenerate
evidence or an undefined metric (outputs are still written).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .harness.experiments import load_scenario, run_estimation, summarize, sweep
from .harness.fd import fundamental_diagram
from .harness.io import DataError, load_trajectories, write_marginals, write_observations
from .harness.metrics import UndefinedMetricError, evaluate
from .harness.probes import ProbePlan, ProbeStrategy, sample_probes
from .inference import DegenerateEvidenceError, EstimatorOptions
from .model import EMPTY, LatticeConfig, ModelParams
from .simulator import run
from .trajectories import write_speed_map

log = logging.getLogger("mesotraffic")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DEGENERATE = 0, 2, 3, 4

# grey levels for the three speed bands; empty cells are white
BAND_EDGES_KMH = (25.0, 70.0)
BAND_GREYS = (0, 96, 176)
EMPTY_GREY = 255


def speed_map_pgm(grid: np.ndarray, cfg: LatticeConfig) -> bytes:
    """Binary PGM of a speed map, one row per step, banded by km/h."""
    kmh = cfg.speed_to_kmh(np.maximum(grid, 0).astype(float))
    band = np.digitize(kmh, BAND_EDGES_KMH)
    img = np.asarray(BAND_GREYS, dtype=np.uint8)[band]
    img[grid == EMPTY] = EMPTY_GREY
    rows, cols = img.shape
    return f"P5\n{cols} {rows}\n255\n".encode() + img.tobytes()


def write_dataset(out: Path, dataset, prefix: str = ""):
    dataset.to_csv(out / f"{prefix}trajectories.csv")
    grid = dataset.speed_map()
    write_speed_map(out / f"{prefix}speedmap.csv", grid)
    (out / f"{prefix}speedmap.pgm").write_bytes(speed_map_pgm(grid, dataset.config))


def write_manifest(out: Path, args: argparse.Namespace, seeds: dict, configs: dict):
    manifest = {
        "command": args.command,
        "arguments": {k: (str(v) if isinstance(v, Path) else v)
                      for k, v in vars(args).items() if k not in ("func", "command")},
        "config_paths": {k: str(v) for k, v in configs.items() if v is not None},
        "seeds": seeds,
        "output_directory": str(out),
        "tool_version": __version__,
        "timestamp": datetime.now(timezone.utc).isoformat(timespec="seconds"),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _metric_status(report) -> int:
    return EXIT_DEGENERATE if any(math.isnan(v) for v in report.summary().values()) else EXIT_OK


def _model(path) -> tuple[LatticeConfig, ModelParams]:
    if path is None:
        return LatticeConfig(), ModelParams()
    spec = load_scenario(path)
    return spec.config, spec.params


def _write_report(out: Path, report):
    (out / "metrics.txt").write_text(report.to_keyvalue())
    with open(out / "metrics.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(report.summary().keys())
        writer.writerow(repr(v) for v in report.summary().values())
    with open(out / "step_errors.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("k", "rms_speed_error_cells"))
        writer.writerows((k + 1, repr(float(e))) for k, e in enumerate(report.per_step_error))


# commands -------------------------------------------------------------------

def cmd_simulate(args) -> int:
    spec = load_scenario(args.config)
    dataset = run(spec, args.seed)
    write_dataset(args.out, dataset)
    write_manifest(args.out, args, {"simulation": args.seed}, {"config": args.config})
    return EXIT_OK


def cmd_estimate(args) -> int:
    spec = load_scenario(args.config) if args.config else None
    cfg, params = (spec.config, spec.params) if spec else _model(None)
    truth = load_trajectories(args.truth, cfg)
    plan = ProbePlan(args.penetration, ProbeStrategy(args.strategy), args.probe_seed)
    options = EstimatorOptions(signal=spec.signal if spec else None, keep_marginals=args.marginals)
    result = run_estimation(truth, plan, params, options, prior=args.prior)
    write_dataset(args.out, result.dataset, "estimate_")
    write_observations(args.out / "observations.csv", sample_probes(truth, plan))
    if args.marginals:
        write_marginals(args.out / "marginals.csv", result.marginals)
    report = evaluate(truth, result.dataset)
    _write_report(args.out, report)
    write_manifest(args.out, args, {"probe": args.probe_seed}, {"config": args.config, "truth": args.truth})
    return _metric_status(report)


def cmd_evaluate(args) -> int:
    cfg, _ = _model(args.config)
    truth = load_trajectories(args.truth, cfg)
    est = load_trajectories(args.estimate, cfg)
    if est.n_steps != truth.n_steps:
        raise DataError(f"estimate has {est.n_steps} steps, truth {truth.n_steps}")
    report = evaluate(truth, est)
    _write_report(args.out, report)
    write_manifest(args.out, args, {}, {"config": args.config, "truth": args.truth, "estimate": args.estimate})
    return _metric_status(report)


def cmd_fd(args) -> int:
    cfg, _ = _model(args.config)
    dataset = load_trajectories(args.trajectories, cfg)
    fd = fundamental_diagram(dataset, args.box_cells, args.box_steps)
    with open(args.out / "fd.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("first_cell", "first_step", "density_veh_km", "flow_veh_h", "speed_kmh"))
        for (cell, k), d, q, v in zip(fd.box.tolist(), fd.density, fd.flow, fd.speed):
            writer.writerow((cell, k, repr(float(d)), repr(float(q)), repr(float(v))))
    write_manifest(args.out, args, {}, {"config": args.config, "trajectories": args.trajectories})
    return EXIT_OK


def cmd_sweep(args) -> int:
    spec = load_scenario(args.config)
    rates = [float(r) for r in args.rates.split(",")]
    seeds = list(range(args.seed, args.seed + args.reps))
    results = sweep(spec, rates, args.reps, truth_seeds=seeds, probe_seeds=seeds, workers=args.workers)
    keys = ("eps_sigma_rel", "rmse_kmh", "eps_rho", "mape_travel_time")
    undefined = False
    with open(args.out / "distributions.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("rate", "rep", "seed", *keys))
        for rate, reports in results.items():
            for rep, (seed, r) in enumerate(zip(seeds, reports)):
                vals = [getattr(r, k) for k in keys]
                undefined |= any(math.isnan(v) for v in vals)
                writer.writerow((rate, rep, seed, *map(repr, vals)))
    with open(args.out / "summary.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        rows = [(rate, summarize(reports)) for rate, reports in results.items()]
        writer.writerow(("rate", *rows[0][1].keys()))
        for rate, s in rows:
            writer.writerow((rate, *map(repr, s.values())))
    all_mape = np.array([r.mape_travel_time for reps in results.values() for r in reps], dtype=float)
    all_mape = all_mape[~np.isnan(all_mape)]
    edges = np.histogram_bin_edges(all_mape, bins=args.bins) if len(all_mape) else np.array([0.0, 1.0])
    with open(args.out / "mape_histogram.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("rate", "bin_lo", "bin_hi", "count"))
        for rate, reports in results.items():
            vals = np.array([r.mape_travel_time for r in reports], dtype=float)
            counts, _ = np.histogram(vals[~np.isnan(vals)], bins=edges)
            for lo, hi, c in zip(edges[:-1], edges[1:], counts):
                writer.writerow((rate, repr(float(lo)), repr(float(hi)), int(c)))
    write_manifest(args.out, args, {"repetitions": seeds}, {"config": args.config})
    return EXIT_DEGENERATE if undefined else EXIT_OK


# parser ---------------------------------------------------------------------

def _rate(text: str) -> float:
    value = float(text)
    if not 0.0 <= value <= 1.0:
        raise argparse.ArgumentTypeError("penetration must lie in [0, 1]")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mesotraffic", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate a scenario")
    p.add_argument("--config", type=Path, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("estimate", help="estimate speeds from probes drawn out of a truth file")
    p.add_argument("--truth", type=Path, required=True)
    p.add_argument("--penetration", type=_rate, required=True)
    p.add_argument("--probe-seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--config", type=Path, help="scenario file for model parameters and signal timing")
    p.add_argument("--strategy", choices=[s.value for s in ProbeStrategy], default=ProbeStrategy.UNIFORM_SUBSET.value)
    p.add_argument("--prior", choices=("truth", "cold"), default="truth")
    p.add_argument("--marginals", action="store_true", help="also write per-step marginals")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("evaluate", help="compare an estimate against truth")
    p.add_argument("--truth", type=Path, required=True)
    p.add_argument("--estimate", type=Path, required=True)
    p.add_argument("--config", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("fd", help="fundamental-diagram samples from trajectories")
    p.add_argument("--trajectories", type=Path, required=True)
    p.add_argument("--box-cells", type=int, default=50)
    p.add_argument("--box-steps", type=int, default=30)
    p.add_argument("--config", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_fd)

    p = sub.add_parser("sweep", help="metric distributions over penetration rates")
    p.add_argument("--config", type=Path, required=True)
    p.add_argument("--rates", default="0.05,0.1,0.2,0.3")
    p.add_argument("--reps", type=int, default=100)
    p.add_argument("--seed", type=int, default=0, help="first repetition seed")
    p.add_argument("--bins", type=int, default=20)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.out.mkdir(parents=True, exist_ok=True)
        return args.func(args)
    except DataError as exc:
        log.error("%s", exc)
        return EXIT_DATA
    except (DegenerateEvidenceError, UndefinedMetricError) as exc:
        log.error("%s", exc)
        return EXIT_DEGENERATE
    except (ValueError, KeyError, OSError) as exc:
        log.error("%s", exc)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
