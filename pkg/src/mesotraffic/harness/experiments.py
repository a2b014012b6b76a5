"""Scenario presets, wave measurements and probe-penetration studies."""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from ..inference import EstimateResult, EstimatorOptions, cold_start, estimate_run
from ..model import Boundary, LatticeConfig, ModelParams, TrafficState, format_params, parse_model, read_keyvalue
from ..simulator import Empty, Incident, ScenarioSpec, Signal, UniformRing, run
from ..trajectories import TrajectoryDataset
from .io import group_by_step
from .metrics import MetricReport, evaluate
from .probes import ProbePlan, sample_probes

# presets --------------------------------------------------------------------


def road_cells(length_m: float, delta_l: float = 7.5) -> int:
    """Cells needed to cover the whole road."""
    return math.ceil(length_m / delta_l - 1e-9)


def long_road(p1: float = 0.7, K: int = 450, incident: Incident | None = Incident(300, 20, cell=70),
              length_m: float = 700.0, params: ModelParams | None = None) -> ScenarioSpec:
    """Open road fed at cell 1, optionally with one vehicle held at rest for a while."""
    cfg = LatticeConfig(L=road_cells(length_m))
    params = replace(params or ModelParams(), p1=p1, boundary=Boundary.FREE_DOWNSTREAM)
    return ScenarioSpec(cfg, params, K, Empty(), (incident,) if incident else ())


def ring_road(n_vehicles: int = 30, K: int = 300, length_m: float = 700.0,
              params: ModelParams | None = None) -> ScenarioSpec:
    """Closed loop with vehicles evenly spaced at their equilibrium speeds."""
    cfg = LatticeConfig(L=road_cells(length_m))
    p = replace(params or ModelParams(), boundary=Boundary.PERIODIC)
    return ScenarioSpec(cfg, p, K, UniformRing(n_vehicles))


def signalized(length_m: float = 500.0, red: int = 100, green: int = 100, cycles: int = 4,
               p1: float = 0.7, params: ModelParams | None = None) -> ScenarioSpec:
    """Road ending at a fixed-time stop line; runs for exactly ``cycles`` periods."""
    cfg = LatticeConfig(L=road_cells(length_m))
    p = replace(params or ModelParams(), p1=p1, boundary=Boundary.FREE_DOWNSTREAM)
    return ScenarioSpec(cfg, p, cycles * (red + green), Empty(), (), Signal(red, green, cycles))


def parse_scenario(values: dict) -> ScenarioSpec:
    """Scenario from key-value settings.

    Besides the model keys: ``K``, ``initial`` (``empty`` or ``ring``),
    ``n_vehicles``, repeatable ``incident = start, duration, cell`` and
    ``signal = red, green, cycles[, offset]``.
    """
    cfg, params = parse_model(values)
    K = int(values.get("K", 450))
    kind = values.get("initial", "empty").lower()
    if kind == "empty":
        initial = Empty()
    elif kind == "ring":
        initial = UniformRing(int(values["n_vehicles"]))
    else:
        raise ValueError(f"unknown initial condition {kind!r}")
    raw = values.get("incident", [])
    incidents = []
    for item in raw if isinstance(raw, list) else [raw]:
        start, duration, cell = (int(x) for x in item.split(","))
        incidents.append(Incident(start, duration, cell=cell))
    signal = None
    if "signal" in values:
        signal = Signal(*(int(x) for x in values["signal"].split(",")))
    return ScenarioSpec(cfg, params, K, initial, tuple(incidents), signal)


def format_scenario(spec: ScenarioSpec) -> str:
    lines = [format_params(spec.config, spec.params).rstrip("\n"), f"K = {spec.K}"]
    if isinstance(spec.initial, UniformRing):
        lines += ["initial = ring", f"n_vehicles = {spec.initial.n_vehicles}"]
    elif not isinstance(spec.initial, Empty):
        raise ValueError("only empty and ring initial conditions have a text form")
    lines += [f"incident = {i.start}, {i.duration}, {i.cell}" for i in spec.incidents]
    if spec.signal is not None:
        sig = spec.signal
        lines.append(f"signal = {sig.red}, {sig.green}, {sig.cycles}, {sig.offset}")
    return "\n".join(lines) + "\n"


def load_scenario(path) -> ScenarioSpec:
    return parse_scenario(read_keyvalue(path))


# stopped bands --------------------------------------------------------------


@dataclass
class StoppedCluster:
    cells: np.ndarray  # downstream-most first
    ids: np.ndarray

    def span(self, L: int, periodic: bool) -> tuple[float, float]:
        lo, hi = float(self.cells[-1]), float(self.cells[0])
        if periodic and hi < lo:
            hi += L
        return lo, hi


def stopped_clusters(state: TrafficState, L: int, periodic: bool = False, max_gap: int = 2,
                     min_size: int = 1) -> list[StoppedCluster]:
    """Groups of stopped vehicles whose successive cells lie at most ``max_gap`` apart.

    On a ring a group may wrap past cell ``L``.
    """
    idx = np.flatnonzero(state.speeds == 0)
    if len(idx) == 0:
        return []
    cells = state.cells[idx]
    # gap from each stopped vehicle to the stopped vehicle ahead of it
    gaps = np.empty(len(idx), dtype=np.int64)
    gaps[1:] = cells[:-1] - cells[1:]
    gaps[0] = cells[-1] + L - cells[0] if periodic else L + 1
    breaks = np.flatnonzero(gaps > max_gap)
    if len(breaks) == 0:
        groups = [np.arange(len(idx))]
    else:
        # rotate so the first group starts at a break; on a line breaks[0] == 0
        order = np.roll(np.arange(len(idx)), -breaks[0])
        groups = np.split(order, breaks[1:] - breaks[0])
    return [StoppedCluster(state.cells[idx[g]], state.ids[idx[g]]) for g in groups if len(g) >= min_size]


@dataclass
class StoppedBand:
    """Stopped clusters followed through time; ``centres`` are unwrapped cell positions."""

    start: int
    centres: list[float]
    lo: float
    hi: float
    origin: tuple[float, float]
    vehicles: set[int] = field(default_factory=set)

    @property
    def duration(self) -> int:
        return len(self.centres)

    def slope(self) -> float:
        """Least-squares drift of the centre in cells per step (negative is upstream)."""
        if self.duration < 2:
            return 0.0
        return float(np.polyfit(np.arange(self.duration), self.centres, 1)[0])


def _wrap_delta(a: float, b: float, L: int, periodic: bool) -> float:
    d = a - b
    if periodic:
        d = (d + L / 2) % L - L / 2
    return d


def track_bands(dataset: TrajectoryDataset, periodic: bool = False, max_gap: int = 2, slack: int = 2,
                steps=None) -> list[StoppedBand]:
    """Follow stopped clusters from step to step.

    A cluster continues a band when their cell spans overlap once widened by
    ``slack``. Bands sharing a cluster merge into the oldest one; unmatched
    clusters open new bands.
    """
    L = dataset.config.L
    steps = range(dataset.n_steps) if steps is None else steps
    active: list[StoppedBand] = []
    finished: list[StoppedBand] = []
    for k in steps:
        clusters = stopped_clusters(dataset.state_at(k), L, periodic, max_gap)
        spans = [c.span(L, periodic) for c in clusters]
        owner: dict[int, StoppedBand] = {}
        continued: dict[int, list[tuple[float, float]]] = {}
        for band in active:
            centre = band.centres[-1]
            half = (band.hi - band.lo) / 2
            hits = []
            for j, (lo, hi) in enumerate(spans):
                d = _wrap_delta((lo + hi) / 2, centre, L, periodic)
                if abs(d) <= half + (hi - lo) / 2 + slack:
                    hits.append((j, centre + d - (hi - lo) / 2, centre + d + (hi - lo) / 2))
            if not hits:
                finished.append(band)
                continue
            keeper = next((owner[j] for j, *_ in hits if j in owner), band)
            if keeper is not band:
                keeper.vehicles |= band.vehicles
            for j, lo, hi in hits:
                owner.setdefault(j, keeper)
                continued.setdefault(id(keeper), []).append((lo, hi))
                keeper.vehicles.update(clusters[j].ids.tolist())
        survivors = []
        for band in active:
            extents = continued.get(id(band))
            if extents is None:
                continue
            band.lo = min(e[0] for e in extents)
            band.hi = max(e[1] for e in extents)
            band.centres.append((band.lo + band.hi) / 2)
            survivors.append(band)
        for j, (lo, hi) in enumerate(spans):
            if j not in owner:
                survivors.append(StoppedBand(k, [(lo + hi) / 2], lo, hi, (lo, hi), set(clusters[j].ids.tolist())))
        active = survivors
    return finished + active


def stop_and_go_bands(dataset: TrajectoryDataset, periodic: bool = True, min_vehicles: int = 3,
                      min_steps: int = 10) -> list[StoppedBand]:
    """Bands that stop at least ``min_vehicles`` vehicles, last ``min_steps`` and drift upstream."""
    bands = track_bands(dataset, periodic)
    return [b for b in bands
            if b.duration >= min_steps and len(b.vehicles) >= min_vehicles and b.slope() < 0]


def shockwave_speed(dataset: TrajectoryDataset, incident_cell: int, start: int, horizon: int | None = None,
                    reach: int = 6) -> float:
    """Backward speed (km/h, positive upstream) of the stopped band released by an incident.

    The band is the stopped cluster within ``reach`` cells of the incident at
    ``start``, followed until it dissolves.
    """
    cfg = dataset.config
    end = dataset.n_steps if horizon is None else min(dataset.n_steps, start + horizon)
    bands = track_bands(dataset, periodic=False, steps=range(start, end))
    near = [b for b in bands if b.start == start
            and b.origin[0] - reach <= incident_cell <= b.origin[1] + reach]
    if not near:
        raise ValueError("no stopped band at the incident")
    band = max(near, key=lambda b: b.duration)
    if band.duration < 3:
        raise ValueError("incident band too short to measure")
    return -float(cfg.speed_to_kmh(band.slope()))


# estimation studies ---------------------------------------------------------


def run_estimation(truth: TrajectoryDataset, plan: ProbePlan, params: ModelParams,
                   options: EstimatorOptions | None = None, prior: str = "truth") -> EstimateResult:
    """Estimate ``truth`` from its probes, knowing all entry steps.

    ``prior="truth"`` starts from the true initial state; ``"cold"`` keeps its
    cells but resets speeds to the rounded equilibrium.
    """
    cfg = truth.config
    obs = group_by_step(sample_probes(truth, plan))
    if prior == "truth":
        prior_state = truth.state_at(0)
    elif prior == "cold":
        prior_state = cold_start(truth.state_at(0), params, cfg)
    else:
        raise ValueError(f"unknown prior {prior!r}")
    entries = {k: v for k, v in truth.entries_by_step().items() if k > 0}
    return estimate_run(entries, obs, prior_state, params, cfg, truth.K, options)


@dataclass(frozen=True)
class SweepJob:
    spec: ScenarioSpec
    rate: float
    truth_seed: int
    probe_seed: int
    options: EstimatorOptions | None = None


def _run_job(job: SweepJob) -> MetricReport:
    truth = run(job.spec, job.truth_seed)
    opts = job.options
    if opts is None:
        opts = EstimatorOptions(signal=job.spec.signal)
    est = run_estimation(truth, ProbePlan(job.rate, seed=job.probe_seed), job.spec.params, opts)
    return evaluate(truth, est.dataset)


def sweep(spec: ScenarioSpec, rates, repetitions: int, truth_seeds=None, probe_seeds=None,
          options: EstimatorOptions | None = None, workers: int = 1) -> dict[float, list[MetricReport]]:
    """Metric reports per penetration rate over independent repetitions.

    Repetition ``r`` simulates truth with ``truth_seeds[r]`` and draws probes
    with ``probe_seeds[r]``; pass a constant truth seed list to vary only the
    probe draw. Results do not depend on ``workers``.
    """
    truth_seeds = list(range(repetitions)) if truth_seeds is None else list(truth_seeds)
    probe_seeds = list(range(repetitions)) if probe_seeds is None else list(probe_seeds)
    if len(truth_seeds) != repetitions or len(probe_seeds) != repetitions:
        raise ValueError("need one truth seed and one probe seed per repetition")
    jobs = [SweepJob(spec, float(r), t, p, options) for r in rates for t, p in zip(truth_seeds, probe_seeds)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            reports = list(pool.map(_run_job, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    else:
        reports = [_run_job(j) for j in jobs]
    out: dict[float, list[MetricReport]] = {}
    for job, rep in zip(jobs, reports):
        out.setdefault(job.rate, []).append(rep)
    return out


def summarize(reports: list[MetricReport]) -> dict[str, float]:
    """Mean and sample standard deviation of each metric, ignoring undefined values."""
    out = {}
    for key in ("eps_sigma_rel", "rmse_kmh", "eps_rho", "mape_travel_time"):
        vals = np.array([getattr(r, key) for r in reports], dtype=float)
        vals = vals[~np.isnan(vals)]
        out[f"{key}_mean"] = float(vals.mean()) if len(vals) else math.nan
        out[f"{key}_std"] = float(vals.std(ddof=1)) if len(vals) > 1 else math.nan
    return out
