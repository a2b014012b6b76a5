"""Stochastic lattice simulation of single-lane traffic.

Each step advances every vehicle against its leader's previous cell, removes
vehicles that leave a free boundary (or wraps them on a ring), samples new
speeds from the Boltzmann distribution around the equilibrium speed for the
new spacing, applies random slow-downs and finally injects an arrival at
cell 1.

Random draws are consumed per step in a fixed order so that a run is
reproducible from its seed: one uniform per vehicle for the speed sample,
one uniform per vehicle for the slow-down, then (free boundary only) one
uniform for the arrival.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import Boundary, LatticeConfig, ModelParams, TrafficState, VehicleState, speed_spacing
from .trajectories import TrajectoryDataset


# scenario description -------------------------------------------------------

@dataclass(frozen=True)
class Empty:
    pass


@dataclass(frozen=True)
class UniformRing:
    n_vehicles: int


@dataclass(frozen=True)
class Explicit:
    vehicles: tuple[VehicleState, ...]


@dataclass(frozen=True)
class Incident:
    """Hold one vehicle at speed 0 for ``duration`` steps starting at ``start``.

    The vehicle is given by ``veh_id`` or, failing that, as the vehicle
    nearest to ``cell`` just before ``start``.
    """

    start: int
    duration: int
    cell: int | None = None
    veh_id: int | None = None

    def active(self, k: int) -> bool:
        return self.start <= k < self.start + self.duration


@dataclass(frozen=True)
class Signal:
    """Fixed-time stop line at the downstream end: red first, then green."""

    red: int
    green: int
    cycles: int
    offset: int = 0

    def is_red(self, k: int) -> bool:
        t = k - self.offset
        period = self.red + self.green
        if t < 0 or t >= self.cycles * period:
            return False
        return t % period < self.red


@dataclass(frozen=True)
class ScenarioSpec:
    config: LatticeConfig
    params: ModelParams
    K: int
    initial: Empty | UniformRing | Explicit = Empty()
    incidents: tuple[Incident, ...] = ()
    signal: Signal | None = None

    def __post_init__(self):
        if self.K < 0:
            raise ValueError("K must be non-negative")
        if isinstance(self.initial, UniformRing):
            if self.params.boundary != Boundary.PERIODIC:
                raise ValueError("UniformRing requires a periodic boundary")
            if not 0 <= self.initial.n_vehicles <= self.config.L:
                raise ValueError(
                    f"cannot place {self.initial.n_vehicles} vehicles on {self.config.L} cells")
        for inc in self.incidents:
            if not 0 <= inc.start < max(self.K, 1) or inc.duration < 1:
                raise ValueError(f"incident window {inc} outside [0, {self.K})")
            if inc.cell is None and inc.veh_id is None:
                raise ValueError("incident needs a cell or a vehicle id")
        if self.signal is not None and self.params.boundary == Boundary.PERIODIC:
            raise ValueError("a signal needs a free downstream boundary")


# elementary operations ------------------------------------------------------

def speed_distribution(v_eq, params: ModelParams, cfg: LatticeConfig) -> np.ndarray:
    """Boltzmann weights over ``0..v_max`` around equilibrium speed(s) ``v_eq``.

    Returns shape ``(v_max+1,)`` for a scalar and ``(n, v_max+1)`` for an array.
    """
    v = np.arange(cfg.n_speeds, dtype=float)
    energy = (v - np.asarray(v_eq, dtype=float)[..., None]) ** 2 / params.theta0_lattice(cfg)
    energy -= energy.min(axis=-1, keepdims=True)
    w = np.exp(-energy)
    return w / w.sum(axis=-1, keepdims=True)


def _draw(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    cdf = np.cumsum(probs, axis=-1)
    idx = (u[:, None] >= cdf).sum(axis=-1)
    return np.minimum(idx, probs.shape[-1] - 1)


def sample_speed(gap, params: ModelParams, cfg: LatticeConfig, rng: np.random.Generator) -> int:
    probs = speed_distribution(speed_spacing(gap, params, cfg), params, cfg)
    return int(_draw(probs[None, :], rng.random(1))[0])


def apply_slowdown(v, p2: float, rng: np.random.Generator) -> int:
    if rng.random() < p2:
        return max(v - 1, 0)
    return v


def entry_speed(gap, params: ModelParams, cfg: LatticeConfig) -> int:
    """Equilibrium speed for an entering vehicle, rounded half-up."""
    return int(math.floor(speed_spacing(gap, params, cfg) + 0.5))


def inject_arrival(state: TrafficState, params: ModelParams, cfg: LatticeConfig,
                   rng: np.random.Generator) -> TrafficState:
    """With probability ``p1`` place a new vehicle at cell 1 if it is free."""
    u2 = rng.random()
    occupied = len(state) and state.cells[-1] == 1
    if u2 >= params.p1 or occupied:
        return state
    gap = state.cells[-1] - 1 if len(state) else math.inf
    out = TrafficState(
        state.k,
        np.append(state.ids, state.next_id),
        np.append(state.cells, 1),
        np.append(state.speeds, entry_speed(gap, params, cfg)),
        state.next_id + 1,
    )
    return out


def advance_positions(state: TrafficState, params: ModelParams, cfg: LatticeConfig,
                      red: bool = False) -> TrafficState:
    """Move every vehicle against its leader's previous cell; drop or wrap leavers.

    Speeds are carried over unchanged; the returned state has step ``k+1``.
    """
    n = len(state)
    periodic = params.boundary == Boundary.PERIODIC
    if n == 0:
        return TrafficState(state.k + 1, state.ids, state.cells, state.speeds, state.next_id)
    lead = np.empty(n, dtype=np.int64)
    lead[1:] = state.cells[:-1]
    if periodic:
        lead[0] = state.cells[-1] + cfg.L
    else:
        lead[0] = cfg.L + 1 if red else np.iinfo(np.int64).max // 2
    cells = np.minimum(state.cells + state.speeds, lead - 1)
    ids, speeds = state.ids, state.speeds
    if periodic:
        wrapped = cells > cfg.L
        cells = np.where(wrapped, cells - cfg.L, cells)
        order = np.argsort(-cells, kind="stable")
        ids, cells, speeds = ids[order], cells[order], speeds[order]
    else:
        keep = cells <= cfg.L
        ids, cells, speeds = ids[keep], cells[keep], speeds[keep]
    return TrafficState(state.k + 1, ids, cells, speeds, state.next_id)


def spacings(state: TrafficState, params: ModelParams, cfg: LatticeConfig, red: bool = False) -> np.ndarray:
    """Spacing of each vehicle to its leader; ``inf`` for a free downstream boundary."""
    n = len(state)
    gaps = np.empty(n, dtype=float)
    if n == 0:
        return gaps
    gaps[1:] = state.cells[:-1] - state.cells[1:]
    if params.boundary == Boundary.PERIODIC:
        gaps[0] = state.cells[-1] + cfg.L - state.cells[0]
    else:
        gaps[0] = cfg.L + 1 - state.cells[0] if red else math.inf
    return gaps


def step(state: TrafficState, params: ModelParams, cfg: LatticeConfig, rng: np.random.Generator,
         forced_stop=frozenset(), red: bool = False) -> TrafficState:
    """One simulation step from ``k`` to ``k+1``.

    ``forced_stop`` holds vehicle ids whose new speed is set to 0; ``red``
    puts a stop line just past cell ``L``.
    """
    nxt = advance_positions(state, params, cfg, red)
    n = len(nxt)
    if n:
        v_eq = speed_spacing(spacings(nxt, params, cfg, red), params, cfg)
        speeds = _draw(speed_distribution(v_eq, params, cfg), rng.random(n))
        slow = rng.random(n) < params.p2
        speeds = np.where(slow, np.maximum(speeds - 1, 0), speeds)
        if forced_stop:
            speeds = np.where(np.isin(nxt.ids, list(forced_stop)), 0, speeds)
        nxt.speeds = speeds.astype(np.int64)
    if params.boundary == Boundary.FREE_DOWNSTREAM:
        nxt = inject_arrival(nxt, params, cfg, rng)
    return nxt


# scenarios ------------------------------------------------------------------

def initial_state(spec: ScenarioSpec) -> TrafficState:
    init, cfg, params = spec.initial, spec.config, spec.params
    if isinstance(init, Empty):
        return TrafficState.empty()
    if isinstance(init, Explicit):
        state = TrafficState.from_vehicles(init.vehicles)
        state.validate(cfg)
        return state
    n = init.n_vehicles
    cells = (np.arange(n) * cfg.L) // max(n, 1) + 1
    cells = cells[::-1].copy()
    state = TrafficState(0, np.arange(n), cells, np.zeros(n, dtype=np.int64))
    if n:
        eq = speed_spacing(spacings(state, params, cfg), params, cfg)
        state.speeds = np.floor(eq + 0.5).astype(np.int64)
    return state


def _select(incident: Incident, state: TrafficState) -> int | None:
    if incident.veh_id is not None:
        return incident.veh_id
    if len(state) == 0:
        return None
    # ties go to the downstream vehicle (lower index)
    return int(state.ids[np.argmin(np.abs(state.cells - incident.cell))])


def run(spec: ScenarioSpec, seed: int | None = None) -> TrajectoryDataset:
    """Simulate ``spec.K`` steps; identical ``(spec, seed)`` give identical output."""
    rng = np.random.default_rng(seed)
    state = initial_state(spec)
    states = [state]
    targets: dict[int, int | None] = {}
    for k in range(1, spec.K + 1):
        forced = set()
        for i, inc in enumerate(spec.incidents):
            if k == inc.start or (inc.start == 0 and k == 1):
                targets[i] = _select(inc, state)
            if inc.active(k) and targets.get(i) is not None:
                forced.add(targets[i])
        red = spec.signal is not None and spec.signal.is_red(k)
        state = step(state, spec.params, spec.config, rng, frozenset(forced), red)
        states.append(state)
    return TrajectoryDataset.from_states(states, spec.config)
