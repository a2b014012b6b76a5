"""Lattice geometry, model parameters and the energy functions of the mesoscopic model.

Conventions used throughout the package:

* cells are numbered ``1..L`` in the direction of travel;
* vehicles are ordered downstream-most first, so index 0 is the vehicle that
  sees the downstream boundary and index ``i - 1`` is the leader of index ``i``;
* speeds are integers in ``0..v_max`` cells per step.

``theta0``, ``theta1`` and ``theta2`` are stored in physical units (m^2/s^2, m,
s) and converted to lattice units when a potential is evaluated.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

#: Weight applied to the interaction potentials in the total energy.
INTERACTION_WEIGHT = 2.0

#: Sentinel leader cell for an unobstructed vehicle.
NO_LEADER = math.inf

EMPTY = -1


class Boundary(str, enum.Enum):
    FREE_DOWNSTREAM = "free"
    PERIODIC = "periodic"


@dataclass(frozen=True)
class LatticeConfig:
    """Lattice geometry.

    ``L`` cells of ``delta_l`` metres, time step ``delta_t`` seconds and a top
    speed of ``v_max`` cells per step.
    """

    L: int = 94
    delta_l: float = 7.5
    delta_t: float = 1.0
    v_max: int = 4

    def __post_init__(self):
        if self.L < 2:
            raise ValueError(f"L must be >= 2, got {self.L}")
        if not self.delta_l > 0 or not self.delta_t > 0:
            raise ValueError("delta_l and delta_t must be positive")
        if self.v_max < 1:
            raise ValueError(f"v_max must be >= 1, got {self.v_max}")

    @property
    def n_speeds(self) -> int:
        return self.v_max + 1

    @property
    def length_m(self) -> float:
        return self.L * self.delta_l

    @property
    def cell_speed_mps(self) -> float:
        """One cell per step expressed in m/s."""
        return self.delta_l / self.delta_t

    # unit conversions
    def cells_to_m(self, cells):
        return _scale(cells, self.delta_l)

    def m_to_cells(self, metres):
        return _scale(metres, 1.0 / self.delta_l)

    def speed_to_mps(self, v):
        return _scale(v, self.cell_speed_mps)

    def mps_to_speed(self, mps):
        return _scale(mps, 1.0 / self.cell_speed_mps)

    def speed_to_kmh(self, v):
        return _scale(v, 3.6 * self.cell_speed_mps)

    def kmh_to_speed(self, kmh):
        return _scale(kmh, 1.0 / (3.6 * self.cell_speed_mps))


def _scale(x, factor):
    if np.ndim(x):
        return np.asarray(x, dtype=float) * factor
    return x * factor


@dataclass(frozen=True)
class ModelParams:
    """Model parameters in physical units.

    ``beta`` may be ``math.inf`` to select the deterministic dynamical potential.
    """

    theta0: float = 110.0
    theta1: float = 7.5
    theta2: float = 1.1
    beta: float = 0.5
    p1: float = 0.7
    p2: float = 0.1
    boundary: Boundary = Boundary.FREE_DOWNSTREAM

    def __post_init__(self):
        if not self.theta0 > 0:
            raise ValueError("theta0 must be positive")
        if not self.theta2 > 0:
            raise ValueError("theta2 must be positive")
        if self.theta1 < 0:
            raise ValueError("theta1 must be non-negative")
        if not self.beta >= 0:
            raise ValueError("beta must be non-negative")
        for name in ("p1", "p2"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {p}")
        object.__setattr__(self, "boundary", Boundary(self.boundary))

    @property
    def deterministic(self) -> bool:
        return math.isinf(self.beta)

    def theta0_lattice(self, cfg: LatticeConfig) -> float:
        """theta0 in (cells/step)^2."""
        return self.theta0 / cfg.cell_speed_mps**2


@dataclass(frozen=True)
class VehicleState:
    id: int
    s: int
    v: int


@dataclass
class TrafficState:
    """Lattice state at step ``k``.

    Vehicle data is held column-wise in arrays ordered downstream-most first.
    """

    k: int
    ids: np.ndarray
    cells: np.ndarray
    speeds: np.ndarray
    next_id: int = 0

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.cells = np.asarray(self.cells, dtype=np.int64)
        self.speeds = np.asarray(self.speeds, dtype=np.int64)
        if not (len(self.ids) == len(self.cells) == len(self.speeds)):
            raise ValueError("ids, cells and speeds must have equal length")
        if len(self.ids):
            self.next_id = max(self.next_id, int(self.ids.max()) + 1)

    @classmethod
    def empty(cls, k: int = 0) -> "TrafficState":
        return cls(k, [], [], [])

    @classmethod
    def from_vehicles(cls, vehicles, k: int = 0) -> "TrafficState":
        ordered = sorted(vehicles, key=lambda veh: -veh.s)
        return cls(k, [v.id for v in ordered], [v.s for v in ordered], [v.v for v in ordered])

    def __len__(self):
        return len(self.ids)

    @property
    def vehicles(self) -> list[VehicleState]:
        return [VehicleState(int(i), int(s), int(v)) for i, s, v in zip(self.ids, self.cells, self.speeds)]

    def sigma(self, L: int) -> np.ndarray:
        out = np.full(L, EMPTY, dtype=np.int64)
        out[self.cells - 1] = self.speeds
        return out

    def copy(self) -> "TrafficState":
        return TrafficState(self.k, self.ids.copy(), self.cells.copy(), self.speeds.copy(), self.next_id)

    def validate(self, cfg: LatticeConfig):
        """Raise ``ValueError`` if any state invariant is broken."""
        if len(self) == 0:
            return
        if self.cells.min() < 1 or self.cells.max() > cfg.L:
            raise ValueError(f"step {self.k}: position outside lattice")
        if self.speeds.min() < 0 or self.speeds.max() > cfg.v_max:
            raise ValueError(f"step {self.k}: speed outside 0..v_max")
        if np.any(np.diff(self.cells) >= 0):
            raise ValueError(f"step {self.k}: positions not strictly decreasing")
        if len(np.unique(self.ids)) != len(self.ids):
            raise ValueError(f"step {self.k}: duplicate vehicle ids")


def speed_spacing(g, params: ModelParams, cfg: LatticeConfig):
    """Equilibrium speed in cells/step for a spacing of ``g`` cells.

    Evaluated in physical units and capped at ``v_max``; accepts arrays.
    """
    g_m = np.asarray(g, dtype=float) * cfg.delta_l
    v_mps = np.maximum((g_m - params.theta1) / params.theta2, 0.0)
    v = np.minimum(v_mps / cfg.cell_speed_mps, float(cfg.v_max))
    return float(v) if np.ndim(v) == 0 else v


def _check_speed(v, cfg: LatticeConfig):
    if not (0 <= v <= cfg.v_max) or int(v) != v:
        raise ValueError(f"speed {v} outside 0..{cfg.v_max}")


def interaction_potential(v, w, g_follow, g_lead, params: ModelParams, cfg: LatticeConfig) -> float:
    """Pairwise energy of a follower at speed ``v`` and its leader at speed ``w``.

    ``g_follow`` is the follower's spacing to the leader and ``g_lead`` the
    leader's spacing to its own leader. Pass ``None`` for a spacing governed by
    a free boundary, whose equilibrium speed is ``v_max``.
    """
    _check_speed(v, cfg)
    _check_speed(w, cfg)
    ve_f = cfg.v_max if g_follow is None else speed_spacing(g_follow, params, cfg)
    ve_l = cfg.v_max if g_lead is None else speed_spacing(g_lead, params, cfg)
    return ((v - ve_f) ** 2 + (w - ve_l) ** 2) / params.theta0_lattice(cfg)


def free_boundary_potential(v, w, params: ModelParams, cfg: LatticeConfig) -> float:
    """Interaction potential of the downstream-most vehicle under a free boundary."""
    return interaction_potential(v, w, None, None, params, cfg)


def position_update(s_n, v_n, s_leader=NO_LEADER):
    """Advance a vehicle without passing its leader's previous cell."""
    target = s_n + v_n
    if s_leader == NO_LEADER:
        return target
    return min(target, s_leader - 1)


def dynamical_potential(s, prev_s, prev_v, prev_leader_s=NO_LEADER, beta: float = 1.0) -> float:
    """Energy of occupying cell ``s`` given the previous position, speed and leader cell.

    Cells at or beyond the leader's previous cell are forbidden (infinite
    energy). ``beta = inf`` gives the deterministic update: zero energy at the
    cell reached by :func:`position_update`, infinite elsewhere.
    """
    if math.isinf(beta):
        return 0.0 if s == position_update(prev_s, prev_v, prev_leader_s) else math.inf
    if s > prev_leader_s - 1:
        return math.inf
    return beta * float(s - prev_s - prev_v) ** 2


def _leader_cells(cells, boundary: Boundary, L: int):
    """Leader cell for each vehicle; the first vehicle gets the boundary value."""
    cells = np.asarray(cells, dtype=float)
    lead = np.empty_like(cells)
    if len(cells) == 0:
        return lead
    lead[1:] = cells[:-1]
    lead[0] = cells[-1] + L if boundary == Boundary.PERIODIC else NO_LEADER
    return lead


def total_energy(positions, speeds, prev: TrafficState, params: ModelParams, cfg: LatticeConfig) -> float:
    """Total potential energy of a candidate configuration at step ``k``.

    ``positions`` and ``speeds`` are aligned with ``prev`` (the step ``k-1``
    state). Each vehicle contributes its dynamical potential plus
    ``INTERACTION_WEIGHT`` times the interaction potential with its leader.
    """
    positions = np.asarray(positions)
    speeds = np.asarray(speeds)
    if len(positions) != len(speeds) or len(positions) != len(prev):
        raise ValueError("positions, speeds and prev must describe the same vehicles")
    n = len(positions)
    if n == 0:
        return 0.0
    periodic = params.boundary == Boundary.PERIODIC
    prev_lead = _leader_cells(prev.cells, params.boundary, cfg.L)
    gaps: list = [None] * n
    for i in range(n):
        if i > 0:
            gaps[i] = positions[i - 1] - positions[i]
        elif periodic:
            gaps[i] = (positions[-1] - positions[0]) % cfg.L or cfg.L
    energy = 0.0
    for i in range(n):
        energy += dynamical_potential(positions[i], prev.cells[i], prev.speeds[i], prev_lead[i], params.beta)
        if i == 0 and not periodic:
            pair = free_boundary_potential(speeds[0], cfg.v_max, params, cfg)
        else:
            j = i - 1 if i > 0 else n - 1
            pair = interaction_potential(speeds[i], speeds[j], gaps[i], gaps[j], params, cfg)
        energy += INTERACTION_WEIGHT * pair
    return energy


def joint_probability_unnormalized(positions, speeds, prev: TrafficState, params: ModelParams,
                                   cfg: LatticeConfig) -> float:
    positions = np.asarray(positions)
    speeds = np.asarray(speeds)
    if np.any((speeds < 0) | (speeds > cfg.v_max)) or np.any((positions < 1) | (positions > cfg.L)):
        return 0.0
    return math.exp(-total_energy(positions, speeds, prev, params, cfg))


# parameter files ------------------------------------------------------------

_INT_KEYS = {"L", "v_max"}
_FLOAT_KEYS = {"delta_l", "delta_t", "theta0", "theta1", "theta2", "beta", "p1", "p2"}


def read_keyvalue(path) -> dict[str, str]:
    """Parse a flat ``key = value`` file; ``#`` starts a comment.

    Repeated keys accumulate into a list.
    """
    out: dict = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        sep = "=" if "=" in line else ":" if ":" in line else None
        if sep is None:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split(sep, 1))
        if key in out:
            prev = out[key]
            out[key] = (prev if isinstance(prev, list) else [prev]) + [value]
        else:
            out[key] = value
    return out


def parse_model(values: dict) -> tuple[LatticeConfig, ModelParams]:
    cfg_kw, par_kw = {}, {}
    cfg_names = {f.name for f in fields(LatticeConfig)}
    for key, raw in values.items():
        if key in _INT_KEYS:
            val = int(raw)
        elif key in _FLOAT_KEYS:
            val = float(raw)
        elif key == "boundary":
            val = Boundary(raw.lower())
        else:
            continue
        (cfg_kw if key in cfg_names else par_kw)[key] = val
    return LatticeConfig(**cfg_kw), ModelParams(**par_kw)


def load_params(path) -> tuple[LatticeConfig, ModelParams]:
    return parse_model(read_keyvalue(path))


def format_params(cfg: LatticeConfig, params: ModelParams) -> str:
    lines = [f"{f.name} = {getattr(cfg, f.name)}" for f in fields(cfg)]
    for f in fields(params):
        val = getattr(params, f.name)
        lines.append(f"{f.name} = {val.value if isinstance(val, Boundary) else val}")
    return "\n".join(lines) + "\n"


def save_params(path, cfg: LatticeConfig, params: ModelParams):
    Path(path).write_text(format_params(cfg, params))


__all__ = [
    "Boundary", "LatticeConfig", "ModelParams", "VehicleState", "TrafficState",
    "INTERACTION_WEIGHT", "NO_LEADER", "EMPTY",
    "speed_spacing", "interaction_potential", "free_boundary_potential", "position_update",
    "dynamical_potential", "total_energy", "joint_probability_unnormalized",
    "read_keyvalue", "parse_model", "load_params", "save_params", "format_params"
]
