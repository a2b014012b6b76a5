"""Per-step chain factor graphs over vehicle speeds.

A chain holds one speed variable per vehicle, ordered downstream-most first,
a unary (node) factor per vehicle and a pairwise (edge) factor between each
leader and its follower. Edge factor ``edge[i]`` is indexed
``[leader speed, follower speed]`` for the pair ``(ids[i], ids[i+1])``.

Observed vehicles are clamped. Splitting a clamped chain at its observed
vehicles yields a forest of independent sub-chains whose end nodes absorb the
edge factor row or column selected by the observed neighbour's speed.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .model import NO_LEADER, LatticeConfig, ModelParams, TrafficState, speed_spacing

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Observation:
    """A probe report: own cell and speed, optionally gaps to the adjacent vehicles."""

    k: int
    veh_id: int
    cell: int
    speed: int
    gap_lead: int | None = None
    gap_follow: int | None = None


@dataclass
class FactorChain:
    ids: np.ndarray
    node: np.ndarray
    edge: np.ndarray
    clamps: dict[int, int] = field(default_factory=dict)
    head: np.ndarray | None = None
    tail: np.ndarray | None = None

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.node = np.asarray(self.node, dtype=float)
        self.edge = np.asarray(self.edge, dtype=float).reshape(-1, *self.node.shape[1:] * 2)
        n = len(self.ids)
        if self.node.shape[0] != n or self.edge.shape[0] != max(n - 1, 0):
            raise ValueError("need one node factor per vehicle and one edge factor per adjacent pair")
        unknown = set(self.clamps) - set(self.ids.tolist())
        if unknown:
            raise ValueError(f"clamped ids {sorted(unknown)} are not in the chain")

    def __len__(self):
        return len(self.ids)

    @property
    def n_speeds(self) -> int:
        return self.node.shape[1]

    def unary(self) -> np.ndarray:
        """Node factors with boundary evidence folded in and clamped rows replaced by indicators."""
        u = self.node.copy()
        if len(u) == 0:
            return u
        if self.head is not None:
            u[0] *= self.head
        if self.tail is not None:
            u[-1] *= self.tail
        for i, vid in enumerate(self.ids.tolist()):
            if vid in self.clamps:
                u[i] = 0.0
                u[i, self.clamps[vid]] = 1.0
        return u

    def split(self) -> "Forest":
        """Cut the chain at every clamped vehicle."""
        n = len(self)
        ids = self.ids.tolist()
        clamped = [vid in self.clamps for vid in ids]
        chains = []
        i = 0
        while i < n:
            if clamped[i]:
                i += 1
                continue
            j = i
            while j + 1 < n and not clamped[j + 1]:
                j += 1
            head = self.head if i == 0 else self.edge[i - 1][self.clamps[ids[i - 1]], :].copy()
            tail = self.tail if j == n - 1 else self.edge[j][:, self.clamps[ids[j + 1]]].copy()
            chains.append(FactorChain(self.ids[i:j + 1], self.node[i:j + 1], self.edge[i:j], {}, head, tail))
            i = j + 1
        return Forest(chains, dict(self.clamps))


@dataclass
class Forest:
    chains: list[FactorChain]
    point_masses: dict[int, int]

    def n_vehicles(self) -> int:
        return sum(len(c) for c in self.chains) + len(self.point_masses)


def node_factors(prev_cells, prev_speeds, prev_lead, params: ModelParams, cfg: LatticeConfig) -> np.ndarray:
    """Speed-indexed node factors from the previous state.

    For candidate speed ``v`` the implied cell is ``min(s + v, lead - 1)``;
    its dynamical energy is measured against ``s + v_prev``. Rows are scaled
    so their largest entry is 1.
    """
    s = np.asarray(prev_cells, dtype=float)[:, None]
    v_prev = np.asarray(prev_speeds, dtype=float)[:, None]
    lead = np.asarray(prev_lead, dtype=float)[:, None]
    v = np.arange(cfg.n_speeds, dtype=float)[None, :]
    cand = np.minimum(s + v, lead - 1)
    if params.deterministic:
        target = np.minimum(s + v_prev, lead - 1)
        return (cand == target).astype(float)
    energy = params.beta * (cand - s - v_prev) ** 2
    energy -= energy.min(axis=1, keepdims=True)
    return np.exp(-energy)


def build_node_factor(n: int, prev: TrafficState, params: ModelParams, cfg: LatticeConfig) -> np.ndarray:
    """Node factor for the vehicle at index ``n`` of ``prev``."""
    lead = prev.cells[n - 1] if n > 0 else NO_LEADER
    return node_factors(prev.cells[n:n + 1], prev.speeds[n:n + 1], [lead], params, cfg)[0]


def _equilibrium_weights(v_eq, params: ModelParams, cfg: LatticeConfig) -> np.ndarray:
    v = np.arange(cfg.n_speeds, dtype=float)
    return np.exp(-((v - np.asarray(v_eq, dtype=float)[..., None]) ** 2) / params.theta0_lattice(cfg))


def edge_factors(gaps, params: ModelParams, cfg: LatticeConfig) -> np.ndarray:
    """Edge factors for a chain whose vehicles have spacings ``gaps`` to their leaders.

    ``gaps[0]`` belongs to the downstream-most vehicle; ``inf`` gives it the
    free-boundary equilibrium ``v_max``.
    """
    gaps = np.asarray(gaps, dtype=float)
    if len(gaps) < 2:
        return np.empty((0, cfg.n_speeds, cfg.n_speeds))
    w = _equilibrium_weights(speed_spacing(gaps, params, cfg), params, cfg)
    # entry [a, b] = exp(-((b - V(g_follower))^2 + (a - V(g_leader))^2) / theta0)
    return w[:-1, :, None] * w[1:, None, :]


def build_edge_factor(g_follow, g_lead, params: ModelParams, cfg: LatticeConfig) -> np.ndarray:
    """Edge factor ``[leader speed, follower speed]`` for one pair; ``None`` means free boundary."""
    gf = math.inf if g_follow is None else g_follow
    gl = math.inf if g_lead is None else g_lead
    return edge_factors([gl, gf], params, cfg)[0]


def free_boundary_edge_factor(params: ModelParams, cfg: LatticeConfig) -> np.ndarray:
    return build_edge_factor(None, None, params, cfg)


def resolve_observations(observations, ids) -> dict[int, Observation]:
    """Index observations by vehicle id, dropping unknown ids and rejecting conflicts."""
    known = set(np.asarray(ids).tolist())
    out: dict[int, Observation] = {}
    for obs in observations:
        if obs.veh_id not in known:
            log.warning("step %d: dropping observation of unknown vehicle %d", obs.k, obs.veh_id)
            continue
        prev = out.get(obs.veh_id)
        if prev is not None and (prev.speed, prev.cell) != (obs.speed, obs.cell):
            raise ValueError(f"contradictory observations for vehicle {obs.veh_id} at step {obs.k}")
        out[obs.veh_id] = obs
    return out


def assemble(ids, node, edge, observations, v_max: int | None = None) -> Forest:
    """Clamp the observed vehicles of a chain and split it into a forest."""
    by_id = resolve_observations(observations, ids)
    clamps = {}
    for vid, obs in by_id.items():
        if v_max is not None and not 0 <= obs.speed <= v_max:
            log.warning("step %d: dropping out-of-range speed %d for vehicle %d", obs.k, obs.speed, vid)
            continue
        clamps[vid] = int(obs.speed)
    return FactorChain(ids, node, edge, clamps).split()
