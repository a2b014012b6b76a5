"""Exact sum-product on chain factor graphs and the step-by-step speed estimator."""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .factorgraph import (
    FactorChain,
    Forest,
    edge_factors,
    node_factors,
    resolve_observations,
)
from .model import Boundary, LatticeConfig, ModelParams, TrafficState, speed_spacing
from .simulator import Signal, entry_speed
from .trajectories import TrajectoryDataset

log = logging.getLogger(__name__)

BRUTE_FORCE_MAX_VEHICLES = 8
BRUTE_FORCE_MAX_STATES = 10**6


class DegenerateEvidenceError(RuntimeError):
    """A message or belief vanished everywhere, so no marginal exists."""


@dataclass
class Messages:
    """Messages of one chain.

    Index ``i`` of the ``*_edge_*`` arrays refers to the edge between chain
    positions ``i`` and ``i+1``. ``root_out`` is the forward message leaving
    the last variable and ``first_out`` the backward message leaving the first;
    both equal the unnormalised beliefs of those end variables.
    """

    unary: np.ndarray
    fwd_var_to_edge: np.ndarray
    fwd_edge_to_var: np.ndarray
    root_out: np.ndarray
    bwd_edge_to_var: np.ndarray | None = None
    bwd_var_to_edge: np.ndarray | None = None
    first_out: np.ndarray | None = None
    count: int = 0


def _normalise(msg: np.ndarray) -> np.ndarray:
    total = msg.sum()
    if not total > 0 or not math.isfinite(total):
        raise DegenerateEvidenceError("message vanished")
    return msg / total


def forward_pass(chain: FactorChain) -> Messages:
    """Messages from the downstream-most vehicle towards the last (root) vehicle."""
    u = chain.unary()
    n, nv = u.shape
    to_edge = np.empty((max(n - 1, 0), nv))
    from_edge = np.empty((max(n - 1, 0), nv))
    count = n  # node factor -> variable
    incoming = None
    for i in range(n - 1):
        out = u[i] if incoming is None else u[i] * incoming
        to_edge[i] = _normalise(out)
        incoming = _normalise(chain.edge[i].T @ to_edge[i])
        from_edge[i] = incoming
        count += 2
    root = u[-1] if incoming is None else u[-1] * incoming
    count += 1
    return Messages(u, to_edge, from_edge, _normalise(root), count=count)


def backward_pass(chain: FactorChain, msgs: Messages) -> Messages:
    """Mirror recursion from the root back to the downstream-most vehicle."""
    u = msgs.unary
    n, nv = u.shape
    to_edge = np.empty((max(n - 1, 0), nv))
    from_edge = np.empty((max(n - 1, 0), nv))
    incoming = None
    count = msgs.count
    for i in range(n - 2, -1, -1):
        out = u[i + 1] if incoming is None else u[i + 1] * incoming
        to_edge[i] = _normalise(out)
        incoming = _normalise(chain.edge[i] @ to_edge[i])
        from_edge[i] = incoming
        count += 2
    first = u[0] if incoming is None else u[0] * incoming
    count += 1
    msgs.bwd_var_to_edge = to_edge
    msgs.bwd_edge_to_var = from_edge
    msgs.first_out = _normalise(first)
    msgs.count = count
    return msgs


def marginals(chain: FactorChain, msgs: Messages) -> np.ndarray:
    """Normalised marginals, shape ``(n, v_max+1)``."""
    n = len(chain)
    beliefs = msgs.unary.copy()
    if n == 1:
        beliefs[0] = msgs.root_out
    else:
        beliefs[0] = msgs.first_out
        beliefs[-1] = msgs.root_out
        beliefs[1:-1] *= msgs.fwd_edge_to_var[:-1] * msgs.bwd_edge_to_var[1:]
    totals = beliefs.sum(axis=1, keepdims=True)
    if np.any(~(totals > 0)):
        raise DegenerateEvidenceError("all-zero belief")
    return beliefs / totals


def sum_product(chain: FactorChain) -> tuple[np.ndarray, int]:
    """Marginals of every variable and the number of messages computed."""
    if len(chain) == 0:
        return np.empty((0, chain.n_speeds)), 0
    msgs = backward_pass(chain, forward_pass(chain))
    return marginals(chain, msgs), msgs.count


def expected_message_count(forest: Forest) -> int:
    return sum(5 * len(c) - 2 for c in forest.chains)


def infer_forest(forest: Forest, n_speeds: int) -> tuple[dict[int, np.ndarray], int]:
    """Marginal for every vehicle of a forest, keyed by id, plus the message count."""
    out = {}
    count = 0
    for chain in forest.chains:
        m, c = sum_product(chain)
        count += c
        out.update(zip(chain.ids.tolist(), m))
    for vid, v in forest.point_masses.items():
        pm = np.zeros(n_speeds)
        pm[v] = 1.0
        out[vid] = pm
    return out, count


def brute_force_marginals(chain: FactorChain) -> np.ndarray:
    """Marginals by summing the full joint table; for small chains only."""
    u = chain.unary()
    n, nv = u.shape
    if n > BRUTE_FORCE_MAX_VEHICLES or nv**n > BRUTE_FORCE_MAX_STATES:
        raise ValueError(f"chain of {n} vehicles with {nv} speeds is too large to enumerate")
    joint = np.zeros((nv,) * n)
    for config in itertools.product(range(nv), repeat=n):
        w = 1.0
        for i, v in enumerate(config):
            w *= u[i, v]
            if i:
                w *= chain.edge[i - 1][config[i - 1], v]
        joint[config] = w
    total = joint.sum()
    if not total > 0:
        raise DegenerateEvidenceError("joint weight is zero everywhere")
    out = np.empty((n, nv))
    for i in range(n):
        axes = tuple(a for a in range(n) if a != i)
        out[i] = joint.sum(axis=axes) / total
    return out


def map_estimate(marginal) -> int:
    """Most probable speed; ties go to the lower speed."""
    return int(np.argmax(np.asarray(marginal)))


# estimation -----------------------------------------------------------------

@dataclass
class EstimatorOptions:
    """Switches of the estimator.

    ``correct_positions`` overwrites estimated cells with probe cells and
    shifts unobserved neighbours just enough to keep the order strict;
    ``use_gap_readings`` substitutes probe-reported gaps in the edge factors.
    """

    correct_positions: bool = True
    use_gap_readings: bool = True
    signal: Signal | None = None
    keep_marginals: bool = False


@dataclass
class EstimateResult:
    dataset: TrajectoryDataset
    message_counts: list[int]
    vehicle_counts: list[int]
    marginals: list[tuple[int, int, np.ndarray]] = field(default_factory=list)


def cold_start(state: TrafficState, params: ModelParams, cfg: LatticeConfig) -> TrafficState:
    """Keep the cells of ``state`` and set every speed to the rounded equilibrium."""
    out = state.copy()
    if len(out):
        gaps = np.empty(len(out))
        gaps[0] = math.inf
        gaps[1:] = out.cells[:-1] - out.cells[1:]
        out.speeds = np.floor(speed_spacing(gaps, params, cfg) + 0.5).astype(np.int64)
    return out


def _leader_cells(cells: np.ndarray, red: bool, L: int) -> np.ndarray:
    lead = np.empty(len(cells), dtype=float)
    if len(cells):
        lead[1:] = cells[:-1]
        lead[0] = L + 1 if red else math.inf
    return lead


def project_order(cells: np.ndarray, fixed: np.ndarray) -> np.ndarray | None:
    """Restore strictly decreasing cells while keeping the ``fixed`` entries.

    Unobserved vehicles behind a fixed one are pushed upstream and those ahead
    pushed downstream. Returns ``None`` when no valid arrangement exists.
    """
    out = cells.astype(np.int64).copy()
    n = len(out)
    for i in range(1, n):
        if not fixed[i] and out[i] >= out[i - 1]:
            out[i] = out[i - 1] - 1
    for i in range(n - 2, -1, -1):
        if not fixed[i] and out[i] <= out[i + 1]:
            out[i] = out[i + 1] + 1
    if n and (np.any(np.diff(out) >= 0) or out.min() < 1):
        return None
    return out


class Estimator:
    """Filters vehicle speeds one step at a time.

    The number of vehicles is known: ``entries`` maps a step to the ids that
    enter there. An entering vehicle waits until cell 1 is free in the
    estimate.
    """

    def __init__(self, prior: TrafficState, params: ModelParams, cfg: LatticeConfig,
                 entries: dict[int, list[int]] | None = None, options: EstimatorOptions | None = None):
        if params.boundary != Boundary.FREE_DOWNSTREAM:
            raise ValueError("estimation is defined for a free downstream boundary only")
        prior.validate(cfg)
        self.params = params
        self.cfg = cfg
        self.entries = entries or {}
        self.options = options or EstimatorOptions()
        self.state = prior.copy()
        self.pending: list[int] = []
        self.history = [self.state]
        self.message_counts: list[int] = []
        self.vehicle_counts: list[int] = []
        self.marginals: list[tuple[int, int, np.ndarray]] = []

    def _red(self, k: int) -> bool:
        return self.options.signal is not None and self.options.signal.is_red(k)

    def step(self, observations=()) -> TrafficState:
        cfg, params = self.cfg, self.params
        prev = self.state
        k = prev.k + 1
        red = self._red(k)
        prev_lead = _leader_cells(prev.cells, red, cfg.L)
        cells = np.minimum(prev.cells + prev.speeds, prev_lead - 1).astype(np.int64)
        ids = prev.ids.copy()
        node = node_factors(prev.cells, prev.speeds, prev_lead, params, cfg)
        has_prior = np.ones(len(ids), dtype=bool)

        self.pending.extend(self.entries.get(k, ()))
        if self.pending and (len(cells) == 0 or cells[-1] > 1):
            ids = np.append(ids, self.pending.pop(0))
            cells = np.append(cells, 1)
            node = np.vstack([node, np.ones((1, cfg.n_speeds))])
            has_prior = np.append(has_prior, False)

        by_id = resolve_observations(observations, ids)
        pos = {vid: i for i, vid in enumerate(ids.tolist())}
        if self.options.correct_positions and by_id:
            fixed = np.zeros(len(ids), dtype=bool)
            corrected = cells.copy()
            for vid, obs in by_id.items():
                corrected[pos[vid]] = obs.cell
                fixed[pos[vid]] = True
            projected = project_order(corrected, fixed)
            if projected is None:
                log.warning("step %d: probe cells inconsistent with the estimate; ignored", k)
            else:
                cells = projected

        keep = cells <= cfg.L
        if not keep.all():
            gone = set(ids[~keep].tolist())
            by_id = {vid: o for vid, o in by_id.items() if vid not in gone}
            ids, cells, node, has_prior = ids[keep], cells[keep], node[keep], has_prior[keep]
            pos = {vid: i for i, vid in enumerate(ids.tolist())}

        n = len(ids)
        gaps = np.empty(n, dtype=float)
        if n:
            gaps[0] = cfg.L + 1 - cells[0] if red else math.inf
            gaps[1:] = cells[:-1] - cells[1:]
        if self.options.use_gap_readings:
            for vid, obs in by_id.items():
                i = pos[vid]
                if obs.gap_lead is not None and i > 0:
                    gaps[i] = obs.gap_lead
                if obs.gap_follow is not None and i + 1 < n:
                    gaps[i + 1] = obs.gap_follow

        clamps = {}
        for vid, obs in by_id.items():
            if 0 <= obs.speed <= cfg.v_max:
                clamps[vid] = int(obs.speed)
            else:
                log.warning("step %d: dropping out-of-range speed for vehicle %d", k, vid)
        for i in np.flatnonzero(~has_prior):
            vid = int(ids[i])
            clamps.setdefault(vid, entry_speed(gaps[i], params, cfg))

        chain = FactorChain(ids, node, edge_factors(gaps, params, cfg), clamps)
        forest = chain.split()
        margs, count = infer_forest(forest, cfg.n_speeds)
        speeds = np.array([map_estimate(margs[vid]) for vid in ids.tolist()], dtype=np.int64)
        if self.options.keep_marginals:
            self.marginals.extend((k, vid, margs[vid]) for vid in ids.tolist())

        self.state = TrafficState(k, ids, cells, speeds, prev.next_id)
        self.history.append(self.state)
        self.message_counts.append(count)
        self.vehicle_counts.append(n)
        return self.state

    def result(self) -> EstimateResult:
        return EstimateResult(
            TrajectoryDataset.from_states(self.history, self.cfg),
            self.message_counts,
            self.vehicle_counts,
            self.marginals,
        )


def estimate_run(entries, observations, prior: TrafficState, params: ModelParams, cfg: LatticeConfig,
                 K: int, options: EstimatorOptions | None = None) -> EstimateResult:
    """Run the estimator for ``K`` steps.

    ``observations`` maps step ``k`` to the probe reports at that step.
    """
    est = Estimator(prior, params, cfg, entries, options)
    for k in range(1, K + 1):
        est.step(observations.get(k, ()))
    return est.result()
