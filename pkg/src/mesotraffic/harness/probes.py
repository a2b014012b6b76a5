"""Drawing probe vehicles from a ground-truth dataset."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from ..factorgraph import Observation
from ..trajectories import TrajectoryDataset


class ProbeStrategy(str, enum.Enum):
    UNIFORM_SUBSET = "subset"
    PER_STEP_BERNOULLI = "bernoulli"


@dataclass(frozen=True)
class ProbePlan:
    rate: float
    strategy: ProbeStrategy = ProbeStrategy.UNIFORM_SUBSET
    seed: int | None = 0
    include_adjacent: bool = True

    def __post_init__(self):
        if not 0.0 <= self.rate <= 1.0:
            raise ValueError(f"penetration rate must lie in [0, 1], got {self.rate}")
        object.__setattr__(self, "strategy", ProbeStrategy(self.strategy))


def choose_probe_ids(dataset: TrajectoryDataset, plan: ProbePlan) -> np.ndarray:
    """``floor(rate * N)`` distinct ids, drawn uniformly."""
    ids = dataset.ids()
    n = int(math.floor(plan.rate * len(ids) + 1e-9))
    rng = np.random.default_rng(plan.seed)
    return np.sort(rng.choice(ids, size=n, replace=False)) if n else np.empty(0, dtype=np.int64)


def sample_probes(dataset: TrajectoryDataset, plan: ProbePlan, steps=None) -> list[Observation]:
    """Observation rows for the probe vehicles, ordered by step.

    ``steps`` restricts reporting to the given step indices (default: all
    steps after the first).
    """
    if steps is None:
        steps = range(1, dataset.n_steps)
    steps = np.asarray(list(steps), dtype=np.int64)
    if plan.strategy == ProbeStrategy.UNIFORM_SUBSET:
        probe_ids = choose_probe_ids(dataset, plan)
        mask = np.isin(dataset.veh_id, probe_ids)
    else:
        rng = np.random.default_rng(plan.seed)
        mask = rng.random(len(dataset)) < plan.rate
    mask &= np.isin(dataset.k, steps)
    out = []
    for k in np.unique(dataset.k[mask]).tolist():
        sl = dataset.rows_at(k)
        cells = dataset.cell[sl]
        for i in np.flatnonzero(mask[sl]).tolist():
            gap_lead = gap_follow = None
            if plan.include_adjacent:
                if i > 0:
                    gap_lead = int(cells[i - 1] - cells[i])
                if i + 1 < len(cells):
                    gap_follow = int(cells[i] - cells[i + 1])
            out.append(Observation(k, int(dataset.veh_id[sl][i]), int(cells[i]), int(dataset.speed[sl][i]),
                                   gap_lead, gap_follow))
    return out
