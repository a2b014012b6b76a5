"""Column-oriented container for lattice vehicle trajectories and its CSV form."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import EMPTY, LatticeConfig, TrafficState

HEADER = ("k", "veh_id", "cell", "speed_cells")


@dataclass
class TrajectoryDataset:
    """One row per vehicle per step, rows sorted by ``k`` then downstream-most first."""

    config: LatticeConfig
    k: np.ndarray
    veh_id: np.ndarray
    cell: np.ndarray
    speed: np.ndarray
    n_steps: int

    def __post_init__(self):
        self.k = np.asarray(self.k, dtype=np.int64)
        self.veh_id = np.asarray(self.veh_id, dtype=np.int64)
        self.cell = np.asarray(self.cell, dtype=np.int64)
        self.speed = np.asarray(self.speed, dtype=np.int64)
        self._offsets = np.searchsorted(self.k, np.arange(self.n_steps + 1))

    @classmethod
    def from_states(cls, states, config: LatticeConfig) -> "TrajectoryDataset":
        states = list(states)
        if not states:
            return cls(config, [], [], [], [], 0)
        ks = [np.full(len(s), s.k, dtype=np.int64) for s in states]
        n_steps = states[-1].k + 1
        return cls(
            config,
            np.concatenate(ks),
            np.concatenate([s.ids for s in states]),
            np.concatenate([s.cells for s in states]),
            np.concatenate([s.speeds for s in states]),
            n_steps,
        )

    def __len__(self):
        return len(self.k)

    @property
    def K(self) -> int:
        """Index of the last step."""
        return self.n_steps - 1

    def rows_at(self, k: int) -> slice:
        return slice(self._offsets[k], self._offsets[k + 1])

    def state_at(self, k: int) -> TrafficState:
        sl = self.rows_at(k)
        return TrafficState(k, self.veh_id[sl], self.cell[sl], self.speed[sl])

    def states(self):
        for k in range(self.n_steps):
            yield self.state_at(k)

    def speed_map(self) -> np.ndarray:
        """``n_steps x L`` grid of speeds with ``-1`` for empty cells."""
        grid = np.full((self.n_steps, self.config.L), EMPTY, dtype=np.int64)
        grid[self.k, self.cell - 1] = self.speed
        return grid

    def occupancy(self) -> np.ndarray:
        return self.speed_map() != EMPTY

    def ids(self) -> np.ndarray:
        return np.unique(self.veh_id)

    def lifetimes(self) -> dict[int, tuple[int, int | None]]:
        """Map vehicle id to ``(entry_step, exit_step)``.

        ``exit_step`` is the first step at which the vehicle is gone, or
        ``None`` if it is still present at the last step.
        """
        out = {}
        order = np.lexsort((self.k, self.veh_id))
        vid, ks = self.veh_id[order], self.k[order]
        starts = np.flatnonzero(np.r_[True, vid[1:] != vid[:-1]])
        ends = np.r_[starts[1:], len(vid)] - 1
        for a, b in zip(starts, ends):
            last = int(ks[b])
            out[int(vid[a])] = (int(ks[a]), None if last >= self.K else last + 1)
        return out

    def entries_by_step(self) -> dict[int, list[int]]:
        """Vehicle ids grouped by the step at which they first appear (upstream order)."""
        out: dict[int, list[int]] = {}
        for vid, (entry, _) in sorted(self.lifetimes().items(), key=lambda kv: (kv[1][0], kv[0])):
            out.setdefault(entry, []).append(vid)
        return out

    def lookup(self) -> dict[tuple[int, int], tuple[int, int]]:
        """``(k, veh_id) -> (cell, speed)``."""
        return {
            (int(k), int(i)): (int(c), int(v))
            for k, i, c, v in zip(self.k, self.veh_id, self.cell, self.speed)
        }

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(HEADER)
            writer.writerows(zip(self.k.tolist(), self.veh_id.tolist(), self.cell.tolist(), self.speed.tolist()))

    def validate(self):
        for state in self.states():
            state.validate(self.config)


def write_speed_map(path, grid: np.ndarray):
    np.savetxt(Path(path), grid, fmt="%d", delimiter=",")
