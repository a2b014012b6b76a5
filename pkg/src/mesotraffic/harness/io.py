"""Reading trajectory and observation CSV files."""

from __future__ import annotations

import csv
import logging
import math
from collections import defaultdict

import numpy as np

from ..factorgraph import Observation
from ..model import LatticeConfig
from ..trajectories import TrajectoryDataset

log = logging.getLogger(__name__)

OBS_HEADER = ("k", "veh_id", "cell", "speed_cells", "gap_lead_cells", "gap_follow_cells")


class DataError(ValueError):
    """Malformed or inconsistent input data."""


def rasterize_position(pos_m: float, cfg: LatticeConfig) -> int:
    return int(math.ceil(pos_m / cfg.delta_l - 1e-9))


def rasterize_speed(speed_mps: float, cfg: LatticeConfig) -> int:
    v = math.floor(speed_mps * cfg.delta_t / cfg.delta_l + 0.5)
    return int(min(max(v, 0), cfg.v_max))


def _rows(path):
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise DataError(f"{path}: {exc.strerror}") from exc
    with fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise DataError(f"{path}: empty file")
        yield reader.fieldnames
        for lineno, row in enumerate(reader, 2):
            yield lineno, row


def load_trajectories(path, cfg: LatticeConfig) -> TrajectoryDataset:
    """Load lattice (``cell,speed_cells``) or physical (``pos_m,speed_mps``) trajectories.

    Physical rows are rasterised onto the lattice; rows outside ``1..L`` are
    dropped and cell collisions are resolved by moving the follower upstream.
    """
    rows = _rows(path)
    header = next(rows)
    lattice = {"cell", "speed_cells"} <= set(header)
    physical = {"pos_m", "speed_mps"} <= set(header)
    if not {"k", "veh_id"} <= set(header) or not (lattice or physical):
        raise DataError(f"{path}: unrecognised header {header}")
    by_step: dict[int, list[tuple[int, int, int, float]]] = defaultdict(list)
    last_k = -1
    for lineno, row in rows:
        try:
            k = int(row["k"])
            vid = int(row["veh_id"])
            if lattice:
                cell, speed, key = int(row["cell"]), int(row["speed_cells"]), float(row["cell"])
            else:
                pos = float(row["pos_m"])
                cell, speed, key = rasterize_position(pos, cfg), rasterize_speed(float(row["speed_mps"]), cfg), pos
        except (TypeError, ValueError) as exc:
            raise DataError(f"{path}:{lineno}: malformed row {row}") from exc
        if k < last_k:
            raise DataError(f"{path}:{lineno}: time index decreases ({k} after {last_k})")
        last_k = k
        if lattice and not 0 <= speed <= cfg.v_max:
            raise DataError(f"{path}:{lineno}: speed {speed} outside 0..{cfg.v_max}")
        if not 1 <= cell <= cfg.L:
            continue
        by_step[k].append((vid, cell, speed, key))
    n_steps = last_k + 1 if last_k >= 0 else 0
    cols: dict[str, list[int]] = {"k": [], "veh_id": [], "cell": [], "speed": []}
    for k in range(n_steps):
        recs = sorted(by_step.get(k, []), key=lambda r: -r[3])
        prev_cell = None
        for vid, cell, speed, _ in recs:
            if prev_cell is not None and cell >= prev_cell:
                log.warning("step %d: vehicle %d shifted upstream to avoid a collision", k, vid)
                cell = prev_cell - 1
            if cell < 1:
                log.warning("step %d: vehicle %d pushed off the lattice; dropped", k, vid)
                continue
            prev_cell = cell
            cols["k"].append(k)
            cols["veh_id"].append(vid)
            cols["cell"].append(cell)
            cols["speed"].append(speed)
    return TrajectoryDataset(cfg, cols["k"], cols["veh_id"], cols["cell"], cols["speed"], n_steps)


def write_observations(path, observations):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(OBS_HEADER)
        for o in observations:
            writer.writerow([o.k, o.veh_id, o.cell, o.speed,
                             "" if o.gap_lead is None else o.gap_lead,
                             "" if o.gap_follow is None else o.gap_follow])


def load_observations(path) -> list[Observation]:
    rows = _rows(path)
    header = next(rows)
    if not {"k", "veh_id", "cell", "speed_cells"} <= set(header):
        raise DataError(f"{path}: unrecognised header {header}")
    out = []
    for lineno, row in rows:
        try:
            gl, gf = row.get("gap_lead_cells") or None, row.get("gap_follow_cells") or None
            out.append(Observation(int(row["k"]), int(row["veh_id"]), int(row["cell"]), int(row["speed_cells"]),
                                   None if gl is None else int(gl), None if gf is None else int(gf)))
        except (TypeError, ValueError) as exc:
            raise DataError(f"{path}:{lineno}: malformed row {row}") from exc
    return out


def group_by_step(observations) -> dict[int, list[Observation]]:
    out: dict[int, list[Observation]] = defaultdict(list)
    for o in observations:
        out[o.k].append(o)
    return dict(out)


def write_marginals(path, marginals):
    """Dump ``(k, veh_id, marginal)`` triples as ``k,veh_id,v,prob`` rows."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("k", "veh_id", "v", "prob"))
        for k, vid, m in marginals:
            for v, p in enumerate(np.asarray(m).tolist()):
                writer.writerow((k, vid, v, repr(p)))
