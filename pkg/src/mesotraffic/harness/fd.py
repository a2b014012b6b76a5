"""Fundamental-diagram samples from trajectories by box aggregation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..trajectories import TrajectoryDataset


@dataclass
class FDSamples:
    density: np.ndarray  # veh/km
    flow: np.ndarray  # veh/h
    speed: np.ndarray  # km/h
    box: np.ndarray  # (first cell, first step) of each box

    def __len__(self):
        return len(self.density)

    @classmethod
    def concat(cls, samples) -> "FDSamples":
        samples = list(samples)
        return cls(*(np.concatenate([getattr(s, f) for s in samples])
                     for f in ("density", "flow", "speed", "box")))


def _displacements(dataset: TrajectoryDataset) -> np.ndarray:
    """Cells advanced by each row's vehicle before the next step.

    Rows without a successor (the vehicle leaves, or the last step) fall
    back to the recorded speed. On a ring a wrap adds ``L``.
    """
    order = np.lexsort((dataset.k, dataset.veh_id))
    vid, k, cell = dataset.veh_id[order], dataset.k[order], dataset.cell[order]
    disp = dataset.speed[order].astype(float)
    has_next = np.r_[(vid[1:] == vid[:-1]) & (k[1:] == k[:-1] + 1), False]
    step = np.r_[cell[1:] - cell[:-1], 0]
    step = np.where(step < 0, step + dataset.config.L, step)
    disp[has_next] = step[has_next]
    out = np.empty_like(disp)
    out[order] = disp
    return out


def fundamental_diagram(dataset: TrajectoryDataset, window_cells: int = 50, window_steps: int = 30,
                        first_step: int = 1) -> FDSamples:
    """Density, flow and speed per space-time box.

    Boxes tile ``cells x steps``; a partial box at an edge uses its actual
    area. Boxes with no vehicle are skipped. Flow equals density times speed
    for every sample.
    """
    cfg = dataset.config
    if window_cells < 1 or window_steps < 1:
        raise ValueError("box dimensions must be positive")
    keep = dataset.k >= first_step
    cells = dataset.cell[keep] - 1
    ks = dataset.k[keep] - first_step
    disp = _displacements(dataset)[keep]
    n_steps = dataset.n_steps - first_step
    nb_x = -(-cfg.L // window_cells)
    nb_t = -(-max(n_steps, 0) // window_steps)
    if nb_t == 0:
        empty = np.empty(0)
        return FDSamples(empty, empty, empty, np.empty((0, 2), dtype=np.int64))
    bx, bt = cells // window_cells, ks // window_steps
    flat = bt * nb_x + bx
    count = np.bincount(flat, minlength=nb_x * nb_t).reshape(nb_t, nb_x)
    dist = np.bincount(flat, weights=disp, minlength=nb_x * nb_t).reshape(nb_t, nb_x)
    width = np.minimum(window_cells, cfg.L - np.arange(nb_x) * window_cells) * cfg.delta_l
    duration = np.minimum(window_steps, n_steps - np.arange(nb_t) * window_steps) * cfg.delta_t
    area = duration[:, None] * width[None, :]  # m*s
    occupied = count > 0
    density = (count * cfg.delta_t / area * 1000.0)[occupied]
    flow = (dist * cfg.delta_l / area * 3600.0)[occupied]
    speed = flow / density
    t_idx, x_idx = np.nonzero(occupied)
    box = np.stack([x_idx * window_cells + 1, t_idx * window_steps + first_step], axis=1)
    return FDSamples(density, flow, speed, box)


@dataclass
class TriangularFit:
    """Two-branch fit ``q = u k`` below ``k_crit`` and ``q = u k_crit + w (k - k_crit)`` above."""

    k_crit: float  # veh/km
    free_speed: float  # km/h
    congested_slope: float  # km/h, negative for a backward wave

    def predict(self, density) -> np.ndarray:
        k = np.asarray(density, dtype=float)
        return np.where(k <= self.k_crit, self.free_speed * k,
                        self.free_speed * self.k_crit + self.congested_slope * (k - self.k_crit))


def fit_triangular(fd: FDSamples, grid_step: float = 0.25) -> TriangularFit:
    """Least-squares hinge fit over a grid of breakpoints."""
    k, q = fd.density, fd.flow
    if len(k) < 3:
        raise ValueError("need at least three samples")
    best = None
    for kc in np.arange(grid_step, k.max(), grid_step):
        # columns: free speed, congested slope
        a = np.stack([np.minimum(k, kc), np.maximum(k - kc, 0.0)], axis=1)
        coef, *_ = np.linalg.lstsq(a, q, rcond=None)
        sse = float(((a @ coef - q) ** 2).sum())
        if best is None or sse < best[0]:
            best = (sse, kc, coef)
    if best is None:
        raise ValueError("densities too small to fit")
    _, kc, (u, w) = best
    return TriangularFit(float(kc), float(u), float(w))


def critical_density(fd: FDSamples) -> float:
    """Density where the fitted free-flow branch reaches capacity."""
    return fit_triangular(fd).k_crit


def scatter_ratio(fd: FDSamples, fit: TriangularFit | None = None) -> float:
    """Residual flow variance about the fitted diagram above the critical density over that below."""
    fit = fit or fit_triangular(fd)
    resid = fd.flow - fit.predict(fd.density)
    above, below = resid[fd.density > fit.k_crit], resid[fd.density <= fit.k_crit]
    if len(above) < 2 or len(below) < 2:
        raise ValueError("too few samples on one side of the critical density")
    return float(np.var(above, ddof=1) / np.var(below, ddof=1))
