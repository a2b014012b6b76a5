"""Error measures between a ground-truth and an estimated trajectory dataset.

Speeds are in cells/step unless a name says otherwise. All measures use the
steps ``k >= first_step`` (default 1, since step 0 is the shared prior).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from ..model import EMPTY
from ..trajectories import TrajectoryDataset


class UndefinedMetricError(ArithmeticError):
    """A metric's denominator is zero."""


def _check_compatible(truth: TrajectoryDataset, est: TrajectoryDataset):
    if truth.config.L != est.config.L or truth.n_steps != est.n_steps:
        raise ValueError(
            f"datasets differ in shape: {truth.n_steps}x{truth.config.L} vs {est.n_steps}x{est.config.L}")


def _matched_speeds(truth: TrajectoryDataset, est: TrajectoryDataset, first_step: int):
    """Truth speeds and the id-matched estimated speeds (``nan`` where the estimate lacks the vehicle)."""
    keep = truth.k >= first_step
    tk, tid, tv = truth.k[keep], truth.veh_id[keep], truth.speed[keep]
    # encode (k, id) pairs as one sortable key
    width = int(max(truth.veh_id.max(initial=0), est.veh_id.max(initial=0))) + 1
    tkey = tk * width + tid
    ekey = est.k * width + est.veh_id
    order = np.argsort(ekey, kind="stable")
    ekey_sorted, ev_sorted = ekey[order], est.speed[order]
    pos = np.searchsorted(ekey_sorted, tkey)
    pos_c = np.minimum(pos, max(len(ekey_sorted) - 1, 0))
    found = (pos < len(ekey_sorted)) & (ekey_sorted[pos_c] == tkey) if len(ekey_sorted) else np.zeros(len(tkey), bool)
    ev = np.full(len(tkey), np.nan)
    ev[found] = ev_sorted[pos_c[found]]
    return tv.astype(float), ev


def _relative(sq_sum: float, total: float, n_terms: int, label: str) -> float:
    if total <= 0:
        raise UndefinedMetricError(f"{label}: reference field sums to zero")
    return math.sqrt(n_terms * sq_sum) / total


def eps_sigma_rel(truth: TrajectoryDataset, est: TrajectoryDataset, *, cellwise: bool = False,
                  normalized: bool = False, first_step: int = 1) -> float:
    """Relative speed-field error ``sqrt(K L sum d^2) / sum sigma``.

    The sums run over truth-occupied cells with the estimate taken from the
    same vehicle id (a vehicle missing from the estimate counts as speed 0).
    ``cellwise`` compares the two speed maps directly, treating an empty cell
    as speed 0, over cells occupied in either map. ``normalized`` replaces
    ``K L`` by the number of compared cells, which turns the ratio into
    RMS error over mean speed.
    """
    _check_compatible(truth, est)
    n_k = truth.n_steps - first_step
    if cellwise:
        t = truth.speed_map()[first_step:]
        e = est.speed_map()[first_step:]
        mask = (t != EMPTY) | (e != EMPTY)
        d = np.maximum(t, 0) - np.maximum(e, 0)
        sq, total, m = float((d[mask] ** 2).sum()), float(np.maximum(t, 0).sum()), int(mask.sum())
    else:
        tv, ev = _matched_speeds(truth, est, first_step)
        ev = np.nan_to_num(ev, nan=0.0)
        sq, total, m = float(((tv - ev) ** 2).sum()), float(tv.sum()), len(tv)
    n_terms = m if normalized else n_k * truth.config.L
    return _relative(sq, total, n_terms, "eps_sigma_rel")


def rmse_kmh(truth: TrajectoryDataset, est: TrajectoryDataset, first_step: int = 1) -> float:
    """Root mean square speed error in km/h over vehicle-steps present in both datasets."""
    _check_compatible(truth, est)
    tv, ev = _matched_speeds(truth, est, first_step)
    ok = ~np.isnan(ev)
    if not ok.any():
        raise UndefinedMetricError("rmse: no vehicle-step is present in both datasets")
    err = truth.config.speed_to_kmh(tv[ok] - ev[ok])
    return float(np.sqrt(np.mean(np.square(err))))


def density_field(dataset: TrajectoryDataset) -> np.ndarray:
    """Vehicles per metre in each cell: ``1/delta_l`` if occupied, else 0."""
    return dataset.occupancy() / dataset.config.delta_l


def eps_rho(truth: TrajectoryDataset, est: TrajectoryDataset, *, normalized: bool = False,
            first_step: int = 1) -> float:
    """Relative density-field error ``sqrt(K L sum d^2) / sum rho`` over the whole grid."""
    _check_compatible(truth, est)
    rho = density_field(truth)[first_step:]
    rho_hat = density_field(est)[first_step:]
    sq = float(((rho - rho_hat) ** 2).sum())
    n_terms = int(((rho > 0) | (rho_hat > 0)).sum()) if normalized else rho.size
    return _relative(sq, float(rho.sum()), n_terms, "eps_rho")


def travel_times(dataset: TrajectoryDataset) -> dict[int, float]:
    """Seconds spent on the segment by each vehicle that both entered and left during the run."""
    dt = dataset.config.delta_t
    return {vid: (exit_ - entry) * dt
            for vid, (entry, exit_) in dataset.lifetimes().items()
            if entry > 0 and exit_ is not None}


def mape_travel_time(truth: TrajectoryDataset, est: TrajectoryDataset) -> float:
    """Mean absolute percentage travel-time error over vehicles completing in both datasets."""
    tt, te = travel_times(truth), travel_times(est)
    common = sorted(set(tt) & set(te))
    if not common:
        raise UndefinedMetricError("mape: no vehicle completes the segment in both datasets")
    t = np.array([tt[v] for v in common])
    e = np.array([te[v] for v in common])
    return float(np.mean(np.abs(e - t) / t) * 100.0)


def per_step_speed_error(truth: TrajectoryDataset, est: TrajectoryDataset, first_step: int = 1) -> np.ndarray:
    """RMS id-matched speed error (cells/step) at each step; ``nan`` for empty steps."""
    tv, ev = _matched_speeds(truth, est, first_step)
    sq = (tv - np.nan_to_num(ev, nan=0.0)) ** 2
    ks = truth.k[truth.k >= first_step] - first_step
    n = truth.n_steps - first_step
    counts = np.bincount(ks, minlength=n)
    sums = np.bincount(ks, weights=sq, minlength=n)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.sqrt(sums / counts)


@dataclass
class MetricReport:
    eps_sigma_rel: float
    rmse_kmh: float
    eps_rho: float
    mape_travel_time: float
    per_step_error: np.ndarray = field(default_factory=lambda: np.empty(0), repr=False)

    def summary(self) -> dict[str, float]:
        out = asdict(self)
        out.pop("per_step_error")
        return out

    def to_keyvalue(self) -> str:
        lines = [f"{k} = {v!r}" for k, v in self.summary().items()]
        lines.append("speed_unit = cells_per_step")
        return "\n".join(lines) + "\n"


def evaluate(truth: TrajectoryDataset, est: TrajectoryDataset, *, strict: bool = False) -> MetricReport:
    """All metrics at once. Undefined metrics become ``nan`` unless ``strict``."""

    def attempt(fn):
        try:
            return fn(truth, est)
        except UndefinedMetricError:
            if strict:
                raise
            return math.nan

    return MetricReport(
        attempt(eps_sigma_rel),
        attempt(rmse_kmh),
        attempt(eps_rho),
        attempt(mape_travel_time),
        per_step_speed_error(truth, est),
    )
