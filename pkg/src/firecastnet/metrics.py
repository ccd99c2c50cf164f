"""Average precision, the naive seasonal baselines and pooled evaluation reports."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .data import PERIODS_PER_YEAR, RegionMask


class EvalError(ValueError):
    pass


def average_precision(scores, labels) -> Optional[float]:
    """AP = sum_t (R_t - R_{t-1}) * P_t over distinct score thresholds.

    Scores are visited in descending order and tied scores form a single
    threshold.  Returns None when there are no positive labels.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    if s.shape != y.shape:
        raise EvalError(f"scores {s.shape} and labels {y.shape} differ in length")
    if np.isnan(s).any():
        raise EvalError("scores contain NaN")
    n_pos = int(y.sum())
    if n_pos == 0:
        return None
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    tp = np.cumsum(y)
    # last index of every tie group
    ends = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]
    tp = tp[ends].astype(np.float64)
    predicted = (ends + 1).astype(np.float64)
    recall = tp / n_pos
    precision = tp / predicted
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


# ---------------------------------------------------------------------------
# naive baselines


def naive_anyfire(history) -> np.ndarray:
    """1 where any prior year burned; ``history`` is [years, ...] boolean."""
    h = np.asarray(history, dtype=bool)
    if h.shape[0] < 1:
        raise EvalError("naive baselines need at least one prior year")
    return h.any(axis=0).astype(np.int8)


def naive_majority(history) -> np.ndarray:
    """1 where strictly more prior years burned than did not."""
    h = np.asarray(history, dtype=bool)
    if h.shape[0] < 1:
        raise EvalError("naive baselines need at least one prior year")
    fire = h.sum(axis=0)
    return (fire > h.shape[0] - fire).astype(np.int8)


BASELINES = {"anyfire": naive_anyfire, "majority": naive_majority}


def baseline_predictions(fire, times, target_indices, kind: str, history_years=None) -> np.ndarray:
    """Baseline grids for each target index.

    ``fire`` is the boolean [T, H, W] record.  History for a target in year Y
    at period-of-year p is the same period in every year strictly before Y
    (restricted to ``history_years`` = (first, last) when given).
    """
    if kind not in BASELINES:
        raise EvalError(f"unknown baseline {kind!r}; expected one of {sorted(BASELINES)}")
    fn = BASELINES[kind]
    times = np.asarray(times, dtype="datetime64[D]")
    years = times.astype("datetime64[Y]").astype(int) + 1970
    # period of year from the position inside each calendar year
    first_of_year = times.astype("datetime64[Y]").astype("datetime64[D]")
    period = ((times - first_of_year).astype(int) // 8).clip(0, PERIODS_PER_YEAR - 1)
    out = np.empty((len(target_indices),) + fire.shape[1:], dtype=np.int8)
    for k, t in enumerate(target_indices):
        sel = (period == period[t]) & (years < years[t])
        if history_years is not None:
            sel &= (years >= history_years[0]) & (years <= history_years[1])
        idx = np.nonzero(sel)[0]
        if len(idx) == 0:
            raise EvalError(f"no prior year before target {times[t]}")
        out[k] = fn(fire[idx])
    return out


# ---------------------------------------------------------------------------
# reports


@dataclass
class PoolStats:
    auprc: Optional[float]
    baselines: dict
    cells: int
    samples: int
    positive_rate: float
    diagnostic: Optional[str] = None


@dataclass
class EvalReport:
    model_id: str
    horizon: int
    global_pool: PoolStats
    regions: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    @property
    def auprc(self) -> Optional[float]:
        return self.global_pool.auprc

    def to_dict(self) -> dict:
        return {
            "model_id": self.model_id,
            "horizon": self.horizon,
            "global": asdict(self.global_pool),
            "regions": {k: asdict(v) for k, v in sorted(self.regions.items())},
            "config": self.config,
        }


def _pool(scores, target, pool_mask, baselines) -> PoolStats:
    sel = np.broadcast_to(pool_mask, target.shape)
    y = target[sel]
    n_cells = int(pool_mask.sum())
    samples = int(y.size)
    rate = float(y.mean()) if samples else 0.0
    ap = average_precision(scores[sel], y) if samples else None
    base = {}
    for name, grid in baselines.items():
        base[name] = average_precision(grid[sel], y) if samples else None
    diag = None
    if ap is None:
        diag = "no positive labels in pool; AUPRC undefined"
    return PoolStats(ap, base, n_cells, samples, rate, diag)


def evaluate(
    predictions,
    targets,
    land_mask,
    masks: Sequence[RegionMask] = (),
    baselines: Optional[dict] = None,
    model_id: str = "model",
    horizon: int = 1,
) -> EvalReport:
    """Pool all (cell, time) pairs inside land (and each region) and compute AP.

    ``predictions`` and ``targets`` are [N, H, W]; ``baselines`` maps a name
    to baseline grids of the same shape, scored on identical pools.
    """
    p = np.asarray(predictions, dtype=np.float64)
    y = np.asarray(targets).astype(bool)
    land = np.asarray(land_mask, dtype=bool)
    if p.shape != y.shape or p.shape[1:] != land.shape:
        raise EvalError(f"shape mismatch: predictions {p.shape}, targets {y.shape}, land {land.shape}")
    baselines = {k: np.asarray(v) for k, v in (baselines or {}).items()}
    for k, v in baselines.items():
        if v.shape != y.shape:
            raise EvalError(f"baseline {k!r} has shape {v.shape}, expected {y.shape}")
    report = EvalReport(model_id, horizon, _pool(p, y, land, baselines))
    for region in masks:
        if region.mask.shape != land.shape:
            raise EvalError(f"region {region.name!r} mask shape {region.mask.shape} != {land.shape}")
        report.regions[region.name] = _pool(p, y, region.mask & land, baselines)
    return report


def is_finite_ap(x) -> bool:
    return x is not None and math.isfinite(x) and 0.0 <= x <= 1.0
