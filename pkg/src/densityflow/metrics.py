"""Counting metrics, motion rate and the slow/fast scene taxonomy."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Sequence

import numpy as np

SLOW_THRESHOLD = 15.0
BANDS = ("all", "slow", "fast")


@dataclass(frozen=True)
class EvalRecord:
    scene_id: str
    frame_index: int
    y_true: float
    y_pred: float

    def __post_init__(self):
        if self.y_true < 0:
            raise ValueError(f"y_true must be >= 0, got {self.y_true}")


def _errors(records: Sequence[EvalRecord]) -> np.ndarray:
    if not records:
        raise ValueError("metrics need at least one record")
    return np.array([r.y_true - r.y_pred for r in records], dtype=np.float64)


def mae(records: Sequence[EvalRecord]) -> float:
    return float(np.mean(np.abs(_errors(records))))


def rmse(records: Sequence[EvalRecord]) -> float:
    err = np.abs(_errors(records))
    scale = err.max()
    if scale == 0 or not np.isfinite(scale):
        return float(scale)
    # scaled so squaring neither underflows nor overflows
    return float(scale * np.sqrt(np.mean((err / scale) ** 2)))


def motion_rate(flow: np.ndarray) -> float:
    """Mean per-pixel optical-flow magnitude of a (2, H, W) field."""
    flow = np.asarray(flow, dtype=np.float64)
    if flow.ndim != 3 or flow.shape[0] != 2:
        raise ValueError(f"flow must be (2, H, W), got {flow.shape}")
    return float(np.mean(np.sqrt(flow[0] ** 2 + flow[1] ** 2)))


def classify_speed(rate: float) -> str:
    if rate < 0:
        raise ValueError(f"motion rate must be >= 0, got {rate}")
    return "slow" if rate < SLOW_THRESHOLD else "fast"


@dataclass
class FoldSummary:
    mae: Dict[str, float]
    rmse: Dict[str, float]
    n: Dict[str, int]
    seed: int = 0


def summarize_fold(records: Sequence[EvalRecord], scene_rates: Mapping[str, float], seed: int = 0) -> FoldSummary:
    """Metrics over all records and over the slow/fast subsets (NaN when a subset is empty)."""
    groups: Dict[str, List[EvalRecord]] = {b: [] for b in BANDS}
    for r in records:
        groups["all"].append(r)
        groups[classify_speed(scene_rates[r.scene_id])].append(r)
    summary = FoldSummary({}, {}, {}, seed)
    for band, recs in groups.items():
        summary.n[band] = len(recs)
        summary.mae[band] = mae(recs) if recs else math.nan
        summary.rmse[band] = rmse(recs) if recs else math.nan
    return summary


@dataclass
class Aggregate:
    mean: Dict[str, Dict[str, float]] = field(default_factory=dict)
    std: Dict[str, Dict[str, float]] = field(default_factory=dict)


def aggregate_folds(folds: Sequence[FoldSummary]) -> Aggregate:
    """Mean and population standard deviation of each metric per band."""
    if not folds:
        raise ValueError("aggregate_folds needs at least one fold")
    agg = Aggregate()
    for metric in ("mae", "rmse"):
        agg.mean[metric], agg.std[metric] = {}, {}
        for band in BANDS:
            vals = np.array([getattr(f, metric)[band] for f in folds], dtype=np.float64)
            vals = vals[~np.isnan(vals)]
            agg.mean[metric][band] = float(vals.mean()) if vals.size else math.nan
            agg.std[metric][band] = float(vals.std()) if vals.size else math.nan
    return agg


def _cell(value: float, spread: float = None) -> str:
    if math.isnan(value):
        return "-"
    return f"{value:.2f}" if spread is None else f"{value:.2f} ± {spread:.2f}"


def format_table(summary) -> str:
    """Aligned text table with MAE/RMSE for the Test, Slow and Fast subsets."""
    header = ["", "Test MAE", "Test RMSE", "Slow MAE", "Slow RMSE", "Fast MAE", "Fast RMSE"]
    row = ["result"]
    for band in BANDS:
        for metric in ("mae", "rmse"):
            if isinstance(summary, Aggregate):
                row.append(_cell(summary.mean[metric][band], summary.std[metric][band]))
            else:
                row.append(_cell(getattr(summary, metric)[band]))
    widths = [max(len(h), len(c)) for h, c in zip(header, row)]
    fmt = lambda cells: "  ".join(c.rjust(w) for c, w in zip(cells, widths))
    return fmt(header) + "\n" + fmt(row)


def write_results(path, records: Sequence[EvalRecord]) -> None:
    rows = sorted(records, key=lambda r: (r.scene_id, r.frame_index))
    lines = [f"{r.scene_id}\t{r.frame_index}\t{r.y_true!r}\t{r.y_pred!r}" for r in rows]
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("ascii") if lines else b"")
