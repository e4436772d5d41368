"""Evaluation measures: R^2, Close_p, MAPE, MAE.

Relative measures exclude points whose true value is below 1e-12 in
magnitude; the excluded count is reported instead of dividing by zero.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

CLOSE_LEVELS = (0.001, 0.01, 0.1)
ZERO_GUARD = 1e-12


class DegenerateTruth(Exception):
    """R^2 is undefined when every true value is identical."""


class AllSkipped(Exception):
    """Every point fell under the zero guard."""


def _as_arrays(truth, pred) -> tuple[np.ndarray, np.ndarray]:
    t = np.asarray(truth, float).reshape(-1)
    p = np.asarray(pred, float).reshape(-1)
    if t.shape != p.shape:
        raise ValueError(f"shape mismatch {t.shape} vs {p.shape}")
    return t, p


def r2(truth: Sequence[float], pred: Sequence[float]) -> float:
    t, p = _as_arrays(truth, pred)
    if len(t) < 2:
        raise ValueError("r2 needs at least two points")
    ss_tot = float(((t - t.mean()) ** 2).sum())
    if ss_tot == 0.0:
        raise DegenerateTruth("all true values identical")
    return 1.0 - float(((t - p) ** 2).sum()) / ss_tot


def close_p(truth: Sequence[float], pred: Sequence[float], p: float) -> float:
    t, yhat = _as_arrays(truth, pred)
    keep = np.abs(t) >= ZERO_GUARD
    if not keep.any():
        raise AllSkipped("no point passes the zero guard")
    rel = np.abs((t[keep] - yhat[keep]) / t[keep])
    return float((rel <= p).mean())


def mape_mae(truth: Sequence[float], pred: Sequence[float]) -> tuple[float, float]:
    """(mean absolute percentage error in %, mean absolute error)."""
    t, yhat = _as_arrays(truth, pred)
    mae = float(np.abs(t - yhat).mean())
    keep = np.abs(t) >= ZERO_GUARD
    if not keep.any():
        raise AllSkipped("no point passes the zero guard")
    mape = float(np.abs((t[keep] - yhat[keep]) / t[keep]).mean() * 100.0)
    return mape, mae


@dataclass(frozen=True)
class MetricReport:
    r2: float
    close: Mapping[float, float]
    mape: float
    mae: float
    n_points: int
    n_skipped: int

    def to_dict(self) -> dict:
        out = {
            "r2": self.r2,
            "mape": self.mape,
            "mae": self.mae,
            "n_points": self.n_points,
            "n_skipped": self.n_skipped,
        }
        for p, v in self.close.items():
            out[f"close_{p:g}"] = v
        return out


def report(truth: Sequence[float], pred: Sequence[float]) -> MetricReport:
    """All measures over flattened arrays (nodes, times and components)."""
    t, yhat = _as_arrays(truth, pred)
    keep = np.abs(t) >= ZERO_GUARD
    mape, mae = mape_mae(t, yhat)
    return MetricReport(
        r2=r2(t, yhat),
        close={p: close_p(t, yhat, p) for p in CLOSE_LEVELS},
        mape=mape,
        mae=mae,
        n_points=len(t),
        n_skipped=int((~keep).sum()),
    )
