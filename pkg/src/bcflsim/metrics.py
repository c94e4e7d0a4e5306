"""Glucose forecast accuracy metrics: RMSE (mg/dL) and MARD (percent)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class MetricsResult:
    rmse: float
    mard: float
    n: int


def _paired(preds: Sequence[float], refs: Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(preds, dtype=np.float64)
    r = np.asarray(refs, dtype=np.float64)
    if p.shape != r.shape or p.ndim != 1:
        raise ValueError(f"preds and refs must be equal-length 1-D sequences, got {p.shape} vs {r.shape}")
    if p.size == 0:
        raise ValueError("empty input")
    if not (np.all(np.isfinite(p)) and np.all(np.isfinite(r))):
        raise ValueError("non-finite values in input")
    return p, r


def rmse(preds: Sequence[float], refs: Sequence[float]) -> float:
    p, r = _paired(preds, refs)
    return float(np.sqrt(np.mean((p - r) ** 2)))


def mard(preds: Sequence[float], refs: Sequence[float]) -> float:
    """Mean absolute relative difference, in percent. References must be positive."""
    p, r = _paired(preds, refs)
    if np.any(r <= 0):
        raise ValueError("mard requires strictly positive reference values")
    return float(100.0 * np.mean(np.abs(p - r) / r))


def delta_avg(reference_avg: float, method_avg: float) -> float:
    """Gap of a method's average metric relative to the reference method's."""
    return float(reference_avg) - float(method_avg)


def evaluate(preds: Sequence[float], refs: Sequence[float]) -> MetricsResult:
    p, r = _paired(preds, refs)
    return MetricsResult(rmse=rmse(p, r), mard=mard(p, r), n=int(p.size))
