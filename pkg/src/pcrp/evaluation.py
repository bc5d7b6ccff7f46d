"""Error summaries for registration and retrieval runs."""
from __future__ import annotations

import numpy as np


def error_stats(errors) -> dict:
    """MSE / RMSE / MAE plus mean and median of a flat error sample."""
    e = np.asarray(errors, dtype=np.float64).ravel()
    if e.size == 0:
        nan = float("nan")
        return {"mean": nan, "median": nan, "mse": nan, "rmse": nan, "mae": nan}
    mse = float(np.mean(e ** 2))
    return {
        "mean": float(np.mean(e)),
        "median": float(np.median(e)),
        "mse": mse,
        "rmse": float(np.sqrt(mse)),
        "mae": float(np.mean(np.abs(e))),
    }


def default_cdf_thresholds() -> np.ndarray:
    return np.concatenate([np.arange(0.0, 10.0, 0.25), np.arange(10.0, 181.0, 1.0)])


def error_cdf(errors, thresholds=None):
    """Fraction of errors ``<=`` each threshold, as ``(thresholds, fractions)``."""
    e = np.sort(np.asarray(errors, dtype=np.float64).ravel())
    th = default_cdf_thresholds() if thresholds is None else np.asarray(thresholds, dtype=np.float64)
    if e.size == 0:
        return th, np.zeros_like(th)
    return th, np.searchsorted(e, th, side="right") / e.size
