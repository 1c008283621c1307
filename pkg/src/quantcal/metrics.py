"""Quantile-calibration and accuracy metrics for Gaussian predictions.

Calibration error follows the M-bin squared form: average over expected
confidence levels p_i = i/M of (observed fraction of PITs <= p_i minus
p_i)^2, optionally times 100 to read as squared percentage points.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .gaussian import LOG_2PI


@dataclass(frozen=True)
class MetricConfig:
    bins: int = 20
    percent: bool = True

    def __post_init__(self):
        if self.bins < 1:
            raise ValueError(f"MetricConfig: bins must be positive, got {self.bins}")


def _observed_levels(pits, bins):
    pits = np.asarray(pits, dtype=np.float64)
    if pits.ndim != 1 or pits.shape[0] == 0:
        raise ValueError("expected a nonempty 1-d array of PIT values")
    if np.any(pits < 0.0) or np.any(pits > 1.0):
        raise ValueError("PIT values must lie in [0, 1]")
    expected = np.arange(1, bins + 1) / bins
    observed = np.searchsorted(np.sort(pits), expected, side="right") / pits.shape[0]
    return expected, observed


def calibration_error(pits, config=MetricConfig()):
    """Mean squared gap between expected and observed confidence levels."""
    expected, observed = _observed_levels(pits, config.bins)
    err = float(np.mean((observed - expected) ** 2))
    return err * 100.0 if config.percent else err


def reliability_curve(pits, config=MetricConfig()):
    """(expected level, observed level) pairs, one per bin."""
    expected, observed = _observed_levels(pits, config.bins)
    return list(zip(expected.tolist(), observed.tolist()))


def rmse(preds, y):
    y = np.asarray(y, dtype=np.float64)
    if y.shape != preds.mu.shape or y.size == 0:
        raise ValueError(f"rmse: bad target shape {y.shape} for {preds.mu.shape}")
    return float(np.sqrt(np.mean((y - preds.mu) ** 2)))


def predictive_nll(preds, y):
    """Mean Gaussian negative log-likelihood (plain numpy, no tape)."""
    y = np.asarray(y, dtype=np.float64)
    if y.shape != preds.mu.shape or y.size == 0:
        raise ValueError(
            f"predictive_nll: bad target shape {y.shape} for {preds.mu.shape}"
        )
    z = (y - preds.mu) / preds.sigma
    return float(np.mean(0.5 * LOG_2PI + np.log(preds.sigma) + 0.5 * z * z))


@dataclass
class MetricsReport:
    """One evaluation of one prediction set against its targets."""

    calib_error: float
    rmse: float
    nll: float
    n: int
    reliability: list = field(default_factory=list)

    CSV_FIELDS = ("n", "calib_error", "rmse", "nll")

    @classmethod
    def evaluate(cls, preds, y, pits, config=MetricConfig()):
        return cls(
            calib_error=calibration_error(pits, config),
            rmse=rmse(preds, y),
            nll=predictive_nll(preds, y),
            n=int(np.asarray(y).shape[0]),
            reliability=reliability_curve(pits, config),
        )

    def to_dict(self):
        return {
            "n": self.n,
            "calib_error": self.calib_error,
            "rmse": self.rmse,
            "nll": self.nll,
            "reliability": self.reliability,
        }

    def to_json(self):
        return json.dumps(self.to_dict())

    def csv_row(self):
        return [str(self.n), repr(self.calib_error), repr(self.rmse), repr(self.nll)]
