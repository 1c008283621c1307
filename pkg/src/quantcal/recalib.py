"""Post-hoc isotonic recalibration of PIT values.

Given held-out (or training) predictions, the empirical frequency
P_hat(c) = fraction of PITs <= c is regressed isotonically on c. Applying
the fitted monotone map to future PITs pushes their distribution toward
uniform, assuming the miscalibration pattern generalizes. The map is kept
as piecewise-linear knots pinned at (0, 0) and (1, 1).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .gaussian import pit


@dataclass
class CalibrationMap:
    """Monotone piecewise-linear map [0, 1] -> [0, 1]."""

    knots_p: np.ndarray
    knots_r: np.ndarray

    def __post_init__(self):
        self.knots_p = np.asarray(self.knots_p, dtype=np.float64)
        self.knots_r = np.asarray(self.knots_r, dtype=np.float64)
        if self.knots_p.shape != self.knots_r.shape or self.knots_p.ndim != 1:
            raise ValueError("CalibrationMap: knot arrays must be 1-d and equal length")
        if self.knots_p.shape[0] < 2:
            raise ValueError("CalibrationMap: need at least 2 knots")
        if np.any(np.diff(self.knots_p) <= 0):
            raise ValueError("CalibrationMap: knot positions must strictly increase")
        if np.any(np.diff(self.knots_r) < 0):
            raise ValueError("CalibrationMap: knot values must be nondecreasing")
        if self.knots_p[0] != 0.0 or self.knots_p[-1] != 1.0:
            raise ValueError("CalibrationMap: knots must span [0, 1]")
        if self.knots_r[0] != 0.0 or self.knots_r[-1] != 1.0:
            raise ValueError("CalibrationMap: values must run from 0 to 1")


def build_recalibration_dataset(preds, y):
    """Sorted PIT values and their empirical CDF levels.

    Returns (c, p_hat) with c ascending and p_hat[i] the fraction of PITs
    <= c[i]; ties share the same (maximal) level.
    """
    c = np.sort(pit(preds, y))
    n = c.shape[0]
    if n == 0:
        raise ValueError("build_recalibration_dataset: empty predictions")
    p_hat = np.searchsorted(c, c, side="right") / n
    return c, p_hat


def pav(x, y):
    """Isotonic regression by pool-adjacent-violators, unit weights.

    x must be ascending (it only orders the points); returns the
    nondecreasing fit, one value per input, minimizing sum (fit - y)^2.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("pav: x and y must be 1-d and equal length")
    if x.shape[0] == 0:
        raise ValueError("pav: empty input")
    if np.any(np.diff(x) < 0):
        raise ValueError("pav: x must be ascending")
    means = []
    counts = []
    for value in y:
        means.append(value)
        counts.append(1)
        while len(means) > 1 and means[-2] > means[-1]:
            total = means[-2] * counts[-2] + means[-1] * counts[-1]
            counts[-2] += counts[-1]
            means[-2] = total / counts[-2]
            means.pop()
            counts.pop()
    return np.repeat(means, counts)


def fit_calibration_map(preds, y):
    """Isotonic fit of empirical CDF levels on PIT values, as a map.

    Note this interpolates monotone training data exactly (up to pooling of
    ties), so a map fitted on the training split reproduces that split's
    quirks; fitting on held-out data is the safer route when there is
    enough of it.
    """
    c, p_hat = build_recalibration_dataset(preds, y)
    fit = pav(c, p_hat)
    # one knot per distinct PIT; ties already share a fitted value
    keep = np.concatenate([np.diff(c) > 0, [True]])
    knots_p, knots_r = c[keep], fit[keep]
    if knots_p[0] > 0.0:
        knots_p = np.concatenate([[0.0], knots_p])
        knots_r = np.concatenate([[0.0], knots_r])
    else:
        knots_r[0] = 0.0
    if knots_p[-1] < 1.0:
        knots_p = np.concatenate([knots_p, [1.0]])
        knots_r = np.concatenate([knots_r, [1.0]])
    else:
        knots_r[-1] = 1.0
    return CalibrationMap(knots_p, knots_r)


def apply_map(cal_map, p):
    """Evaluate the map at probabilities p (scalar or array) in [0, 1]."""
    arr = np.asarray(p, dtype=np.float64)
    if np.any(arr < 0.0) or np.any(arr > 1.0):
        raise ValueError("apply_map: probabilities must lie in [0, 1]")
    out = np.interp(arr, cal_map.knots_p, cal_map.knots_r)
    return float(out) if np.isscalar(p) else out


def recalibrated_pit(cal_map, preds, y):
    """PIT values pushed through a fitted calibration map."""
    return apply_map(cal_map, pit(preds, y))


def save_map(cal_map, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["p", "r"])
        for p, r in zip(cal_map.knots_p, cal_map.knots_r):
            writer.writerow([repr(float(p)), repr(float(r))])


def load_map(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["p", "r"]:
        raise ValueError(f"load_map: {path} is not a calibration map file")
    data = np.array([[float(a), float(b)] for a, b in rows[1:]])
    return CalibrationMap(data[:, 0], data[:, 1])
