"""Gaussian predictive distributions: PIT values, NLL, mixture aggregation.

A prediction is a per-point Normal(mu_i, sigma_i). Both Monte-Carlo dropout
passes and ensemble members are combined by matching the first two moments
of the equally weighted Gaussian mixture, which is what both aggregation
rules below reduce to.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from . import ndgrad as nd

SIGMA_FLOOR = 1e-6
LOG_2PI = float(np.log(2.0 * np.pi))


class _ClampCounter:
    """Diagnostics only: counts loss evaluations where the sigma floor fired."""

    __slots__ = ("count",)

    def __init__(self):
        self.count = 0

    def reset(self):
        self.count = 0


sigma_clamp_events = _ClampCounter()


@dataclass
class GaussianPrediction:
    """Per-point Gaussian predictive distribution over a 1-d target."""

    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.sigma = np.asarray(self.sigma, dtype=np.float64)
        if self.mu.shape != self.sigma.shape:
            raise ValueError(
                f"GaussianPrediction: mu shape {self.mu.shape} does not match "
                f"sigma shape {self.sigma.shape}"
            )
        if not (np.all(np.isfinite(self.mu)) and np.all(np.isfinite(self.sigma))):
            raise ValueError("GaussianPrediction: non-finite parameters")
        # never store a degenerate scale
        self.sigma = np.maximum(self.sigma, SIGMA_FLOOR)

    def __len__(self):
        return self.mu.shape[0]


def pit(pred, y):
    """Probability integral transform Phi((y - mu) / sigma), in [0, 1]."""
    y = np.asarray(y, dtype=np.float64)
    if y.shape != pred.mu.shape:
        raise ValueError(
            f"pit: target shape {y.shape} does not match prediction {pred.mu.shape}"
        )
    if not np.all(np.isfinite(y)):
        raise ValueError("pit: non-finite targets")
    return np.clip(ndtr((y - pred.mu) / pred.sigma), 0.0, 1.0)


def gaussian_nll(mu, sigma, y):
    """Mean Gaussian negative log-likelihood as a differentiable Node.

    sigma is clamped at SIGMA_FLOOR inside the graph (gradient zero where
    the clamp is active); clamping increments `sigma_clamp_events`.
    """
    mu = nd.as_node(mu)
    sigma = nd.as_node(sigma)
    y = np.asarray(y, dtype=np.float64)
    if y.shape != mu.value.shape or y.shape != sigma.value.shape:
        raise ValueError(
            f"gaussian_nll: shapes differ (mu {mu.shape}, sigma {sigma.shape}, "
            f"y {y.shape})"
        )
    if np.any(sigma.value < SIGMA_FLOOR):
        sigma_clamp_events.count += 1
    sigma_safe = nd.clip(sigma, SIGMA_FLOOR, np.inf)
    z = (nd.constant(y) - mu) / sigma_safe
    return (0.5 * LOG_2PI + nd.log(sigma_safe) + 0.5 * z * z).mean()


def _mixture_moments(preds):
    """Mean and sigma of the equally weighted Gaussian mixture.

    The variance mean(sigma_i^2) + mean((mu_i - mu_bar)^2) equals the raw
    second-moment form mean(sigma_i^2 + mu_i^2) - mu_bar^2 but does not
    cancel catastrophically for large |mu|.
    """
    if not preds:
        raise ValueError("aggregate: empty prediction list")
    mus = np.stack([p.mu for p in preds])
    sigmas = np.stack([p.sigma for p in preds])
    mu_bar = mus.mean(axis=0)
    var = (sigmas**2).mean(axis=0) + ((mus - mu_bar) ** 2).mean(axis=0)
    return GaussianPrediction(mu_bar, np.sqrt(var))


def aggregate_mc(preds):
    """Combine Monte-Carlo dropout passes into a single Gaussian."""
    return _mixture_moments(preds)


def aggregate_ensemble(preds):
    """Combine ensemble member predictions into a single Gaussian."""
    return _mixture_moments(preds)
