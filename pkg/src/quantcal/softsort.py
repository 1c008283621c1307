"""Differentiable sorting via a unimodal row-stochastic relaxation.

Row i of the relaxed permutation matrix is

    softmax(((n + 1 - 2i) * s - A @ 1) / tau),   A[j, k] = |s_j - s_k|

which at low temperature concentrates on the index of the i-th largest
entry. Ascending order just reverses the row coefficients (n + 1 - 2i),
which is the same as flipping the rows of the descending matrix.

As tau -> 0 the matrix approaches the exact permutation; as tau grows the
rows flatten toward uniform and sorted values shrink toward the mean.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ndgrad as nd
from .ndgrad import Node

_ORDERS = ("ascending", "descending")


@dataclass(frozen=True)
class SoftSortConfig:
    tau: float = 0.1
    order: str = "ascending"

    def __post_init__(self):
        if not self.tau > 0.0:
            raise ValueError(f"SoftSortConfig: tau must be positive, got {self.tau}")
        if self.order not in _ORDERS:
            raise ValueError(
                f"SoftSortConfig: order must be one of {_ORDERS}, got {self.order!r}"
            )


def _permutation_node(s, config):
    n = s.value.shape[0]
    coef = (n + 1 - 2 * np.arange(1, n + 1)).astype(np.float64)
    if config.order == "ascending":
        coef = coef[::-1].copy()
    abs_diff = nd.pairwise_abs_diff(s)  # (n, n), symmetric
    col_sums = abs_diff.sum(axis=0, keepdims=True)  # (1, n): sum_k |s_j - s_k|
    scores = nd.matmul(nd.constant(coef[:, None]), s.reshape((1, n)))
    return nd.softmax((scores - col_sums) / config.tau, axis=-1)


def _check_input(s):
    node = nd.as_node(s)
    if node.value.ndim != 1:
        raise ValueError(f"soft sort: expected a 1-d vector, got shape {node.shape}")
    if node.value.shape[0] == 0:
        raise ValueError("soft sort: empty input")
    return node


def soft_permutation(s, config=SoftSortConfig()):
    """Relaxed permutation matrix for `s`. Rows sum to one.

    Returns a Node when given a Node, otherwise a plain ndarray.
    """
    node = _check_input(s)
    out = _permutation_node(node, config)
    return out if isinstance(s, Node) else out.value


def soft_sorted(s, config=SoftSortConfig()):
    """Relaxed sorted vector: each entry a convex combination of inputs."""
    node = _check_input(s)
    n = node.value.shape[0]
    perm = _permutation_node(node, config)
    out = nd.matmul(perm, node.reshape((n, 1))).reshape((n,))
    return out if isinstance(s, Node) else out.value
