"""Dataset loading, standardization, splitting, and a synthetic benchmark.

Real tabular data comes in as CSV; shipped JSON descriptors record where
the well-known regression benchmarks live, which column is the target, and
the expected shape (row mismatches are errors, feature-count mismatches
only warn because published counts are not consistent about including the
target column).

The synthetic benchmark has strong heteroscedastic noise with a known
ground truth: x ~ U[-2, 2], y = sin(2x) + (0.1 + 0.4|x|) * eps.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .gaussian import GaussianPrediction


@dataclass
class Standardization:
    """Affine transform fitted on (a subset of) a dataset.

    Population statistics (ddof=0); constant feature columns are dropped
    rather than divided by zero.
    """

    feature_mean: np.ndarray
    feature_std: np.ndarray
    target_mean: float
    target_std: float
    kept_columns: np.ndarray

    def apply(self, features, targets):
        features = np.asarray(features, dtype=np.float64)[:, self.kept_columns]
        z = (features - self.feature_mean) / self.feature_std
        t = (np.asarray(targets, dtype=np.float64) - self.target_mean) / self.target_std
        return z, t

    def inverse_targets(self, targets):
        return np.asarray(targets, dtype=np.float64) * self.target_std + self.target_mean

    def inverse_predictions(self, preds):
        """Map a prediction on the standardized scale back to raw units."""
        return GaussianPrediction(
            preds.mu * self.target_std + self.target_mean,
            preds.sigma * self.target_std,
        )


@dataclass
class Dataset:
    features: np.ndarray
    targets: np.ndarray
    feature_names: list = field(default_factory=list)
    standardization: Standardization | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.targets = np.asarray(self.targets, dtype=np.float64)
        if self.features.ndim != 2 or self.targets.ndim != 1:
            raise ValueError(
                f"Dataset: expected (n, d) features and (n,) targets, got "
                f"{self.features.shape} and {self.targets.shape}"
            )
        if self.features.shape[0] != self.targets.shape[0]:
            raise ValueError(
                f"Dataset: {self.features.shape[0]} feature rows vs "
                f"{self.targets.shape[0]} targets"
            )
        if not self.feature_names:
            self.feature_names = [f"x{i}" for i in range(self.features.shape[1])]

    def __len__(self):
        return self.targets.shape[0]

    @property
    def n_features(self):
        return self.features.shape[1]

    def subset(self, idx):
        return Dataset(
            self.features[idx],
            self.targets[idx],
            list(self.feature_names),
            self.standardization,
        )


def load_csv(path, target_column=-1, delimiter=",", has_header=True):
    """Read a numeric CSV into a Dataset.

    target_column: name (requires a header) or integer position, negatives
    allowed. Any non-numeric cell raises with its row and column.
    """
    path = Path(path)
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh, delimiter=delimiter) if r]
    if not rows:
        raise ValueError(f"load_csv: {path} is empty")
    if has_header:
        header, rows = rows[0], rows[1:]
        if not rows:
            raise ValueError(f"load_csv: {path} has a header but no data rows")
    else:
        header = [f"col{i}" for i in range(len(rows[0]))]
    if isinstance(target_column, str):
        if target_column not in header:
            raise ValueError(
                f"load_csv: target column {target_column!r} not in header {header}"
            )
        target_idx = header.index(target_column)
    else:
        target_idx = int(target_column) % len(header)
    width = len(header)
    data = np.empty((len(rows), width))
    for r, row in enumerate(rows):
        if len(row) != width:
            raise ValueError(
                f"load_csv: row {r} has {len(row)} cells, expected {width}"
            )
        for c, cell in enumerate(row):
            try:
                data[r, c] = float(cell)
            except ValueError:
                raise ValueError(
                    f"load_csv: non-numeric value {cell!r} at row {r}, "
                    f"column {c} ({header[c]})"
                ) from None
    feature_cols = [i for i in range(width) if i != target_idx]
    names = [header[i] for i in feature_cols]
    return Dataset(data[:, feature_cols], data[:, target_idx], names)


def standardize(dataset, train_idx=None):
    """Zero-mean unit-variance copy of a dataset.

    Statistics come from `train_idx` rows when given (the usual
    train-then-apply-everywhere protocol) and from all rows otherwise.
    Returns (standardized dataset, transform).
    """
    idx = np.arange(len(dataset)) if train_idx is None else np.asarray(train_idx)
    f = dataset.features[idx]
    mean = f.mean(axis=0)
    std = f.std(axis=0)
    kept = np.flatnonzero(std > 0.0)
    if kept.size < dataset.n_features:
        dropped = [dataset.feature_names[i] for i in np.flatnonzero(std == 0.0)]
        warnings.warn(f"standardize: dropping constant feature columns {dropped}")
    if kept.size == 0:
        raise ValueError("standardize: every feature column is constant")
    t_mean = float(dataset.targets[idx].mean())
    t_std = float(dataset.targets[idx].std())
    if t_std == 0.0:
        raise ValueError("standardize: target is constant on the fitting rows")
    transform = Standardization(mean[kept], std[kept], t_mean, t_std, kept)
    z, t = transform.apply(dataset.features, dataset.targets)
    names = [dataset.feature_names[i] for i in kept]
    return Dataset(z, t, names, transform), transform


@dataclass(frozen=True)
class SplitSpec:
    n_splits: int = 5
    test_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.n_splits < 1:
            raise ValueError(f"SplitSpec: n_splits must be positive, got {self.n_splits}")
        if not 0.0 < self.test_fraction < 1.0:
            raise ValueError(
                f"SplitSpec: test_fraction must be in (0, 1), got {self.test_fraction}"
            )


def make_splits(n, spec=SplitSpec()):
    """Independent random train/test partitions of range(n).

    Returns a list of (train_idx, test_idx) pairs, each sorted; requires
    n >= 5 so both sides are nonempty at sensible fractions.
    """
    if n < 5:
        raise ValueError(f"make_splits: need at least 5 rows, got {n}")
    n_test = int(round(n * spec.test_fraction))
    n_test = min(max(n_test, 1), n - 1)
    rng = np.random.default_rng(spec.seed)
    splits = []
    for _ in range(spec.n_splits):
        perm = rng.permutation(n)
        splits.append((np.sort(perm[n_test:]), np.sort(perm[:n_test])))
    return splits


def synth_hetero(n, seed=0):
    """Noisy sine with input-dependent scale; targets are never standardized
    away from their natural units (they are already O(1))."""
    if n < 1:
        raise ValueError(f"synth_hetero: n must be positive, got {n}")
    rng = np.random.default_rng(seed)
    x = rng.uniform(-2.0, 2.0, size=n)
    y = np.sin(2.0 * x) + (0.1 + 0.4 * np.abs(x)) * rng.standard_normal(n)
    return Dataset(x[:, None], y, ["x"])


def synth_hetero_truth(features):
    """The exact predictive law the synthetic generator draws from."""
    x = np.asarray(features, dtype=np.float64).reshape(-1)
    return GaussianPrediction(np.sin(2.0 * x), 0.1 + 0.4 * np.abs(x))


def descriptor_names():
    root = resources.files("quantcal.descriptors")
    return sorted(p.name[: -len(".json")] for p in root.iterdir() if p.name.endswith(".json"))


def load_descriptor(name):
    """Shipped descriptor by name, or any descriptor JSON by path."""
    path = Path(name)
    if path.suffix == ".json" and path.exists():
        text = path.read_text()
    else:
        root = resources.files("quantcal.descriptors")
        candidate = root / f"{name}.json"
        if not candidate.is_file():
            raise KeyError(
                f"load_descriptor: unknown dataset {name!r}; shipped: "
                f"{descriptor_names()}"
            )
        text = candidate.read_text()
    return json.loads(text)


def load_from_descriptor(descriptor, data_dir="data"):
    """Load the CSV a descriptor points at and validate its shape.

    Row-count mismatches raise; feature-count mismatches only warn (counts
    in the literature are off-by-one depending on whether they include the
    target column).
    """
    if isinstance(descriptor, str):
        descriptor = load_descriptor(descriptor)
    path = Path(data_dir) / descriptor["filename"]
    if not path.exists():
        raise FileNotFoundError(
            f"dataset file {path} not found; fetch it from {descriptor['source']} "
            f"and place it there"
        )
    ds = load_csv(
        path,
        target_column=descriptor.get("target_column", -1),
        delimiter=descriptor.get("delimiter", ","),
        has_header=descriptor.get("has_header", False),
    )
    expected_rows = descriptor.get("expected_rows")
    if expected_rows is not None and len(ds) != expected_rows:
        raise ValueError(
            f"{descriptor['name']}: expected {expected_rows} rows, file has {len(ds)}"
        )
    expected_features = descriptor.get("expected_features")
    if expected_features is not None and ds.n_features != expected_features:
        warnings.warn(
            f"{descriptor['name']}: descriptor lists {expected_features} features, "
            f"file has {ds.n_features}"
        )
    return ds
