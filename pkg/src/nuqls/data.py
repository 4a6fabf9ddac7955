"""Datasets: synthetic generators, numeric CSV ingestion, splits, normalization.

Regression targets are always 2-D float arrays (n, c); classification targets
are 1-D integer label arrays.  Normalization statistics are computed on the
training split only and carried on the dataset for exact inversion.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

__all__ = [
    "Dataset",
    "Normalization",
    "gen_cubic_toy",
    "gen_gaussian_synthetic",
    "gen_blobs_classification",
    "gen_sin_sum",
    "load_csv",
    "save_csv",
    "split",
    "normalize",
]


@dataclass(frozen=True)
class Normalization:
    """Per-column affine transform fitted on a training split.

    Constant columns (std below 1e-12) are flagged and left unscaled so the
    transform stays invertible.
    """

    x_mean: np.ndarray
    x_std: np.ndarray
    x_const: np.ndarray
    y_mean: np.ndarray | None = None
    y_std: np.ndarray | None = None
    y_const: np.ndarray | None = None

    def apply_x(self, X):
        return (X - self.x_mean) / self.x_std

    def invert_x(self, X):
        return X * self.x_std + self.x_mean

    def apply_y(self, Y):
        if self.y_mean is None:
            return Y
        return (Y - self.y_mean) / self.y_std

    def invert_y(self, Y):
        if self.y_mean is None:
            return Y
        return Y * self.y_std + self.y_mean

    def invert_y_std(self, sd):
        """Map a predictive std back to original target units."""
        if self.y_std is None:
            return sd
        return sd * self.y_std


@dataclass(frozen=True)
class Dataset:
    """Inputs X (n, d) with float regression targets (n, c) or int labels (n,)."""

    X: np.ndarray
    Y: np.ndarray
    normalization: Normalization | None = None
    split: str | None = None

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        object.__setattr__(self, "X", X)
        if X.ndim != 2 or X.shape[0] < 1:
            raise ValueError("X must be a (n >= 1, d) matrix")
        Y = np.asarray(self.Y)
        if np.issubdtype(Y.dtype, np.integer):
            if Y.ndim != 1:
                raise ValueError("label targets must be 1-D")
        else:
            Y = np.asarray(Y, dtype=np.float64)
            if Y.ndim == 1:
                Y = Y[:, None]
            if Y.ndim != 2:
                raise ValueError("regression targets must be (n, c)")
        object.__setattr__(self, "Y", Y)
        if Y.shape[0] != X.shape[0]:
            raise ValueError("X and Y row counts differ")
        if not np.all(np.isfinite(X)) or (not self.is_classification and not np.all(np.isfinite(self.Y))):
            raise ValueError("dataset contains non-finite values")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def input_dim(self) -> int:
        return self.X.shape[1]

    @property
    def is_classification(self) -> bool:
        return np.issubdtype(self.Y.dtype, np.integer)

    @property
    def target_dim(self) -> int:
        return 1 if self.is_classification else self.Y.shape[1]

    def subset(self, idx: np.ndarray, split: str | None = None) -> "Dataset":
        return Dataset(self.X[idx], self.Y[idx],
                       normalization=self.normalization,
                       split=split if split is not None else self.split)


def gen_cubic_toy(n: int, seed: int = 0, noise_std: float = 3.0,
                  noiseless: bool = False) -> Dataset:
    """Cubic toy regression: x uniform on [-4,-2] u [2,4], y = x^3 + noise.

    Half the points land in each interval; an odd point count puts the extra
    point in the first interval.
    """
    if n < 2:
        raise ValueError("need at least 2 points")
    rng = np.random.default_rng(seed)
    n_second = n // 2
    n_first = n - n_second
    x = np.concatenate([
        rng.uniform(-4.0, -2.0, size=n_first),
        rng.uniform(2.0, 4.0, size=n_second),
    ])
    y = x ** 3
    if not noiseless:
        y = y + noise_std * rng.standard_normal(n)
    return Dataset(x[:, None], y[:, None])


def gen_gaussian_synthetic(n: int = 100, d: int = 5, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Standard-normal inputs with standard-normal scalar targets.

    Returns independent (train, test) sets of the same size.
    """
    if n < 1 or d < 1:
        raise ValueError("n and d must be positive")
    train_ss, test_ss = np.random.SeedSequence(seed).spawn(2)
    sets = []
    for ss, tag in ((train_ss, "train"), (test_ss, "test")):
        rng = np.random.default_rng(ss)
        X = rng.standard_normal((n, d))
        Y = rng.standard_normal((n, 1))
        sets.append(Dataset(X, Y, split=tag))
    return tuple(sets)


def gen_blobs_classification(n: int, classes: int = 3, separation: float = 6.0,
                             seed: int = 0, dim: int = 2):
    """Isotropic Gaussian clusters on a circle, plus an OOD cluster sampler.

    Class means sit on a circle so that neighbouring means are `separation`
    apart (unit within-class std).  The returned sampler draws an extra
    cluster centred far outside the circle (5x separation beyond it), so OOD
    points are farther from every class mean than any in-distribution point.
    The OOD centre sits on the bisector ray between the first two classes:
    still remote, but not deep inside any single class's confident cone.
    """
    if classes < 2:
        raise ValueError("need at least 2 classes")
    if dim < 2:
        raise ValueError("blobs need dim >= 2")
    radius = separation / (2.0 * np.sin(np.pi / classes))
    angles = 2.0 * np.pi * np.arange(classes) / classes
    means = np.zeros((classes, dim))
    means[:, 0] = radius * np.cos(angles)
    means[:, 1] = radius * np.sin(angles)

    counts = np.full(classes, n // classes)
    counts[: n % classes] += 1
    rng = np.random.default_rng(seed)
    X = np.concatenate([means[k] + rng.standard_normal((counts[k], dim))
                        for k in range(classes)])
    y = np.concatenate([np.full(counts[k], k, dtype=np.int64) for k in range(classes)])
    perm = rng.permutation(n)
    ds = Dataset(X[perm], y[perm])

    bisector = 0.5 * (angles[0] + angles[1])
    ood_center = np.zeros(dim)
    ood_center[0] = (radius + 5.0 * separation) * np.cos(bisector)
    ood_center[1] = (radius + 5.0 * separation) * np.sin(bisector)

    def sample_ood(m: int, ood_seed: int = 0) -> np.ndarray:
        ood_rng = np.random.default_rng(ood_seed)
        return ood_center + ood_rng.standard_normal((m, dim))

    return ds, sample_ood


def gen_sin_sum(n: int, d: int = 2, seed: int = 0, noise_std: float = 0.01) -> Dataset:
    """Inputs uniform on [0, 0.2]^d with y = sum_i sin(x_i) + noise."""
    rng = np.random.default_rng(seed)
    X = rng.uniform(0.0, 0.2, size=(n, d))
    y = np.sin(X).sum(axis=1) + noise_std * rng.standard_normal(n)
    return Dataset(X, y[:, None])


def load_csv(path, target_columns, header: bool = False) -> Dataset:
    """Parse a rectangular numeric CSV into a regression dataset.

    Comma-separated, period decimal separator, UTF-8, no quoting.  Ragged
    rows and non-numeric cells are reported with their 1-based line number.
    """
    text = Path(path).read_text(encoding="utf-8")
    lines = [ln for ln in text.splitlines()]
    rows = []
    ncols = None
    start = 1 if header else 0
    for lineno, line in enumerate(lines, start=1):
        if lineno == 1 and header:
            continue
        if line.strip() == "":
            continue
        cells = line.split(",")
        if ncols is None:
            ncols = len(cells)
        elif len(cells) != ncols:
            raise ValueError(f"{path}: line {lineno}: "
                             f"expected {ncols} columns, found {len(cells)}")
        try:
            rows.append([float(c) for c in cells])
        except ValueError as exc:
            raise ValueError(f"{path}: line {lineno}: non-numeric cell ({exc})") from None
    if not rows:
        raise ValueError(f"{path}: no data rows")
    table = np.asarray(rows, dtype=np.float64)

    target_columns = [c % table.shape[1] for c in target_columns]
    if not target_columns:
        raise ValueError("need at least one target column")
    feature_columns = [c for c in range(table.shape[1]) if c not in target_columns]
    if not feature_columns:
        raise ValueError("no feature columns left after removing targets")
    logger.info("loaded %s: %d rows, %d columns (%d features, %d targets)",
                path, table.shape[0], table.shape[1],
                len(feature_columns), len(target_columns))
    return Dataset(table[:, feature_columns], table[:, target_columns])


def save_csv(data: Dataset, path) -> None:
    """Export a dataset in the same schema `load_csv` reads.

    Feature columns first, then target columns (class labels become one
    integer-valued column).
    """
    Y = data.Y[:, None].astype(np.float64) if data.is_classification else data.Y
    table = np.concatenate([data.X, Y], axis=1)
    lines = [",".join(repr(float(v)) for v in row) for row in table]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def split(data: Dataset, fractions=(0.7, 0.15, 0.15), seed: int = 0):
    """Random disjoint (train, val, test) split; remainders go to train."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("fractions must sum to 1")
    n = data.n
    n_val = int(np.floor(fractions[1] * n))
    n_test = int(np.floor(fractions[2] * n))
    n_train = n - n_val - n_test
    if min(n_train, n_val, n_test) < 1:
        raise ValueError(f"split too small: sizes ({n_train}, {n_val}, {n_test})")
    perm = np.random.default_rng(seed).permutation(n)
    return (data.subset(perm[:n_train], split="train"),
            data.subset(perm[n_train:n_train + n_val], split="val"),
            data.subset(perm[n_train + n_val:], split="test"))


def _column_stats(M: np.ndarray):
    mean = M.mean(axis=0)
    std = M.std(axis=0)
    const = std < 1e-12
    if const.any():
        logger.warning("%d constant column(s) left unscaled", int(const.sum()))
    std = np.where(const, 1.0, std)
    return mean, std, const


def normalize(train: Dataset, *others: Dataset) -> list[Dataset]:
    """Zero-mean/unit-std transform fitted on `train`, applied to all splits.

    Regression targets are normalized along with the inputs; label targets
    pass through untouched.  The fitted transform rides on every returned
    dataset so metrics can be mapped back to original units.
    """
    x_mean, x_std, x_const = _column_stats(train.X)
    if train.is_classification:
        norm = Normalization(x_mean, x_std, x_const)
    else:
        y_mean, y_std, y_const = _column_stats(train.Y)
        norm = Normalization(x_mean, x_std, x_const, y_mean, y_std, y_const)
    out = []
    for ds in (train, *others):
        Y = ds.Y if ds.is_classification else norm.apply_y(ds.Y)
        out.append(Dataset(norm.apply_x(ds.X), Y, normalization=norm, split=ds.split))
    return out
