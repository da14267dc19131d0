"""Datasets: synthetic generators, CSV ingestion and the four-way membership split."""
from __future__ import annotations

import csv
import dataclasses
import math
from collections.abc import Sequence
from pathlib import Path

import numpy as np

from bmia.numkit import RngState

TOY_NOISE_VARIANCE = 0.01
TOY_MIXTURE_MEANS = (-3.0, 3.0)
TOY_MIXTURE_STDS = (0.8, 0.8)


@dataclasses.dataclass
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    n_classes: int | None = None
    feature_names: list[str] | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels)
        if self.features.ndim != 2:
            raise ValueError("features must be an (N, I) array")
        if self.labels.shape[0] != self.features.shape[0]:
            raise ValueError("label count differs from feature rows")
        if self.n_classes is not None and self.labels.size:
            if self.labels.min() < 0 or self.labels.max() >= self.n_classes:
                raise ValueError(f"labels must lie in [0, {self.n_classes})")

    def __len__(self) -> int:
        return self.features.shape[0]

    def subset(self, indices) -> LabeledDataset:
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.features[idx], self.labels[idx], self.n_classes, self.feature_names)


@dataclasses.dataclass(frozen=True)
class SplitPlan:
    target_train: np.ndarray
    target_test: np.ndarray
    population: np.ndarray
    holdout: np.ndarray
    seed: int

    def parts(self) -> dict[str, np.ndarray]:
        return {"target_train": self.target_train, "target_test": self.target_test,
                "population": self.population, "holdout": self.holdout}


def make_synthetic_classification(n: int, dims: int, classes: int, cluster_spread: float = 1.0,
                                  seed: int = 0, separation: float = 3.0) -> LabeledDataset:
    """Isotropic Gaussian blobs, one per class, with balanced labels.

    Class means are random directions scaled to norm ``separation``.
    """
    if classes < 2 or n < classes:
        raise ValueError("need classes >= 2 and n >= classes")
    if cluster_spread <= 0:
        raise ValueError("cluster_spread must be positive")
    root = RngState(seed).child("synthetic_classification")
    means = root.child("means").standard_normal((classes, dims))
    means *= separation / np.linalg.norm(means, axis=1, keepdims=True)
    labels = np.arange(n) % classes
    labels = labels[root.child("labels").permutation(n)]
    noise = root.child("noise").standard_normal((n, dims))
    return LabeledDataset(means[labels] + cluster_spread * noise, labels, n_classes=classes)


def toy_regression_target(x, noise):
    """``sin(1.2 x) + noise``."""
    return np.sin(1.2 * np.asarray(x, dtype=np.float64)) + noise


def make_toy_regression(n: int, seed: int = 0) -> LabeledDataset:
    """1-D regression data: x from a two-component Gaussian mixture, y = sin(1.2x) + N(0, 0.01)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    root = RngState(seed).child("toy_regression")
    comp = (root.child("component").uniform(size=n) < 0.5).astype(np.int64)
    mu = np.asarray(TOY_MIXTURE_MEANS)[comp]
    sd = np.asarray(TOY_MIXTURE_STDS)[comp]
    x = mu + sd * root.child("x").standard_normal(n)
    noise = math.sqrt(TOY_NOISE_VARIANCE) * root.child("noise").standard_normal(n)
    return LabeledDataset(x[:, None], toy_regression_target(x, noise))


# CSV -------------------------------------------------------------------------

class CsvError(ValueError):
    """Base class for CSV ingestion failures; carries the 1-based row and 0-based column."""

    def __init__(self, message: str, row: int | None = None, column: int | None = None):
        where = []
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column {column}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.row = row
        self.column = column


class RaggedRowError(CsvError):
    pass


class NonNumericCellError(CsvError):
    pass


class UnknownLabelError(CsvError):
    pass


@dataclasses.dataclass(frozen=True)
class CsvSchema:
    label_column: int = -1
    feature_columns: tuple[int, ...] | None = None
    has_header: bool = False
    task: str = "classification"
    n_classes: int | None = None
    label_values: tuple[str, ...] | None = None


def load_csv(path, schema: CsvSchema = CsvSchema()) -> LabeledDataset:
    """Read a comma-separated table into a :class:`LabeledDataset`.

    Rows are numbered from 1 in file order (a header counts as row 1). For
    classification the label cell is either an integer class index or, when
    ``schema.label_values`` is set, one of those strings.

    Raises:
      FileNotFoundError, RaggedRowError, NonNumericCellError, UnknownLabelError
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"CSV file not found: {path}")
    with path.open(newline="", encoding="utf-8") as f:
        rows = list(csv.reader(f))
    names = None
    first_row = 1
    if schema.has_header and rows:
        names = rows[0]
        rows = rows[1:]
        first_row = 2
    rows_with_no = [(first_row + i, r) for i, r in enumerate(rows) if r]
    if not rows_with_no:
        raise CsvError(f"no data rows in {path}")
    arity = len(rows_with_no[0][1])
    label_col = schema.label_column % arity
    feature_cols = (list(schema.feature_columns) if schema.feature_columns is not None
                    else [c for c in range(arity) if c != label_col])
    label_index = ({v: i for i, v in enumerate(schema.label_values)}
                   if schema.label_values is not None else None)

    features = np.empty((len(rows_with_no), len(feature_cols)))
    labels: list = []
    for k, (row_no, row) in enumerate(rows_with_no):
        if len(row) != arity:
            raise RaggedRowError(f"expected {arity} cells, found {len(row)}", row=row_no)
        for j, c in enumerate(feature_cols):
            features[k, j] = _parse_float(row[c], row_no, c)
        cell = row[label_col].strip()
        if schema.task == "classification":
            if label_index is not None:
                if cell not in label_index:
                    raise UnknownLabelError(f"unknown label {cell!r}", row=row_no, column=label_col)
                labels.append(label_index[cell])
            else:
                try:
                    lab = int(cell)
                except ValueError:
                    raise UnknownLabelError(f"label {cell!r} is not a class index",
                                            row=row_no, column=label_col) from None
                if lab < 0 or (schema.n_classes is not None and lab >= schema.n_classes):
                    raise UnknownLabelError(f"label {lab} outside the declared classes",
                                            row=row_no, column=label_col)
                labels.append(lab)
        else:
            labels.append(_parse_float(cell, row_no, label_col))

    if schema.task == "classification":
        lab_arr = np.asarray(labels, dtype=np.int64)
        n_classes = schema.n_classes
        if n_classes is None:
            n_classes = len(label_index) if label_index is not None else int(lab_arr.max()) + 1
    else:
        lab_arr = np.asarray(labels, dtype=np.float64)
        n_classes = None
    feature_names = [names[c] for c in feature_cols] if names else None
    return LabeledDataset(features, lab_arr, n_classes, feature_names)


def _parse_float(cell: str, row: int, column: int) -> float:
    try:
        # float() is locale-independent and accepts only dot decimals.
        return float(cell)
    except ValueError:
        raise NonNumericCellError(f"cannot parse {cell!r} as a number", row=row, column=column) from None


def write_csv(dataset: LabeledDataset, path, header: bool = False) -> None:
    """Write features followed by the label column; floats use ``repr`` for exact round trips."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        if header:
            names = dataset.feature_names or [f"x{i}" for i in range(dataset.features.shape[1])]
            writer.writerow(list(names) + ["label"])
        for x, y in zip(dataset.features, dataset.labels):
            writer.writerow([repr(float(v)) for v in x] + [_format_label(y)])


def _format_label(y) -> str:
    if isinstance(y, (np.integer, int)):
        return str(int(y))
    return repr(float(y))


# Splits ----------------------------------------------------------------------

def split_four_way(n: int, fractions: Sequence[float] = (0.2, 0.2, 0.4, 0.2),
                   seed: int = 0) -> SplitPlan:
    """Cut a seeded permutation of ``range(n)`` into target-train, target-test,
    population and holdout.

    Sizes use floor rounding; when the fractions sum to one the holdout takes
    the remainder so the four parts partition the index set.
    """
    if n < 4:
        raise ValueError("split_four_way needs n >= 4")
    if len(fractions) != 4 or any(f < 0 for f in fractions):
        raise ValueError("need four non-negative fractions")
    total = float(sum(fractions))
    if total > 1.0 + 1e-9:
        raise ValueError(f"fractions sum to {total} > 1")
    sizes = [int(math.floor(f * n + 1e-9)) for f in fractions]
    if abs(total - 1.0) <= 1e-9:
        sizes[3] = n - sum(sizes[:3])
    perm = RngState(seed).child("four_way_split").permutation(n)
    cuts = np.cumsum([0] + sizes)
    parts = [np.sort(perm[cuts[i]:cuts[i + 1]]) for i in range(4)]
    return SplitPlan(*parts, seed=seed)


def sample_reference_subset(population_indices, seed: int) -> np.ndarray:
    """Uniform half of ``population_indices`` (without replacement), sorted."""
    pop = np.asarray(population_indices, dtype=np.int64)
    if pop.size < 2:
        raise ValueError("population needs at least two indices")
    perm = RngState(seed).child("reference_subset").permutation(pop.size)
    return np.sort(pop[perm[: pop.size // 2]])
