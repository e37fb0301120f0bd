"""Binary-classification datasets and the mutable instance database trees point into.

Instances are addressed by stable integer ids. Deleting an id only flips its
alive bit, so other ids keep their rows and lookups stay O(1).
"""

import logging
import math
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from sklearn import model_selection

from errors import (
    DatasetError,
    EmptyDatasetError,
    InvalidParamsError,
    LabelCardinalityError,
    MissingValueError,
    NonNumericValueError,
    UnknownInstanceError,
)

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

SYNTHETIC_INFORMATIVE = 5
SYNTHETIC_REDUNDANT = 5
SYNTHETIC_NOISE = 30
SYNTHETIC_CLUSTERS_PER_CLASS = 2
SYNTHETIC_CLASS_SEP = 1.0
SYNTHETIC_FLIP_PERCENT = 5


class Dataset:
    def __init__(
        self,
        features,
        labels,
        ids: Optional[Sequence[int]] = None,
        feature_names: Optional[Sequence[str]] = None,
        label_classes: Optional[Tuple[str, str]] = None,
    ):
        X = np.array(features, dtype=np.float64, order="C")
        if X.ndim != 2:
            raise DatasetError(f"features must be a 2-D matrix, got shape {X.shape}")
        n, p = X.shape
        y = np.asarray(labels)
        if y.shape != (n,):
            raise DatasetError(f"expected {n} labels, got shape {y.shape}")
        if not np.isfinite(X).all():
            raise DatasetError("feature matrix contains NaN or infinite values")
        if n and not np.isin(y, (0, 1)).all():
            raise LabelCardinalityError("labels must be 0 or 1")

        id_array = np.arange(n, dtype=np.int64) if ids is None else np.array(ids, dtype=np.int64)
        if id_array.shape != (n,):
            raise DatasetError(f"expected {n} ids, got shape {id_array.shape}")
        if n and (id_array.min() < 0 or np.unique(id_array).size != n):
            raise DatasetError("instance ids must be unique non-negative integers")

        self._X = X
        self._y = y.astype(np.int64)
        self._ids = id_array
        self._alive = np.ones(n, dtype=bool)
        self._n_alive = n
        self._lookup = np.full(int(id_array.max()) + 1 if n else 0, -1, dtype=np.int64)
        self._lookup[id_array] = np.arange(n, dtype=np.int64)
        self.feature_names: List[str] = (
            list(feature_names) if feature_names is not None else [f"x{j}" for j in range(p)]
        )
        if len(self.feature_names) != p:
            raise DatasetError(f"expected {p} feature names, got {len(self.feature_names)}")
        # Raw (negative, positive) label values the 0/1 labels came from.
        self.label_classes: Tuple[str, str] = tuple(str(c) for c in label_classes) if label_classes is not None else ("0", "1")
        for array in (self._X, self._y, self._ids):
            array.flags.writeable = False

    def __len__(self) -> int:
        return self._n_alive

    def __repr__(self) -> str:
        return f"Dataset(n={self.n}, p={self.p}, positive_fraction={self.positive_fraction:.3f})"

    @property
    def n(self) -> int:
        return self._n_alive

    @property
    def p(self) -> int:
        return self._X.shape[1]

    @property
    def ids(self) -> np.ndarray:
        return self._ids[self._alive]

    @property
    def features(self) -> np.ndarray:
        return self._X[self._alive]

    @property
    def labels(self) -> np.ndarray:
        return self._y[self._alive]

    # Raw arrays include deleted rows; index them with rows_for().
    @property
    def raw_features(self) -> np.ndarray:
        return self._X

    @property
    def raw_labels(self) -> np.ndarray:
        return self._y

    @property
    def raw_ids(self) -> np.ndarray:
        return self._ids

    @property
    def positive_fraction(self) -> float:
        return float(self.labels.mean()) if self.n else 0.0

    def _lookup_rows(self, ids) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        id_array = np.atleast_1d(np.asarray(ids, dtype=np.int64))
        in_range = (id_array >= 0) & (id_array < self._lookup.size)
        rows = np.full(id_array.shape, -1, dtype=np.int64)
        rows[in_range] = self._lookup[id_array[in_range]]
        known = rows >= 0
        known[known] = self._alive[rows[known]]
        return id_array, rows, known

    def missing(self, ids: Iterable[int]) -> List[int]:
        """Ids that are not (or no longer) present."""
        id_array, _, known = self._lookup_rows(list(ids))
        return sorted(set(id_array[~known].tolist()))

    def contains(self, instance_id: int) -> bool:
        return not self.missing([instance_id])

    def rows_for(self, ids) -> np.ndarray:
        id_array, rows, known = self._lookup_rows(ids)
        if not known.all():
            raise UnknownInstanceError(id_array[~known].tolist())
        return rows

    def locate(self, ids) -> np.ndarray:
        """Rows for ids, -1 where an id is unknown or deleted."""
        _, rows, known = self._lookup_rows(ids)
        return np.where(known, rows, -1)

    def row_of(self, instance_id: int) -> int:
        return int(self.rows_for([instance_id])[0])

    def remove(self, ids: Iterable[int]) -> None:
        """Drop instances from the database; their ids are never reused."""
        rows = np.unique(self.rows_for(list(ids)))
        self._alive[rows] = False
        self._n_alive -= rows.size

    def subset(self, ids) -> "Dataset":
        rows = self.rows_for(ids)
        return Dataset(self._X[rows], self._y[rows], self._ids[rows], self.feature_names, self.label_classes)

    def without(self, ids: Iterable[int]) -> "Dataset":
        drop = self.rows_for(list(ids))
        keep = self._alive.copy()
        keep[drop] = False
        return Dataset(self._X[keep], self._y[keep], self._ids[keep], self.feature_names, self.label_classes)

    def compact(self) -> "Dataset":
        """Copy holding only alive rows, same ids."""
        return self.subset(self.ids)

    def copy(self) -> "Dataset":
        clone = Dataset(self._X, self._y, self._ids, self.feature_names, self.label_classes)
        clone._alive = self._alive.copy()
        clone._n_alive = self._n_alive
        return clone


def _encode_labels(column: pd.Series, positive_label: Optional[str]) -> Tuple[np.ndarray, Tuple[str, str]]:
    values = column.astype(str).str.strip()
    distinct = sorted(values.unique().tolist())
    if len(distinct) != 2:
        raise LabelCardinalityError(
            f"label column '{column.name}' must have exactly two distinct values, found {len(distinct)}: {distinct[:5]}"
        )
    numeric = pd.to_numeric(pd.Series(distinct), errors="coerce")
    if positive_label is not None:
        if str(positive_label) not in distinct:
            raise LabelCardinalityError(f"positive label '{positive_label}' not among {distinct}")
        positive = str(positive_label)
    elif numeric.notna().all() and set(numeric.tolist()) == {0.0, 1.0}:
        positive = distinct[int(numeric.tolist().index(1.0))]
    else:
        positive = distinct[1]
    negative = distinct[0] if distinct[1] == positive else distinct[1]
    return (values == positive).to_numpy(dtype=np.int64), (negative, positive)


def encode_labels(column: pd.Series, classes: Tuple[str, str] = ("0", "1")) -> np.ndarray:
    """Map raw label values onto 0/1 using the (negative, positive) pair seen at load time."""
    values = column.astype(str).str.strip()
    negative, positive = classes
    encoded = np.full(len(values), -1, dtype=np.int64)
    encoded[(values == negative).to_numpy()] = 0
    encoded[(values == positive).to_numpy()] = 1

    # "1.0" in a file whose training labels were "1"
    pending = encoded < 0
    if pending.any():
        numeric = pd.to_numeric(values[pending], errors="coerce").to_numpy()
        for value, target in ((negative, 0), (positive, 1)):
            as_number = pd.to_numeric(pd.Series([value]), errors="coerce").iloc[0]
            if pd.notna(as_number):
                hits = np.flatnonzero(pending)[numeric == as_number]
                encoded[hits] = target
    unknown = np.flatnonzero(encoded < 0)
    if unknown.size:
        raise LabelCardinalityError(
            f"label {values.iloc[int(unknown[0])]!r} in column '{column.name}' is neither "
            f"'{negative}' nor '{positive}' (data row {int(unknown[0]) + 1})"
        )
    return encoded


def read_frame(path: PathLike) -> pd.DataFrame:
    """Read a UTF-8, comma-separated file with a header row into a frame."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"data file not found: {path}")
    try:
        return pd.read_csv(path, encoding="utf-8", skipinitialspace=True)
    except UnicodeDecodeError as exc:
        raise DatasetError(f"{path.name} is not valid UTF-8: {exc.reason} at byte {exc.start}") from exc
    except pd.errors.EmptyDataError as exc:
        raise DatasetError(f"{path.name} has no header row") from exc
    except pd.errors.ParserError as exc:
        raise DatasetError(f"cannot parse {path.name}: {exc}") from exc


def encode_frame(
    frame: pd.DataFrame,
    categorical_columns: Sequence[str] = (),
    feature_names: Optional[Sequence[str]] = None,
) -> Tuple[np.ndarray, List[str]]:
    """One-hot encode categorical columns and pass numeric/binary columns through.

    With `feature_names` the result is aligned to an existing layout
    (prediction time); unseen categories become all-zero rows.
    """
    categorical = set(categorical_columns)
    unknown = categorical - set(frame.columns)
    if unknown:
        raise DatasetError(f"categorical column(s) not in data: {sorted(unknown)}")

    blocks: List[pd.DataFrame] = []
    for name in frame.columns:
        column = frame[name]
        if name in categorical:
            blocks.append(pd.get_dummies(column.astype(str), prefix=name, prefix_sep="=", dtype=np.float64))
            continue
        numeric = pd.to_numeric(column, errors="coerce")
        bad = numeric.isna() & column.notna()
        if bad.any():
            row = int(np.flatnonzero(bad.to_numpy())[0])
            raise NonNumericValueError(
                f"non-numeric value {column.iloc[row]!r} in numeric column '{name}' (data row {row + 1})"
            )
        blocks.append(numeric.astype(np.float64).to_frame(name))

    encoded = pd.concat(blocks, axis=1) if blocks else pd.DataFrame(index=frame.index)
    if feature_names is not None:
        absent = [c for c in frame.columns if c not in categorical and c not in feature_names]
        if absent:
            raise DatasetError(f"column(s) not used by the model: {absent}")
        encoded = encoded.reindex(columns=list(feature_names), fill_value=0.0)
    return encoded.to_numpy(dtype=np.float64), [str(c) for c in encoded.columns]


def load_csv(
    path: PathLike,
    label_column: str,
    categorical_columns: Sequence[str] = (),
    positive_label: Optional[str] = None,
) -> Dataset:
    """Load a UTF-8, comma-separated file with a header row."""
    path = Path(path)
    frame = read_frame(path)
    if label_column not in frame.columns:
        raise DatasetError(f"label column '{label_column}' not found in {path.name}")

    missing = frame.columns[frame.isna().any()].tolist()
    if missing:
        raise MissingValueError(f"missing values in column(s) {missing}; impute before loading")

    labels, classes = _encode_labels(frame[label_column], positive_label)
    features, names = encode_frame(frame.drop(columns=[label_column]), categorical_columns)
    dataset = Dataset(features, labels, feature_names=names, label_classes=classes)
    logger.info("Loaded %s: n=%d p=%d positives=%.1f%%", path.name, dataset.n, dataset.p, 100 * dataset.positive_fraction)
    return dataset


def save_csv(dataset: Dataset, path: PathLike, label_column: str = "label") -> None:
    frame = pd.DataFrame(dataset.features, columns=dataset.feature_names)
    frame[label_column] = dataset.labels
    frame.to_csv(path, index=False)


def train_test_split(d: Dataset, train_fraction: float, seed: int) -> Tuple[Dataset, Dataset]:
    """Random disjoint partition with floor(n * f) training instances."""
    if d.n == 0:
        raise EmptyDatasetError("cannot split an empty dataset")
    if not 0.0 < train_fraction < 1.0:
        raise InvalidParamsError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    n_train = int(math.floor(d.n * train_fraction))
    if n_train == 0 or n_train == d.n:
        raise EmptyDatasetError(f"a {train_fraction} split of {d.n} instances leaves one side empty")
    train_ids, test_ids = model_selection.train_test_split(d.ids, train_size=n_train, random_state=seed)
    return d.subset(np.sort(train_ids)), d.subset(np.sort(test_ids))


def synthetic_arrays(n: int, seed: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Features, pre-flip labels and final labels of the synthetic generator.

    Gaussian clusters sit on distinct vertices of a 5-d hypercube, two per
    class; 5 redundant columns are random linear mixes of the informative
    ones and 30 are pure noise. Exactly floor(5% of n) labels are flipped.
    """
    if n < 1:
        raise EmptyDatasetError("synthetic dataset needs n >= 1")
    rng = np.random.default_rng(seed)
    n_clusters = 2 * SYNTHETIC_CLUSTERS_PER_CLASS

    vertices = rng.choice(2 ** SYNTHETIC_INFORMATIVE, size=n_clusters, replace=False)
    bits = (vertices[:, None] >> np.arange(SYNTHETIC_INFORMATIVE)) & 1
    centroids = (2.0 * bits - 1.0) * SYNTHETIC_CLASS_SEP

    cluster = np.arange(n) % n_clusters
    clean = (cluster >= SYNTHETIC_CLUSTERS_PER_CLASS).astype(np.int64)

    informative = rng.standard_normal((n, SYNTHETIC_INFORMATIVE))
    for c in range(n_clusters):
        members = cluster == c
        covariance = 2.0 * rng.random((SYNTHETIC_INFORMATIVE, SYNTHETIC_INFORMATIVE)) - 1.0
        informative[members] = informative[members] @ covariance + centroids[c]
    mixing = 2.0 * rng.random((SYNTHETIC_INFORMATIVE, SYNTHETIC_REDUNDANT)) - 1.0
    redundant = informative @ mixing
    noise = rng.standard_normal((n, SYNTHETIC_NOISE))

    X = np.hstack([informative, redundant, noise])
    order = rng.permutation(n)
    X, clean = X[order], clean[order]

    y = clean.copy()
    flipped = rng.choice(n, size=n * SYNTHETIC_FLIP_PERCENT // 100, replace=False)
    y[flipped] = 1 - y[flipped]
    return X, clean, y


def make_synthetic(n: int, seed: int) -> Dataset:
    X, _, y = synthetic_arrays(n, seed)
    names = (
        [f"informative_{j}" for j in range(SYNTHETIC_INFORMATIVE)]
        + [f"redundant_{j}" for j in range(SYNTHETIC_REDUNDANT)]
        + [f"noise_{j}" for j in range(SYNTHETIC_NOISE)]
    )
    return Dataset(X, y, feature_names=names)
