"""Flow-statistics ingestion: CSV loading, min-max scaling, splits, synthetic data."""
import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (EmptyDatasetError, InsufficientDataError, ParseError,
                     SchemaError)

DEFAULT_FEATURE_COUNT = 48


@dataclass(eq=False)
class FlowRecord:
    """One flow: a vector of statistical features and a dense class id."""

    features: np.ndarray
    label_id: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)

    def same_as(self, other):
        return (self.label_id == other.label_id
                and self.features.shape == other.features.shape
                and np.array_equal(self.features.view(np.uint64), other.features.view(np.uint64)))


@dataclass
class DatasetMeta:
    class_names: list
    feature_names: list
    per_feature_min: np.ndarray
    per_feature_max: np.ndarray
    counts_per_class: np.ndarray

    @property
    def class_count(self):
        return len(self.class_names)

    @property
    def feature_count(self):
        return len(self.feature_names)

    def to_dict(self):
        return {
            "class_names": list(self.class_names),
            "feature_names": list(self.feature_names),
            "per_feature_min": self.per_feature_min.tolist(),
            "per_feature_max": self.per_feature_max.tolist(),
            "counts_per_class": self.counts_per_class.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(list(d["class_names"]), list(d["feature_names"]),
                   np.asarray(d["per_feature_min"], dtype=np.float64),
                   np.asarray(d["per_feature_max"], dtype=np.float64),
                   np.asarray(d["counts_per_class"], dtype=np.int64))


@dataclass
class SplitSpec:
    train_fraction: float = 0.8
    val_fraction: float = 0.1
    test_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        fr = (self.train_fraction, self.val_fraction, self.test_fraction)
        if min(fr) <= 0:
            raise ValueError(f"split fractions must be positive, got {fr}")
        if abs(math.fsum(fr) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must sum to 1, got {math.fsum(fr)}")


def as_arrays(records):
    """Stack records into an (n, F) float64 matrix and an (n,) label vector."""
    if not records:
        return np.zeros((0, 0)), np.zeros(0, dtype=np.int64)
    X = np.stack([r.features for r in records])
    y = np.array([r.label_id for r in records], dtype=np.int64)
    return X, y


def compute_meta(records, class_names, feature_names):
    X, y = as_arrays(records)
    if len(records) == 0:
        raise EmptyDatasetError("cannot compute statistics of an empty dataset")
    return DatasetMeta(
        class_names=list(class_names),
        feature_names=list(feature_names),
        per_feature_min=X.min(axis=0),
        per_feature_max=X.max(axis=0),
        counts_per_class=np.bincount(y, minlength=len(class_names)).astype(np.int64),
    )


def load_csv(path, label_column="label", feature_columns=None):
    """Read a header-first, comma-separated flow table.

    Labels become dense ids in order of first appearance. When
    ``feature_columns`` is None every column except the label is used.
    Rows are reported with 1-based file line numbers (header is line 1).
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise EmptyDatasetError(f"{path}: file has no header") from None
        header = [h.strip() for h in header]
        if label_column not in header:
            raise SchemaError(f"{path}: missing label column {label_column!r}")
        if feature_columns is None:
            feature_columns = [h for h in header if h != label_column]
        missing = [c for c in feature_columns if c not in header]
        if missing:
            raise SchemaError(f"{path}: missing column {missing[0]!r}")
        label_idx = header.index(label_column)
        feat_idx = [header.index(c) for c in feature_columns]

        class_ids = {}
        records = []
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(line_no, "<row>", ",".join(row))
            feats = np.empty(len(feat_idx))
            for k, (col, j) in enumerate(zip(feature_columns, feat_idx)):
                cell = row[j].strip()
                try:
                    value = float(cell)
                except ValueError:
                    raise ParseError(line_no, col, cell) from None
                if not math.isfinite(value):
                    raise ParseError(line_no, col, cell)
                feats[k] = value
            label = row[label_idx].strip()
            if label not in class_ids:
                class_ids[label] = len(class_ids)
            records.append(FlowRecord(feats, class_ids[label]))

    if not records:
        raise EmptyDatasetError(f"{path}: no data rows")
    return records, compute_meta(records, list(class_ids), feature_columns)


def write_csv(path, records, meta, label_column="label"):
    """Write records in the layout ``load_csv`` reads; floats use repr so they round-trip."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(list(meta.feature_names) + [label_column])
        for r in records:
            w.writerow([repr(float(v)) for v in r.features] + [meta.class_names[r.label_id]])


def normalize(records, meta):
    """Min-max scale each feature to [0, 1] with the given (training) statistics.

    Constant features map to 0 and out-of-range values clamp.
    """
    lo = meta.per_feature_min
    span = meta.per_feature_max - lo
    const = span == 0
    safe = np.where(const, 1.0, span)
    out = []
    for r in records:
        z = np.clip((r.features - lo) / safe, 0.0, 1.0)
        z[const] = 0.0
        out.append(FlowRecord(z, r.label_id))
    return out


def split_sizes(n, spec):
    """Partition sizes: floor for train and validation, remainder to test."""
    # the epsilon guards against products like 0.1 * 10 landing just under an integer
    n_train = int(math.floor(n * spec.train_fraction + 1e-9))
    n_val = int(math.floor(n * spec.val_fraction + 1e-9))
    return n_train, n_val, n - n_train - n_val


def split(records, spec=None):
    spec = spec or SplitSpec()
    n = len(records)
    if n < 3:
        raise InsufficientDataError(f"need at least 3 records to split, got {n}")
    n_train, n_val, _ = split_sizes(n, spec)
    order = np.random.default_rng(spec.seed).permutation(n)
    shuffled = [records[i] for i in order]
    return shuffled[:n_train], shuffled[n_train:n_train + n_val], shuffled[n_train + n_val:]


def make_synthetic(classes, per_class, feature_count=DEFAULT_FEATURE_COUNT, seed=0,
                   noise=0.05):
    """Separable desk-scale stand-in for a flow-statistics table.

    Each feature gets a random magnitude (1 to 10^4, like mixed byte/time
    units); each class gets a random mean vector inside those ranges and
    samples are that mean plus Gaussian noise of ``noise`` times the scale.
    """
    if classes < 2:
        raise ValueError(f"need at least 2 classes, got {classes}")
    if per_class < 1:
        raise ValueError(f"need at least 1 sample per class, got {per_class}")
    rng = np.random.default_rng(seed)
    scale = 10.0 ** rng.uniform(0, 4, size=feature_count)
    means = rng.uniform(0, 1, size=(classes, feature_count)) * scale
    records = []
    for c in range(classes):
        samples = means[c] + noise * scale * rng.standard_normal((per_class, feature_count))
        records.extend(FlowRecord(s, c) for s in samples)
    class_names = [f"class_{c:03d}" for c in range(classes)]
    feature_names = [f"f{j:02d}" for j in range(feature_count)]
    return records, compute_meta(records, class_names, feature_names)


@dataclass
class PreparedSplits:
    """Normalized train/val/test records plus the training-split statistics."""

    train: list
    val: list
    test: list
    meta: DatasetMeta
    sizes: tuple = field(default=())


def prepare(records, meta, spec=None):
    """Split, fit min-max statistics on the training part only, and scale all three."""
    train, val, test = split(records, spec)
    train_meta = compute_meta(train, meta.class_names, meta.feature_names)
    return PreparedSplits(normalize(train, train_meta), normalize(val, train_meta),
                          normalize(test, train_meta), train_meta,
                          (len(train), len(val), len(test)))
