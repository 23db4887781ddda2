"""Labeled time-series datasets: delimited-file IO, synthetic generators, splits.

Delimited files follow the UCR archive convention: one series per row, class
label in the first field.  A multivariate instance spans ``channels``
consecutive rows that share one label.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "LabeledDataset",
    "DatasetFormatError",
    "EmptyFileError",
    "RaggedRowsError",
    "NonNumericFieldError",
    "UnknownLabelError",
    "load_delimited",
    "write_delimited",
    "gen_cbf",
    "gen_synthetic_control",
    "znormalize",
    "split",
]

SPLITS = ("train", "val", "test")


class DatasetFormatError(ValueError):
    pass


class EmptyFileError(DatasetFormatError):
    pass


class RaggedRowsError(DatasetFormatError):
    pass


class NonNumericFieldError(DatasetFormatError):
    pass


class UnknownLabelError(DatasetFormatError):
    pass


@dataclass
class LabeledDataset:
    """``X`` has shape ``(N, n, T)``; ``y`` holds 0-based class ids."""

    X: np.ndarray
    y: np.ndarray
    name: str = "dataset"
    class_count: int | None = None
    splits: np.ndarray | None = None
    label_map: dict = field(default_factory=dict)
    constant_channels: list = field(default_factory=list)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.intp)
        if self.X.ndim != 3:
            raise ValueError(f"X must be (N, n, T), got {self.X.shape}")
        if len(self.X) != len(self.y):
            raise ValueError("X and y lengths differ")
        if self.class_count is None:
            self.class_count = int(self.y.max()) + 1 if len(self.y) else 0
        if len(self.y) and (self.y.min() < 0 or self.y.max() >= self.class_count):
            raise ValueError("labels outside [0, class_count)")
        if self.splits is None:
            self.splits = np.full(len(self.y), "train", dtype=object)
        self.splits = np.asarray(self.splits, dtype=object)

    def __len__(self):
        return len(self.y)

    @property
    def shape(self) -> tuple[int, int]:
        return self.X.shape[1:]

    def subset(self, which) -> "LabeledDataset":
        """Instances tagged with split ``which`` (or selected by a mask/index array)."""
        if isinstance(which, str):
            if which not in SPLITS:
                raise ValueError(f"unknown split {which!r}")
            idx = np.flatnonzero(self.splits == which)
        else:
            idx = np.asarray(which)
        return LabeledDataset(self.X[idx], self.y[idx], f"{self.name}", self.class_count,
                              self.splits[idx], dict(self.label_map))

    def arrays(self, which: str):
        sub = self.subset(which)
        return sub.X, sub.y


# -- delimited files --------------------------------------------------------


def _sniff(line: str) -> str | None:
    if "\t" in line:
        return "\t"
    if "," in line:
        return ","
    return None


def load_delimited(path, delimiter: str | None = None, channels: int = 1,
                   label_map: dict | None = None, name: str | None = None) -> LabeledDataset:
    """Read a label-first delimited file.

    ``delimiter=None`` detects tab or comma and falls back to whitespace.
    Labels are remapped to contiguous ids sorted by their original value; pass
    ``label_map`` (original label string -> id) from a training file to load a
    test file with the same mapping.
    """
    path = Path(path)
    text = path.read_text()
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise EmptyFileError(f"{path}: no data rows")
    delimiter = delimiter if delimiter is not None else _sniff(lines[0])
    if delimiter is None:
        rows = [ln.split() for ln in lines]
    else:
        rows = [[f.strip() for f in r] for r in csv.reader(lines, delimiter=delimiter)]
    width = len(rows[0])
    for i, r in enumerate(rows):
        if len(r) != width:
            raise RaggedRowsError(f"{path}: row {i + 1} has {len(r)} fields, expected {width}")
    if width < 2:
        raise DatasetFormatError(f"{path}: rows need a label and at least one value")
    if len(rows) % channels:
        raise RaggedRowsError(f"{path}: {len(rows)} rows is not a multiple of {channels} channels")
    raw_labels = []
    values = np.empty((len(rows), width - 1))
    for i, r in enumerate(rows):
        try:
            values[i] = [float(v) for v in r[1:]]
            lab = float(r[0])
        except ValueError:
            raise NonNumericFieldError(f"{path}: non-numeric field in row {i + 1}") from None
        raw_labels.append(_label_key(lab))
    X = values.reshape(-1, channels, width - 1)
    inst_labels = raw_labels[::channels]
    for i in range(len(inst_labels)):
        block = raw_labels[i * channels:(i + 1) * channels]
        if len(set(block)) != 1:
            raise DatasetFormatError(f"{path}: instance {i} has inconsistent labels across channels")
    if label_map is None:
        label_map = {lab: k for k, lab in enumerate(sorted(set(inst_labels), key=float))}
    else:
        label_map = {str(k): int(v) for k, v in label_map.items()}
        unknown = sorted(set(inst_labels) - set(label_map), key=float)
        if unknown:
            raise UnknownLabelError(f"{path}: labels {unknown} are not in the training label map")
    y = np.array([label_map[lab] for lab in inst_labels])
    return LabeledDataset(X, y, name or path.stem, max(label_map.values()) + 1, None, label_map)


def _label_key(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else repr(float(v))


def write_delimited(ds: LabeledDataset, path, delimiter: str = ",") -> Path:
    """Write ``ds`` with 17 significant digits so a reload is bit-exact."""
    path = Path(path)
    inverse = {v: k for k, v in ds.label_map.items()} if ds.label_map else {}
    with open(path, "w") as fh:
        for x, lab in zip(ds.X, ds.y):
            label = inverse.get(int(lab), str(int(lab)))
            for ch in x:
                fh.write(delimiter.join([label] + ["%.17g" % v for v in ch]) + "\n")
    return path


# -- generators -------------------------------------------------------------


def gen_cbf(count_per_class: int, T: int = 128, seed: int = 0) -> LabeledDataset:
    """Cylinder (0), bell (1) and funnel (2) series of shape ``(1, T)``.

    Each instance is ``(6 + eta) * shape(t) + noise`` with ``eta``, noise
    ~ N(0, 1), onset ``a ~ U[T/8, T/4]`` and duration ``b - a ~ U[T/4, 3T/4]``.
    """
    if count_per_class < 1:
        raise ValueError("count_per_class must be >= 1")
    rng = np.random.default_rng(seed)
    t = np.arange(T, dtype=np.float64)
    X = np.empty((3 * count_per_class, 1, T))
    y = np.repeat(np.arange(3), count_per_class)
    for i, label in enumerate(y):
        a = rng.integers(T // 8, T // 4 + 1)
        b = a + rng.integers(T // 4, 3 * T // 4 + 1)
        eta = rng.standard_normal()
        noise = rng.standard_normal(T)
        X[i, 0] = (6.0 + eta) * cbf_template(label, t, a, b) + noise
    return LabeledDataset(X, y, "CBF", 3)


def cbf_template(label: int, t, a, b) -> np.ndarray:
    """Noiseless unit-amplitude cylinder/bell/funnel profile on ``[a, b]``."""
    t = np.asarray(t, dtype=np.float64)
    window = ((t >= a) & (t <= b)).astype(np.float64)
    if label == 0:
        return window
    if label == 1:
        return window * (t - a) / (b - a)
    if label == 2:
        return window * (b - t) / (b - a)
    raise ValueError(f"CBF has classes 0..2, got {label}")


SC_CLASSES = ("normal", "cyclic", "increasing", "decreasing", "upward_shift", "downward_shift")


def gen_synthetic_control(count_per_class: int, T: int = 30, seed: int = 0) -> LabeledDataset:
    """Six synthetic-control chart patterns of shape ``(1, T)`` (labels in ``SC_CLASSES`` order).

    Base signal ``30 + 2 r`` with ``r ~ U[-3, 3]`` per step; cycles have amplitude
    in [10, 15] and period in [10, 15]; trends have slope in [0.2, 0.5]; shifts
    have magnitude in [7.5, 20] starting in the middle third.
    """
    if count_per_class < 1:
        raise ValueError("count_per_class must be >= 1")
    rng = np.random.default_rng(seed)
    t = np.arange(T, dtype=np.float64)
    X = np.empty((6 * count_per_class, 1, T))
    y = np.repeat(np.arange(6), count_per_class)
    for i, label in enumerate(y):
        s = 30.0 + 2.0 * rng.uniform(-3, 3, T)
        if label == 1:
            s += rng.uniform(10, 15) * np.sin(2 * np.pi * t / rng.uniform(10, 15))
        elif label in (2, 3):
            slope = rng.uniform(0.2, 0.5)
            s += slope * t if label == 2 else -slope * t
        elif label in (4, 5):
            start = rng.integers(T // 3, 2 * T // 3 + 1)
            k = rng.uniform(7.5, 20)
            s += (k if label == 4 else -k) * (t >= start)
        X[i, 0] = s
    return LabeledDataset(X, y, "SC", 6)


# -- preprocessing ----------------------------------------------------------


def znormalize(ds: LabeledDataset) -> LabeledDataset:
    """Per-instance, per-channel z-normalization.

    Constant channels are centred but not scaled; their ``(instance, channel)``
    indices are recorded in ``constant_channels``.
    """
    mu = ds.X.mean(axis=-1, keepdims=True)
    sd = ds.X.std(axis=-1, keepdims=True)
    flat = sd[..., 0] <= 1e-12 * np.maximum(1.0, np.abs(mu[..., 0]))
    X = (ds.X - mu) / np.where(flat[..., None], 1.0, sd)
    constant = [tuple(map(int, ij)) for ij in np.argwhere(flat)]
    if constant:
        warnings.warn(f"{len(constant)} constant channel(s) left unscaled", stacklevel=2)
    return LabeledDataset(X, ds.y.copy(), ds.name, ds.class_count, ds.splits.copy(),
                          dict(ds.label_map), constant)


def split(ds: LabeledDataset, fractions=(0.5, 0.0, 0.5), seed: int = 0) -> LabeledDataset:
    """Stratified train/val/test assignment.

    Per class, counts are the floor of each fraction times the class size with
    leftover instances given to the largest remainders.
    """
    fractions = np.asarray(fractions, dtype=np.float64)
    if fractions.shape != (3,) or np.any(fractions < 0) or abs(fractions.sum() - 1.0) > 1e-9:
        raise ValueError(f"fractions must be three nonnegative numbers summing to 1, got {fractions}")
    rng = np.random.default_rng(seed)
    tags = np.empty(len(ds), dtype=object)
    for c in range(ds.class_count):
        idx = np.flatnonzero(ds.y == c)
        if len(idx) == 0:
            continue
        idx = idx[rng.permutation(len(idx))]
        exact = fractions * len(idx)
        counts = np.floor(exact).astype(int)
        for j in np.argsort(-(exact - counts), kind="stable")[: len(idx) - counts.sum()]:
            counts[j] += 1
        tags[idx] = np.repeat(np.array(SPLITS, dtype=object), counts)
    return LabeledDataset(ds.X, ds.y, ds.name, ds.class_count, tags, dict(ds.label_map),
                          list(ds.constant_channels))
