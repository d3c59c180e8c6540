"""Dataset ingestion for the logistic-regression experiments: LIBSVM, CSV and a synthetic blob set."""
from __future__ import annotations

import csv
import os

import numpy as np


class DataFormatError(ValueError):
    """Malformed input; the message carries the file and line number."""


def _open_lines(path):
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    with open(path, encoding="utf-8") as fh:
        return fh.read().splitlines()


def _number(token, path, lineno, what):
    try:
        return float(token)
    except ValueError:
        raise DataFormatError(f"{path}:{lineno}: bad {what} {token!r}") from None


def load_libsvm(path, n_features=None):
    """Read ``label idx:value ...`` lines with 1-based indices into a dense matrix.

    ``n_features`` fixes the width; otherwise the largest index seen is used.
    """
    rows, labels = [], []
    width = 0
    for lineno, line in enumerate(_open_lines(path), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        labels.append(_number(tokens[0], path, lineno, "label"))
        entries = {}
        for tok in tokens[1:]:
            idx, sep, val = tok.partition(":")
            if not sep or not idx.isdigit() or int(idx) < 1:
                raise DataFormatError(f"{path}:{lineno}: bad entry {tok!r}, expected index:value with index >= 1")
            j = int(idx) - 1
            if j in entries:
                raise DataFormatError(f"{path}:{lineno}: duplicate index {idx}")
            entries[j] = _number(val, path, lineno, "value")
            width = max(width, j + 1)
        rows.append(entries)
    if not rows:
        raise DataFormatError(f"{path}: no data rows")
    if n_features is not None:
        if width > n_features:
            raise DataFormatError(f"{path}: index {width} exceeds n_features={n_features}")
        width = n_features
    X = np.zeros((len(rows), width))
    for r, entries in enumerate(rows):
        for j, v in entries.items():
            X[r, j] = v
    return X, _as_labels(np.array(labels))


def load_csv(path, label_column=-1):
    """Read a numeric CSV; one column holds the label. A non-numeric first row is taken as a header.

    ``label_column`` is a column index (negative counts from the end) or a header name.
    """
    with open(path, encoding="utf-8", newline="") as fh:
        table = [row for row in csv.reader(fh)]
    numbered = [(i, row) for i, row in enumerate(table, 1) if row and any(c.strip() for c in row)]
    if not numbered:
        raise DataFormatError(f"{path}: no data rows")
    header = None
    first = numbered[0][1]
    try:
        [float(c) for c in first]
    except ValueError:
        header = [c.strip() for c in first]
        numbered = numbered[1:]
        if not numbered:
            raise DataFormatError(f"{path}: header but no data rows")
    width = len(numbered[0][1])
    if isinstance(label_column, str):
        if header is None or label_column not in header:
            raise DataFormatError(f"{path}: no column named {label_column!r}")
        label_column = header.index(label_column)
    if not -width <= label_column < width:
        raise DataFormatError(f"{path}: label column {label_column} out of range for {width} columns")
    label_column %= width
    values = np.empty((len(numbered), width))
    for r, (lineno, row) in enumerate(numbered):
        if len(row) != width:
            raise DataFormatError(f"{path}:{lineno}: expected {width} fields, got {len(row)}")
        for c, cell in enumerate(row):
            values[r, c] = _number(cell.strip(), path, lineno, "field")
    labels = values[:, label_column]
    features = np.delete(values, label_column, axis=1)
    return features, _as_labels(labels)


def write_csv(path, features, labels, label_column=-1):
    """Inverse of :func:`load_csv` (no header); floats are written with ``repr`` so they round-trip."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    width = features.shape[1] + 1
    col = label_column % width
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        for row, lab in zip(features, labels):
            cells = [repr(float(v)) for v in row]
            cells.insert(col, str(lab.item() if hasattr(lab, "item") else lab))
            writer.writerow(cells)


def _as_labels(raw):
    if np.all(np.mod(raw, 1) == 0):
        return raw.astype(np.int64)
    return raw


def encode_labels(labels):
    """Map arbitrary labels to class indices 0..C-1; returns (codes, classes)."""
    classes, codes = np.unique(np.asarray(labels), return_inverse=True)
    return codes.astype(np.int64), classes


def normalize(features, mean=0.5, std=0.5, stats=None):
    """Per-feature affine map to the given mean and standard deviation.

    ``stats=(mu, sd)`` reuses training statistics (for a test split). Constant
    features map to ``mean``. Returns (normalized, (mu, sd)).
    """
    X = np.asarray(features, dtype=np.float64)
    mu, sd = (X.mean(axis=0), X.std(axis=0)) if stats is None else stats
    safe = np.where(sd > 0, sd, 1.0)
    out = np.where(sd > 0, (X - mu) / safe * std + mean, mean)
    return out, (mu, sd)


def train_test_split(features, labels, test_fraction=0.2, seed=0):
    """Seeded shuffle, then the last ``test_fraction`` of rows become the test set."""
    n = len(labels)
    order = np.random.default_rng(seed).permutation(n)
    n_test = int(round(test_fraction * n))
    if n - n_test < 1:
        raise ValueError("split leaves no training rows")
    tr, te = order[: n - n_test], order[n - n_test:]
    return features[tr], labels[tr], features[te], labels[te]


def make_blobs(n_samples=2000, n_features=20, n_classes=4, seed=0, spread=0.3):
    """Gaussian class clusters with unit noise; centers are ``spread`` times standard normal."""
    rng = np.random.default_rng(seed)
    centers = spread * rng.standard_normal((n_classes, n_features))
    labels = rng.integers(0, n_classes, size=n_samples)
    features = centers[labels] + rng.standard_normal((n_samples, n_features))
    return features, labels.astype(np.int64)
