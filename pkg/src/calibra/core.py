"""Probability-simplex primitives and labeled-prediction containers.

Probability vectors are plain float64 numpy arrays validated against the
simplex (entries >= 0, sum == 1 within tolerance).  Logit vectors are
arbitrary finite arrays and only ever enter through `softmax`.  Datasets
hold an (N, n) prediction matrix plus an (N,) integer label vector.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import InitVar, dataclass

import numpy as np

# Internal construction tolerance for simplex membership.
SIMPLEX_ATOL = 1e-9
# Looser tolerance applied when ingesting external files; rows inside it
# are renormalized, rows outside it are rejected.
INGEST_ATOL = 1e-6


class ValidationError(ValueError):
    """An input violates a container invariant."""


class ParseError(ValueError):
    """Malformed serialized input; carries the offending 1-based line number."""

    def __init__(self, message, line=None):
        self.line = line
        super().__init__(message if line is None else f"line {line}: {message}")


def decimal17(x) -> str:
    """Shortest decimal string that round-trips a float64 exactly."""
    return format(float(x), ".17g")


def digest_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def as_prob_matrix(values, atol=SIMPLEX_ATOL, renormalize=False) -> np.ndarray:
    """Validate (and optionally renormalize) rows as probability vectors.

    Accepts a single vector or a matrix of row vectors.  Entries must be
    finite, >= -atol, and each row must sum to 1 within atol.  With
    `renormalize` the rows are clipped at zero and rescaled so downstream
    code sees exact unit sums.
    """
    arr = np.asarray(values, dtype=float)
    squeeze = arr.ndim == 1
    if squeeze:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] < 2:
        raise ValidationError("expected vectors with at least two classes")
    if not np.all(np.isfinite(arr)):
        raise ValidationError("probabilities must be finite")
    if np.any(arr < -atol):
        raise ValidationError("negative probability entry")
    sums = arr.sum(axis=1)
    off = np.abs(sums - 1.0)
    if np.any(off > atol):
        bad = int(np.argmax(off))
        raise ValidationError(f"row {bad} sums to {sums[bad]!r}, not 1")
    if renormalize:
        arr = np.clip(arr, 0.0, None)
        arr = arr / arr.sum(axis=1, keepdims=True)
    return arr[0] if squeeze else arr


def softmax(logits) -> np.ndarray:
    """Shift-invariant softmax along the last axis.

    Requires finite logits; the shift by the row maximum keeps the
    exponentials in range for any finite input.
    """
    z = np.asarray(logits, dtype=float)
    if z.shape[-1] < 1:
        raise ValidationError("empty logit vector")
    if not np.all(np.isfinite(z)):
        raise ValidationError("logits must be finite")
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def one_hot(label, n_classes) -> np.ndarray:
    label = int(label)
    if not 0 <= label < n_classes:
        raise IndexError(f"label {label} outside [0, {n_classes})")
    v = np.zeros(n_classes)
    v[label] = 1.0
    return v


def top_label(p) -> tuple[int, float]:
    """Return (argmax index, max probability); ties go to the lowest index."""
    p = np.asarray(p, dtype=float)
    i = int(np.argmax(p))
    return i, float(p[i])


def equal_width_bin_indices(values, m) -> np.ndarray:
    """0-based indices of the partition ((i-1)/m, i/m], i = 1..m.

    A value of exactly 0 is assigned to the first bin.  Shared by the
    sample estimators and the exact enumeration code so both sides agree
    on boundary behavior bit for bit.
    """
    values = np.asarray(values, dtype=float)
    if m < 1:
        raise ValidationError("need at least one bin")
    edges = np.arange(1, m) / m
    return np.digitize(values, edges, right=True)


@dataclass(frozen=True, eq=False)
class LabeledPredictions:
    """(N, n) prediction rows on the simplex plus (N,) integer labels."""

    predictions: np.ndarray
    labels: np.ndarray
    validate: InitVar[bool] = True

    def __post_init__(self, validate):
        preds = np.asarray(self.predictions, dtype=float)
        labels = np.asarray(self.labels)
        if validate:
            preds = as_prob_matrix(preds, atol=SIMPLEX_ATOL).copy()
            if preds.ndim == 1:
                preds = preds[None, :]
            if labels.ndim != 1 or len(labels) != len(preds):
                raise ValidationError("labels must be one integer per row")
            if not np.issubdtype(labels.dtype, np.integer):
                if np.any(labels != np.floor(labels)):
                    raise ValidationError("labels must be integers")
            labels = labels.astype(np.int64)
            if len(preds) == 0:
                raise ValidationError("empty dataset")
            if labels.min() < 0 or labels.max() >= preds.shape[1]:
                raise ValidationError("label outside [0, n_classes)")
        else:
            labels = labels.astype(np.int64, copy=False)
        preds = np.ascontiguousarray(preds)
        preds.flags.writeable = False
        labels.flags.writeable = False
        object.__setattr__(self, "predictions", preds)
        object.__setattr__(self, "labels", labels)

    @property
    def n_items(self) -> int:
        return self.predictions.shape[0]

    @property
    def n_classes(self) -> int:
        return self.predictions.shape[1]

    def top_indices(self) -> np.ndarray:
        return np.argmax(self.predictions, axis=1)

    def top_confidences(self) -> np.ndarray:
        return np.max(self.predictions, axis=1)

    def top_correct(self) -> np.ndarray:
        """Float 0/1 vector marking rows whose argmax hits the label."""
        return (self.top_indices() == self.labels).astype(float)

    def subset(self, indices) -> "LabeledPredictions":
        indices = np.asarray(indices)
        return LabeledPredictions(
            self.predictions[indices], self.labels[indices], validate=False
        )

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.predictions).tobytes())
        h.update(np.ascontiguousarray(self.labels).tobytes())
        return h.hexdigest()


@dataclass(frozen=True, eq=False)
class Split:
    """Disjoint validation/test pair with a shared class count."""

    validation: LabeledPredictions
    test: LabeledPredictions

    def __post_init__(self):
        if self.validation.n_classes != self.test.n_classes:
            raise ValidationError("validation and test class counts differ")


def split_pool(data: LabeledPredictions, n_validation, seed) -> Split:
    """Carve a disjoint validation/test split out of one pool."""
    n_validation = int(n_validation)
    if not 0 < n_validation < data.n_items:
        raise ValidationError("validation size must leave a nonempty test set")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(data.n_items)
    return Split(
        validation=data.subset(perm[:n_validation]),
        test=data.subset(perm[n_validation:]),
    )


def _parse_header(header):
    if header is None:
        raise ParseError("empty file", line=1)
    names = [c.strip() for c in header]
    if len(names) < 3 or names[-1] != "label":
        raise ParseError("expected columns c0..c{n-1},label", line=1)
    for k, name in enumerate(names[:-1]):
        if name != f"c{k}":
            raise ParseError(f"expected column c{k}, found {name!r}", line=1)
    return len(names) - 1


def load_csv(path, fmt="probs") -> LabeledPredictions:
    """Load `c0,...,c{n-1},label` rows as a labeled prediction set.

    fmt="probs" expects simplex rows (renormalized when within 1e-6 of the
    simplex, rejected otherwise); fmt="logits" maps rows through softmax.
    Parse failures report the 1-based line number.
    """
    if fmt not in ("probs", "logits"):
        raise ValidationError(f"unknown format {fmt!r}")
    rows, labels = [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        n = _parse_header(next(reader, None))
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != n + 1:
                raise ParseError(f"expected {n + 1} fields, found {len(row)}", line=lineno)
            try:
                vals = [float(v) for v in row[:-1]]
                label = int(row[-1])
            except ValueError as err:
                raise ParseError(str(err), line=lineno) from None
            if not all(np.isfinite(vals)):
                raise ParseError("non-finite value", line=lineno)
            if not 0 <= label < n:
                raise ValidationError(f"line {lineno}: label {label} outside [0, {n})")
            rows.append(vals)
            labels.append(label)
    if not rows:
        raise ParseError("no data rows", line=2)
    arr = np.asarray(rows, dtype=float)
    if fmt == "logits":
        preds = softmax(arr)
    else:
        try:
            preds = as_prob_matrix(arr, atol=INGEST_ATOL, renormalize=True)
        except ValidationError as err:
            raise ValidationError(f"off-simplex probability row: {err}") from None
    return LabeledPredictions(preds, np.asarray(labels))


def save_csv(data: LabeledPredictions, path) -> None:
    """Serialize with 17 significant digits so a reload is exact."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"c{k}" for k in range(data.n_classes)] + ["label"])
        for row, label in zip(data.predictions, data.labels):
            writer.writerow([decimal17(v) for v in row] + [int(label)])
