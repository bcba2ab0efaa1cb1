"""Dataset synthesis, CSV/unigram ingestion, label masking and batching.

The semi-supervised data model is a feature matrix plus an integer label
column where -1 marks a missing label.  Training code must never read a
-1 as a class index; the guarded accessors below enforce that.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (InsufficientLabels, InvalidInput, InvalidLabel,
                     ParseError)

log = logging.getLogger(__name__)

MISSING = -1
STD_FLOOR = 1e-6


@dataclass
class SSLDataset:
    features: np.ndarray          # (N, D) floats, or (N, V) counts
    labels: np.ndarray            # (N,) ints, -1 = unlabeled
    k: int
    full_labels: np.ndarray | None = None   # pre-masking labels, eval only
    mean_: np.ndarray | None = None
    std_: np.ndarray | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.intp)
        if self.features.ndim != 2 or self.labels.shape != (len(self.features),):
            raise InvalidInput("features must be (N, D) with N labels")
        bad = (self.labels < MISSING) | (self.labels >= self.k)
        if np.any(bad):
            raise InvalidLabel(
                f"labels must lie in {{-1, 0..{self.k - 1}}}")

    @property
    def n(self) -> int:
        return len(self.features)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def labeled_indices(self) -> np.ndarray:
        return np.flatnonzero(self.labels != MISSING)

    @property
    def unlabeled_indices(self) -> np.ndarray:
        return np.flatnonzero(self.labels == MISSING)

    def class_labels(self, indices=None) -> np.ndarray:
        """Labels as class indices; raises if any requested row is unlabeled."""
        y = self.labels if indices is None else self.labels[indices]
        if np.any(y == MISSING):
            raise InvalidLabel("missing-label sentinel read as a class index")
        return y


# ---------------------------------------------------------------------------
# Synthetic datasets
# ---------------------------------------------------------------------------

def _balanced_counts(n: int, k: int) -> np.ndarray:
    counts = np.full(k, n // k, dtype=np.intp)
    counts[: n % k] += 1
    return counts


def make_synthetic(kind: str, n: int, noise: float = 0.1, seed: int = 0,
                   k: int | None = None) -> SSLDataset:
    """Balanced 2-D toy datasets: two_moons (K=2), gauss_mixture, pinwheel.

    Deterministic under ``seed``; all points carry their true label
    (mask with :func:`ssl_split` for semi-supervised protocols).
    """
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(seed, 0xDA7A)))
    if kind == "two_moons":
        k = 2
        counts = _balanced_counts(n, k)
        if min(counts) < 2:
            raise InvalidInput("need at least 2 points per class")
        xs, ys = [], []
        for cls, cnt in enumerate(counts):
            t = rng.uniform(0.0, np.pi, size=cnt)
            if cls == 0:
                pts = np.stack([np.cos(t), np.sin(t)], axis=1)
            else:
                pts = np.stack([1.0 - np.cos(t), 0.5 - np.sin(t)], axis=1)
            xs.append(pts + rng.normal(0.0, noise, size=pts.shape))
            ys.append(np.full(cnt, cls))
    elif kind == "gauss_mixture":
        k = 8 if k is None else k
        counts = _balanced_counts(n, k)
        if min(counts) < 2:
            raise InvalidInput("need at least 2 points per class")
        angles = 2.0 * np.pi * np.arange(k) / k
        centers = 4.0 * np.stack([np.cos(angles), np.sin(angles)], axis=1)
        xs, ys = [], []
        for cls, cnt in enumerate(counts):
            pts = centers[cls] + rng.normal(0.0, max(noise, 1e-12),
                                            size=(cnt, 2))
            xs.append(pts)
            ys.append(np.full(cnt, cls))
    elif kind == "pinwheel":
        k = 5
        counts = _balanced_counts(n, k)
        if min(counts) < 2:
            raise InvalidInput("need at least 2 points per class")
        xs, ys = [], []
        for cls, cnt in enumerate(counts):
            r = np.abs(rng.normal(1.0, 0.3, size=cnt))
            base = 2.0 * np.pi * cls / k
            angle = base + 0.6 * r + rng.normal(0.0, noise, size=cnt)
            pts = np.stack([r * np.cos(angle), r * np.sin(angle)], axis=1)
            xs.append(pts)
            ys.append(np.full(cnt, cls))
    else:
        raise InvalidInput(f"unknown synthetic dataset {kind!r}")
    features = np.concatenate(xs, axis=0)
    labels = np.concatenate(ys, axis=0).astype(np.intp)
    return SSLDataset(features, labels, k=k, full_labels=labels.copy())


def ssl_split(ds: SSLDataset, n_labeled: int, seed: int = 0) -> SSLDataset:
    """Keep exactly n_labeled labels, stratified per class; mask the rest.

    Deterministic under ``seed``.  Original labels are retained on
    ``full_labels`` for evaluation only.
    """
    if n_labeled < ds.k:
        raise InsufficientLabels(
            f"need at least {ds.k} labels for {ds.k} classes")
    y = ds.class_labels()
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(seed, 0x5B11)))
    per_class = _balanced_counts(n_labeled, ds.k)
    keep = []
    for cls in range(ds.k):
        rows = np.flatnonzero(y == cls)
        if len(rows) < per_class[cls]:
            raise InsufficientLabels(
                f"class {cls} has only {len(rows)} examples")
        keep.append(rng.choice(rows, size=per_class[cls], replace=False))
    keep = np.concatenate(keep)
    masked = np.full(ds.n, MISSING, dtype=np.intp)
    masked[keep] = y[keep]
    return replace(ds, labels=masked, full_labels=y.copy())


def holdout_validation(ds: SSLDataset, frac: float = 0.1,
                       seed: int = 0) -> tuple[SSLDataset, SSLDataset]:
    """Hold a fraction of the unlabeled rows out as a validation set."""
    unlab = ds.unlabeled_indices
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(seed, 0x4A1D)))
    n_val = int(round(frac * len(unlab)))
    val_rows = rng.choice(unlab, size=n_val, replace=False) if n_val else \
        np.zeros(0, dtype=np.intp)
    train_rows = np.setdiff1d(np.arange(ds.n), val_rows)
    full = ds.full_labels if ds.full_labels is not None else ds.labels

    def pick(rows):
        return replace(ds, features=ds.features[rows], labels=ds.labels[rows],
                       full_labels=full[rows])

    return pick(train_rows), pick(val_rows)


# ---------------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------------

def load_csv(path, label_column: str | None, k: int) -> SSLDataset:
    """Read a UTF-8 header CSV; '?' or empty label cells mean unlabeled."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(1, message="empty file") from None
        header = [h.strip() for h in header]
        if label_column is not None and label_column not in header:
            raise ParseError(1, message=f"label column {label_column!r} "
                                        "not in header")
        label_idx = header.index(label_column) if label_column else None
        feats, labels = [], []
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(line_no,
                                 message=f"ragged row at line {line_no}")
            vals = []
            for col, cell in enumerate(row):
                if col == label_idx:
                    continue
                try:
                    vals.append(float(cell))
                except ValueError:
                    raise ParseError(
                        line_no, column=col + 1,
                        message=f"non-numeric feature at line {line_no}, "
                                f"column {col + 1}") from None
            if label_idx is None:
                labels.append(MISSING)
            else:
                cell = row[label_idx].strip()
                if cell in ("", "?"):
                    labels.append(MISSING)
                else:
                    try:
                        lab = int(float(cell))
                    except ValueError:
                        raise InvalidLabel(
                            f"unknown label value {cell!r} at line {line_no}"
                        ) from None
                    if lab < 0 or lab >= k:
                        raise InvalidLabel(
                            f"label {lab} out of range at line {line_no}")
                    labels.append(lab)
            feats.append(vals)
    if not feats:
        raise ParseError(2, message="no data rows")
    features = np.asarray(feats, dtype=np.float64)
    log.info("loaded %d rows, %d features from %s",
             features.shape[0], features.shape[1], path)
    return SSLDataset(features, np.asarray(labels), k=k)


def save_csv(ds: SSLDataset, path, label_column: str = "label"):
    """Write a dataset back out in the load_csv format."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x{i}" for i in range(ds.dim)] + [label_column])
        for row, lab in zip(ds.features, ds.labels):
            cell = "?" if lab == MISSING else str(int(lab))
            writer.writerow([repr(float(v)) for v in row] + [cell])


def load_unigram(triplet_path, vocab_path, labels_path=None,
                 k: int = 2) -> SSLDataset:
    """Sparse 'doc_id word_id count' triplets plus a one-word-per-line vocab.

    Counts stay raw (unnormalized), matching the multinomial likelihood.
    Optional labels file: one 'doc_id label' pair per line, missing docs
    unlabeled.
    """
    with open(vocab_path, "r", encoding="utf-8") as fh:
        vocab = [w.strip() for w in fh if w.strip()]
    v = len(vocab)
    entries = []
    max_doc = -1
    with open(triplet_path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 3:
                raise ParseError(line_no, message="expected 3 fields")
            try:
                doc, word, count = int(parts[0]), int(parts[1]), float(parts[2])
            except ValueError:
                raise ParseError(line_no,
                                 message="non-integer triplet") from None
            if word < 0 or word >= v:
                raise ParseError(line_no,
                                 message=f"word id {word} outside vocabulary")
            if count < 0:
                raise InvalidInput("negative counts")
            entries.append((doc, word, count))
            max_doc = max(max_doc, doc)
    features = np.zeros((max_doc + 1, v))
    for doc, word, count in entries:
        features[doc, word] += count
    labels = np.full(max_doc + 1, MISSING, dtype=np.intp)
    if labels_path is not None:
        with open(labels_path, "r", encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, start=1):
                parts = line.split()
                if not parts:
                    continue
                if len(parts) != 2:
                    raise ParseError(line_no, message="expected 2 fields")
                doc, lab = int(parts[0]), int(parts[1])
                if lab < 0 or lab >= k:
                    raise InvalidLabel(f"label {lab} out of range")
                labels[doc] = lab
    return SSLDataset(features, labels, k=k)


# ---------------------------------------------------------------------------
# Standardization and batching
# ---------------------------------------------------------------------------

def standardize(ds: SSLDataset) -> SSLDataset:
    """Per-column (x - mean) / std fit on this dataset; idempotent.

    A dataset that already carries standardization parameters is
    returned unchanged.  Constant columns get a floored std and a
    warning.  Skip this for unigram count data.
    """
    if ds.mean_ is not None:
        return ds
    mean = ds.features.mean(axis=0)
    std = ds.features.std(axis=0)
    if np.any(std < STD_FLOOR):
        log.warning("constant feature column(s); std floored at %g", STD_FLOOR)
        std = np.maximum(std, STD_FLOOR)
    return replace(ds, features=(ds.features - mean) / std,
                   mean_=mean, std_=std)


def apply_standardization(ds: SSLDataset, mean: np.ndarray,
                          std: np.ndarray) -> SSLDataset:
    """Apply train-split parameters unchanged to a val/test dataset."""
    return replace(ds, features=(ds.features - mean) / std,
                   mean_=np.asarray(mean), std_=np.asarray(std))


def batches(ds: SSLDataset, m: int, n: int, seed: int = 0):
    """Endless stream of (x_unlabeled, x_labeled, y_labeled) mini-batches.

    The unlabeled stream partitions the unlabeled rows each epoch
    (epoch-shuffled, final short batch included); the labeled stream
    cycles independently with reshuffling when exhausted.
    """
    unlab = ds.unlabeled_indices
    lab = ds.labeled_indices
    if len(unlab) == 0:
        raise InvalidInput("no unlabeled rows to batch")
    rng_u = np.random.default_rng(np.random.SeedSequence(entropy=(seed, 0xB0)))
    rng_l = np.random.default_rng(np.random.SeedSequence(entropy=(seed, 0xB1)))
    n = min(n, len(lab)) if len(lab) else 0
    lab_order = rng_l.permutation(lab) if len(lab) else lab
    lab_pos = 0
    while True:
        order = rng_u.permutation(unlab)
        for start in range(0, len(order), m):
            rows = order[start:start + m]
            if n:
                if lab_pos + n > len(lab_order):
                    lab_order = rng_l.permutation(lab)
                    lab_pos = 0
                lab_rows = lab_order[lab_pos:lab_pos + n]
                lab_pos += n
                yield (ds.features[rows], ds.features[lab_rows],
                       ds.class_labels(lab_rows))
            else:
                yield (ds.features[rows],
                       np.zeros((0, ds.dim)), np.zeros(0, dtype=np.intp))
