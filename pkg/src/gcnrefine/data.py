"""Embedding and label containers, file formats, synthetic data and metrics."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

UNASSIGNED = np.iinfo(np.int64).max

_EMB_MAGIC = b"EMB1"
_EMB_VERSION = 1
_EMB_HEADER = struct.Struct("<4sIQI")


class EmbeddingFileError(ValueError):
    """Base class for EMB1 read failures. ``code`` is stable across releases."""

    code = 10


class EmbeddingFormatError(EmbeddingFileError):
    code = 11


class EmbeddingTruncatedError(EmbeddingFileError):
    code = 12


class NonFiniteEmbeddingError(EmbeddingFileError):
    code = 13


@dataclass(frozen=True)
class EmbeddingSet:
    """N x D matrix of embedding rows with stable sample ids."""

    rows: np.ndarray
    ids: np.ndarray = None

    def __post_init__(self):
        rows = np.array(self.rows, dtype=np.float64)
        if rows.ndim != 2 or rows.shape[0] < 1 or rows.shape[1] < 1:
            raise ValueError(f"expected a non-empty 2-D array, got shape {rows.shape}")
        if not np.all(np.isfinite(rows)):
            bad = int(np.argwhere(~np.isfinite(rows))[0, 0])
            raise NonFiniteEmbeddingError(f"row {bad} has non-finite components")
        rows.setflags(write=False)
        ids = np.arange(rows.shape[0]) if self.ids is None else np.asarray(self.ids, dtype=np.int64)
        if ids.shape != (rows.shape[0],):
            raise ValueError("ids must have one entry per row")
        ids.setflags(write=False)
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "ids", ids)

    @property
    def n(self) -> int:
        return self.rows.shape[0]

    @property
    def d(self) -> int:
        return self.rows.shape[1]

    def subset(self, index) -> "EmbeddingSet":
        index = np.asarray(index)
        return EmbeddingSet(self.rows[index], self.ids[index])

    def __eq__(self, other):
        if not isinstance(other, EmbeddingSet):
            return NotImplemented
        return np.array_equal(self.rows, other.rows) and np.array_equal(self.ids, other.ids)

    __hash__ = None


@dataclass(frozen=True)
class LabelAssignment:
    """Per-sample cluster ids; ``UNASSIGNED`` marks samples without a label."""

    labels: np.ndarray
    cluster_sizes: dict = field(init=False, compare=False)

    def __post_init__(self):
        labels = np.array(self.labels, dtype=np.int64).ravel()
        if np.any((labels < 0) & (labels != UNASSIGNED)):
            raise ValueError("cluster ids must be non-negative or UNASSIGNED")
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)
        ids, counts = np.unique(labels[labels != UNASSIGNED], return_counts=True)
        object.__setattr__(self, "cluster_sizes", dict(zip(ids.tolist(), counts.tolist())))

    @property
    def n(self) -> int:
        return self.labels.shape[0]

    @property
    def num_clusters(self) -> int:
        return len(self.cluster_sizes)

    @property
    def num_unassigned(self) -> int:
        return int(np.count_nonzero(self.labels == UNASSIGNED))

    def compact(self) -> "LabelAssignment":
        """Renumber assigned ids densely, ordered by each cluster's smallest member."""
        out = np.full(self.n, UNASSIGNED, dtype=np.int64)
        assigned = self.labels != UNASSIGNED
        _, first = np.unique(self.labels[assigned], return_index=True)
        order = np.argsort(first, kind="stable")
        remap = np.empty(len(order), dtype=np.int64)
        remap[order] = np.arange(len(order))
        _, inverse = np.unique(self.labels[assigned], return_inverse=True)
        out[assigned] = remap[inverse]
        return LabelAssignment(out)

    def __eq__(self, other):
        if not isinstance(other, LabelAssignment):
            return NotImplemented
        return np.array_equal(self.labels, other.labels)

    __hash__ = None


@dataclass(frozen=True)
class SynthSpec:
    num_classes: int
    samples_per_class: int
    dim: int
    noise_sigma: float
    seed: int = 0

    def __post_init__(self):
        for name in ("num_classes", "samples_per_class", "dim"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be positive")
        if not self.noise_sigma >= 0:
            raise ValueError("noise_sigma must be >= 0")


def save_embeddings(e: EmbeddingSet, path) -> None:
    payload = np.ascontiguousarray(e.rows, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_EMB_HEADER.pack(_EMB_MAGIC, _EMB_VERSION, e.n, e.d))
        fh.write(payload.tobytes())


def load_embeddings(path) -> EmbeddingSet:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise EmbeddingFileError(f"{path}: {exc.strerror or exc}") from exc
    if len(raw) < _EMB_HEADER.size:
        if raw[:4] != _EMB_MAGIC[: len(raw[:4])]:
            raise EmbeddingFormatError(f"{path}: bad magic")
        raise EmbeddingTruncatedError(f"{path}: header truncated ({len(raw)} bytes)")
    magic, version, n, d = _EMB_HEADER.unpack_from(raw)
    if magic != _EMB_MAGIC:
        raise EmbeddingFormatError(f"{path}: bad magic {magic!r}")
    if version != _EMB_VERSION:
        raise EmbeddingFormatError(f"{path}: unsupported version {version}")
    if n < 1 or d < 1:
        raise EmbeddingFormatError(f"{path}: empty shape n={n} d={d}")
    expected = _EMB_HEADER.size + 4 * n * d
    if len(raw) < expected:
        raise EmbeddingTruncatedError(f"{path}: expected {expected} bytes, found {len(raw)}")
    if len(raw) > expected:
        raise EmbeddingFormatError(f"{path}: {len(raw) - expected} trailing bytes")
    rows = np.frombuffer(raw, dtype="<f4", count=n * d, offset=_EMB_HEADER.size).reshape(n, d)
    if not np.all(np.isfinite(rows)):
        raise NonFiniteEmbeddingError(f"{path}: non-finite values in payload")
    return EmbeddingSet(rows.astype(np.float64))


def save_labels(labels: LabelAssignment, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["index", "label"])
        for i, lab in enumerate(labels.labels.tolist()):
            writer.writerow([i, -1 if lab == UNASSIGNED else lab])


def load_labels(path) -> LabelAssignment:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["index", "label"]:
            raise ValueError(f"{path}: expected header 'index,label', got {header}")
        rows = [(int(i), int(lab)) for i, lab in reader]
    index = [i for i, _ in rows]
    if index != list(range(len(rows))):
        raise ValueError(f"{path}: index column must be 0..n-1 in order")
    return LabelAssignment([UNASSIGNED if lab == -1 else lab for _, lab in rows])


def normalize(e: EmbeddingSet) -> EmbeddingSet:
    norms = np.linalg.norm(e.rows, axis=1)
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        raise ValueError(f"cannot normalize zero row at index {int(zero[0])}")
    return EmbeddingSet(e.rows / norms[:, None], e.ids)


def generate_synthetic(spec: SynthSpec) -> tuple[EmbeddingSet, LabelAssignment]:
    """Draw class centers on the unit sphere and noisy unit-norm samples around them.

    Rows are rounded to float32 so the set survives an EMB1 round trip unchanged.
    """
    rng = np.random.default_rng(spec.seed)
    centers = rng.standard_normal((spec.num_classes, spec.dim))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    truth = np.repeat(np.arange(spec.num_classes), spec.samples_per_class)
    noise = rng.standard_normal((truth.size, spec.dim)) * spec.noise_sigma
    rows = centers[truth] + noise
    rows /= np.linalg.norm(rows, axis=1, keepdims=True)
    return EmbeddingSet(rows.astype(np.float32).astype(np.float64)), LabelAssignment(truth)


def _check_pair(a: LabelAssignment, b: LabelAssignment) -> None:
    if a.n != b.n:
        raise ValueError(f"length mismatch: {a.n} vs {b.n}")
    if a.num_unassigned or b.num_unassigned:
        raise ValueError("UNASSIGNED entries present; filter before scoring")


def nmi(a: LabelAssignment, b: LabelAssignment) -> float:
    """Normalized mutual information, arithmetic-mean normalization."""
    _check_pair(a, b)
    _, ia = np.unique(a.labels, return_inverse=True)
    _, ib = np.unique(b.labels, return_inverse=True)
    n = a.n
    table = np.zeros((ia.max() + 1, ib.max() + 1))
    np.add.at(table, (ia, ib), 1.0)
    pa = table.sum(axis=1) / n
    pb = table.sum(axis=0) / n
    ha = -np.sum(pa * np.log(pa))
    hb = -np.sum(pb * np.log(pb))
    if ha == 0 and hb == 0:
        return 1.0
    nz = table > 0
    pab = table[nz] / n
    mi = np.sum(pab * np.log(pab / np.outer(pa, pb)[nz]))
    return float(min(max(mi / ((ha + hb) / 2), 0.0), 1.0))


def edge_metrics(predicted_edges, truth: LabelAssignment, candidate_edges=None):
    """Precision and recall of undirected edges against true labels.

    ``predicted_edges`` and ``candidate_edges`` are (m, 2) arrays or iterables of
    pairs. Recall is measured against the same-label edges of ``candidate_edges``
    (the KNN graph); it defaults to the predicted set. Precision is ``None`` when
    nothing is predicted, recall is ``None`` when no candidate edge is correct.
    """
    if truth.num_unassigned:
        raise ValueError("UNASSIGNED entries present in truth")
    pred = _edge_array(predicted_edges, truth.n)
    cand = pred if candidate_edges is None else _edge_array(candidate_edges, truth.n)
    lab = truth.labels
    tp = int(np.count_nonzero(lab[pred[:, 0]] == lab[pred[:, 1]]))
    precision = tp / len(pred) if len(pred) else None
    positives = int(np.count_nonzero(lab[cand[:, 0]] == lab[cand[:, 1]]))
    recall = tp / positives if positives else None
    return precision, recall


def _edge_array(edges, n):
    arr = np.asarray(list(edges) if not isinstance(edges, np.ndarray) else edges, dtype=np.int64)
    arr = arr.reshape(-1, 2)
    if arr.size and (arr.min() < 0 or arr.max() >= n):
        raise ValueError("edge endpoint out of range")
    arr = np.sort(arr, axis=1)
    return np.unique(arr, axis=0) if len(arr) else arr
