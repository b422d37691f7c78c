"""Classifiers over stored embeddings: the closed-form solved layer and KNN.

Both report a confidence that is a cosine in [-1, 1]. For the solved layer it
is the cosine to the predicted class's mean reference embedding; for KNN it
is the cosine to the best-matching neighbor of the winning class.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numerics
from .errors import CorruptArtifactError, DegenerateInputError, UserError

COLLECTION_MAGIC = b"PXCOLL01"


@dataclass(frozen=True)
class PredictionRecord:
    label: int
    confidence: float

    def to_dict(self) -> dict:
        return {"label": self.label, "confidence": self.confidence}


class EmbeddingCollection:
    """Labeled reference embeddings, append-only.

    Rows are unit-normalized on construction unless ``normalize=False``
    (used when loading, so that a save/load/save cycle reproduces bytes).
    """

    def __init__(self, embeddings, labels, label_names: dict[int, str] | None = None, *, normalize: bool = True):
        e = np.asarray(embeddings, dtype=np.float64)
        if e.ndim == 1:
            e = e.reshape(0, 0) if e.size == 0 else e[None, :]
        labels = np.asarray(labels, dtype=np.int64).ravel()
        if e.shape[0] != labels.shape[0]:
            raise UserError(f"{e.shape[0]} embeddings but {labels.shape[0]} labels")
        if e.size and not np.all(np.isfinite(e)):
            raise UserError("embeddings have non-finite entries")
        if normalize and e.shape[0]:
            e = numerics.normalize_rows(e)
        e.setflags(write=False)
        labels.setflags(write=False)
        self.embeddings = e
        self.labels = labels
        self.label_names = dict(label_names or {})
        self._means: tuple[tuple[int, ...], np.ndarray] | None = None

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def __eq__(self, other) -> bool:
        if not isinstance(other, EmbeddingCollection):
            return NotImplemented
        return (
            self.embeddings.shape == other.embeddings.shape
            and np.array_equal(self.embeddings, other.embeddings)
            and np.array_equal(self.labels, other.labels)
            and self.label_names == other.label_names
        )

    @property
    def dim(self) -> int:
        return int(self.embeddings.shape[1]) if self.embeddings.ndim == 2 else 0

    @property
    def classes(self) -> tuple[int, ...]:
        return tuple(int(x) for x in np.unique(self.labels))

    def class_means(self) -> tuple[tuple[int, ...], np.ndarray]:
        """Sorted class labels and their unit-normalized mean embeddings."""
        if self._means is None:
            classes = self.classes
            means = np.array([self.embeddings[self.labels == c].mean(axis=0) for c in classes])
            norms = numerics.row_norms(means)
            if np.any(norms == 0.0):
                raise DegenerateInputError("a class mean embedding is the zero vector")
            self._means = (classes, means / norms[:, None])
        return self._means

    def mean_of(self, label: int) -> np.ndarray:
        classes, means = self.class_means()
        return means[classes.index(int(label))]

    def merge(self, other: "EmbeddingCollection") -> "EmbeddingCollection":
        if len(self) and len(other) and self.dim != other.dim:
            raise UserError(f"cannot merge collections of dim {self.dim} and {other.dim}")
        if not len(self):
            return other
        if not len(other):
            return self
        names = {**self.label_names, **other.label_names}
        return EmbeddingCollection(
            np.vstack([self.embeddings, other.embeddings]),
            np.concatenate([self.labels, other.labels]),
            names,
            normalize=False,
        )

    def subset(self, keep_labels) -> "EmbeddingCollection":
        keep = np.isin(self.labels, list(keep_labels))
        return EmbeddingCollection(self.embeddings[keep], self.labels[keep], self.label_names, normalize=False)


def _unit(e) -> np.ndarray:
    e = np.asarray(e, dtype=np.float64)
    n = np.linalg.norm(e)
    if n == 0.0:
        raise DegenerateInputError("query embedding is the zero vector")
    return e / n


@dataclass(frozen=True)
class SolvedLayer:
    weights: np.ndarray  # D x C
    classes: tuple[int, ...]


def solve_layer(embeddings, labels) -> SolvedLayer:
    """Least-squares linear head: ``W = pinv(E) @ onehot(labels)``."""
    e = numerics.as_matrix(embeddings, "embeddings")
    labels = np.asarray(labels, dtype=np.int64).ravel()
    if e.shape[0] < 1 or e.shape[0] != labels.shape[0]:
        raise UserError("need one label per embedding row and at least one row")
    if not np.any(e):
        raise DegenerateInputError("embedding matrix is all zeros")
    classes = tuple(int(x) for x in np.unique(labels))
    index = {c: k for k, c in enumerate(classes)}
    y = np.zeros((e.shape[0], len(classes)))
    y[np.arange(e.shape[0]), [index[int(v)] for v in labels]] = 1.0
    return SolvedLayer(numerics.pseudoinverse(e) @ y, classes)


def sl_predict(layer: SolvedLayer, e, collection: EmbeddingCollection) -> PredictionRecord:
    return sl_predict_many(layer, np.atleast_2d(e), collection)[0]


def sl_predict_many(layer: SolvedLayer, queries, collection: EmbeddingCollection) -> list[PredictionRecord]:
    q = numerics.as_matrix(queries, "queries")
    if q.shape[1] != layer.weights.shape[0]:
        raise UserError(f"query dim {q.shape[1]} does not match layer input dim {layer.weights.shape[0]}")
    scores = q @ layer.weights
    winners = np.argmax(scores, axis=1)  # first maximum, i.e. lowest class index
    qu = numerics.normalize_rows(q)
    out = []
    for row, w in zip(qu, winners):
        label = layer.classes[int(w)]
        out.append(PredictionRecord(label, float(row @ collection.mean_of(label))))
    return out


def knn_predict(collection: EmbeddingCollection, e, k: int = 1) -> PredictionRecord:
    if len(collection) == 0:
        raise UserError("empty collection")
    if not 1 <= k <= len(collection):
        raise UserError(f"k must be in [1, {len(collection)}], got {k}")
    sims = collection.embeddings @ _unit(e)
    order = np.argsort(-sims, kind="stable")[:k]
    votes: dict[int, list] = {}
    for idx in order:
        label = int(collection.labels[idx])
        count, best = votes.get(label, (0, -np.inf))
        votes[label] = (count + 1, max(best, float(sims[idx])))
    label = min(votes, key=lambda c: (-votes[c][0], -votes[c][1], c))
    return PredictionRecord(label, votes[label][1])


class SolvedLayerClassifier:
    name = "sl"

    def __init__(self, collection: EmbeddingCollection):
        self.collection = collection
        self.layer = solve_layer(collection.embeddings, collection.labels)

    def predict(self, queries) -> list[PredictionRecord]:
        return sl_predict_many(self.layer, queries, self.collection)


class KNNClassifier:
    name = "knn"

    def __init__(self, collection: EmbeddingCollection, k: int = 1):
        self.collection = collection
        self.k = k

    def predict(self, queries) -> list[PredictionRecord]:
        return [knn_predict(self.collection, q, self.k) for q in np.atleast_2d(queries)]


def make_classifier(kind: str, collection: EmbeddingCollection, k: int = 1):
    if kind == "sl":
        return SolvedLayerClassifier(collection)
    if kind == "knn":
        return KNNClassifier(collection, k)
    raise UserError(f"unknown classifier {kind!r}")


def save_collection(path, collection: EmbeddingCollection, config: dict | None = None) -> None:
    header = {
        "dim": collection.dim,
        "count": len(collection),
        "labels": [int(x) for x in collection.labels],
        "label_table": {str(k): v for k, v in sorted(collection.label_names.items())},
    }
    if config is not None:
        header["config"] = config
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(COLLECTION_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(np.ascontiguousarray(collection.embeddings, dtype="<f4").tobytes())


def load_collection(path) -> EmbeddingCollection:
    data = Path(path).read_bytes()
    if data[:8] != COLLECTION_MAGIC:
        raise CorruptArtifactError(f"{path}: not an embedding collection")
    if len(data) < 16:
        raise CorruptArtifactError(f"{path}: truncated header")
    (n,) = struct.unpack("<Q", data[8:16])
    try:
        header = json.loads(data[16 : 16 + n])
        dim, count, labels = int(header["dim"]), int(header["count"]), header["labels"]
    except (ValueError, KeyError, TypeError, UnicodeDecodeError) as exc:
        raise CorruptArtifactError(f"{path}: bad header: {exc}") from exc
    payload = data[16 + n :]
    if len(payload) != dim * count * 4 or len(labels) != count:
        raise CorruptArtifactError(
            f"{path}: payload holds {len(payload)} bytes, header promises {dim * count * 4}"
        )
    rows = np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(count, dim)
    names = {int(k): v for k, v in header.get("label_table", {}).items()}
    return EmbeddingCollection(rows, labels, names, normalize=False)
