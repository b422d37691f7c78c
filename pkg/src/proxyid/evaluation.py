"""Test protocols: retrieval recall, vial-level verification metrics, and the
two continual-learning experiments (unknown classes, proxy addition)."""
from __future__ import annotations

import copy
import csv
import io
import logging
from dataclasses import dataclass, field

import numpy as np

from . import proxy
from .aggregate import VerificationResult, aggregate_verify
from .classify import EmbeddingCollection, make_classifier
from .config import RunConfig
from .errors import UserError
from .pipeline import CropSet, Model, build_collection, fit, train_model

log = logging.getLogger(__name__)


def _percent(num: int, den: int) -> float:
    return 100.0 * num / den if den else 0.0


@dataclass
class MetricsReport:
    total: int
    correct: int
    verified: int
    verified_correct: int
    recall_at_1: float | None = None
    groups: list = field(default_factory=list, repr=False)

    @property
    def accuracy_all(self) -> float:
        return _percent(self.correct, self.total)

    @property
    def ratio_verified(self) -> float:
        return _percent(self.verified, self.total)

    @property
    def accuracy_verified(self) -> float | None:
        """None when nothing was verified: the ratio is undefined, not 100."""
        return _percent(self.verified_correct, self.verified) if self.verified else None

    def to_dict(self, with_groups: bool = False) -> dict:
        out = {
            "accuracy_all": self.accuracy_all,
            "ratio_verified": self.ratio_verified,
            "accuracy_verified": self.accuracy_verified,
            "recall_at_1": self.recall_at_1,
            "counts": {
                "total": self.total,
                "correct": self.correct,
                "verified": self.verified,
                "verified_correct": self.verified_correct,
            },
        }
        if with_groups:
            out["groups"] = self.groups
        return out


def tally(outcomes, recall: float | None = None) -> MetricsReport:
    """Metrics over ``(group_id, true_label, VerificationResult | None)`` triples.

    A ``None`` result marks a group that produced no crops; it counts as an
    unverified miss.
    """
    total = correct = verified = verified_correct = 0
    groups = []
    for group_id, truth, result in outcomes:
        total += 1
        if result is None:
            groups.append({"group": group_id, "label": truth, "prediction": None, "verified": False})
            continue
        hit = result.prediction == truth
        correct += hit
        verified += result.verified
        verified_correct += hit and result.verified
        groups.append(
            {
                "group": group_id,
                "label": truth,
                **{k: v for k, v in result.to_record().items() if k != "request_id"},
            }
        )
    return MetricsReport(total, correct, verified, verified_correct, recall, groups)


def recall_at_1(collection: EmbeddingCollection, queries, labels) -> float:
    """Percent of queries whose nearest stored neighbor shares their label.

    An entry bit-identical to the query is treated as the query itself and
    skipped (only the first such entry).
    """
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    labels = np.asarray(labels).ravel()
    if q.shape[0] == 0:
        raise UserError("empty evaluation set")
    if len(collection) == 0:
        raise UserError("empty collection")
    ref = collection.embeddings
    norms = np.linalg.norm(q, axis=1, keepdims=True)
    sims = (q / norms) @ ref.T
    hits = 0
    for i in range(q.shape[0]):
        row = sims[i].copy()
        same = np.flatnonzero(np.all(ref == q[i], axis=1))
        if same.size:
            row[same[0]] = -np.inf
        if not np.isfinite(row).any():
            continue
        hits += collection.labels[int(np.argmax(row))] == labels[i]
    return _percent(int(hits), q.shape[0])


def group_keys(crops: CropSet, grouping: str) -> np.ndarray:
    if grouping == "single":
        return np.array([f"{s}/light{l}" for s, l in zip(crops.scene_ids, crops.lights)])
    if grouping == "multiple":
        return crops.scene_ids.copy()
    raise UserError(f"unknown grouping {grouping!r}")


def expected_groups(manifest: dict, grouping: str, split: str, labels=None) -> list[tuple[str, int]]:
    """Every group the manifest defines, including ones that may yield no crops."""
    out = []
    for entry in manifest["scenes"]:
        if entry["split"] != split or (labels is not None and entry["label"] not in labels):
            continue
        if grouping == "single":
            out.extend((f"{entry['scene_id']}/light{k}", entry["label"]) for k in range(len(entry["light_files"])))
        else:
            out.append((entry["scene_id"], entry["label"]))
    return out


def vial_test(
    model: Model,
    classifier,
    crops: CropSet,
    groups: list[tuple[str, int]],
    grouping: str,
    cfg: RunConfig,
    collection: EmbeddingCollection | None = None,
) -> MetricsReport:
    """Classify every crop, aggregate per group, and tally the group outcomes."""
    keys = group_keys(crops, grouping)
    records = classifier.predict(model.embed(crops.images)) if len(crops) else []
    by_group: dict[str, list] = {}
    for key, rec in zip(keys, records):
        by_group.setdefault(str(key), []).append(rec)

    outcomes = []
    for group_id, truth in groups:
        preds = by_group.get(group_id)
        if not preds:
            log.warning("group %s has no segmented pills; counted as an unverified miss", group_id)
            outcomes.append((group_id, truth, None))
            continue
        result: VerificationResult = aggregate_verify(preds, cfg.threshold_min, cfg.threshold_gap, cfg.window)
        outcomes.append((group_id, truth, result))
    recall = None
    if collection is not None and len(crops):
        recall = recall_at_1(collection, model.embed(crops.images), crops.labels)
    return tally(outcomes, recall)


def evaluate(model: Model, cfg: RunConfig, crops: CropSet, manifest: dict, collection_labels, test_labels, grouping=None):
    """Collection from the train split of ``collection_labels``; queries from the test split of ``test_labels``."""
    grouping = grouping or cfg.grouping
    train = crops.split("train").for_labels(collection_labels)
    test = crops.split("test").for_labels(test_labels)
    collection = build_collection(model, train)
    classifier = make_classifier(cfg.classifier, collection, cfg.knn_k)
    groups = expected_groups(manifest, grouping, "test", set(test_labels))
    return vial_test(model, classifier, test, groups, grouping, cfg, collection)


def split_halves(labels) -> tuple[list[int], list[int]]:
    labels = sorted(set(int(x) for x in labels))
    half = len(labels) // 2
    first, second = labels[:half], labels[half:]
    if len(first) < 2 or len(second) < 2:
        raise UserError("continual protocols need at least two classes per half")
    return first, second


def _check_disjoint(first, second) -> None:
    if set(first) & set(second):
        raise UserError(f"halves share classes: {sorted(set(first) & set(second))}")


def _span(labels) -> str:
    return f"{min(labels)}-{max(labels)}"


def _row(train, collection, test, report: MetricsReport) -> dict:
    return {"train": _span(train), "collection": _span(collection), "test": _span(test), **report.to_dict()}


def continual_protocol(cfg: RunConfig, crops: CropSet, manifest: dict, halves=None) -> dict:
    """Train on half 1, test both halves, grow the proxy set, retrain on half 2 only, test again."""
    first, second = halves or split_halves(crops.labels)
    _check_disjoint(first, second)
    train = crops.split("train")

    model1 = train_model(cfg, train.for_labels(first))
    rows = [
        _row(first, first, first, evaluate(model1, cfg, crops, manifest, first, first)),
        _row(first, second, second, evaluate(model1, cfg, crops, manifest, second, second)),
    ]

    half2 = train.for_labels(second)
    new_vectors = EmbeddingCollection(model1.embed(half2.images), half2.labels)
    grown = proxy.add_proxies(model1.proxies, new_vectors, steps=cfg.proxy_steps, lr=cfg.proxy_lr)
    enhanced = proxy.enhance_proxies(grown, steps=cfg.proxy_steps, lr=cfg.proxy_lr)
    # retraining moves only the new proxies; the enhanced old ones stay frozen
    retrain_set = enhanced.with_trainable([label in second for label in enhanced.labels])
    model2 = fit(cfg, half2, model1.params, retrain_set, copy.deepcopy(model1.loss), stream=1)

    rows.append(_row(second, first, first, evaluate(model2, cfg, crops, manifest, first, first)))
    rows.append(_row(second, second, second, evaluate(model2, cfg, crops, manifest, second, second)))
    return {
        "rows": rows,
        "proxy_max_similarity": {
            "created": proxy.max_abs_similarity(model1.proxies.proxies),
            "added": proxy.max_abs_similarity(grown.proxies),
            "enhanced": proxy.max_abs_similarity(enhanced.proxies),
            "final": proxy.max_abs_similarity(model2.proxies.proxies),
        },
        "halves": [first, second],
    }


def unknown_class_protocol(cfg: RunConfig, crops: CropSet, manifest: dict, halves=None) -> dict:
    """Train and build the collection on one half, query with the other half."""
    first, second = halves or split_halves(crops.labels)
    _check_disjoint(first, second)
    train = crops.split("train")
    rows = []
    for known, unknown in ((first, second), (second, first)):
        model = train_model(cfg, train.for_labels(known))
        collection = build_collection(model, train.for_labels(known))
        classifier = make_classifier(cfg.classifier, collection, cfg.knn_k)
        test = crops.split("test").for_labels(unknown)
        groups = expected_groups(manifest, cfg.grouping, "test", set(unknown))
        report = vial_test(model, classifier, test, groups, cfg.grouping, cfg)
        rows.append(_row(known, known, unknown, report))
    average = float(np.mean([r["ratio_verified"] for r in rows]))
    return {"rows": rows, "average_ratio_verified": average, "halves": [first, second]}


TABLE_COLUMNS = {
    "continual": ("train", "collection", "test", "accuracy_verified", "ratio_verified", "accuracy_all"),
    "unknown": ("train", "collection", "test", "ratio_verified", "accuracy_all", "average_ratio_verified"),
    "vial": ("grouping", "accuracy_all", "ratio_verified", "accuracy_verified"),
}


def to_csv(kind: str, rows: list[dict], extra: dict | None = None) -> str:
    """CSV table with the column layout of the matching results table."""
    columns = TABLE_COLUMNS[kind]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for i, row in enumerate(rows):
        values = []
        for col in columns:
            value = row.get(col, (extra or {}).get(col) if i == 0 else "")
            if isinstance(value, float):
                value = f"{value:.2f}"
            values.append("n/a" if value is None else value)
        writer.writerow(values)
    return buf.getvalue()
