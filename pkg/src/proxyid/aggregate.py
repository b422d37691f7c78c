"""Aggregation and verification of per-pill predictions for one vial request."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

from .classify import PredictionRecord
from .errors import UserError

THRESHOLD_MIN = 0.87
THRESHOLD_GAP = 0.1
WINDOW = 10


@dataclass(frozen=True)
class VerificationResult:
    prediction: int
    verified: bool
    condition1: bool
    condition2: bool
    window_used: int
    num_predictions: int

    def to_record(self, request_id=None) -> dict:
        return {
            "request_id": request_id,
            "prediction": self.prediction,
            "verified": self.verified,
            "condition1": self.condition1,
            "condition2": self.condition2,
            "num_predictions": self.num_predictions,
        }

    def to_json(self, request_id=None) -> str:
        return json.dumps(self.to_record(request_id), sort_keys=True)


def _coerce(pred) -> tuple[int, float]:
    if isinstance(pred, PredictionRecord):
        return pred.label, pred.confidence
    label, conf = pred
    return int(label), float(conf)


def aggregate_verify(
    preds,
    threshold_min: float = THRESHOLD_MIN,
    threshold_gap: float = THRESHOLD_GAP,
    window: int = WINDOW,
) -> VerificationResult:
    """Majority class of the top-confidence window, verified by two threshold tests.

    ``preds`` holds :class:`PredictionRecord` objects or ``(label, confidence)``
    pairs. Equal confidences are ordered by label, then input position.
    """
    items = [_coerce(p) for p in preds]
    if not items:
        raise UserError("cannot aggregate an empty prediction list")
    if window < 1:
        raise UserError("window must be >= 1")
    order = sorted(range(len(items)), key=lambda i: (-items[i][1], items[i][0], i))
    top = [items[i] for i in order[:window]]

    counts: dict[int, int] = {}
    best: dict[int, float] = {}
    for label, conf in top:
        counts[label] = counts.get(label, 0) + 1
        best[label] = max(best.get(label, conf), conf)
    majority = min(counts, key=lambda c: (-counts[c], -best[c], c))
    c_major = best[majority]
    highest, c_high = top[0]

    cond1 = c_major > threshold_min
    cond2 = majority == highest or (c_high - c_major) <= threshold_gap
    return VerificationResult(majority, cond1 and cond2, cond1, cond2, len(top), len(items))


@dataclass
class RequestHistory:
    """Prediction batches collected under one request id, one batch per shake or pose."""

    request_id: str
    batches: list[list] = field(default_factory=list)

    def add(self, batch) -> None:
        batch = list(batch)
        if not batch:
            raise UserError("prediction batches must be non-empty")
        self.batches.append(batch)


def merge_request_history(history: RequestHistory, **thresholds) -> VerificationResult:
    if not history.batches:
        raise UserError(f"request {history.request_id!r} has no prediction batches")
    union = [p for batch in history.batches for p in batch]
    return aggregate_verify(union, **thresholds)
