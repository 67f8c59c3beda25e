"""Confusion matrices, per-class and macro F1, model evaluation and the JSON report."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Tuple

import jsonschema
import numpy as np

from .ops import softmax_cross_entropy


def confusion_matrix(y_true: Sequence[int], y_pred: Sequence[int], num_classes: int) -> np.ndarray:
    """Rows are true classes, columns predictions."""
    t = np.asarray(y_true, dtype=np.int64).ravel()
    p = np.asarray(y_pred, dtype=np.int64).ravel()
    if t.shape != p.shape:
        raise ValueError("y_true and y_pred differ in length")
    if t.size and (t.min() < 0 or p.min() < 0 or t.max() >= num_classes or p.max() >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes})")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (t, p), 1)
    return cm


def f1_scores(cm: np.ndarray) -> Tuple[np.ndarray, float]:
    """Per-class F1 (0 where precision + recall is 0) and their unweighted mean."""
    cm = np.asarray(cm, dtype=np.float64)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1] or cm.shape[0] < 2:
        raise ValueError("confusion matrix must be K x K with K >= 2")
    tp = np.diag(cm)
    # 2PR/(P+R) == 2TP/(2TP+FP+FN), which avoids forming P and R separately.
    denom = 2 * tp + (cm.sum(axis=0) - tp) + (cm.sum(axis=1) - tp)
    f1 = np.divide(2 * tp, denom, out=np.zeros_like(tp), where=denom > 0)
    return f1, float(f1.mean())


@dataclass
class MetricsReport:
    confusion: np.ndarray
    f1_per_class: np.ndarray
    f1_macro: float
    loss: float
    accuracy: float
    samples: int

    def as_dict(self) -> dict:
        return {
            "confusion": self.confusion.tolist(),
            "f1_per_class": [float(v) for v in self.f1_per_class],
            "f1_macro": float(self.f1_macro),
        }


def evaluate(model, batches: Iterable[Tuple[np.ndarray, np.ndarray]], num_classes: Optional[int] = None) -> MetricsReport:
    """Eval-mode pass over ``batches``; argmax predictions feed the confusion matrix."""
    k = num_classes if num_classes is not None else model.cfg.num_classes
    cm = np.zeros((k, k), dtype=np.int64)
    loss_sum = 0.0
    n = 0
    for x, y in batches:
        logits = model.forward(x, train=False)
        loss, _ = softmax_cross_entropy(logits, y)
        loss_sum += float(loss) * len(y)
        n += len(y)
        cm += confusion_matrix(y, np.argmax(logits, axis=1), k)
    if n == 0:
        raise ValueError("cannot evaluate on an empty test set")
    f1, macro = f1_scores(cm)
    return MetricsReport(cm, f1, macro, loss_sum / n, float(np.trace(cm)) / n, n)


# -- consolidated report --------------------------------------------------------

REPORT_SCHEMA = {
    "type": "object",
    "required": ["model", "metrics", "latency"],
    "properties": {
        "model": {
            "type": "object",
            "required": ["params", "flops", "size_bytes", "config"],
            "properties": {
                "params": {"type": "integer", "minimum": 0},
                "flops": {"type": "integer", "minimum": 0},
                "size_bytes": {"type": "integer", "minimum": 0},
                "config": {"type": "object"},
            },
        },
        "metrics": {
            "type": ["object", "null"],
            "required": ["confusion", "f1_per_class", "f1_macro"],
            "properties": {
                "confusion": {"type": "array", "items": {"type": "array", "items": {"type": "integer", "minimum": 0}}},
                "f1_per_class": {"type": "array", "items": {"type": "number", "minimum": 0, "maximum": 1}},
                "f1_macro": {"type": "number", "minimum": 0, "maximum": 1},
            },
        },
        "latency": {
            "type": ["object", "null"],
            "required": ["device", "batch", "input", "mean_ms", "median_ms", "p95_ms", "fps"],
            "properties": {
                "device": {"type": "string"},
                "batch": {"type": "integer", "minimum": 1},
                "input": {"type": "array", "items": {"type": "integer"}, "minItems": 2, "maxItems": 2},
                "mean_ms": {"type": "number", "exclusiveMinimum": 0},
                "median_ms": {"type": "number", "exclusiveMinimum": 0},
                "p95_ms": {"type": "number", "exclusiveMinimum": 0},
                "fps": {"type": "number", "exclusiveMinimum": 0},
            },
        },
    },
}


def _config_dict(cfg) -> dict:
    from .config import parse_kv_text, to_kv_text

    return parse_kv_text(to_kv_text(cfg))


def report(analysis: dict, metrics: Optional[MetricsReport] = None, latency=None, config=None) -> dict:
    """Merge analyzer output, metrics and latency into one schema-valid document."""
    doc = {
        "model": {
            "params": int(analysis["params"]),
            "flops": int(analysis["flops"]),
            "size_bytes": int(analysis["size_bytes"]),
            "config": _config_dict(config) if config is not None else dict(analysis.get("config", {})),
        },
        "metrics": metrics.as_dict() if metrics is not None else None,
        "latency": latency.as_dict() if latency is not None else None,
    }
    validate_report(doc)
    return doc


def validate_report(doc: dict) -> None:
    jsonschema.validate(doc, REPORT_SCHEMA)


def dumps_report(doc: dict) -> str:
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"
