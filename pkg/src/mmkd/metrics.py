"""Accuracy, action accuracy, expected calibration error and per-class deltas.

All accumulation happens in float64. Ties in rankings go to the lowest class
index (stable sort of the negated scores).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError

NUM_BINS = 15
TOP_N_CLASSES = 20


def _check_probs(probs: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if p.ndim != 2 or y.shape != (p.shape[0],):
        raise ContractError(f"need [N, C] probabilities and [N] labels, got {p.shape} and {y.shape}")
    return p, y


def top1_predictions(probs: np.ndarray) -> np.ndarray:
    return np.argmax(np.asarray(probs), axis=1)  # first maximum wins


def topk_accuracy(probs: np.ndarray, labels: np.ndarray, k: int = 1) -> float:
    p, y = _check_probs(probs, labels)
    if not 1 <= k <= p.shape[1]:
        raise ContractError(f"k={k} outside [1, {p.shape[1]}]")
    if len(y) == 0:
        return 0.0
    order = np.argsort(-p, axis=1, kind="stable")[:, :k]
    return float(np.mean(np.any(order == y[:, None], axis=1)))


def action_accuracy(noun_probs, verb_probs, noun_labels, verb_labels) -> float:
    n, yn = _check_probs(noun_probs, noun_labels)
    v, yv = _check_probs(verb_probs, verb_labels)
    if len(yn) != len(yv):
        raise ContractError(f"noun and verb sets differ in size: {len(yn)} vs {len(yv)}")
    if len(yn) == 0:
        return 0.0
    return float(np.mean((top1_predictions(n) == yn) & (top1_predictions(v) == yv)))


def bin_index(confidence: np.ndarray, num_bins: int = NUM_BINS) -> np.ndarray:
    """Bin ``k`` (0-based) covers ``(k/K, (k+1)/K]``; 0 and 1 fall in the first and last bins."""
    edges = np.arange(num_bins + 1, dtype=np.float64) / num_bins
    idx = np.searchsorted(edges, confidence, side="left") - 1
    return np.clip(idx, 0, num_bins - 1)


def expected_calibration_error(probs: np.ndarray, labels: np.ndarray, num_bins: int = NUM_BINS) -> float:
    """``sum_k |B_k|/N * |acc(B_k) - conf(B_k)|`` over top-1 confidences."""
    p, y = _check_probs(probs, labels)
    if num_bins < 1:
        raise ContractError("num_bins must be positive")
    if len(y) == 0:
        return 0.0
    if np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-4):
        raise ContractError("probability rows must sum to 1 (within 1e-4)")
    conf = p.max(axis=1)
    correct = (top1_predictions(p) == y).astype(np.float64)
    idx = bin_index(conf, num_bins)
    n = len(y)
    total = []
    for k in range(num_bins):
        sel = idx == k
        m = int(sel.sum())
        if m == 0:
            continue
        acc = math.fsum(correct[sel]) / m
        c = math.fsum(conf[sel]) / m
        total.append(m / n * abs(acc - c))
    return math.fsum(total)


def reliability_table(probs, labels, num_bins: int = NUM_BINS) -> list[dict]:
    """Per-bin count, accuracy and confidence (CSV export of a reliability diagram)."""
    p, y = _check_probs(probs, labels)
    conf = p.max(axis=1)
    correct = (top1_predictions(p) == y).astype(np.float64)
    idx = bin_index(conf, num_bins)
    rows = []
    for k in range(num_bins):
        sel = idx == k
        m = int(sel.sum())
        rows.append({
            "bin": k,
            "lower": k / num_bins,
            "upper": (k + 1) / num_bins,
            "count": m,
            "accuracy": math.fsum(correct[sel]) / m if m else 0.0,
            "confidence": math.fsum(conf[sel]) / m if m else 0.0,
        })
    return rows


def per_class_accuracy(probs, labels) -> dict[int, tuple[int, float]]:
    p, y = _check_probs(probs, labels)
    pred = top1_predictions(p)
    out = {}
    for c in np.unique(y):
        sel = y == c
        out[int(c)] = (int(sel.sum()), float(np.mean(pred[sel] == c)))
    return out


@dataclass
class MetricsReport:
    top1: float
    top5: float
    ece: float
    num_samples: int
    num_bins: int = NUM_BINS
    noun_top1: float | None = None
    verb_top1: float | None = None
    action_top1: float | None = None
    per_class: dict[int, tuple[int, float]] = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {
            "top1": self.top1,
            "top5": self.top5,
            "noun_top1": self.noun_top1,
            "verb_top1": self.verb_top1,
            "action_top1": self.action_top1,
            "ece": self.ece,
            "num_samples": self.num_samples,
            "num_bins": self.num_bins,
            "per_class": [[c, s, a] for c, (s, a) in sorted(self.per_class.items())],
        }
        d.update(self.extra)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        known = {"top1", "top5", "noun_top1", "verb_top1", "action_top1", "ece", "num_samples", "num_bins", "per_class"}
        return cls(
            top1=d["top1"], top5=d["top5"], ece=d["ece"], num_samples=d["num_samples"],
            num_bins=d.get("num_bins", NUM_BINS), noun_top1=d.get("noun_top1"),
            verb_top1=d.get("verb_top1"), action_top1=d.get("action_top1"),
            per_class={int(c): (int(s), float(a)) for c, s, a in d.get("per_class", [])},
            extra={k: v for k, v in d.items() if k not in known},
        )

    def check(self) -> None:
        """Raise if the report violates its own invariants."""
        for name in ("top1", "top5", "ece", "noun_top1", "verb_top1", "action_top1"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ContractError(f"{name}={v} outside [0, 1]")
        if self.action_top1 is not None and self.noun_top1 is not None and self.verb_top1 is not None:
            if self.action_top1 > min(self.noun_top1, self.verb_top1) + 1e-12:
                raise ContractError("action accuracy exceeds noun or verb accuracy")
        if self.per_class and sum(s for s, _ in self.per_class.values()) != self.num_samples:
            raise ContractError("per-class supports do not sum to the sample count")


def joint_probabilities(noun_probs: np.ndarray, verb_probs: np.ndarray) -> np.ndarray:
    """Outer product ``p(n) p(v)`` flattened to action index ``n * V + v``."""
    n = np.asarray(noun_probs, dtype=np.float64)
    v = np.asarray(verb_probs, dtype=np.float64)
    return (n[:, :, None] * v[:, None, :]).reshape(n.shape[0], -1)


def report_single(probs, labels, num_bins: int = NUM_BINS) -> MetricsReport:
    p, y = _check_probs(probs, labels)
    k5 = min(5, p.shape[1])
    r = MetricsReport(
        top1=topk_accuracy(p, y, 1),
        top5=topk_accuracy(p, y, k5),
        ece=expected_calibration_error(p, y, num_bins),
        num_samples=len(y),
        num_bins=num_bins,
        per_class=per_class_accuracy(p, y),
    )
    r.check()
    return r


def report_dual(noun_probs, verb_probs, noun_labels, verb_labels, num_verbs: int,
                num_bins: int = NUM_BINS) -> MetricsReport:
    """Dual-head report: top-1/top-5/ECE refer to actions from the joint distribution."""
    n, yn = _check_probs(noun_probs, noun_labels)
    v, yv = _check_probs(verb_probs, verb_labels)
    joint = joint_probabilities(n, v)
    ya = yn * num_verbs + yv
    r = MetricsReport(
        top1=action_accuracy(n, v, yn, yv),
        top5=topk_accuracy(joint, ya, min(5, joint.shape[1])),
        ece=expected_calibration_error(joint, ya, num_bins),
        num_samples=len(ya),
        num_bins=num_bins,
        noun_top1=topk_accuracy(n, yn, 1),
        verb_top1=topk_accuracy(v, yv, 1),
        action_top1=action_accuracy(n, v, yn, yv),
        per_class=per_class_accuracy(joint, ya),
        extra={
            "noun_ece": expected_calibration_error(n, yn, num_bins),
            "verb_ece": expected_calibration_error(v, yv, num_bins),
        },
    )
    r.check()
    return r


def per_class_delta(report_a: MetricsReport, report_b: MetricsReport, top_n: int = TOP_N_CLASSES) -> list[tuple[int, float]]:
    """Accuracy differences ``a - b`` on the ``top_n`` most frequent classes (support desc, id asc)."""
    if report_a.num_samples != report_b.num_samples:
        raise ContractError(f"reports cover different sample counts: {report_a.num_samples} vs {report_b.num_samples}")
    if set(report_a.per_class) != set(report_b.per_class):
        raise ContractError("reports cover different classes")
    order = sorted(report_a.per_class, key=lambda c: (-report_a.per_class[c][0], c))[:top_n]
    return [(c, report_a.per_class[c][1] - report_b.per_class[c][1]) for c in order]
