"""Fidelity: does the policy keep its action when shown only the masked state?"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import UsageError
from ..explainer import overlay


@dataclass
class ConfusionCounts:
    """One-vs-rest counts per action, updated incrementally."""

    n_actions: int
    tp: np.ndarray = None
    tn: np.ndarray = None
    fp: np.ndarray = None
    fn: np.ndarray = None
    total: int = 0
    correct: int = 0

    def __post_init__(self):
        if self.n_actions < 2:
            raise UsageError("fidelity needs K >= 2")
        for name in ("tp", "tn", "fp", "fn"):
            if getattr(self, name) is None:
                setattr(self, name, np.zeros(self.n_actions, dtype=np.int64))

    def update(self, label, pred):
        label, pred = int(label), int(pred)
        for a in (label, pred):
            if not 0 <= a < self.n_actions:
                raise UsageError(f"action {a} outside [0, {self.n_actions})")
        self.total += 1
        if label == pred:
            self.correct += 1
            self.tp[label] += 1
        else:
            self.fn[label] += 1
            self.fp[pred] += 1
        # every other action is a true negative for this pair
        self.tn += 1
        self.tn[label] -= 1
        if pred != label:
            self.tn[pred] -= 1

    def update_many(self, labels, preds):
        for y, p in zip(labels, preds):
            self.update(y, p)
        return self

    def absent_classes(self):
        return [a for a in range(self.n_actions) if self.tp[a] + self.fn[a] == 0]

    def report(self):
        if self.total == 0:
            raise UsageError("no samples recorded")
        precision = np.zeros(self.n_actions)
        recall = np.zeros(self.n_actions)
        for a in range(self.n_actions):
            if self.tp[a] + self.fp[a] > 0:
                precision[a] = self.tp[a] / (self.tp[a] + self.fp[a])
            if self.tp[a] + self.fn[a] > 0:
                recall[a] = self.tp[a] / (self.tp[a] + self.fn[a])
        # plain left-to-right sums keep results reproducible by hand
        p = sum(float(v) for v in precision) / self.n_actions
        r = sum(float(v) for v in recall) / self.n_actions
        f1 = 2 * p * r / (p + r) if p + r > 0 else 0.0
        return FidelityReport(self.correct / self.total, p, r, f1, self.absent_classes(),
                              precision.tolist(), recall.tolist())


@dataclass
class FidelityReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    absent_classes: list = field(default_factory=list)
    per_class_precision: list = field(default_factory=list)
    per_class_recall: list = field(default_factory=list)

    def as_dict(self):
        return {"accuracy": self.accuracy, "precision": self.precision, "recall": self.recall,
                "f1": self.f1, "absent_classes": list(self.absent_classes),
                "per_class_precision": list(self.per_class_precision),
                "per_class_recall": list(self.per_class_recall)}


def mask_provider(explainer):
    """Normalise an explainer or callable into ``states -> [N, K, H, W]`` numpy masks."""
    if hasattr(explainer, "masks"):
        return explainer.masks
    if callable(explainer):
        return lambda states: np.asarray(explainer(states), dtype=np.float32)
    raise UsageError(f"{explainer!r} is neither an explainer nor a mask provider")


def masked_predictions(policy, provider, states, labels, r, batch_size=64):
    """Greedy policy action on ``s * m_a + r * (1 - m_a)`` for each labelled state."""
    provider = mask_provider(provider)
    states = np.asarray(states, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    preds = np.empty(len(labels), dtype=np.int64)
    for i in range(0, len(labels), batch_size):
        s = states[i:i + batch_size]
        y = labels[i:i + batch_size]
        m = provider(s)[np.arange(len(y)), y]
        preds[i:i + batch_size] = np.argmax(policy.probabilities(overlay(s, m, r)), axis=1)
    return preds


def fidelity(policy, provider, states, labels, r, batch_size=64):
    """Return ``(FidelityReport, ConfusionCounts)`` over a labelled split."""
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        raise UsageError("fidelity needs a nonempty test split")
    if policy.n_actions < 2:
        raise UsageError("fidelity needs K >= 2")
    preds = masked_predictions(policy, provider, states, labels, r, batch_size)
    counts = ConfusionCounts(policy.n_actions).update_many(labels, preds)
    return counts.report(), counts
