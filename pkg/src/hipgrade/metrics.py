"""Evaluation metrics for the 7-class ordinal scale.

ECA counts exact combined-class matches; ONCA also credits predictions
one class away on the ordinal scale.  Balanced variants average the
per-class hit rates so rare classes weigh equally.  Regression SE is the
mean absolute class-index error.  Predictions whose Crowe/KL pair maps
to no valid class score as wrong everywhere; for SE they are charged the
distance to the farthest class, so an invalid prediction is never
cheaper than a valid one.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .labels import GradeLabel, NUM_CLASSES
from .utils import atomic_write_text

__all__ = [
    "EvalSet",
    "BalancedAccuracy",
    "ConfusionMatrix",
    "eca",
    "onca",
    "balanced_accuracy",
    "regression_se",
    "confusion",
    "per_grade_accuracy",
    "invalid_fraction",
    "summarize",
    "save_report",
    "plot_confusion",
    "plot_error_histogram",
    "plot_uncertainty_boxplot",
]


@dataclass
class EvalSet:
    """Paired predictions and ground truths for one evaluation pass."""

    predictions: list[GradeLabel]
    truths: list[GradeLabel]
    setting: str = "combined"

    def __post_init__(self):
        if len(self.predictions) != len(self.truths):
            raise ValueError(f"{len(self.predictions)} predictions vs "
                             f"{len(self.truths)} truths")
        if self.setting not in ("combined", "separated"):
            raise ValueError(f"setting must be combined/separated, got {self.setting!r}")
        for t in self.truths:
            if not t.is_valid:
                raise ValueError(f"ground-truth label {t} is not a valid pair")

    def __len__(self):
        return len(self.truths)


def _require_nonempty(eval_set: EvalSet) -> None:
    if len(eval_set) == 0:
        raise ValueError("empty evaluation set")


def eca(eval_set: EvalSet) -> float:
    """Exact class accuracy; invalid predictions count as wrong."""
    _require_nonempty(eval_set)
    hits = sum(1 for p, t in zip(eval_set.predictions, eval_set.truths)
               if p.combined == t.combined)
    return hits / len(eval_set)


def onca(eval_set: EvalSet) -> float:
    """One-neighbor class accuracy: |pred - truth| <= 1 on the combined scale."""
    _require_nonempty(eval_set)
    hits = sum(1 for p, t in zip(eval_set.predictions, eval_set.truths)
               if p.combined is not None and abs(p.combined - t.combined) <= 1)
    return hits / len(eval_set)


@dataclass
class BalancedAccuracy:
    """Mean per-class recall plus the classes that had no truths."""

    value: float
    absent_classes: tuple[int, ...] = ()


def balanced_accuracy(eval_set: EvalSet, neighbor: bool = False) -> BalancedAccuracy:
    """Average of class-wise hit rates over the classes present.

    neighbor=False scores exact matches; neighbor=True credits a class-c
    truth whenever |pred - c| <= 1.  Classes with zero truths are
    excluded from the mean and reported in ``absent_classes``.
    """
    _require_nonempty(eval_set)
    hits = np.zeros(NUM_CLASSES, dtype=int)
    totals = np.zeros(NUM_CLASSES, dtype=int)
    for p, t in zip(eval_set.predictions, eval_set.truths):
        totals[t.combined - 1] += 1
        if p.combined is None:
            continue
        delta = abs(p.combined - t.combined)
        if delta == 0 or (neighbor and delta <= 1):
            hits[t.combined - 1] += 1
    present = totals > 0
    recalls = hits[present] / totals[present]
    absent = tuple(int(c + 1) for c in np.flatnonzero(~present))
    return BalancedAccuracy(value=float(recalls.mean()), absent_classes=absent)


def _worst_case_error(truth_class: int) -> int:
    return max(truth_class - 1, NUM_CLASSES - truth_class)


def regression_se(predictions, truths=None) -> float:
    """Mean absolute error over combined class indices.

    Accepts either two numeric vectors or a single EvalSet; in the
    latter case an invalid prediction is charged the distance from the
    truth to the farthest class.
    """
    if isinstance(predictions, EvalSet):
        eval_set = predictions
        _require_nonempty(eval_set)
        errors = [abs(p.combined - t.combined) if p.combined is not None
                  else _worst_case_error(t.combined)
                  for p, t in zip(eval_set.predictions, eval_set.truths)]
        return float(np.mean(errors))
    preds = np.asarray(predictions, dtype=float)
    target = np.asarray(truths, dtype=float)
    if preds.size == 0:
        raise ValueError("empty evaluation set")
    if preds.shape != target.shape:
        raise ValueError(f"shape mismatch {preds.shape} vs {target.shape}")
    return float(np.mean(np.abs(preds - target)))


@dataclass
class ConfusionMatrix:
    """Combined-class confusion counts.

    ``counts`` is (8, 7): rows 0-6 are true classes 1-7 with columns the
    predicted class; row 7 collects invalid predictions, indexed by the
    true class.  Total count equals the evaluation-set size.
    """

    counts: np.ndarray = field(default_factory=lambda: np.zeros((NUM_CLASSES + 1, NUM_CLASSES), dtype=int))

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=int)
        if self.counts.shape != (NUM_CLASSES + 1, NUM_CLASSES):
            raise ValueError(f"counts must be {NUM_CLASSES + 1}x{NUM_CLASSES}")

    @property
    def n(self) -> int:
        return int(self.counts.sum())

    def to_csv(self, path) -> None:
        header = ["true\\pred"] + [f"pred_{c}" for c in range(1, NUM_CLASSES + 1)]
        lines = [",".join(header)]
        for t in range(NUM_CLASSES):
            lines.append(",".join([f"true_{t + 1}"] + [str(v) for v in self.counts[t]]))
        lines.append(",".join(["invalid"] + [str(v) for v in self.counts[NUM_CLASSES]]))
        atomic_write_text(path, "\n".join(lines) + "\n")


def confusion(eval_set: EvalSet) -> ConfusionMatrix:
    """Count (truth, prediction) pairs; invalid predictions fill the last row."""
    _require_nonempty(eval_set)
    cm = ConfusionMatrix()
    for p, t in zip(eval_set.predictions, eval_set.truths):
        if p.combined is None:
            cm.counts[NUM_CLASSES][t.combined - 1] += 1
        else:
            cm.counts[t.combined - 1][p.combined - 1] += 1
    return cm


def per_grade_accuracy(eval_set: EvalSet) -> tuple[float, float]:
    """Exact per-head accuracies (Crowe, KL), ignoring pair validity."""
    _require_nonempty(eval_set)
    crowe_hits = sum(1 for p, t in zip(eval_set.predictions, eval_set.truths)
                     if p.crowe == t.crowe)
    kl_hits = sum(1 for p, t in zip(eval_set.predictions, eval_set.truths)
                  if p.kl == t.kl)
    n = len(eval_set)
    return crowe_hits / n, kl_hits / n


def invalid_fraction(eval_set: EvalSet) -> float:
    _require_nonempty(eval_set)
    return sum(1 for p in eval_set.predictions if p.combined is None) / len(eval_set)


def summarize(eval_set: EvalSet) -> dict:
    """All scalar metrics for one evaluation set, as a JSON-friendly dict."""
    bal_exact = balanced_accuracy(eval_set, neighbor=False)
    bal_neigh = balanced_accuracy(eval_set, neighbor=True)
    out = {
        "n": len(eval_set),
        "setting": eval_set.setting,
        "eca": eca(eval_set),
        "onca": onca(eval_set),
        "balanced_exact": bal_exact.value,
        "balanced_neighbor": bal_neigh.value,
        "absent_classes": list(bal_exact.absent_classes),
        "se": regression_se(eval_set),
        "invalid_fraction": invalid_fraction(eval_set),
    }
    if eval_set.setting == "separated":
        crowe_acc, kl_acc = per_grade_accuracy(eval_set)
        out["crowe_accuracy"] = crowe_acc
        out["kl_accuracy"] = kl_acc
    return out


def save_report(report: dict, path) -> None:
    """Write a metrics report as pretty-printed JSON (atomic)."""
    atomic_write_text(path, json.dumps(report, indent=2, sort_keys=True) + "\n")


def _plt():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def plot_confusion(cm: ConfusionMatrix, path, title: str = "Confusion matrix") -> None:
    plt = _plt()
    fig, ax = plt.subplots(figsize=(6, 6))
    ax.imshow(cm.counts, cmap="Blues")
    for t in range(cm.counts.shape[0]):
        for p in range(cm.counts.shape[1]):
            if cm.counts[t, p]:
                ax.text(p, t, str(cm.counts[t, p]), ha="center", va="center")
    ax.set_xticks(range(NUM_CLASSES), [str(c) for c in range(1, NUM_CLASSES + 1)])
    ax.set_yticks(range(NUM_CLASSES + 1),
                  [str(c) for c in range(1, NUM_CLASSES + 1)] + ["invalid"])
    ax.set_xlabel("predicted class")
    ax.set_ylabel("true class")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_error_histogram(eval_set: EvalSet, path) -> None:
    plt = _plt()
    errors = [abs(p.combined - t.combined) if p.combined is not None
              else _worst_case_error(t.combined)
              for p, t in zip(eval_set.predictions, eval_set.truths)]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.hist(errors, bins=np.arange(-0.5, NUM_CLASSES + 0.5), edgecolor="black")
    ax.set_xlabel("|predicted - true| class distance")
    ax.set_ylabel("cases")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_uncertainty_boxplot(groups: dict[str, Sequence[float]], path,
                             ylabel: str = "uncertainty") -> None:
    plt = _plt()
    names = list(groups)
    fig, ax = plt.subplots(figsize=(1.8 * max(2, len(names)), 4))
    ax.boxplot([np.asarray(groups[k], dtype=float) for k in names], tick_labels=names)
    ax.set_ylabel(ylabel)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
