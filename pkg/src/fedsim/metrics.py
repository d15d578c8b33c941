"""Threshold-agnostic evaluation: ROC-AUC, PR-AUC, and the model x test-set matrix.

ROC-AUC is the Mann-Whitney statistic: the probability that a random positive
outscores a random negative, with ties credited 1/2, computed via rank sums
with average ranks. PR-AUC is average precision with equal scores grouped into
a single cut, which makes a constant scorer score exactly the prevalence.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import LabeledExample, stack_examples
from .nn import forward_batch
from .params import ParameterSet

__all__ = [
    "UndefinedMetricError",
    "ScoredSet",
    "MetricsRow",
    "MetricsReport",
    "roc_auc",
    "pr_auc",
    "evaluate",
    "cross_eval_matrix",
]


class UndefinedMetricError(ValueError):
    """The metric is undefined for this label composition."""


@dataclass(frozen=True, eq=False)
class ScoredSet:
    """Model scores paired with true binary labels."""

    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        labels = np.asarray(self.labels).reshape(-1)
        if scores.size != labels.size:
            raise ValueError(f"{scores.size} scores vs {labels.size} labels")
        if scores.size == 0:
            raise ValueError("empty scored set")
        if not np.all(np.isfinite(scores)):
            raise ValueError("scores must be finite")
        if not np.all((labels == 0) | (labels == 1)):
            raise ValueError("labels must be 0 or 1")
        scores.flags.writeable = False
        out_labels = labels.astype(np.int64)
        out_labels.flags.writeable = False
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "labels", out_labels)

    @property
    def n_pos(self) -> int:
        return int(np.sum(self.labels == 1))

    @property
    def n_neg(self) -> int:
        return int(np.sum(self.labels == 0))


def _average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks, ties sharing the average rank of their group."""
    n = values.size
    order = np.argsort(values, kind="mergesort")
    sorted_values = values[order]
    starts = np.flatnonzero(np.r_[True, sorted_values[1:] != sorted_values[:-1]])
    counts = np.diff(np.r_[starts, n])
    group_rank = starts + (counts - 1) / 2.0 + 1.0
    group_of = np.repeat(np.arange(starts.size), counts)
    ranks = np.empty(n)
    ranks[order] = group_rank[group_of]
    return ranks


def roc_auc(s: ScoredSet) -> float:
    """P(random positive outscores random negative), ties counted 1/2."""
    n_pos, n_neg = s.n_pos, s.n_neg
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(
            f"ROC-AUC needs both classes, got {n_pos} positives and {n_neg} negatives"
        )
    ranks = _average_ranks(s.scores)
    u = ranks[s.labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def pr_auc(s: ScoredSet) -> float:
    """Average precision over descending-score cuts, equal scores grouped."""
    n_pos = s.n_pos
    if n_pos == 0:
        raise UndefinedMetricError("PR-AUC needs at least one positive")
    order = np.argsort(-s.scores, kind="mergesort")
    scores = s.scores[order]
    labels = s.labels[order]
    n = scores.size
    # Index of the last element of each equal-score group.
    ends = np.flatnonzero(np.r_[scores[1:] != scores[:-1], True])
    tp = np.cumsum(labels)[ends].astype(np.float64)
    predicted = (ends + 1).astype(np.float64)
    precision = tp / predicted
    recall_step = np.diff(np.r_[0.0, tp]) / n_pos
    return float(np.sum(precision * recall_step))


def evaluate(
    params: ParameterSet, test: Sequence[LabeledExample]
) -> tuple[float, float]:
    """(ROC-AUC, PR-AUC) of a model's probabilities on a test split."""
    X, y = stack_examples(test)
    scored = ScoredSet(forward_batch(params, X), y)
    return roc_auc(scored), pr_auc(scored)


@dataclass(frozen=True)
class MetricsRow:
    model: str
    test_set: str
    auroc: float
    auprc: float
    n_pos: int
    n_neg: int


@dataclass(frozen=True)
class MetricsReport:
    """One row per (model, test set) pair, in test-set-major order."""

    rows: tuple[MetricsRow, ...]

    def __post_init__(self):
        object.__setattr__(self, "rows", tuple(self.rows))

    def model_names(self) -> list[str]:
        seen: list[str] = []
        for row in self.rows:
            if row.model not in seen:
                seen.append(row.model)
        return seen

    def test_set_names(self) -> list[str]:
        seen: list[str] = []
        for row in self.rows:
            if row.test_set not in seen:
                seen.append(row.test_set)
        return seen

    def cell(self, model: str, test_set: str) -> MetricsRow:
        for row in self.rows:
            if row.model == model and row.test_set == test_set:
                return row
        raise KeyError(f"no cell for model={model!r}, test_set={test_set!r}")

    def _value(self, row: MetricsRow, metric: str) -> float:
        if metric == "auroc":
            return row.auroc
        if metric == "auprc":
            return row.auprc
        raise ValueError(f"unknown metric {metric!r}")

    def to_csv(self, metric: str) -> str:
        """Machine table: test sets as rows, models as columns, raw fractions."""
        models = self.model_names()
        lines = ["data," + ",".join(models)]
        for test_set in self.test_set_names():
            values = [repr(self._value(self.cell(m, test_set), metric)) for m in models]
            lines.append(test_set + "," + ",".join(values))
        return "\n".join(lines) + "\n"

    def to_markdown(self, metric: str) -> str:
        """Human table: percentages with two decimals, aligned columns."""
        models = self.model_names()
        header = ["data"] + models
        body = []
        for test_set in self.test_set_names():
            row = [test_set] + [
                f"{100.0 * self._value(self.cell(m, test_set), metric):.2f}" for m in models
            ]
            body.append(row)
        widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
        def fmt(cells):
            return "| " + " | ".join(c.ljust(w) for c, w in zip(cells, widths)) + " |"
        rule = "|" + "|".join("-" * (w + 2) for w in widths) + "|"
        return "\n".join([fmt(header), rule] + [fmt(r) for r in body]) + "\n"


def cross_eval_matrix(
    models: Sequence[tuple[str, ParameterSet]],
    test_sets: Sequence[tuple[str, Sequence[LabeledExample]]],
) -> MetricsReport:
    """Evaluate every model on every test set; rows ordered test-set-major."""
    rows = []
    for test_name, test in test_sets:
        _, y = stack_examples(test)
        n_pos = int(np.sum(y == 1))
        n_neg = int(np.sum(y == 0))
        for model_name, params in models:
            auroc, auprc = evaluate(params, test)
            rows.append(MetricsRow(model_name, test_name, auroc, auprc, n_pos, n_neg))
    return MetricsReport(tuple(rows))
