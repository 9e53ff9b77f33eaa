"""Stage accuracies and average incremental accuracy."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .scenario import TaskSchedule, cumulative_test_data, task_data


class EvaluationError(ValueError):
    pass


@dataclass
class AccuracyMatrix:
    """``rows[i][j]``: accuracy on task ``j``'s test classes after training task ``i`` (j <= i)."""

    rows: list[list[float | None]] = field(default_factory=list)
    per_stage: list[float] = field(default_factory=list)

    def add(self, stage_accuracy: float, row: list[float]) -> None:
        if len(row) != len(self.rows) + 1:
            raise EvaluationError(f"row {len(self.rows)} must have {len(self.rows) + 1} entries")
        self.rows.append(list(row))
        self.per_stage.append(stage_accuracy)

    @property
    def average(self) -> float:
        return average_accuracy(self.per_stage)


def masked_predictions(scores: np.ndarray, n_seen: int) -> np.ndarray:
    """Argmax over the first ``n_seen`` columns (later columns are treated as -inf)."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape[1] < n_seen:
        raise EvaluationError(f"{scores.shape[1]} score columns for {n_seen} seen classes")
    return np.argmax(scores[:, :n_seen], axis=1)


def top1(predictions, targets) -> float:
    predictions, targets = np.asarray(predictions), np.asarray(targets)
    if len(targets) == 0:
        raise EvaluationError("accuracy over an empty set")
    return float(np.mean(predictions == targets))


def evaluate_stage(score_fn: Callable[[np.ndarray], np.ndarray], schedule: TaskSchedule, i: int,
                   test_dataset, bank) -> tuple[float, list[float]]:
    """Top-1 accuracy after task ``i``.

    ``score_fn`` maps an (N, 1, n_mels, n_frames) feature batch to class
    scores indexed by class-order position. Returns the cumulative accuracy
    ``A_i`` and the per-task row ``[A[i][0], ..., A[i][i]]``.
    """
    cumulative = cumulative_test_data(schedule, i, test_dataset)
    if cumulative.sample_count == 0:
        raise EvaluationError(f"stage {i}: empty cumulative test set")
    n_seen = schedule.n_seen(i)
    scores = score_fn(bank.stack(cumulative.ids))
    preds = masked_predictions(scores, n_seen)
    targets = np.array([schedule.class_index(c) for c in cumulative.labels])
    correct = dict(zip(cumulative.ids, preds == targets))

    row = []
    for j in range(i + 1):
        part = task_data(schedule, j, test_dataset)
        row.append(float(np.mean([correct[s] for s in part.ids])) if part.sample_count else None)
    return top1(preds, targets), row


def average_accuracy(per_stage) -> float:
    """Arithmetic mean of the stage accuracies."""
    per_stage = list(per_stage)
    if not per_stage:
        raise EvaluationError("average accuracy of an empty list")
    return sum(per_stage) / len(per_stage)
