"""Incremental task schedules over disjoint class sets.

Class labels are mapped to contiguous indices by their position in the
shuffled class order, so the classes seen after task ``i`` are always the
index range ``[0, n_seen(i))``.
"""
from __future__ import annotations

import logging
import random
from collections import defaultdict
from dataclasses import dataclass
from typing import Hashable, Sequence

logger = logging.getLogger(__name__)

Label = Hashable


class ScenarioError(ValueError):
    """Base class for invalid scenario construction."""


class DivisibilityError(ScenarioError):
    pass


class DuplicateLabelError(ScenarioError):
    pass


class InitClassesError(ScenarioError):
    pass


class FewShotError(ScenarioError):
    pass


@dataclass(frozen=True)
class ScenarioSpec:
    num_classes: int
    init_cls: int
    increment: int
    seed: int = 1993
    few_shot: bool = False
    n_way: int | None = None
    k_shot: int | None = None

    def __post_init__(self):
        for name in ("num_classes", "init_cls", "increment"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ScenarioError(f"{name} must be a positive integer, got {value!r}")
        if self.init_cls > self.num_classes:
            raise InitClassesError(
                f"init_cls={self.init_cls} exceeds num_classes={self.num_classes}"
            )
        if (self.num_classes - self.init_cls) % self.increment != 0:
            raise DivisibilityError(
                f"num_classes - init_cls = {self.num_classes - self.init_cls} "
                f"is not a multiple of increment={self.increment}"
            )
        if self.few_shot:
            n_way = self.increment if self.n_way is None else self.n_way
            if n_way != self.increment:
                raise FewShotError(f"n_way={n_way} must equal increment={self.increment}")
            if self.k_shot is None or self.k_shot < 1:
                raise FewShotError(f"few-shot scenarios need k_shot >= 1, got {self.k_shot!r}")
            object.__setattr__(self, "n_way", n_way)

    @property
    def num_tasks(self) -> int:
        return 1 + (self.num_classes - self.init_cls) // self.increment


@dataclass(frozen=True)
class TaskSchedule:
    class_order: tuple
    task_label_spaces: tuple[frozenset, ...]
    cumulative_label_spaces: tuple[frozenset, ...]
    task_sizes: tuple[int, ...]

    @property
    def num_tasks(self) -> int:
        return len(self.task_label_spaces)

    def class_index(self, label: Label) -> int:
        return self._index[label]

    def n_seen(self, i: int) -> int:
        """Number of classes seen after task ``i``."""
        self.check_task(i)
        return sum(self.task_sizes[: i + 1])

    def task_classes(self, i: int) -> list:
        """Labels of task ``i`` in class order."""
        self.check_task(i)
        start = sum(self.task_sizes[:i])
        return list(self.class_order[start : start + self.task_sizes[i]])

    def task_of_label(self, label: Label) -> int:
        idx = self.class_index(label)
        bound = 0
        for t, size in enumerate(self.task_sizes):
            bound += size
            if idx < bound:
                return t
        raise KeyError(label)

    def check_task(self, i: int) -> None:
        if not 0 <= i < self.num_tasks:
            raise IndexError(f"task index {i} out of range [0, {self.num_tasks})")

    def __post_init__(self):
        object.__setattr__(self, "_index", {c: k for k, c in enumerate(self.class_order)})


@dataclass(frozen=True)
class TaskData:
    task_index: int
    samples: tuple[tuple[str, Label], ...]

    @property
    def sample_count(self) -> int:
        return len(self.samples)

    @property
    def ids(self) -> list[str]:
        return [s for s, _ in self.samples]

    @property
    def labels(self) -> list:
        return [y for _, y in self.samples]

    def by_class(self) -> dict:
        groups: dict = defaultdict(list)
        for clip_id, label in self.samples:
            groups[label].append(clip_id)
        return dict(groups)


def build_schedule(spec: ScenarioSpec, class_labels: Sequence[Label]) -> TaskSchedule:
    labels = list(class_labels)
    if len(set(labels)) != len(labels):
        seen, dupes = set(), []
        for c in labels:
            if c in seen:
                dupes.append(c)
            seen.add(c)
        raise DuplicateLabelError(f"duplicate class labels: {dupes}")
    if len(labels) != spec.num_classes:
        raise ScenarioError(
            f"expected {spec.num_classes} class labels, got {len(labels)}"
        )

    order = list(labels)
    # random.Random.shuffle is a Fisher-Yates shuffle
    random.Random(spec.seed).shuffle(order)

    sizes = [spec.init_cls] + [spec.increment] * (spec.num_tasks - 1)
    spaces, cumulative = [], []
    start = 0
    for size in sizes:
        spaces.append(frozenset(order[start : start + size]))
        start += size
        cumulative.append(frozenset(order[:start]))
    return TaskSchedule(tuple(order), tuple(spaces), tuple(cumulative), tuple(sizes))


def _filter(samples, label_space, task_index) -> TaskData:
    chosen = tuple((clip_id, y) for clip_id, y in samples if y in label_space)
    present = {y for _, y in chosen}
    missing = [c for c in label_space if c not in present]
    if missing:
        logger.warning("task %d: no samples for classes %s", task_index, sorted(map(str, missing)))
    return TaskData(task_index, chosen)


def _samples_of(dataset) -> list[tuple[str, Label]]:
    if hasattr(dataset, "samples"):
        return list(dataset.samples)
    return list(dataset)


def task_data(schedule: TaskSchedule, i: int, dataset) -> TaskData:
    """Samples of ``dataset`` whose label lies in task ``i``'s label space.

    ``dataset`` is anything exposing ``samples`` as ``(id, label)`` pairs
    (an :class:`audiocil.audio_data.Dataset`) or an iterable of such pairs.
    The split is whatever split the dataset holds.
    """
    schedule.check_task(i)
    return _filter(_samples_of(dataset), schedule.task_label_spaces[i], i)


def cumulative_test_data(schedule: TaskSchedule, i: int, dataset) -> TaskData:
    schedule.check_task(i)
    return _filter(_samples_of(dataset), schedule.cumulative_label_spaces[i], i)


def sample_few_shot(task: TaskData, n_way: int, k_shot: int, seed: int) -> TaskData:
    """Draw an ``n_way``-way ``k_shot``-shot session from ``task``.

    Classes are taken in order of first appearance; shots are drawn with a
    seeded permutation and then restored to dataset order.
    """
    groups = task.by_class()
    if len(groups) < n_way:
        raise FewShotError(f"task {task.task_index} has {len(groups)} classes, need n_way={n_way}")
    classes = list(groups)[:n_way]
    for c in classes:
        if len(groups[c]) < k_shot:
            raise FewShotError(
                f"class {c!r} has {len(groups[c])} samples, need k_shot={k_shot}"
            )
    rng = random.Random(seed)
    keep = set()
    for c in classes:
        keep.update(rng.sample(groups[c], k_shot))
    samples = tuple(s for s in task.samples if s[0] in keep)
    return TaskData(task.task_index, samples)
