"""Fixed-budget exemplar memory with herding selection."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Hashable, Mapping, Sequence

import numpy as np


class ReplayBufferError(ValueError):
    pass


class BudgetTooSmallError(ReplayBufferError):
    pass


def _normalize_rows(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.maximum(norms, 1e-12)


TIE_TOL = 1e-12


def herding_select(features, m: int) -> list[int]:
    """Greedy herding (iCaRL).

    Repeatedly picks the not-yet-selected row that brings the running mean of
    the selection closest to the mean of all rows. Ties go to the lowest index;
    distances within ``TIE_TOL`` of the minimum count as ties so that
    rounding noise cannot override that rule.
    """
    features = np.asarray(features, dtype=np.float64)
    n = 0 if features.size == 0 else features.shape[0]
    if m < 0 or m > n:
        raise ReplayBufferError(f"cannot select {m} exemplars from {n} features")
    if m == 0:
        return []
    target = features.mean(axis=0)
    running = np.zeros_like(target)
    available = np.ones(n, dtype=bool)
    picked = []
    for k in range(1, m + 1):
        candidate_means = (running + features) / k
        dist = np.linalg.norm(target - candidate_means, axis=1)
        dist[~available] = np.inf
        best = dist.min()
        i = int(np.flatnonzero(dist <= best + TIE_TOL * (1.0 + best))[0])
        picked.append(i)
        available[i] = False
        running += features[i]
    return picked


def quotas(memory_size: int, seen_classes: Sequence[Hashable]) -> dict:
    """Per-class budget; the remainder goes one each to the earliest classes."""
    n = len(seen_classes)
    if n == 0:
        return {}
    q, r = divmod(memory_size, n)
    if q == 0:
        raise BudgetTooSmallError(
            f"memory_size={memory_size} is smaller than the {n} seen classes"
        )
    return {c: q + (1 if pos < r else 0) for pos, c in enumerate(seen_classes)}


@dataclass
class ReplayBuffer:
    memory_size: int
    per_class: dict = field(default_factory=dict)
    feature_means: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.memory_size < 0:
            raise ReplayBufferError("memory_size must be non-negative")

    def __len__(self) -> int:
        return sum(len(v) for v in self.per_class.values())

    @property
    def classes(self) -> list:
        return list(self.per_class)

    def samples(self) -> list[tuple[str, Hashable]]:
        return [(i, c) for c, ids in self.per_class.items() for i in ids]

    def to_json(self) -> str:
        return json.dumps({
            "memory_size": self.memory_size,
            "per_class": [[c, list(ids)] for c, ids in self.per_class.items()],
        })

    @classmethod
    def from_json(cls, text: str) -> "ReplayBuffer":
        doc = json.loads(text)
        return cls(doc["memory_size"], {c: list(ids) for c, ids in doc["per_class"]})


def rebuild(buffer: ReplayBuffer, embed: Callable[[list[str]], np.ndarray],
            seen_classes: Sequence[Hashable], source: Mapping[Hashable, Sequence[str]]) -> ReplayBuffer:
    """Reallocate the budget over ``seen_classes`` (given in class order).

    Stored classes keep a prefix of their herding order. Classes not yet in
    the buffer are selected by herding over ``embed(source[c])``; a class with
    fewer clips than its quota keeps all of them.
    """
    stale = set(buffer.per_class) - set(seen_classes)
    if stale:
        raise ReplayBufferError(f"buffer holds classes outside seen_classes: {sorted(map(str, stale))}")
    budget = quotas(buffer.memory_size, seen_classes)
    per_class = {}
    for c in seen_classes:
        if c in buffer.per_class:
            per_class[c] = list(buffer.per_class[c][: budget[c]])
            continue
        if c not in source:
            raise ReplayBufferError(f"no source data for new class {c!r}")
        ids = list(source[c])
        feats = _normalize_rows(embed(ids))
        order = herding_select(feats, min(budget[c], len(ids)))
        per_class[c] = [ids[k] for k in order]
    return ReplayBuffer(buffer.memory_size, per_class)


def class_means(buffer: ReplayBuffer, embed: Callable[[list[str]], np.ndarray]) -> dict:
    """Unit-norm mean of unit-normalized exemplar features, per class."""
    means = {}
    for c, ids in buffer.per_class.items():
        if not ids:
            raise ReplayBufferError(f"class {c!r} has no exemplars")
        mu = _normalize_rows(embed(list(ids))).mean(axis=0)
        norm = np.linalg.norm(mu)
        if norm < 1e-9:
            raise ReplayBufferError(f"class {c!r}: exemplar mean has zero norm")
        means[c] = mu / norm
    return means
