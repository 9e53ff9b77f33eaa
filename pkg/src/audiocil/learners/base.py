"""Task lifecycle shared by all learners: prepare -> epoch loop -> finalize."""
from __future__ import annotations

import copy
import logging
import math

import numpy as np
import torch

from .. import memory
from ..models import IncrementalModel, build_backbone, expand_head, freeze
from ..scenario import TaskData, TaskSchedule

logger = logging.getLogger(__name__)


class LearnerError(ValueError):
    pass


class TaskOrderError(LearnerError):
    pass


class NonFiniteLossError(RuntimeError):
    pass


def replay_batch_mix(task_batch, buffer, rng: np.random.Generator, size: int | None = None):
    """Append ``size`` buffer samples (uniform, without replacement) to ``task_batch``.

    Both inputs are lists of ``(clip id, label)``. With an empty or missing
    buffer the batch passes through unchanged.
    """
    task_batch = list(task_batch)
    if buffer is None or len(buffer) == 0:
        return task_batch
    pool = buffer.samples()
    size = len(task_batch) if size is None else size
    size = min(size, len(pool))
    picks = rng.choice(len(pool), size=size, replace=False)
    return task_batch + [pool[k] for k in sorted(picks)]


class Learner:
    name = "base"
    requires_buffer = False
    mix_replay = False
    eval_mode = "logits"
    defaults: dict = {}

    def __init__(self, convnet_type: str = "tiny-cnn", feature_dim: int = 64,
                 memory_size: int = 0, epochs: int = 10, learning_rate: float = 1e-3,
                 batch_size: int = 32, seed: int = 1993, hyperparameters: dict | None = None):
        hyperparameters = dict(hyperparameters or {})
        unknown = sorted(set(hyperparameters) - set(self.defaults))
        if unknown:
            raise LearnerError(
                f"{self.name}: unknown hyperparameter(s) {unknown}; accepted: {sorted(self.defaults)}"
            )
        self.hp = {**self.defaults, **hyperparameters}
        if self.requires_buffer and memory_size <= 0:
            raise LearnerError(f"{self.name} requires a replay buffer (memory_size > 0)")
        if epochs < 0 or batch_size < 1 or learning_rate <= 0:
            raise LearnerError("epochs >= 0, batch_size >= 1 and learning_rate > 0 are required")
        self.convnet_type = convnet_type
        self.feature_dim = feature_dim
        self.memory_size = memory_size
        self.epochs = epochs
        self.lr = learning_rate
        self.batch_size = batch_size
        self.seed = seed
        self.buffer = memory.ReplayBuffer(memory_size) if self.requires_buffer else None
        self.class_means: np.ndarray | None = None
        self.cur_task = -1
        self.n_known = 0
        self.n_seen = 0
        self.old_model = None
        self.schedule: TaskSchedule | None = None
        self.bank = None
        self.model = self.build_model()

    # ------------------------------------------------------------------ plumbing

    def build_model(self):
        return IncrementalModel(build_backbone(self.convnet_type, self.feature_dim, self.seed))

    def task_seed(self, salt: int = 0) -> int:
        return self.seed * 1000 + self.cur_task * 10 + salt

    def labels_to_tensor(self, labels) -> torch.Tensor:
        return torch.tensor([self.schedule.class_index(c) for c in labels], dtype=torch.long)

    def tensors(self, samples):
        ids = [s for s, _ in samples]
        x = torch.from_numpy(self.bank.stack(ids))
        return x, self.labels_to_tensor([c for _, c in samples])

    def trainable_parameters(self):
        return [p for p in self.model.parameters() if p.requires_grad]

    @torch.no_grad()
    def _forward_batched(self, model, x, key, chunk=256):
        model.eval()
        outs = [model(x[k:k + chunk])[key] for k in range(0, len(x), chunk)]
        return torch.cat(outs) if outs else torch.zeros(0)

    def embed(self, ids) -> np.ndarray:
        x = torch.from_numpy(self.bank.stack(list(ids)))
        return self._forward_batched(self.model, x, "features").double().numpy()

    def scores(self, x) -> np.ndarray:
        """Class scores over the classes seen so far, shape (N, n_seen)."""
        if isinstance(x, np.ndarray):
            x = torch.from_numpy(x)
        if self.eval_mode == "nme":
            emb = self._forward_batched(self.model, x, "features").double().numpy()
            emb /= np.maximum(np.linalg.norm(emb, axis=1, keepdims=True), 1e-12)
            return -np.linalg.norm(emb[:, None, :] - self.class_means[None], axis=2)
        return self.logits(x)[:, : self.n_seen].double().numpy()

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        return self._forward_batched(self.model, x, "logits")

    # ------------------------------------------------------------------ lifecycle

    def run_task(self, task: TaskData, schedule: TaskSchedule, bank) -> "Learner":
        i = task.task_index
        if i != self.cur_task + 1:
            raise TaskOrderError(f"expected task {self.cur_task + 1}, got task {i}")
        self.schedule, self.bank = schedule, bank
        self.cur_task = i
        self.n_known = self.n_seen
        self.n_seen = schedule.n_seen(i)
        self.prepare_task(task)
        self.train_task(task)
        self.finalize_task(task)
        return self

    def prepare_task(self, task: TaskData) -> None:
        if self.cur_task > 0:
            self.old_model = freeze(copy.deepcopy(self.model))
        expand_head(self.model, self.n_seen - self.n_known, seed=self.task_seed(1))

    def train_samples(self, task: TaskData) -> list:
        return list(task.samples)

    def iter_batches(self, samples, rng):
        order = rng.permutation(len(samples))
        for start in range(0, len(order), self.batch_size):
            batch = [samples[k] for k in order[start:start + self.batch_size]]
            if self.mix_replay and self.cur_task > 0:
                batch = replay_batch_mix(batch, self.buffer, rng)
            yield batch

    def make_optimizer(self):
        return torch.optim.Adam(self.trainable_parameters(), lr=self.lr)

    def train_task(self, task: TaskData) -> None:
        samples = self.train_samples(task)
        rng = np.random.default_rng(self.task_seed(2))
        opt = self.make_optimizer()
        step = 0
        for epoch in range(self.epochs):
            self.model.train()
            for batch in self.iter_batches(samples, rng):
                x, y = self.tensors(batch)
                loss = self.batch_loss(x, y)
                if not math.isfinite(loss.item()):
                    raise NonFiniteLossError(
                        f"{self.name}: non-finite loss at task {self.cur_task}, step {step}"
                    )
                opt.zero_grad()
                loss.backward()
                self.before_step()
                opt.step()
                step += 1
            logger.debug("%s task %d epoch %d loss %.4f", self.name, self.cur_task, epoch, loss.item())

    def batch_loss(self, x, y) -> torch.Tensor:
        raise NotImplementedError

    def before_step(self) -> None:
        pass

    def finalize_task(self, task: TaskData) -> None:
        if self.buffer is not None:
            self.rebuild_buffer(task)
        if self.eval_mode == "nme":
            self.update_class_means()

    def rebuild_buffer(self, task: TaskData) -> None:
        seen = list(self.schedule.class_order[: self.n_seen])
        self.buffer = memory.rebuild(self.buffer, self.embed, seen, task.by_class())

    def update_class_means(self) -> None:
        means = memory.class_means(self.buffer, self.embed)
        self.class_means = np.stack([means[c] for c in self.schedule.class_order[: self.n_seen]])
