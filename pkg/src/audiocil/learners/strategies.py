"""The incremental-learning algorithms."""
from __future__ import annotations

import logging

import numpy as np
import torch
from torch.nn import functional as F

from ..models import (BiasLayer, DERModel, StochasticClassifier, der_expand, freeze,
                      stochastic_logits)
from . import acil as acil_kernels
from .base import Learner, LearnerError
from .calibration import bic_calibrate, wa_align
from .gem import gem_project
from .kernels import distill_loss, ewc_penalty, finetune_loss, fisher_diagonal, icarl_loss, pod_loss

logger = logging.getLogger(__name__)


class Finetune(Learner):
    """Plain cross-entropy on the current task; forgets old classes."""

    name = "finetune"

    def batch_loss(self, x, y):
        return finetune_loss(self.model(x)["logits"], y)


class Replay(Finetune):
    name = "replay"
    requires_buffer = True
    mix_replay = True


def _new_class_ce(logits, y, n_known):
    if n_known == 0:
        return finetune_loss(logits, y)
    return finetune_loss(logits[:, n_known:], y - n_known)


class EWC(Learner):
    name = "ewc"
    defaults = {"lambda_ewc": 5000.0}

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.fisher: dict | None = None
        self.theta_star: dict | None = None

    def batch_loss(self, x, y):
        loss = _new_class_ce(self.model(x)["logits"], y, self.n_known)
        if self.theta_star is not None:
            params = dict(self.model.named_parameters())
            loss = loss + ewc_penalty(params, self.theta_star, self.fisher, self.hp["lambda_ewc"])
        return loss

    def finalize_task(self, task):
        x, y = self.tensors(task.samples)
        fisher = fisher_diagonal(self.model, x, y)
        if self.fisher is not None:
            # running average weighted by class counts
            w_old = self.n_known / self.n_seen
            for n, f_old in self.fisher.items():
                fisher[n] = w_old * f_old + (1 - w_old) * fisher[n]
        self.fisher = fisher
        self.theta_star = {n: p.detach().clone() for n, p in self.model.named_parameters()}
        super().finalize_task(task)


class LwF(Learner):
    name = "lwf"
    defaults = {"temperature": 2.0, "kd_weight": 1.0}

    def batch_loss(self, x, y):
        logits = self.model(x)["logits"]
        loss = _new_class_ce(logits, y, self.n_known)
        if self.old_model is not None:
            with torch.no_grad():
                old = self.old_model(x)["logits"]
            loss = loss + self.hp["kd_weight"] * distill_loss(
                old, logits[:, : self.n_known], self.hp["temperature"])
        return loss


class ICaRL(Learner):
    name = "icarl"
    requires_buffer = True
    mix_replay = True
    eval_mode = "nme"
    defaults = {"temperature": 2.0, "kd_weight": 1.0}

    def old_logits(self, x):
        if self.old_model is None:
            return None
        with torch.no_grad():
            return self.old_model(x)["logits"]

    def batch_loss(self, x, y):
        logits = self.model(x)["logits"]
        return icarl_loss(logits, y, self.old_logits(x), self.hp["temperature"], self.hp["kd_weight"])


class GEM(Learner):
    name = "gem"
    requires_buffer = True
    defaults = {"gem_margin": 0.0}

    def batch_loss(self, x, y):
        return finetune_loss(self.model(x)["logits"], y)

    def _flat_grad(self, loss, params):
        grads = torch.autograd.grad(loss, params, allow_unused=True)
        return torch.cat([(torch.zeros_like(p) if g is None else g).flatten()
                          for p, g in zip(params, grads)])

    def before_step(self):
        if self.cur_task == 0 or len(self.buffer) == 0:
            return
        params = self.trainable_parameters()
        g = torch.cat([(torch.zeros_like(p) if p.grad is None else p.grad).flatten() for p in params])
        by_task: dict[int, list] = {}
        for sample in self.buffer.samples():
            by_task.setdefault(self.schedule.task_of_label(sample[1]), []).append(sample)
        memory_grads = []
        for t in sorted(by_task):
            xm, ym = self.tensors(by_task[t])
            loss = finetune_loss(self.model(xm)["logits"], ym)
            memory_grads.append(self._flat_grad(loss, params).double().numpy())
        projected = gem_project(g.double().numpy(), np.stack(memory_grads), self.hp["gem_margin"])
        projected = torch.from_numpy(projected).to(g.dtype)
        offset = 0
        for p in params:
            n = p.numel()
            p.grad = projected[offset:offset + n].view_as(p).clone()
            offset += n


class BiC(ICaRL):
    name = "bic"
    eval_mode = "logits"
    defaults = {"temperature": 2.0, "kd_weight": 1.0, "val_fraction": 0.1,
                "bias_steps": 1000, "bias_lr": 0.01}

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.bias_layers: list[BiasLayer] = []
        self._val: list = []
        self._held_out: set = set()

    def corrected(self, logits):
        for layer in self.bias_layers:
            logits = layer(logits)
        return logits

    def old_logits(self, x):
        if self.old_model is None:
            return None
        with torch.no_grad():
            return self.corrected(self.old_model(x)["logits"])

    def logits(self, x):
        with torch.no_grad():
            return self.corrected(super().logits(x))

    def prepare_task(self, task):
        super().prepare_task(task)
        self._val, self._held_out = [], set()
        if self.cur_task == 0:
            return
        rng = np.random.default_rng(self.task_seed(3))
        frac = self.hp["val_fraction"]
        old_groups = dict(self.buffer.per_class)
        new_groups = task.by_class()
        smallest = min(len(v) for v in (*old_groups.values(), *new_groups.values()))
        per_class = max(1, int(round(frac * smallest)))
        for group in (old_groups, new_groups):
            for c, ids in group.items():
                if len(ids) <= per_class:
                    continue
                picks = rng.choice(len(ids), size=per_class, replace=False)
                self._val += [(ids[k], c) for k in sorted(picks)]
        self._held_out = {s for s, _ in self._val}

    def train_samples(self, task):
        return [s for s in task.samples if s[0] not in self._held_out]

    def iter_batches(self, samples, rng):
        for batch in super().iter_batches(samples, rng):
            yield [s for s in batch if s[0] not in self._held_out] if self._held_out else batch

    def finalize_task(self, task):
        if self.cur_task > 0 and self._val:
            x, y = self.tensors(self._val)
            layer = BiasLayer(self.n_known, self.n_seen)
            logits = self.logits(x)
            bic_calibrate(layer, logits, y, self.hp["bias_steps"], self.hp["bias_lr"])
            for p in layer.parameters():
                p.requires_grad_(False)
            self.bias_layers.append(layer)
            logger.debug("bic task %d alpha=%.4f beta=%.4f", self.cur_task,
                         layer.alpha.item(), layer.beta.item())
        super().finalize_task(task)


class WA(ICaRL):
    name = "wa"
    eval_mode = "logits"

    def finalize_task(self, task):
        if self.cur_task > 0:
            wa_align(self.model.head, range(self.n_known), range(self.n_known, self.n_seen))
        super().finalize_task(task)


class PODNet(Learner):
    name = "podnet"
    requires_buffer = True
    mix_replay = True
    defaults = {"pod_weight": 1.0}

    def batch_loss(self, x, y):
        out = self.model(x)
        loss = finetune_loss(out["logits"], y)
        if self.old_model is not None:
            with torch.no_grad():
                old_maps = self.old_model(x)["fmaps"]
            loss = loss + self.hp["pod_weight"] * pod_loss(old_maps, out["fmaps"])
        return loss


class DER(Learner):
    name = "der"
    requires_buffer = True
    mix_replay = True
    defaults = {"aux_weight": 1.0, "clone_branch": True}

    def build_model(self):
        return DERModel(self.convnet_type, self.feature_dim, self.seed)

    def prepare_task(self, task):
        der_expand(self.model, self.n_seen - self.n_known, clone_last=self.hp["clone_branch"])

    def batch_loss(self, x, y):
        out = self.model(x)
        loss = finetune_loss(out["logits"], y)
        if "aux_logits" in out:
            aux_y = torch.where(y >= self.n_known, y - self.n_known + 1, torch.zeros_like(y))
            loss = loss + self.hp["aux_weight"] * finetune_loss(out["aux_logits"], aux_y)
        return loss


class ACIL(Learner):
    """Backprop on the base task, then a frozen backbone with a recursive ridge classifier."""

    name = "acil"
    defaults = {"gamma": 1.0, "expansion_dim": 1024}

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.state: acil_kernels.ACILState | None = None

    def prepare_task(self, task):
        if self.cur_task == 0:
            super().prepare_task(task)

    def train_task(self, task):
        if self.cur_task == 0:
            super().train_task(task)

    def batch_loss(self, x, y):
        return finetune_loss(self.model(x)["logits"], y)

    def finalize_task(self, task):
        if self.cur_task == 0:
            freeze(self.model.backbone)
            self.state = acil_kernels.init_acil(self.feature_dim, int(self.hp["expansion_dim"]),
                                                self.hp["gamma"], seed=self.task_seed(4))
        emb = self.embed(task.ids)
        y = self.labels_to_tensor(task.labels).numpy()
        targets = np.eye(self.n_seen)[y]
        self.state = acil_kernels.acil_update(self.state, emb, targets)

    def scores(self, x):
        if isinstance(x, np.ndarray):
            x = torch.from_numpy(x)
        emb = self._forward_batched(self.model, x, "features").double().numpy()
        return acil_kernels.acil_scores(self.state, emb)[:, : self.n_seen]


def fewshot_fit(backbone, classifier: StochasticClassifier, x, y, n_old: int,
                steps: int = 20, lr: float = 0.01, n_way: int | None = None,
                k_shot: int | None = None, generator=None, log_var: float = -4.0):
    """Add one session's classes to ``classifier`` without touching old classes.

    New means are imprinted from the mean shot embedding per class, then
    (means, log-variances) of the new group are refined for ``steps``
    optimizer steps with sampled weights.
    """
    if any(p.requires_grad for p in backbone.parameters()):
        raise LearnerError("fewshot_fit needs a frozen backbone")
    labels = sorted(set(y.tolist()))
    if labels != list(range(n_old, n_old + len(labels))):
        raise LearnerError(f"session labels {labels} are not the next {len(labels)} classes")
    counts = torch.bincount(y - n_old)
    if n_way is not None and len(labels) != n_way:
        raise LearnerError(f"session has {len(labels)} classes, expected n_way={n_way}")
    if k_shot is not None and bool((counts != k_shot).any()):
        raise LearnerError(f"session class counts {counts.tolist()} != k_shot={k_shot}")

    backbone.eval()
    with torch.no_grad():
        emb = backbone(x)["features"]
    emb_n = F.normalize(emb, dim=1)
    means = torch.stack([emb_n[y == c].mean(0) for c in labels])
    classifier.freeze_groups(len(classifier.means))
    classifier.append(F.normalize(means, dim=1), log_var)
    new_params = [classifier.means[-1], classifier.log_vars[-1]]
    opt = torch.optim.Adam(new_params, lr=lr)
    for _ in range(steps):
        opt.zero_grad()
        logits = stochastic_logits(classifier, emb, "sample", generator)
        F.cross_entropy(logits, y).backward()
        opt.step()
    return classifier


class MetaSC(Learner):
    name = "metasc"
    defaults = {"scale": 16.0, "session_steps": 20, "session_lr": 0.01, "log_var_init": -4.0}

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.classifier = StochasticClassifier(self.feature_dim, self.hp["scale"])
        self._gen = torch.Generator().manual_seed(self.seed)

    def prepare_task(self, task):
        if self.cur_task == 0:
            gen = torch.Generator().manual_seed(self.task_seed(1))
            init = torch.randn(self.n_seen, self.feature_dim, generator=gen)
            self.classifier.append(F.normalize(init, dim=1), self.hp["log_var_init"])

    def trainable_parameters(self):
        params = [p for p in self.model.backbone.parameters() if p.requires_grad]
        return params + [p for p in self.classifier.parameters() if p.requires_grad]

    def batch_loss(self, x, y):
        emb = self.model.backbone(x)["features"]
        return finetune_loss(stochastic_logits(self.classifier, emb, "sample", self._gen), y)

    def train_task(self, task):
        if self.cur_task == 0:
            super().train_task(task)
            return
        x, y = self.tensors(task.samples)
        fewshot_fit(self.model.backbone, self.classifier, x, y, self.n_known,
                    steps=int(self.hp["session_steps"]), lr=self.hp["session_lr"],
                    generator=self._gen, log_var=self.hp["log_var_init"])

    def finalize_task(self, task):
        if self.cur_task == 0:
            freeze(self.model.backbone)
            # re-imprint base prototypes so old and new classes share one scale
            x, y = self.tensors(task.samples)
            emb = F.normalize(self._forward_batched(self.model.backbone, x, "features"), dim=1)
            with torch.no_grad():
                protos = torch.stack([emb[y == c].mean(0) for c in range(self.n_seen)])
                self.classifier.means[0].copy_(F.normalize(protos, dim=1))
            self.classifier.freeze_groups(1)

    def logits(self, x):
        emb = self._forward_batched(self.model.backbone, x, "features")
        with torch.no_grad():
            return stochastic_logits(self.classifier, emb, "mean")
