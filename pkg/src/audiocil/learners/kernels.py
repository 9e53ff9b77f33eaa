"""Loss functions and small numerical kernels shared by the learners."""
from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np
import torch
from torch.func import functional_call, grad, vmap
from torch.nn import functional as F


class KernelError(ValueError):
    pass


def finetune_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy."""
    if labels.numel() and int(labels.max()) >= logits.shape[1]:
        raise KernelError(f"label {int(labels.max())} out of range for {logits.shape[1]} logits")
    return F.cross_entropy(logits, labels)


def distill_loss(old_logits: torch.Tensor, new_logits: torch.Tensor, temperature: float) -> torch.Tensor:
    """``T^2 * KL(softmax(old/T) || softmax(new/T))``, averaged over the batch."""
    if temperature <= 0:
        raise KernelError(f"temperature must be positive, got {temperature}")
    if old_logits.shape[1] == 0:
        raise KernelError("distillation over an empty old-class set")
    if old_logits.shape != new_logits.shape:
        raise KernelError(f"shape mismatch {tuple(old_logits.shape)} vs {tuple(new_logits.shape)}")
    log_p_old = F.log_softmax(old_logits / temperature, dim=1)
    log_p_new = F.log_softmax(new_logits / temperature, dim=1)
    kl = (log_p_old.exp() * (log_p_old - log_p_new)).sum(dim=1)
    return temperature**2 * kl.mean()


def icarl_loss(logits, labels, old_logits, temperature: float = 2.0, kd_weight: float = 1.0):
    """Cross-entropy plus distillation on the first ``old_logits.shape[1]`` columns."""
    ce = finetune_loss(logits, labels)
    if old_logits is None or old_logits.shape[1] == 0 or kd_weight == 0:
        return ce
    n_old = old_logits.shape[1]
    return ce + kd_weight * distill_loss(old_logits, logits[:, :n_old], temperature)


def ewc_penalty(theta, theta_star, fisher, lam: float):
    """``(lam / 2) * sum_k F_k (theta_k - theta*_k)^2``.

    Accepts tensors, or mappings name -> tensor in which case only names
    present in ``theta_star`` contribute.
    """
    if isinstance(theta_star, Mapping):
        total = None
        for name, anchor in theta_star.items():
            term = ewc_penalty(theta[name], anchor, fisher[name], lam)
            total = term if total is None else total + term
        return total if total is not None else torch.zeros(())
    if theta.shape != theta_star.shape or theta.shape != fisher.shape:
        raise KernelError(
            f"shape mismatch: theta {tuple(theta.shape)}, theta* {tuple(theta_star.shape)}, "
            f"F {tuple(fisher.shape)}"
        )
    return 0.5 * lam * (fisher * (theta - theta_star) ** 2).sum()


def fisher_diagonal(model: torch.nn.Module, x: torch.Tensor, y: torch.Tensor,
                    logits_key: str = "logits", chunk: int = 64) -> dict:
    """Empirical Fisher diagonal: mean over samples of the squared gradient of -log p(y|x).

    Computed with the model in eval mode so normalization layers use their
    running statistics.
    """
    if len(x) == 0:
        raise KernelError("Fisher diagonal of an empty dataset")
    was_training = model.training
    model.eval()
    params = {n: p.detach() for n, p in model.named_parameters() if p.requires_grad}
    buffers = {n: b.detach() for n, b in model.named_buffers()}

    def nll(p, xi, yi):
        out = functional_call(model, (p, buffers), (xi.unsqueeze(0),))
        logits = out[logits_key] if isinstance(out, Mapping) else out
        return F.cross_entropy(logits, yi.unsqueeze(0))

    per_sample = vmap(grad(nll), in_dims=(None, 0, 0))
    fisher = {n: torch.zeros_like(p) for n, p in params.items()}
    for start in range(0, len(x), chunk):
        grads = per_sample(params, x[start:start + chunk], y[start:start + chunk])
        for n, g in grads.items():
            fisher[n] += (g**2).sum(dim=0)
    model.train(was_training)
    return {n: f / len(x) for n, f in fisher.items()}


def _pooled(maps: torch.Tensor, dim: int) -> torch.Tensor:
    return F.normalize(maps.sum(dim=dim).flatten(1), dim=1)


def pod_loss(old_maps: Sequence[torch.Tensor], new_maps: Sequence[torch.Tensor]) -> torch.Tensor:
    """Pooled-outputs distillation over height- and width-pooled feature maps."""
    if len(old_maps) != len(new_maps):
        raise KernelError(f"{len(old_maps)} old maps vs {len(new_maps)} new maps")
    total = None
    for layer, (a, b) in enumerate(zip(old_maps, new_maps)):
        if a.shape != b.shape:
            raise KernelError(f"layer {layer}: shape {tuple(a.shape)} vs {tuple(b.shape)}")
        per_sample = ((_pooled(a, 2) - _pooled(b, 2)) ** 2).sum(dim=1) \
            + ((_pooled(a, 3) - _pooled(b, 3)) ** 2).sum(dim=1)
        term = per_sample.mean()
        total = term if total is None else total + term
    if total is None:
        raise KernelError("pod_loss needs at least one layer")
    return total


def nme_classify(embeddings, means) -> np.ndarray:
    """Index of the nearest class mean for each row (ties -> lowest index).

    ``means`` is an (n_classes, dim) array, or a mapping whose insertion order
    is the class order.
    """
    if isinstance(means, Mapping):
        means = np.stack(list(means.values()))
    means = np.asarray(means, dtype=np.float64)
    emb = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    if means.size == 0:
        raise KernelError("no class means")
    if emb.shape[1] != means.shape[1]:
        raise KernelError(f"embedding dim {emb.shape[1]} != mean dim {means.shape[1]}")
    dist = np.linalg.norm(emb[:, None, :] - means[None, :, :], axis=2)
    return np.argmin(dist, axis=1)
