"""Post-training corrections for the new-class bias: BiC and weight aligning."""
from __future__ import annotations

import torch
from torch.nn import functional as F

from ..models import BiasLayer, GroupedLinear


class CalibrationError(ValueError):
    pass


def bic_calibrate(bias_layer: BiasLayer, logits: torch.Tensor, labels: torch.Tensor,
                  steps: int = 1000, lr: float = 0.01) -> BiasLayer:
    """Fit ``(alpha, beta)`` by full-batch cross-entropy on a held-out split.

    ``logits`` come from the frozen model; only ``bias_layer``'s parameters
    are optimized.
    """
    if len(labels) == 0:
        raise CalibrationError("empty validation set")
    new = (labels >= bias_layer.start) & (labels < bias_layer.end)
    if bool(new.all()) or not bool(new.any()):
        raise CalibrationError("validation set must contain both old- and new-class samples")
    logits = logits.detach()
    opt = torch.optim.Adam(bias_layer.parameters(), lr=lr)
    for _ in range(steps):
        opt.zero_grad()
        loss = F.cross_entropy(bias_layer(logits), labels)
        loss.backward()
        opt.step()
    return bias_layer


def wa_align(head: GroupedLinear, old_indices, new_indices) -> float:
    """Rescale the new-class weight rows to the old rows' mean norm; returns the factor."""
    old_indices, new_indices = list(old_indices), list(new_indices)
    if not old_indices or not new_indices:
        raise CalibrationError("weight aligning needs non-empty old and new index groups")
    with torch.no_grad():
        weight = head.weight
        old_norm = weight[old_indices].norm(dim=1)
        new_norm = weight[new_indices].norm(dim=1)
        if bool((new_norm == 0).any()):
            raise CalibrationError("a new-class weight row has zero norm")
        gamma = (old_norm.mean() / new_norm.mean()).item()
        locate = []
        for g, layer in enumerate(head.groups):
            locate += [(g, r) for r in range(layer.out_features)]
        for idx in new_indices:
            g, r = locate[idx]
            head.groups[g].weight[r] *= gamma
    return gamma

