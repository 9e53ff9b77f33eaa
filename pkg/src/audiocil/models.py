"""Backbones and incremental classification heads."""
from __future__ import annotations

import copy
import json
import math
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F


class ModelError(ValueError):
    pass


def _generator(seed: int | None) -> torch.Generator | None:
    return None if seed is None else torch.Generator().manual_seed(int(seed))


def _init_linear(weight: torch.Tensor, bias: torch.Tensor | None, generator=None) -> None:
    # same scheme as torch.nn.Linear.reset_parameters, with an explicit generator
    fan_in = weight.shape[1]
    bound = 1.0 / math.sqrt(fan_in) if fan_in > 0 else 0.0
    with torch.no_grad():
        weight.uniform_(-bound, bound, generator=generator)
        if bias is not None:
            bias.uniform_(-bound, bound, generator=generator)


# --------------------------------------------------------------------------- backbones


class ConvBlock(nn.Sequential):
    def __init__(self, c_in, c_out, pool=True):
        layers = [nn.Conv2d(c_in, c_out, 3, padding=1, bias=False), nn.BatchNorm2d(c_out), nn.ReLU()]
        if pool:
            layers.append(nn.MaxPool2d(2))
        super().__init__(*layers)


class TinyCNN(nn.Module):
    """Four conv blocks over a (1, n_mels, n_frames) log-mel input."""

    def __init__(self, feature_dim: int = 64, channels=(16, 32, 64)):
        super().__init__()
        self.input_norm = nn.BatchNorm2d(1)
        widths = (1, *channels, feature_dim)
        self.blocks = nn.ModuleList(
            ConvBlock(widths[k], widths[k + 1], pool=k < len(widths) - 2)
            for k in range(len(widths) - 1)
        )
        self.feature_dim = feature_dim

    def forward(self, x):
        x = self.input_norm(x)
        fmaps = []
        for block in self.blocks:
            x = block(x)
            fmaps.append(x)
        return {"fmaps": fmaps, "features": x.mean(dim=(2, 3))}


class BasicBlock(nn.Module):
    def __init__(self, c_in, c_out, stride):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(c_out)
        self.shortcut = nn.Sequential()
        if stride != 1 or c_in != c_out:
            self.shortcut = nn.Sequential(nn.Conv2d(c_in, c_out, 1, stride, bias=False),
                                          nn.BatchNorm2d(c_out))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class ResNetSmall(nn.Module):
    def __init__(self, feature_dim: int = 64, channels=(16, 32)):
        super().__init__()
        self.input_norm = nn.BatchNorm2d(1)
        self.stem = ConvBlock(1, channels[0])
        widths = (channels[0], *channels, feature_dim)
        self.blocks = nn.ModuleList(
            BasicBlock(widths[k], widths[k + 1], stride=1 if k == 0 else 2)
            for k in range(len(widths) - 1)
        )
        self.feature_dim = feature_dim

    def forward(self, x):
        x = self.stem(self.input_norm(x))
        fmaps = []
        for block in self.blocks:
            x = block(x)
            fmaps.append(x)
        return {"fmaps": fmaps, "features": x.mean(dim=(2, 3))}


BACKBONES = {"tiny-cnn": TinyCNN, "resnet-small": ResNetSmall}


def build_backbone(convnet_type: str, feature_dim: int = 64, seed: int | None = None) -> nn.Module:
    if convnet_type not in BACKBONES:
        raise ModelError(f"unknown convnet_type {convnet_type!r}; registered: {sorted(BACKBONES)}")
    with torch.random.fork_rng(devices=[]):
        if seed is not None:
            torch.manual_seed(seed)
        return BACKBONES[convnet_type](feature_dim)


def freeze(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        p.requires_grad_(False)
    module.eval()
    module._frozen = True
    return module


def _respect_frozen(root: nn.Module) -> None:
    for m in root.modules():
        if getattr(m, "_frozen", False):
            m.eval()


# --------------------------------------------------------------------------- heads


class GroupedLinear(nn.Module):
    """Linear head stored as one block of rows per class group.

    Each group's logits are computed from that group's own weights, so
    appending a group cannot perturb earlier logits.
    """

    def __init__(self, in_features: int):
        super().__init__()
        self.in_features = in_features
        self.groups = nn.ModuleList()

    @property
    def out_features(self) -> int:
        return sum(g.out_features for g in self.groups)

    @property
    def group_sizes(self) -> list[int]:
        return [g.out_features for g in self.groups]

    def append(self, n_new: int, generator=None) -> None:
        layer = nn.Linear(self.in_features, n_new)
        _init_linear(layer.weight, layer.bias, generator)
        self.groups.append(layer)

    @property
    def weight(self) -> torch.Tensor:
        return torch.cat([g.weight for g in self.groups], dim=0)

    def forward(self, x):
        if not self.groups:
            return x.new_zeros(x.shape[0], 0)
        return torch.cat([g(x) for g in self.groups], dim=1)


class IncrementalModel(nn.Module):
    def __init__(self, backbone: nn.Module):
        super().__init__()
        self.backbone = backbone
        self.head = GroupedLinear(backbone.feature_dim)

    @property
    def feature_dim(self) -> int:
        return self.backbone.feature_dim

    @property
    def n_classes_seen(self) -> int:
        return self.head.out_features

    def train(self, mode: bool = True):
        super().train(mode)
        _respect_frozen(self)
        return self

    def forward(self, x):
        out = self.backbone(x)
        out["logits"] = self.head(out["features"])
        return out


def expand_head(model: IncrementalModel, n_new: int, seed: int | None = None) -> IncrementalModel:
    """Append ``n_new`` freshly initialized output rows; existing rows are untouched."""
    if n_new < 1:
        raise ModelError(f"expand_head needs n_new >= 1, got {n_new}")
    model.head.append(n_new, _generator(seed))
    return model


class DERModel(nn.Module):
    """Dynamically expandable representation: one backbone per task."""

    def __init__(self, convnet_type: str = "tiny-cnn", feature_dim: int = 64, seed: int | None = None):
        super().__init__()
        self.convnet_type = convnet_type
        self.branch_dim = feature_dim
        self.seed = seed
        self.branches = nn.ModuleList()
        self.head: nn.Linear | None = None
        self.aux_head: nn.Linear | None = None

    @property
    def feature_dim(self) -> int:
        return self.branch_dim * len(self.branches)

    @property
    def n_classes_seen(self) -> int:
        return 0 if self.head is None else self.head.out_features

    def train(self, mode: bool = True):
        super().train(mode)
        _respect_frozen(self)
        return self

    def forward(self, x):
        outs = [b(x) for b in self.branches]
        features = torch.cat([o["features"] for o in outs], dim=1)
        result = {"features": features, "fmaps": outs[-1]["fmaps"], "logits": self.head(features)}
        if self.aux_head is not None:
            result["aux_logits"] = self.aux_head(outs[-1]["features"])
        return result


def der_expand(model: DERModel, n_new: int, clone_last: bool = True) -> DERModel:
    if n_new < 1:
        raise ModelError(f"der_expand needs n_new >= 1, got {n_new}")
    k = len(model.branches)
    seed = None if model.seed is None else model.seed + k
    if k and clone_last:
        branch = copy.deepcopy(model.branches[-1])
        for p in branch.parameters():
            p.requires_grad_(True)
        branch._frozen = False
    else:
        branch = build_backbone(model.convnet_type, model.branch_dim, seed)
    for old in model.branches:
        freeze(old)
    model.branches.append(branch)

    gen = _generator(seed)
    n_old = model.n_classes_seen
    head = nn.Linear(model.feature_dim, n_old + n_new)
    _init_linear(head.weight, head.bias, gen)
    if model.head is not None:
        with torch.no_grad():
            old_in = model.head.in_features
            head.weight[:n_old, :old_in] = model.head.weight
            head.bias[:n_old] = model.head.bias
    model.head = head
    if k:
        model.aux_head = nn.Linear(model.branch_dim, n_new + 1)
        _init_linear(model.aux_head.weight, model.aux_head.bias, gen)
    else:
        model.aux_head = None
    return model


class BiasLayer(nn.Module):
    """Affine correction ``alpha * z + beta`` on logit columns [start, end)."""

    def __init__(self, start: int, end: int):
        super().__init__()
        if not 0 <= start < end:
            raise ModelError(f"invalid bias-layer range [{start}, {end})")
        self.start, self.end = start, end
        self.alpha = nn.Parameter(torch.ones(1))
        self.beta = nn.Parameter(torch.zeros(1))

    def forward(self, logits):
        s, e = self.start, self.end
        return torch.cat([logits[:, :s], self.alpha * logits[:, s:e] + self.beta, logits[:, e:]], dim=1)


LOG_VAR_FLOOR = -40.0


class StochasticClassifier(nn.Module):
    """Cosine classifier with Gaussian weights, one parameter group per session."""

    def __init__(self, in_features: int, scale: float = 16.0):
        super().__init__()
        if scale <= 0:
            raise ModelError("scale must be positive")
        self.in_features = in_features
        self.scale = scale
        self.means = nn.ParameterList()
        self.log_vars = nn.ParameterList()

    @property
    def out_features(self) -> int:
        return sum(m.shape[0] for m in self.means)

    @property
    def weight_mean(self) -> torch.Tensor:
        return torch.cat(list(self.means), dim=0)

    @property
    def weight_log_variance(self) -> torch.Tensor:
        return torch.cat(list(self.log_vars), dim=0)

    def append(self, mean: torch.Tensor, log_var: float = -4.0) -> None:
        mean = mean.detach().clone().float()
        self.means.append(nn.Parameter(mean))
        self.log_vars.append(nn.Parameter(torch.full_like(mean, log_var)))

    def freeze_groups(self, upto: int) -> None:
        for k in range(upto):
            self.means[k].requires_grad_(False)
            self.log_vars[k].requires_grad_(False)

    def forward(self, embeddings, mode: str = "mean", generator=None):
        return stochastic_logits(self, embeddings, mode, generator)


def stochastic_logits(classifier: StochasticClassifier, embeddings: torch.Tensor,
                      mode: str = "mean", generator=None) -> torch.Tensor:
    if embeddings.shape[-1] != classifier.in_features:
        raise ModelError(
            f"embedding dim {embeddings.shape[-1]} != classifier dim {classifier.in_features}"
        )
    mean = classifier.weight_mean
    if mode == "sample":
        log_var = classifier.weight_log_variance.clamp(min=LOG_VAR_FLOOR)
        noise = torch.randn(mean.shape, generator=generator, dtype=mean.dtype)
        weight = mean + torch.exp(0.5 * log_var) * noise
    elif mode == "mean":
        weight = mean
    else:
        raise ModelError(f"unknown mode {mode!r}")
    return classifier.scale * F.linear(F.normalize(embeddings, dim=1), F.normalize(weight, dim=1))


# --------------------------------------------------------------------------- checkpoints


def save_checkpoint(model: nn.Module, path, config_hash: str = "") -> None:
    """Write ``path`` (npz of named arrays) and ``path.json`` (structure sidecar)."""
    path = Path(path)
    arrays = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    meta = {"n_classes_seen": model.n_classes_seen, "config_hash": config_hash}
    if isinstance(model, DERModel):
        meta["branch_dims"] = [model.branch_dim] * len(model.branches)
    else:
        meta["branch_dims"] = [model.feature_dim]
        meta["head_groups"] = model.head.group_sizes
    path.with_name(path.name + ".json").write_text(json.dumps(meta, sort_keys=True))


def load_checkpoint(path, model: nn.Module) -> dict:
    """Load arrays into ``model`` (expanding an empty grouped head if needed); returns the sidecar."""
    path = Path(path)
    meta = json.loads(path.with_name(path.name + ".json").read_text())
    if isinstance(model, IncrementalModel) and not model.head.groups:
        for size in meta.get("head_groups", []):
            model.head.append(size)
    with np.load(path) as data:
        state = {k: torch.from_numpy(data[k]) for k in data.files}
    model.load_state_dict(state)
    return meta
