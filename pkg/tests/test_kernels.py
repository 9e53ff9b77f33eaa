import math

import numpy as np
import pytest
import torch
from torch import nn

from audiocil.learners.kernels import (KernelError, distill_loss, ewc_penalty, finetune_loss,
                                       fisher_diagonal, icarl_loss, nme_classify, pod_loss)
from oracles import central_difference, relative_error


@pytest.fixture(autouse=True, scope="module")
def _double_precision():
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(torch.float32)


def _gen(seed):
    return torch.Generator().manual_seed(seed)


# ----------------------------------------------------------------- cross-entropy


def test_finetune_loss_large_margin():
    logits = torch.full((3, 4), -50.0)
    labels = torch.tensor([0, 2, 3])
    logits[torch.arange(3), labels] = 50.0
    assert finetune_loss(logits, labels).item() < 1e-30


def test_finetune_loss_uniform_is_log_c():
    assert finetune_loss(torch.zeros(5, 7), torch.arange(5)).item() == pytest.approx(math.log(7), abs=1e-12)


def test_finetune_loss_matches_formula():
    for seed in range(10):
        g = _gen(seed)
        logits = torch.randn(6, 5, generator=g) * 3
        labels = torch.randint(0, 5, (6,), generator=g)
        z = logits.numpy()
        direct = np.mean([np.log(np.exp(row).sum()) - row[y] for row, y in zip(z, labels.numpy())])
        assert finetune_loss(logits, labels).item() == pytest.approx(direct, abs=1e-6)


def test_finetune_loss_label_out_of_range():
    with pytest.raises(KernelError):
        finetune_loss(torch.zeros(2, 3), torch.tensor([0, 3]))


# ----------------------------------------------------------------- distillation


def test_distill_identity_is_exactly_zero():
    x = torch.randn(8, 5, generator=_gen(0))
    assert distill_loss(x, x, 2.0).item() == 0.0


def test_distill_two_class_value():
    old = torch.tensor([[0.0, 0.0]])
    new = torch.tensor([[math.log(3.0), 0.0]])
    expected = 0.5 * math.log(0.5 / 0.75) + 0.5 * math.log(0.5 / 0.25)
    assert distill_loss(old, new, 1.0).item() == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(0.14384, abs=1e-5)


def test_distill_nonnegative_and_errors():
    for seed in range(20):
        g = _gen(seed)
        a, b = torch.randn(4, 3, generator=g), torch.randn(4, 3, generator=g)
        assert distill_loss(a, b, 0.5 + seed / 10).item() >= 0
    with pytest.raises(KernelError):
        distill_loss(torch.zeros(2, 2), torch.zeros(2, 2), 0.0)
    with pytest.raises(KernelError):
        distill_loss(torch.zeros(2, 0), torch.zeros(2, 0), 1.0)


def test_icarl_loss_components():
    g = _gen(4)
    logits, labels = torch.randn(5, 6, generator=g), torch.randint(0, 6, (5,), generator=g)
    old = torch.randn(5, 4, generator=g)
    ce = finetune_loss(logits, labels)
    assert icarl_loss(logits, labels, None).item() == ce.item()
    assert icarl_loss(logits, labels, old, 2.0, 0.0).item() == ce.item()
    expected = ce + 0.7 * distill_loss(old, logits[:, :4], 2.0)
    assert icarl_loss(logits, labels, old, 2.0, 0.7).item() == pytest.approx(expected.item(), abs=1e-6)


# ----------------------------------------------------------------- EWC


def test_ewc_penalty_values():
    theta = torch.randn(4, generator=_gen(0))
    assert ewc_penalty(theta, theta.clone(), torch.rand(4), 3.0).item() == 0.0
    assert ewc_penalty(torch.tensor([1.0, 1.0]), torch.zeros(2), torch.ones(2), 2.0).item() == 2.0


def test_ewc_penalty_dict_and_shape_mismatch():
    theta = {"a": torch.ones(2), "b": torch.ones(3)}
    star = {"a": torch.zeros(2)}
    fisher = {"a": torch.ones(2)}
    assert ewc_penalty(theta, star, fisher, 2.0).item() == 2.0
    with pytest.raises(KernelError):
        ewc_penalty(torch.ones(2), torch.ones(3), torch.ones(2), 1.0)


def test_ewc_analytic_gradient():
    g = _gen(9)
    theta = torch.randn(6, generator=g, requires_grad=True)
    star, fisher = torch.randn(6, generator=g), torch.rand(6, generator=g)
    ewc_penalty(theta, star, fisher, 5.0).backward()
    torch.testing.assert_close(theta.grad, 5.0 * fisher * (theta.detach() - star))
    fd = central_difference(lambda t: ewc_penalty(t, star, fisher, 5.0), theta.detach())
    assert relative_error(theta.grad.numpy(), fd) < 1e-4


# ----------------------------------------------------------------- Fisher


class _Logistic(nn.Module):
    def __init__(self, w, b):
        super().__init__()
        self.w = nn.Parameter(torch.tensor(w))
        self.b = nn.Parameter(torch.tensor(b))

    def forward(self, x):
        z = self.w * x[:, 0] + self.b
        return {"logits": torch.stack([torch.zeros_like(z), z], dim=1)}


def test_fisher_logistic_closed_form():
    model = _Logistic(0.7, -0.2)
    x = torch.tensor([[1.0], [-2.0], [0.5], [3.0]])
    y = torch.tensor([1, 0, 0, 1])
    fisher = fisher_diagonal(model, x, y)
    p = 1 / (1 + np.exp(-(0.7 * x[:, 0].numpy() - 0.2)))
    resid = p - y.numpy()
    assert fisher["w"].item() == pytest.approx(np.mean((resid * x[:, 0].numpy()) ** 2), abs=1e-12)
    assert fisher["b"].item() == pytest.approx(np.mean(resid**2), abs=1e-12)


def test_fisher_nonnegative_and_mean_normalized():
    model = nn.Sequential(nn.Linear(4, 3))
    wrapped = _Wrap(model)
    g = _gen(1)
    x, y = torch.randn(10, 4, generator=g), torch.randint(0, 3, (10,), generator=g)
    f1 = fisher_diagonal(wrapped, x, y)
    f2 = fisher_diagonal(wrapped, torch.cat([x, x]), torch.cat([y, y]))
    for n in f1:
        assert torch.all(f1[n] >= 0)
        torch.testing.assert_close(f1[n], f2[n])
    with pytest.raises(KernelError):
        fisher_diagonal(wrapped, x[:0], y[:0])


class _Wrap(nn.Module):
    def __init__(self, inner):
        super().__init__()
        self.inner = inner

    def forward(self, x):
        return {"logits": self.inner(x)}


# ----------------------------------------------------------------- POD


def test_pod_identity_and_hand_value():
    a = torch.randn(2, 3, 4, 5, generator=_gen(0))
    assert pod_loss([a], [a.clone()]).item() == 0.0
    old = torch.tensor([[[[1.0, 0.0], [0.0, 0.0]]]])
    new = torch.tensor([[[[0.0, 0.0], [0.0, 1.0]]]])
    # both poolings map old -> (1, 0) and new -> (0, 1): 2 + 2
    assert pod_loss([old], [new]).item() == pytest.approx(4.0, abs=1e-12)


def test_pod_nonnegative_and_shape_error():
    g = _gen(3)
    for _ in range(10):
        a, b = torch.randn(2, 2, 3, 3, generator=g), torch.randn(2, 2, 3, 3, generator=g)
        assert pod_loss([a], [b]).item() >= 0
    with pytest.raises(KernelError, match="layer 1"):
        pod_loss([torch.ones(1, 1, 2, 2)] * 2, [torch.ones(1, 1, 2, 2), torch.ones(1, 1, 3, 2)])


# ----------------------------------------------------------------- gradients


def _grad_check(f, x):
    x = x.detach().clone().requires_grad_(True)
    f(x).backward()
    fd = central_difference(lambda t: f(t), x.detach())
    return relative_error(x.grad.numpy(), fd)


@pytest.mark.parametrize("seed", range(10))
def test_loss_gradients_match_finite_differences(seed):
    g = _gen(seed)
    old = torch.randn(4, 3, generator=g)
    new = torch.randn(4, 3, generator=g)
    assert _grad_check(lambda t: distill_loss(old, t, 2.0), new) < 1e-4
    labels = torch.randint(0, 5, (4,), generator=g)
    logits = torch.randn(4, 5, generator=g)
    assert _grad_check(lambda t: icarl_loss(t, labels, old, 2.0, 1.0), logits) < 1e-4
    maps_old = [torch.rand(2, 2, 3, 4, generator=g) + 0.1]
    maps_new = torch.rand(2, 2, 3, 4, generator=g) + 0.1
    assert _grad_check(lambda t: pod_loss(maps_old, [t]), maps_new) < 1e-4


# ----------------------------------------------------------------- NME


def test_nme_exact_and_ties():
    means = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]])
    assert list(nme_classify(means, means)) == [0, 1, 2]
    s = math.sqrt(0.5)
    assert nme_classify([s, s], means[:2])[0] == 0
    assert nme_classify([s, s], {"b": means[1], "a": means[0]})[0] == 0


def test_nme_matches_bruteforce():
    rng = np.random.default_rng(0)
    for _ in range(20):
        means = rng.normal(size=(6, 5))
        means /= np.linalg.norm(means, axis=1, keepdims=True)
        emb = rng.normal(size=(10, 5))
        emb /= np.linalg.norm(emb, axis=1, keepdims=True)
        for e, pred in zip(emb, nme_classify(emb, means)):
            best = min(range(6), key=lambda k: (np.sum((e - means[k]) ** 2), k))
            assert pred == best


def test_nme_dimension_mismatch():
    with pytest.raises(KernelError):
        nme_classify(np.ones((1, 3)), np.ones((2, 4)))
