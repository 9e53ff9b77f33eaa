import itertools

import numpy as np
import pytest
import torch
from torch.nn import functional as F

from audiocil.learners.calibration import CalibrationError, bic_calibrate, wa_align
from audiocil.models import BiasLayer, GroupedLinear


def _inflated_setup(n=4000, n_old=3, n_new=2, seed=0):
    g = torch.Generator().manual_seed(seed)
    true = torch.randn(n, n_old + n_new, generator=g) * 2.0
    labels = torch.multinomial(F.softmax(true, dim=1), 1, generator=g).squeeze(1)
    observed = true.clone()
    observed[:, n_old:] *= 2.0
    return observed, labels


def test_identity_initialization():
    layer = BiasLayer(3, 5)
    z = torch.randn(6, 5)
    assert torch.equal(layer(z), z)


def test_recovers_inflation_factor():
    logits, labels = _inflated_setup()
    layer = bic_calibrate(BiasLayer(3, 5), logits, labels)
    alpha = layer.alpha.item()

    # grid-search oracle over (alpha, beta)
    def nll(a, b):
        z = torch.cat([logits[:, :3], a * logits[:, 3:] + b], dim=1)
        return F.cross_entropy(z, labels).item()

    grid = itertools.product(np.linspace(0.2, 1.2, 51), np.linspace(-1, 1, 41))
    best_alpha, _ = min(grid, key=lambda ab: nll(*ab))
    assert 0.4 <= best_alpha <= 0.6
    assert 0.4 <= alpha <= 0.6
    assert abs(alpha - best_alpha) < 0.05
    assert nll(alpha, layer.beta.item()) <= nll(best_alpha, 0.0) + 1e-3


def test_old_group_never_changes():
    logits, labels = _inflated_setup(n=500)
    layer = bic_calibrate(BiasLayer(3, 5), logits, labels, steps=50)
    with torch.no_grad():
        assert torch.equal(layer(logits)[:, :3], logits[:, :3])


def test_single_sided_validation_rejected():
    logits = torch.randn(4, 5)
    with pytest.raises(CalibrationError):
        bic_calibrate(BiasLayer(3, 5), logits, torch.tensor([0, 1, 2, 0]))
    with pytest.raises(CalibrationError):
        bic_calibrate(BiasLayer(3, 5), logits[:0], torch.tensor([], dtype=torch.long))


def _head(old_scale=1.0, new_scale=1.0, seed=0):
    torch.manual_seed(seed)
    head = GroupedLinear(6)
    head.append(4)
    head.append(2)
    with torch.no_grad():
        head.groups[0].weight.mul_(old_scale)
        head.groups[1].weight.mul_(new_scale)
    return head


def _mean_norm(head, idx):
    return head.weight[list(idx)].norm(dim=1).mean().item()


def test_wa_equalizes_norms_and_keeps_old_logits():
    head = _head(new_scale=3.0)
    x = torch.randn(10, 6)
    with torch.no_grad():
        before = head(x)[:, :4].clone()
        bias_before = [g.bias.clone() for g in head.groups]
        wa_align(head, range(4), range(4, 6))
        after = head(x)
    assert torch.equal(after[:, :4], before)
    assert abs(_mean_norm(head, range(4)) - _mean_norm(head, range(4, 6))) < 1e-6
    for g, b in zip(head.groups, bias_before):
        assert torch.equal(g.bias, b)


def test_wa_equal_norms_gives_unit_factor():
    head = _head()
    with torch.no_grad():
        target = _mean_norm(head, range(4))
        row_norms = head.groups[1].weight.norm(dim=1, keepdim=True)
        head.groups[1].weight.mul_(target / row_norms)
        before = head.weight.clone()
    assert wa_align(head, range(4), range(4, 6)) == pytest.approx(1.0, abs=1e-6)
    torch.testing.assert_close(head.weight, before)


def test_wa_double_norm_gives_half():
    head = _head()
    with torch.no_grad():
        target = _mean_norm(head, range(4))
        row_norms = head.groups[1].weight.norm(dim=1, keepdim=True)
        head.groups[1].weight.mul_(2 * target / row_norms)
    assert wa_align(head, range(4), range(4, 6)) == pytest.approx(0.5, abs=1e-6)


def test_wa_argmax_over_old_logits_invariant():
    head = _head(new_scale=5.0, seed=3)
    x = torch.randn(50, 6)
    with torch.no_grad():
        before = head(x)[:, :4].argmax(1)
        wa_align(head, range(4), range(4, 6))
        assert torch.equal(head(x)[:, :4].argmax(1), before)


def test_wa_errors():
    head = _head()
    with pytest.raises(CalibrationError):
        wa_align(head, [], range(4, 6))
    with torch.no_grad():
        head.groups[1].weight[0].zero_()
    with pytest.raises(CalibrationError):
        wa_align(head, range(4), range(4, 6))
