import itertools
import math

import numpy as np
import pytest
import torch
import torch.nn as nn
from hypothesis import given, settings
from hypothesis import strategies as st

from rawnet3.losses import (
    AamConfig,
    DinoCenter,
    DinoConfig,
    aam_softmax_loss,
    cross_entropy,
    dino_loss,
    entropy,
    margin_logits,
    sharpen,
    update_center,
    update_teacher,
)
from rawnet3.numerics import ConfigError, ContractError, grad_check

pytestmark = pytest.mark.usefixtures("double")


def literal_aam(e, labels, w, s, m, variant):
    """Brute-force per-sample evaluation of the margin softmax, no vectorisation."""
    total = 0.0
    for i in range(len(labels)):
        cos = [float(np.dot(e[i], w[j]) / (np.linalg.norm(e[i]) * np.linalg.norm(w[j]))) for j in range(len(w))]
        y = labels[i]
        if variant == "printed":
            tgt = math.exp(s * (cos[y] + m))
        else:
            tgt = math.exp(s * math.cos(math.acos(cos[y]) + m))
        rest = sum(math.exp(s * cos[j]) for j in range(len(w)) if j != y)
        total -= math.log(tgt / (tgt + rest))
    return total / len(labels)


def test_aam_neutral_is_plain_cross_entropy():
    rng = np.random.default_rng(0)
    for variant in ("printed", "arcface"):
        for _ in range(20):
            e = torch.tensor(rng.standard_normal((6, 5)))
            w = torch.tensor(rng.standard_normal((4, 5)))
            y = torch.tensor(rng.integers(0, 4, 6))
            cos = (e / e.norm(dim=1, keepdim=True)) @ (w / w.norm(dim=1, keepdim=True)).t()
            ref = -torch.log_softmax(cos, dim=1)[torch.arange(6), y].mean()
            got = aam_softmax_loss(e, y, w, AamConfig(scale=1.0, margin=0.0, variant=variant))
            assert abs(got.item() - ref.item()) < 1e-6


@pytest.mark.parametrize("variant", ["printed", "arcface"])
def test_aam_matches_literal_oracle(variant):
    rng = np.random.default_rng(1)
    for _ in range(20):
        e = rng.standard_normal((5, 4))
        w = rng.standard_normal((3, 4))
        y = rng.integers(0, 3, 5)
        got = aam_softmax_loss(torch.tensor(e), torch.tensor(y), torch.tensor(w), AamConfig(variant=variant))
        assert abs(got.item() - literal_aam(e, y, w, 30.0, 0.3, variant)) < 1e-6


def test_aam_two_class_extreme():
    e = torch.tensor([[1.0, 0.0]])
    w = torch.tensor([[1.0, 0.0], [-1.0, 0.0]])
    y = torch.tensor([0])
    printed = aam_softmax_loss(e, y, w, AamConfig(variant="printed"))
    assert printed.item() == pytest.approx(math.log1p(math.exp(30 * (-1 - 1.3))), rel=1e-9)
    arc = aam_softmax_loss(e, y, w, AamConfig(variant="arcface"))
    assert arc.item() == pytest.approx(math.log1p(math.exp(30 * (-1 - math.cos(0.3)))), rel=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["printed", "arcface"]))
def test_aam_decreasing_in_target_cosine(seed, variant):
    others = np.random.default_rng(seed).uniform(-1, 1, 3)
    cfg = AamConfig(variant=variant)
    losses = []
    for ct in np.linspace(-0.95, 0.95, 9):
        cos = torch.tensor([[ct, *others]])
        logits = margin_logits(cos, torch.tensor([0]), cfg)
        losses.append(torch.nn.functional.cross_entropy(logits, torch.tensor([0])).item())
    # once the target dominates by ~37 nats the loss rounds to exactly zero
    assert all(a > b or a == b == 0.0 for a, b in zip(losses, losses[1:]))
    assert losses[0] > 0


def test_aam_label_errors():
    e, w = torch.randn(2, 3), torch.randn(4, 3)
    with pytest.raises(ContractError):
        aam_softmax_loss(e, torch.tensor([0, 4]), w)
    with pytest.raises(ContractError):
        aam_softmax_loss(e, torch.tensor([-1, 0]), w)


def test_aam_config_validation():
    with pytest.raises(ConfigError):
        AamConfig(scale=0)
    with pytest.raises(ConfigError):
        AamConfig(margin=2.0)
    with pytest.raises(ConfigError):
        AamConfig(variant="cosface")


@pytest.mark.parametrize("variant", ["printed", "arcface"])
def test_aam_gradient(variant):
    torch.manual_seed(0)
    e = torch.randn(6, 5, requires_grad=True)
    w = torch.randn(4, 5, requires_grad=True)
    y = torch.tensor([0, 1, 2, 3, 0, 1])
    cfg = AamConfig(scale=5.0, variant=variant)
    loss = aam_softmax_loss(e, y, w, cfg)
    assert torch.isfinite(loss)
    assert grad_check(lambda: aam_softmax_loss(e, y, w, cfg), [e, w]) < 1e-4


def test_sharpen_examples():
    logits = torch.randn(4, 10)
    flat = sharpen(logits, 1e6)
    assert (flat - 0.1).abs().max() < 1e-4
    assert (sharpen(logits, 0.04).max(-1).values > sharpen(logits, 0.1).max(-1).values).all()
    torch.testing.assert_close(sharpen(logits, 0.04, center=logits), torch.full((4, 10), 0.1))
    with pytest.raises(ContractError):
        sharpen(logits, 0.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.04, 10))
def test_sharpen_is_distribution(seed, tau):
    # logit spreads past ~700 nats underflow to exact zeros in double precision
    g = torch.Generator().manual_seed(seed)
    p = sharpen(torch.randn(3, 7, generator=g) * 3, tau, torch.randn(7, generator=g))
    assert bool((p > 0).all())
    assert (p.sum(-1) - 1).abs().max() < 1e-9


def test_dino_loss_uniform_is_log_k():
    k = 16
    u = torch.full((k,), 1.0 / k)
    loss = dino_loss([u, u], [torch.zeros(k)] * 4, tau_s=0.1)
    assert loss.item() == pytest.approx(math.log(k), abs=1e-12)


def test_dino_loss_pair_counting():
    pt = [torch.tensor([0.9, 0.1]), torch.tensor([0.3, 0.7])]
    s = [torch.tensor([0.2, -0.1]), torch.tensor([1.0, 0.0]), torch.tensor([0.5, 0.5])]
    ps = [torch.softmax(x / 0.1, -1) for x in s]
    pairs = [(a, b) for a in range(2) for b in range(3) if a != b]
    expected = sum(cross_entropy(pt[a], ps[b]) for a, b in pairs) / len(pairs)
    assert len(pairs) == 4
    assert dino_loss(pt, s, 0.1).item() == pytest.approx(expected.item(), abs=1e-12)
    two = dino_loss(pt, s[:2], 0.1)
    ref2 = (cross_entropy(pt[0], ps[1]) + cross_entropy(pt[1], ps[0])) / 2
    assert two.item() == pytest.approx(ref2.item(), abs=1e-12)


def test_dino_loss_hand_value():
    assert cross_entropy(torch.tensor([0.9, 0.1]), torch.tensor([0.5, 0.5])).item() == pytest.approx(math.log(2))
    pt = torch.tensor([0.9, 0.1])
    loss = dino_loss([pt, pt], [torch.zeros(2), torch.zeros(2)], 0.1)
    assert loss.item() == pytest.approx(math.log(2), abs=1e-12)


def test_dino_loss_needs_two_views():
    with pytest.raises(ContractError):
        dino_loss([torch.ones(2) / 2], [torch.zeros(2)], 0.1)


def test_dino_loss_teacher_receives_no_gradient():
    t = torch.randn(2, 5, requires_grad=True)
    s = torch.randn(4, 5, requires_grad=True)
    pt = sharpen(t, 0.04)
    dino_loss(list(pt), list(s), 0.1).backward()
    assert t.grad is None
    assert s.grad is not None and s.grad.abs().sum() > 0


def test_dino_loss_minimised_at_teacher_distribution():
    # single cross pair, K=3: grid over the student simplex
    pt = torch.tensor([0.6, 0.3, 0.1])
    best, arg = math.inf, None
    grid = np.linspace(0.01, 0.98, 98)
    for a, b in itertools.product(grid, grid):
        if a + b >= 0.995:
            continue
        ps = torch.tensor([a, b, 1 - a - b])
        val = dino_loss([pt, pt], [torch.log(ps) * 0.1, torch.log(ps) * 0.1], 0.1).item()
        if val < best:
            best, arg = val, (a, b)
    assert arg == pytest.approx((0.6, 0.3), abs=0.011)
    at_teacher = dino_loss([pt, pt], [torch.log(pt) * 0.1] * 2, 0.1).item()
    assert at_teacher <= best + 1e-12
    assert at_teacher == pytest.approx(entropy(pt).item(), abs=1e-9)


def test_dino_config_and_warmup():
    cfg = DinoConfig(warmup=True)
    assert cfg.teacher_temp(0, 100) == pytest.approx(0.07)
    assert cfg.teacher_temp(5, 100) == pytest.approx(0.055)
    assert cfg.teacher_temp(10, 100) == pytest.approx(0.04)
    assert cfg.teacher_temp(99, 100) == pytest.approx(0.04)
    assert DinoConfig().teacher_temp(0, 100) == 0.04
    with pytest.raises(ConfigError):
        DinoConfig(tau_t=0)
    with pytest.raises(ConfigError):
        DinoConfig(teacher_momentum=1.5)


def test_update_center_examples():
    c = torch.zeros(1)
    assert update_center(c, torch.ones(4, 1), 0.9).item() == pytest.approx(0.1)
    batch = torch.randn(3, 2, 5)
    torch.testing.assert_close(update_center(torch.randn(5), batch, 0.0), batch.reshape(-1, 5).mean(0))
    c = torch.randn(5)
    torch.testing.assert_close(update_center(c, batch, 1.0), c)
    with pytest.raises(ContractError):
        update_center(c, torch.zeros(0, 5), 0.9)


def test_dino_center_module():
    center = DinoCenter(3)
    assert center.c.tolist() == [0.0, 0.0, 0.0]
    center.update(torch.ones(2, 3), 0.9)
    torch.testing.assert_close(center.c, torch.full((3,), 0.1))


def _pair():
    torch.manual_seed(0)
    s = nn.Sequential(nn.Linear(3, 4), nn.BatchNorm1d(4))
    t = nn.Sequential(nn.Linear(3, 4), nn.BatchNorm1d(4))
    return t, s


def test_update_teacher_examples():
    t, s = _pair()
    before = [p.clone() for p in t.parameters()]
    update_teacher(t, s, 1.0)
    for a, b in zip(before, t.parameters()):
        torch.testing.assert_close(a, b, rtol=0, atol=0)
    update_teacher(t, s, 0.0)
    for a, b in zip(t.state_dict().values(), s.state_dict().values()):
        if a.is_floating_point():
            torch.testing.assert_close(a, b, rtol=0, atol=0)
    with torch.no_grad():
        for p in t.parameters():
            p.fill_(1.0)
        for p in s.parameters():
            p.fill_(0.0)
    update_teacher(t, s, 0.987)
    assert all(torch.allclose(p, torch.full_like(p, 0.987)) for p in t.parameters())


def test_update_teacher_touches_buffers_not_counters():
    t, s = _pair()
    s[1].running_mean.fill_(2.0)
    s[1].num_batches_tracked.fill_(7)
    update_teacher(t, s, 0.5)
    torch.testing.assert_close(t[1].running_mean, torch.full((4,), 1.0))
    assert t[1].num_batches_tracked.item() == 0


def test_update_teacher_structure_mismatch():
    with pytest.raises(ContractError):
        update_teacher(nn.Linear(3, 4), nn.Linear(3, 5), 0.9)
    with pytest.raises(ContractError):
        update_teacher(nn.Linear(3, 4), nn.Sequential(nn.Linear(3, 4)), 0.9)


def test_update_teacher_no_grad_state():
    t, s = _pair()
    for p in t.parameters():
        p.requires_grad_(False)
    update_teacher(t, s, 0.9)
    assert all(p.grad is None for p in t.parameters())


@settings(max_examples=25, deadline=None)
@given(st.floats(0.5, 0.99), st.floats(-5, 5))
def test_ema_recurrences_converge_geometrically(m, target):
    c = torch.zeros(1)
    lin_t = nn.Linear(1, 1, bias=False)
    lin_s = nn.Linear(1, 1, bias=False)
    with torch.no_grad():
        lin_t.weight.fill_(0.0)
        lin_s.weight.fill_(target)
    for n in range(1, 60):
        c = update_center(c, torch.full((3, 1), target), m)
        update_teacher(lin_t, lin_s, m)
        closed = target * (1 - m**n)
        assert abs(c.item() - closed) < 1e-12
        assert abs(lin_t.weight.item() - closed) < 1e-12
