"""Objective-level guarantees: EMA identities, spread-loss oracle, centering."""

import logging
import math

import numpy as np
import pytest
import torch
from torch import nn
from torch.nn import functional as F

from dino3d_trainer import (
    KOLEO_EPS,
    DinoSchedules,
    RunningCenter,
    distillation_loss,
    ema_update,
    koleo_loss,
    masked_token_loss,
    pair_distance,
    soften_teacher,
)
from conftest import emit


def brute_force_spread(embeddings, eps):
    """Independent quadratic recomputation of the nearest-neighbour penalty.

    Same distance primitive, but its own iteration order, python-level
    min selection, and explicit log accumulation.
    """
    x = F.normalize(embeddings, dim=-1)
    n = x.shape[0]
    logs = []
    for i in range(n):
        candidates = [pair_distance(x, i, j) for j in range(n) if j != i]
        nearest = candidates[0]
        for d in candidates[1:]:
            nearest = torch.minimum(nearest, d)
        logs.append(torch.log(eps + nearest))
    return -torch.stack(logs).mean()


def _two_tiny_nets(seed=0):
    torch.manual_seed(seed)
    student = nn.Sequential(nn.Linear(4, 5), nn.Tanh(), nn.Linear(5, 3))
    teacher = nn.Sequential(nn.Linear(4, 5), nn.Tanh(), nn.Linear(5, 3))
    return student, teacher


class TestEmaUpdate:
    def test_momentum_one_is_identity_bitwise(self, request):
        student, teacher = _two_tiny_nets()
        before = {k: v.clone() for k, v in teacher.state_dict().items()}
        ema_update(teacher, student, 1.0)
        ok = all(
            torch.equal(before[k], v) for k, v in teacher.state_dict().items()
        )
        assert ok

    def test_momentum_zero_copies_student(self):
        student, teacher = _two_tiny_nets()
        ema_update(teacher, student, 0.0)
        for (ks, vs), (kt, vt) in zip(
            student.state_dict().items(), teacher.state_dict().items()
        ):
            assert ks == kt
            assert torch.equal(vs, vt)

    def test_momentum_half_averages(self):
        student = nn.Linear(1, 1, bias=False)
        teacher = nn.Linear(1, 1, bias=False)
        with torch.no_grad():
            student.weight.fill_(4.0)
            teacher.weight.fill_(2.0)
        ema_update(teacher, student, 0.5)
        assert teacher.weight.item() == pytest.approx(3.0)

    def test_rejects_mismatched_parameter_names(self):
        student = nn.Linear(2, 2)
        teacher = nn.Sequential(nn.Linear(2, 2))
        with pytest.raises(ValueError):
            ema_update(teacher, student, 0.5)

    def test_rejects_mismatched_shapes(self):
        student = nn.Linear(2, 3)
        teacher = nn.Linear(2, 2)
        with pytest.raises(ValueError):
            ema_update(teacher, student, 0.5)

    def test_rejects_momentum_out_of_range(self):
        student, teacher = _two_tiny_nets()
        with pytest.raises(ValueError):
            ema_update(teacher, student, 1.5)


class TestSpreadLoss:
    @pytest.mark.parametrize("n,dim", [(2, 8), (3, 16), (8, 32), (64, 48)])
    def test_matches_quadratic_oracle_bitwise(self, n, dim):
        torch.manual_seed(n * 100 + dim)
        x = torch.randn(n, dim)
        ours = koleo_loss(x)
        oracle = brute_force_spread(x, KOLEO_EPS)
        assert torch.equal(ours, oracle)

    def test_single_embedding_returns_zero_with_warning(self, caplog):
        with caplog.at_level(logging.WARNING):
            out = koleo_loss(torch.randn(1, 8))
        assert out.item() == 0.0
        assert any(">= 2" in r.message for r in caplog.records)

    def test_identical_pair_hits_epsilon_guard(self):
        x = torch.ones(2, 8)
        out = koleo_loss(x, eps=1e-8)
        assert math.isfinite(out.item())
        assert out.item() == pytest.approx(-math.log(1e-8), rel=1e-6)

    def test_gradient_flows(self):
        x = torch.randn(4, 8, requires_grad=True)
        koleo_loss(x).backward()
        assert x.grad is not None
        assert torch.isfinite(x.grad).all()


class TestDistillation:
    def test_self_distillation_attains_teacher_entropy(self):
        torch.manual_seed(0)
        logits = torch.randn(6, 32)
        temp = 0.1
        teacher_probs = soften_teacher(logits, torch.zeros(32), temp)
        loss = distillation_loss(logits, teacher_probs, temp)
        entropy = -(teacher_probs * torch.log(teacher_probs + 1e-30)).sum(-1).mean()
        assert loss.item() == pytest.approx(entropy.item(), rel=1e-5)

    def test_soften_teacher_rows_are_distributions(self):
        p = soften_teacher(torch.randn(5, 16), torch.zeros(16), 0.04)
        assert torch.allclose(p.sum(-1), torch.ones(5), atol=1e-6)
        assert (p >= 0).all()

    def test_lower_temperature_sharpens(self):
        logits = torch.randn(1, 64)
        sharp = soften_teacher(logits, torch.zeros(64), 0.01)
        soft = soften_teacher(logits, torch.zeros(64), 1.0)
        assert sharp.max() > soft.max()

    def test_masked_loss_ignores_unmasked_positions(self):
        torch.manual_seed(1)
        student = torch.randn(2, 6, 16)
        teacher = soften_teacher(torch.randn(2, 6, 16), torch.zeros(16), 0.04)
        mask = torch.zeros(2, 6, dtype=torch.bool)
        mask[0, 2] = True
        loss = masked_token_loss(student, teacher, mask, 0.1)
        student2 = student.clone()
        student2[1, 3] = 99.0  # unmasked position must not matter
        loss2 = masked_token_loss(student2, teacher, mask, 0.1)
        assert loss.item() == pytest.approx(loss2.item())

    def test_masked_loss_empty_mask_is_zero(self):
        student = torch.randn(2, 6, 16, requires_grad=True)
        teacher = torch.rand(2, 6, 16)
        mask = torch.zeros(2, 6, dtype=torch.bool)
        loss = masked_token_loss(student, teacher, mask, 0.1)
        assert loss.item() == 0.0
        loss.backward()  # still connected to the graph

    def test_masked_loss_shape_mismatch(self):
        with pytest.raises(ValueError):
            masked_token_loss(
                torch.randn(2, 6, 16), torch.rand(2, 6, 16),
                torch.zeros(2, 5, dtype=torch.bool), 0.1,
            )


class TestRunningCenter:
    def test_stays_within_observed_bounds(self):
        torch.manual_seed(0)
        center = RunningCenter(8, momentum=0.9)
        means = []
        for _ in range(50):
            batch = torch.randn(16, 8) + 2.0
            means.append(batch.mean(dim=0))
            center.update(batch)
        stacked = torch.stack(means + [torch.zeros(8)])
        lo, hi = stacked.min(dim=0).values, stacked.max(dim=0).values
        assert (center.value >= lo - 1e-6).all()
        assert (center.value <= hi + 1e-6).all()

    def test_rejects_bad_momentum(self):
        with pytest.raises(ValueError):
            RunningCenter(4, momentum=1.0)

    def test_state_roundtrip(self):
        center = RunningCenter(4, momentum=0.8)
        center.update(torch.randn(3, 4))
        other = RunningCenter(4)
        other.load_state_dict(center.state_dict())
        assert torch.equal(center.value, other.value)
        assert other.momentum == 0.8


class TestConfigValidation:
    def test_all_ones_mask_ratio_rejected(self):
        with pytest.raises(ValueError):
            DinoSchedules(mask_ratio_lo=1.0, mask_ratio_hi=1.0).validate()

    def test_zero_mask_ratio_rejected(self):
        with pytest.raises(ValueError):
            DinoSchedules(mask_ratio_lo=0.0, mask_ratio_hi=0.5).validate()

    def test_default_schedules_valid(self):
        DinoSchedules().validate()


def test_criterion_11_summary(request):
    """EMA identities and the exhaustive spread-loss oracle agree."""
    student, teacher = _two_tiny_nets()
    before = {k: v.clone() for k, v in teacher.state_dict().items()}
    ema_update(teacher, student, 1.0)
    identity_ok = all(
        torch.equal(before[k], v) for k, v in teacher.state_dict().items()
    )
    ema_update(teacher, student, 0.0)
    copy_ok = all(
        torch.equal(s, t)
        for s, t in zip(student.state_dict().values(), teacher.state_dict().values())
    )
    bitwise_ok = True
    for n in (2, 8, 64):
        torch.manual_seed(n)
        x = torch.randn(n, 24)
        bitwise_ok = bitwise_ok and torch.equal(
            koleo_loss(x), brute_force_spread(x, KOLEO_EPS)
        )
    ok = identity_ok and copy_ok and bitwise_ok
    emit(
        request, 11, ok,
        f"EMA m=1 identity {identity_ok}, m=0 copy {copy_ok}, "
        f"spread oracle bitwise (n=2,8,64) {bitwise_ok}",
    )
    assert ok
