import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from caam.losses import maxi_game_objective
from caam.partition import (
    FrozenPartition,
    PartitionHistory,
    advance_phase,
    ascend_theta,
    harden,
    init_theta,
    soft_assign,
)


def test_init_rows_near_uniform():
    for k, m in [(1, 1), (5, 2), (100, 4), (7, 8)]:
        p = soft_assign(init_theta(k, m, seed=0))
        assert p.shape == (k, m)
        assert (p - 1.0 / m).abs().max().item() < 0.01


def test_init_is_seeded():
    assert torch.equal(init_theta(4, 2, 7), init_theta(4, 2, 7))
    assert not torch.equal(init_theta(4, 2, 7), init_theta(4, 2, 8))


def test_init_reproduced_by_generator():
    gen = torch.Generator().manual_seed(7)
    expected = 0.01 * torch.randn(4, 2, generator=gen, dtype=torch.float64)
    assert torch.equal(init_theta(4, 2, 7), expected)


@pytest.mark.parametrize("k,m", [(0, 2), (3, 0), (-1, 1)])
def test_init_rejects_nonpositive(k, m):
    with pytest.raises(ValueError):
        init_theta(k, m, 0)


def test_soft_assign_closed_forms():
    p = soft_assign(torch.tensor([[0.0, 0.0, 0.0, 0.0], [math.log(2), 0.0, -1e9, -1e9]], dtype=torch.float64))
    assert p[0].tolist() == pytest.approx([0.25] * 4, abs=1e-15)
    assert p[1, :2].tolist() == pytest.approx([2 / 3, 1 / 3], abs=1e-12)


def test_soft_assign_rejects_non_finite():
    with pytest.raises(ValueError):
        soft_assign(torch.tensor([[float("inf"), 0.0]]))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-50, 50))
def test_soft_assign_shift_invariance_and_rows(seed, shift):
    theta = 5 * torch.randn(6, 3, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)
    p = soft_assign(theta)
    assert (p.sum(1) - 1).abs().max().item() <= 1e-6
    assert ((p > 0) & (p < 1)).all()
    torch.testing.assert_close(soft_assign(theta + shift), p)
    assert np.array_equal(harden(theta + torch.full((6, 1), shift, dtype=torch.float64)), harden(theta))


def test_harden_examples():
    assert harden(torch.tensor([[5.0, 1.0]])).tolist() == [0]
    assert harden(torch.tensor([[0.0, 0.0]])).tolist() == [0]
    assert harden(np.array([[0.0, 2.0, 2.0]])).tolist() == [1]


def test_harden_matches_brute_force():
    theta = np.random.default_rng(0).normal(size=(50, 5))
    brute = []
    for row in theta:
        best = 0
        for j in range(1, len(row)):
            if row[j] > row[best]:
                best = j
        brute.append(best)
    assert harden(theta).tolist() == brute


def test_ascend_zero_gradient_and_zero_step():
    theta = torch.randn(3, 2)
    same, delta = ascend_theta(theta, torch.zeros(3, 2), 0.1)
    assert torch.equal(same, theta) and delta == 0.0
    same, _ = ascend_theta(theta, torch.randn(3, 2), 0.0)
    assert torch.equal(same, theta)


def test_ascend_shape_mismatch():
    with pytest.raises(ValueError):
        ascend_theta(torch.zeros(3, 2), torch.zeros(2, 3), 0.1)


def test_one_step_increases_toy_objective():
    a = [-math.log(math.expm1(v)) for v in (0.1, 0.5, 0.9, 1.3)]
    logits = torch.tensor([[v, 0.0] for v in a], dtype=torch.float64)
    labels = torch.zeros(4, dtype=torch.long)
    theta = init_theta(4, 2, seed=3).requires_grad_(True)
    before = maxi_game_objective(logits, labels, theta, 1.0)
    (grad,) = torch.autograd.grad(before, theta)
    nxt, delta = ascend_theta(theta, grad, 0.5)
    after = maxi_game_objective(logits, labels, nxt, 1.0)
    assert delta > 0
    assert after.item() > before.item()


def test_advance_phase():
    hist = PartitionHistory()
    theta = torch.randn(6, 3, dtype=torch.float64)
    hist1, fresh = advance_phase(hist, theta, base_seed=0, next_phase=1)
    assert len(hist) == 0 and len(hist1) == 1
    assert hist1[0].splits.tolist() == harden(theta).tolist()
    assert fresh.shape == theta.shape and fresh.abs().max() < 0.1
    h = hist
    th = theta
    for phase in range(4):
        h, th = advance_phase(h, th + phase, 0, phase + 1)
    assert len(h) == 4


def test_frozen_partition_is_immutable():
    entry = FrozenPartition(np.array([0, 1, 1]), np.zeros((3, 2)), 2)
    with pytest.raises(ValueError):
        entry.splits[0] = 1
    with pytest.raises(ValueError):
        FrozenPartition(np.array([0, 2]), np.zeros((2, 2)), 2)
    assert entry.counts().tolist() == [1, 2]


def test_history_json_round_trip():
    hist = PartitionHistory.from_arrays([[0, 1, 1], [1, 0, 0]], num_splits=[2, 2])
    assert hist.to_json() == [[0, 1, 1], [1, 0, 0]]
    assert len(PartitionHistory.from_arrays(hist.to_json())) == 2
