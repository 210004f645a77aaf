import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from fcdd.objective import (
    anomalous_term, downsample_mask, fcdd_loss, huber_score_map, pixel_fcdd_loss, sample_score,
)


def grid_with_sq_norms(values):
    """(C'=2, 1, len) grid whose cell vectors have the requested squared norms."""
    z = torch.zeros(2, 1, len(values), dtype=torch.float64)
    z[0, 0] = torch.tensor(values, dtype=torch.float64).sqrt()
    return z


def test_huber_closed_forms():
    out = huber_score_map(grid_with_sq_norms([0.0, 3.0, 8.0]))
    assert out.shape == (1, 3)
    assert out[0].tolist() == pytest.approx([0.0, 1.0, 2.0], abs=1e-12)


def test_huber_rejects_nonfinite():
    with pytest.raises(ValueError):
        huber_score_map(torch.tensor([[[float("inf")]]]))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=1, max_size=6), st.floats(1.0, 20.0))
def test_huber_monotone_in_norm(vec, lam):
    z = torch.tensor(vec, dtype=torch.float64)[:, None, None]
    assert huber_score_map(lam * z).item() >= huber_score_map(z).item()


def test_sample_score_examples():
    assert sample_score(torch.full((3, 4), 2.5)).item() == 2.5
    assert sample_score(torch.tensor([[0.0, 2.0]])).item() == 1.0
    with pytest.raises(ValueError):
        sample_score(torch.zeros(0, 3))


def test_sample_score_matches_double_loop():
    m = np.random.default_rng(0).random((7, 7))
    total = 0.0
    for u in range(7):
        for v in range(7):
            total += m[u, v]
    assert sample_score(torch.tensor(m)).item() == pytest.approx(total / 49, rel=1e-12)


def scalar_fcdd(maps, labels):
    losses = []
    for m, y in zip(maps, labels):
        s = sum(sum(row) for row in m) / (len(m) * len(m[0]))
        losses.append(s if y == 0 else -math.log(1 - math.exp(-s)))
    return sum(losses) / len(losses)


def test_fcdd_loss_all_normal_is_mean_score():
    maps = torch.rand(5, 3, 3, dtype=torch.float64)
    assert fcdd_loss(maps, torch.zeros(5)).item() == pytest.approx(sample_score(maps).mean().item(), abs=1e-15)


def test_fcdd_loss_anomalous_ln2():
    maps = torch.full((1, 2, 2), math.log(2), dtype=torch.float64)
    assert fcdd_loss(maps, torch.ones(1)).item() == pytest.approx(math.log(2), abs=1e-12)


def test_fcdd_loss_matches_scalar_oracle():
    maps = torch.rand(4, 3, 5, dtype=torch.float64) * 2
    labels = [0, 1, 1, 0]
    assert fcdd_loss(maps, torch.tensor(labels)).item() == pytest.approx(scalar_fcdd(maps.tolist(), labels), abs=1e-10)


def test_fcdd_loss_zero_score_anomaly_is_finite():
    loss = fcdd_loss(torch.zeros(1, 2, 2), torch.ones(1))
    assert torch.isfinite(loss) and loss.item() > 20


def test_fcdd_loss_errors():
    with pytest.raises(ValueError):
        fcdd_loss(torch.zeros(0, 2, 2), torch.zeros(0))
    with pytest.raises(ValueError):
        fcdd_loss(torch.zeros(2, 2, 2), torch.tensor([0, 2]))


def test_anomalous_term_accurate_near_zero():
    s = torch.tensor([1e-8, 1e-3], dtype=torch.float64)
    expected = [-math.log(-math.expm1(-1e-8)), -math.log(-math.expm1(-1e-3))]
    assert anomalous_term(s).tolist() == pytest.approx(expected, rel=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.floats(1e-3, 20.0))
def test_label_swap_exchanges_terms(s):
    maps = torch.full((1, 1, 1), s, dtype=torch.float64)
    as_normal = fcdd_loss(maps, torch.zeros(1)).item()
    as_anomal = fcdd_loss(maps, torch.ones(1)).item()
    assert as_normal == pytest.approx(s)
    assert as_anomal == pytest.approx(-math.log(1 - math.exp(-s)))
    pair = [fcdd_loss(torch.full((2, 1, 1), s, dtype=torch.float64), torch.tensor(y)).item() * 2
            for y in ([0, 1], [1, 0])]
    assert pair[0] == pytest.approx(pair[1])


def test_pixel_loss_all_zero_masks_is_mean_cell_score():
    maps = torch.rand(3, 4, 4, dtype=torch.float64)
    assert pixel_fcdd_loss(maps, torch.zeros(3, 16, 16)).item() == pytest.approx(maps.mean().item(), abs=1e-15)


def test_pixel_loss_single_anomalous_cell():
    maps = torch.zeros(2, 4, 4, dtype=torch.float64)
    maps[1, 2, 3] = math.log(2)
    masks = torch.zeros(2, 16, 16)
    masks[1, 9, 13] = 1  # pixel inside cell (2, 3) of a 4x4 grid
    loss = pixel_fcdd_loss(maps, masks, torch.tensor([0, 1]))
    assert loss.item() == pytest.approx(math.log(2) / 32, abs=1e-12)


def brute_pixel_loss(maps, masks):
    b, u, v = len(maps), len(maps[0]), len(maps[0][0])
    h, w = len(masks[0]), len(masks[0][0])
    bh, bw = h // u, w // v
    total, n = 0.0, 0
    for i in range(b):
        for a in range(u):
            for c in range(v):
                anomalous = any(masks[i][a * bh + p][c * bw + q] for p in range(bh) for q in range(bw))
                s = maps[i][a][c]
                total += -math.log(1 - math.exp(-s)) if anomalous else s
                n += 1
    return total / n


def test_pixel_loss_matches_cell_oracle():
    rng = np.random.default_rng(4)
    maps = rng.random((3, 4, 4)) * 3 + 1e-3
    masks = (rng.random((3, 12, 12)) < 0.05).astype(np.float64)
    masks[0] = 0
    got = pixel_fcdd_loss(torch.tensor(maps), torch.tensor(masks), torch.tensor([0, 1, 1])).item()
    assert got == pytest.approx(brute_pixel_loss(maps.tolist(), masks.tolist()), abs=1e-10)


def test_pixel_loss_uniform_masks_equal_cellwise_sample_loss():
    maps = torch.rand(4, 3, 3, dtype=torch.float64) + 0.1
    labels = torch.tensor([0, 1, 0, 1])
    masks = labels[:, None, None].double().expand(4, 9, 9).clone()
    cellwise = fcdd_loss(maps.reshape(-1, 1, 1), labels.repeat_interleave(9))
    assert pixel_fcdd_loss(maps, masks, labels).item() == pytest.approx(cellwise.item(), abs=1e-12)


def test_pixel_loss_balanced_flag():
    maps = torch.tensor([[[1.0, 2.0], [3.0, 4.0]]], dtype=torch.float64)
    masks = torch.zeros(1, 2, 2)
    masks[0, 0, 0] = 1
    normal_mean = (2 + 3 + 4) / 3
    anomal = -math.log(1 - math.exp(-1.0))
    got = pixel_fcdd_loss(maps, masks, balanced=True).item()
    assert got == pytest.approx((normal_mean + anomal) / 2)


def test_pixel_loss_errors():
    maps = torch.rand(2, 2, 2)
    with pytest.raises(ValueError):
        pixel_fcdd_loss(maps, torch.full((2, 4, 4), 0.5))
    with pytest.raises(ValueError):
        pixel_fcdd_loss(maps, torch.zeros(3, 4, 4))
    with pytest.raises(ValueError):
        pixel_fcdd_loss(maps, torch.zeros(2, 4, 4), source_shape=(8, 8))
    bad = torch.zeros(2, 4, 4)
    bad[0, 0, 0] = 1
    with pytest.raises(ValueError, match="normal sample"):
        pixel_fcdd_loss(maps, bad, torch.tensor([0, 1]))


def test_mask_downsampling_modes():
    m = torch.zeros(1, 4, 4)
    m[0, 0, 0] = 1
    assert downsample_mask(m, (2, 2))[0].tolist() == [[1, 0], [0, 0]]
    assert downsample_mask(m, (2, 2), mode="mean")[0].tolist() == [[0, 0], [0, 0]]
    m[0, :2, :2] = 1
    assert downsample_mask(m, (2, 2), mode="mean")[0].tolist() == [[1, 0], [0, 0]]


def numeric_grad_check(net, loss_fn, step=1e-4):
    """Largest per-entry relative error between autograd and central differences."""
    net.zero_grad()
    loss_fn().backward()
    worst = 0.0
    for p in net.trainable_parameters():
        analytic = p.grad.detach().clone()
        flat = p.data.view(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + step
            with torch.no_grad():
                up = loss_fn().item()
            flat[i] = orig - step
            with torch.no_grad():
                down = loss_fn().item()
            flat[i] = orig
            numeric = (up - down) / (2 * step)
            a = analytic.view(-1)[i].item()
            worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), 1e-6))
    return worst


def test_fcdd_loss_gradient_finite_differences(tiny_net):
    g = torch.Generator().manual_seed(0)
    x = torch.randn(4, 1, 8, 8, generator=g, dtype=torch.float64)
    y = torch.tensor([0, 1, 0, 1])
    assert numeric_grad_check(tiny_net, lambda: fcdd_loss(huber_score_map(tiny_net(x)), y)) < 1e-3


def test_pixel_loss_gradient_finite_differences(tiny_net):
    g = torch.Generator().manual_seed(1)
    x = torch.randn(3, 1, 8, 8, generator=g, dtype=torch.float64)
    masks = torch.zeros(3, 8, 8, dtype=torch.float64)
    masks[1, 2:5, 2:5] = 1
    masks[2] = 1
    y = torch.tensor([0, 1, 1])
    assert numeric_grad_check(tiny_net, lambda: pixel_fcdd_loss(huber_score_map(tiny_net(x)), masks, y)) < 1e-3
