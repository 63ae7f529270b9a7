import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from vsuda.losses import (
    adversarial_loss,
    ce_loss,
    cycle_loss,
    deep_supervision_loss,
    deep_supervision_weights,
    dice_ce_loss,
    dice_loss,
    downsample_labels,
    identity_loss,
    kspace_cycle_loss,
    one_hot,
)


def central_fd_grad(f, x, h=1e-6):
    g = torch.zeros_like(x)
    flat, gflat = x.view(-1), g.view(-1)
    for i in range(flat.numel()):
        old = flat[i].item()
        flat[i] = old + h
        up = f(x).item()
        flat[i] = old - h
        down = f(x).item()
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return g


def max_rel_err(a, b, floor=1e-6):
    return float(((a - b).abs() / (torch.maximum(a.abs(), b.abs()) + floor)).max())


@pytest.mark.parametrize("shape", [(2, 3, 4, 4), (1, 3, 3, 3, 2)])
def test_dice_ce_gradient_matches_finite_differences(shape):
    g = torch.Generator().manual_seed(0)
    logits = torch.randn(shape, dtype=torch.float64, generator=g)
    labels = torch.randint(0, 3, (shape[0],) + shape[2:], generator=g)
    x = logits.clone().requires_grad_(True)
    dice_ce_loss(x, labels).backward()
    fd = central_fd_grad(lambda z: dice_ce_loss(z, labels), logits.clone())
    assert max_rel_err(x.grad, fd) < 1e-3


def test_deep_supervision_gradient_matches_finite_differences():
    g = torch.Generator().manual_seed(1)
    heads = [torch.randn(1, 3, 4, 4, dtype=torch.float64, generator=g), torch.randn(1, 3, 2, 2, dtype=torch.float64, generator=g)]
    labels = torch.randint(0, 3, (1, 4, 4), generator=g)
    xs = [h.clone().requires_grad_(True) for h in heads]
    deep_supervision_loss(xs, labels).backward()
    fd = central_fd_grad(lambda z: deep_supervision_loss([z, heads[1]], labels), heads[0].clone())
    assert max_rel_err(xs[0].grad, fd) < 1e-3


def test_ce_uniform_logits_is_ln3():
    logits = torch.zeros(2, 3, 5, 5, dtype=torch.float64)
    labels = torch.randint(0, 3, (2, 5, 5))
    assert ce_loss(logits, labels).item() == pytest.approx(math.log(3), abs=1e-12)


def test_dice_loss_hand_value():
    # one voxel per class channel; class 1 prob 0.5 on its voxel, class 2 perfect
    probs = torch.tensor([[[0.5, 0.0], [0.5, 0.0], [0.0, 1.0]]], dtype=torch.float64)  # (B=1, C=3, N=2)
    labels = torch.tensor([[1, 2]])
    oh = one_hot(labels)
    d1 = (2 * 0.5 + 1e-5) / (0.5 + 1 + 1e-5)
    d2 = (2 * 1 + 1e-5) / (1 + 1 + 1e-5)
    assert dice_loss(probs, oh).item() == pytest.approx(1 - (d1 + d2) / 2, abs=1e-12)


def test_dice_loss_perfect_prediction_is_zero():
    labels = torch.randint(0, 3, (2, 6, 6))
    oh = one_hot(labels).double()
    assert dice_loss(oh, oh).item() == pytest.approx(0.0, abs=1e-12)


def test_dice_loss_ignores_background_channel():
    g = torch.Generator().manual_seed(2)
    probs = torch.rand(2, 3, 5, 5, generator=g, dtype=torch.float64)
    oh = one_hot(torch.randint(0, 3, (2, 5, 5), generator=g)).double()
    other = probs.clone()
    other[:, 0] = torch.rand(2, 5, 5, generator=g, dtype=torch.float64)
    assert dice_loss(probs, oh).item() == dice_loss(other, oh).item()


def test_dice_loss_is_batch_pooled():
    # empty class in one sample, present in the other: pooled Dice differs from the per-sample mean
    labels = torch.tensor([[[1, 1]], [[0, 0]]])
    oh = one_hot(labels).double()
    probs = oh.clone()
    probs[1, 1] = 0.5
    probs[1, 0] = 0.5
    # class 1: inter 2, sums 2 + 1 + 2; class 2: empty everywhere -> (eps)/(eps) = 1
    d1 = (2 * 2 + 1e-5) / (3 + 2 + 1e-5)
    assert dice_loss(probs, oh).item() == pytest.approx(1 - (d1 + 1) / 2, abs=1e-12)


def test_label_range_checked():
    with pytest.raises(ValueError, match="labels must lie"):
        dice_ce_loss(torch.zeros(1, 3, 2, 2), torch.full((1, 2, 2), 3))


def test_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        dice_ce_loss(torch.zeros(1, 3, 2, 2), torch.zeros(1, 2, 3, dtype=torch.long))
    with pytest.raises(ValueError):
        kspace_cycle_loss(torch.zeros(1, 1, 4, 4), torch.zeros(1, 1, 4, 5))


def test_deep_supervision_weights():
    assert deep_supervision_weights(3) == pytest.approx([4 / 7, 2 / 7, 1 / 7])
    assert deep_supervision_weights(5) == pytest.approx([4 / 7, 2 / 7, 1 / 7, 0, 0])
    assert deep_supervision_weights(1) == [1.0]


def test_deep_supervision_single_head_equals_plain_loss():
    g = torch.Generator().manual_seed(3)
    logits = torch.randn(2, 3, 4, 4, generator=g)
    labels = torch.randint(0, 3, (2, 4, 4), generator=g)
    assert deep_supervision_loss([logits], labels).item() == pytest.approx(dice_ce_loss(logits, labels).item())


def test_downsample_labels_nearest():
    lab = torch.arange(16).reshape(1, 4, 4) % 3
    out = downsample_labels(lab, (2, 2))
    assert out.tolist() == [[[lab[0, 0, 0].item(), lab[0, 0, 2].item()], [lab[0, 2, 0].item(), lab[0, 2, 2].item()]]]


def test_adversarial_hand_values():
    s = torch.tensor([0.0, 1.0, 0.5])
    assert adversarial_loss(s, True).item() == pytest.approx((1 + 0 + 0.25) / 3)
    assert adversarial_loss(s, False).item() == pytest.approx((0 + 1 + 0.25) / 3)


def test_cycle_and_identity_are_mean_l1():
    a = torch.tensor([[1.0, -1.0], [0.0, 2.0]])
    b = torch.tensor([[0.0, 1.0], [0.0, 2.0]])
    assert cycle_loss(a, b).item() == pytest.approx(0.75)
    assert identity_loss(a, b).item() == pytest.approx(0.75)


# ------------------------------------------------------------------- k-space


def numpy_kspace_l1(x, y):
    d = np.fft.fft2(x - y, norm="ortho")
    return np.mean(np.abs(np.stack([d.real, d.imag])))


def test_kspace_zero_iff_equal():
    rng = np.random.default_rng(0)
    for _ in range(20):
        x = torch.from_numpy(rng.normal(size=(2, 1, 8, 8)))
        y = torch.from_numpy(rng.normal(size=(2, 1, 8, 8)))
        assert kspace_cycle_loss(x, x).item() == 0.0
        assert kspace_cycle_loss(x, y).item() > 0.0


def test_kspace_matches_numpy_dft():
    rng = np.random.default_rng(1)
    for _ in range(10):
        x, y = rng.normal(size=(1, 1, 6, 10)), rng.normal(size=(1, 1, 6, 10))
        got = kspace_cycle_loss(torch.from_numpy(x), torch.from_numpy(y)).item()
        assert got == pytest.approx(numpy_kspace_l1(x, y), abs=1e-12)


def test_kspace_single_pixel_difference():
    # a difference c at the origin has a flat real spectrum c/sqrt(N);
    # averaging |re| and |im| over 2N entries gives |c| / (2 sqrt(N))
    n = 8 * 8
    x = torch.zeros(1, 1, 8, 8, dtype=torch.float64)
    y = x.clone()
    y[0, 0, 0, 0] = 3.0
    assert kspace_cycle_loss(x, y).item() == pytest.approx(3.0 / (2 * math.sqrt(n)), abs=1e-12)


def test_kspace_l2_variant_is_image_mse():
    rng = np.random.default_rng(2)
    for _ in range(20):
        x = torch.from_numpy(rng.normal(size=(2, 1, 7, 9)))
        y = torch.from_numpy(rng.normal(size=(2, 1, 7, 9)))
        assert abs(kspace_cycle_loss(x, y, p=2).item() - ((x - y) ** 2).mean().item()) < 1e-6


def test_kspace_bad_order():
    with pytest.raises(ValueError):
        kspace_cycle_loss(torch.zeros(1, 1, 2, 2), torch.zeros(1, 1, 2, 2), p=3)


images = st.integers(0, 2**32 - 1).map(lambda s: np.random.default_rng(s).normal(size=(2, 1, 6, 6)))


@given(images, images)
@settings(max_examples=40, deadline=None)
def test_kspace_symmetric_nonnegative(a, b):
    x, y = torch.from_numpy(a), torch.from_numpy(b)
    assert kspace_cycle_loss(x, y).item() == pytest.approx(kspace_cycle_loss(y, x).item(), abs=1e-12)
    assert kspace_cycle_loss(x, y).item() >= 0


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=30, deadline=None)
def test_dice_ce_bounds(seed):
    g = torch.Generator().manual_seed(seed)
    logits = torch.randn(2, 3, 4, 4, generator=g)
    labels = torch.randint(0, 3, (2, 4, 4), generator=g)
    probs = torch.softmax(logits, 1)
    d = dice_loss(probs, one_hot(labels)).item()
    assert 0.0 <= d <= 1.0
    assert dice_ce_loss(logits, labels).item() >= d
