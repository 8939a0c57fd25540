import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from segmote import tensor as T
from segmote.losses import (LossConfig, batch_dice_loss, dice_loss, dice_metric, soft_dice_coefficient,
                            total_loss)
from segmote.tensor import Tensor

HALF_TARGET = np.array([[1.0, 1.0], [0.0, 0.0]])


def test_dice_loss_perfect_overlap():
    y = np.array([[1.0, 0.0], [1.0, 1.0]])
    assert dice_loss(Tensor(y), y).item() <= 1e-6


def test_dice_loss_disjoint():
    y = np.array([[1.0, 1.0], [0.0, 0.0]])
    assert dice_loss(Tensor(1 - y), y).item() >= 1 - 1e-6


def test_dice_loss_half_overlap_oracle():
    # 1 - 2*(0.5+0.5) / (2 + 2) by hand
    oracle = 1 - 2 * 1.0 / (2.0 + 2.0)
    assert oracle == 0.5
    assert abs(dice_loss(Tensor(np.full((2, 2), 0.5)), HALF_TARGET).item() - oracle) < 1e-6


def test_dice_loss_shape_mismatch():
    with pytest.raises(ValueError):
        dice_loss(Tensor(np.ones(4)), np.ones((2, 2)))


def test_batch_dice_averages_per_image():
    probs = np.stack([HALF_TARGET, np.full((2, 2), 0.5)])
    target = np.stack([HALF_TARGET, HALF_TARGET])
    assert abs(batch_dice_loss(Tensor(probs), target).item() - 0.25) < 1e-6


def test_total_loss_examples():
    seg, bal = Tensor(0.5), Tensor(0.25)
    assert abs(total_loss(seg, bal, LossConfig(0.01)).item() - 0.5025) < 1e-12
    assert total_loss(seg, bal, LossConfig(0.0)).item() == 0.5
    assert total_loss(Tensor(0.6), bal).item() > total_loss(seg, bal).item()
    assert total_loss(seg, Tensor(0.3)).item() > total_loss(seg, bal).item()


def test_total_loss_rejects_non_finite():
    with pytest.raises(FloatingPointError):
        total_loss(Tensor(float("nan")), Tensor(0.0))


def test_loss_config_validation():
    with pytest.raises(ValueError):
        LossConfig(lambda_balance=-1)
    with pytest.raises(ValueError):
        LossConfig(dice_smooth=0)


def test_dice_metric_examples():
    assert dice_metric(np.where(HALF_TARGET > 0, 5.0, -5.0), HALF_TARGET) == 1.0
    assert dice_metric(np.full((2, 2), -3.0), np.zeros((2, 2))) == 1.0
    pred = np.array([[4.0, -4.0], [4.0, -4.0]])
    # counting: |P & T| = 1, |P| = 2, |T| = 2
    assert dice_metric(pred, HALF_TARGET) == 2 * 1 / (2 + 2)


def test_dice_metric_threshold():
    z = np.array([[0.1, 0.1], [-0.1, -0.1]])
    assert dice_metric(z, HALF_TARGET) == 1.0
    assert dice_metric(z, HALF_TARGET, threshold=0.6) == 0.0


probs_arrays = arrays(np.float64, (3, 3), elements=st.floats(0, 1))
masks = arrays(np.float64, (3, 3), elements=st.sampled_from([0.0, 1.0]))


@settings(max_examples=100, deadline=None)
@given(probs_arrays, masks)
def test_dice_loss_range_and_complement(p, y):
    loss = dice_loss(Tensor(p), y).item()
    assert -1e-9 <= loss <= 1 + 1e-9
    assert abs(loss + soft_dice_coefficient(p, y) - 1.0) < 1e-9


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, (3, 3), elements=st.floats(-5, 5)), masks)
def test_dice_metric_range(z, y):
    assert 0.0 <= dice_metric(z, y) <= 1.0


def test_dice_loss_gradient():
    rng = np.random.default_rng(0)
    y = (rng.random((4, 4)) > 0.5).astype(float)
    x = Tensor(rng.standard_normal((4, 4)), requires_grad=True)
    assert T.grad_check(lambda v: dice_loss(T.sigmoid(v), y), x, 1e-5) < 1e-6
