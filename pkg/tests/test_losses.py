"""
Unit tests for segmentation losses and the Dice metric
"""

import math

import numpy as np
import pytest

from utils.errors import ArgumentError, ShapeError
from utils.losses import (DiceCeConfig, ce_loss, dice_ce_loss, dice_loss, dice_metric, mean_foreground_dice,
                          one_hot)
from utils.tensor import check_gradients, make_rng, precision, tensor


@pytest.fixture
def rng():
    """Seeded generator"""
    return make_rng(99)


@pytest.fixture(autouse=True)
def float64():
    """Run every loss test at test precision"""
    with precision("test"):
        yield


def test_one_hot_layout():
    """Test class axis placement and values"""
    labels = np.array([[[[0, 2], [1, 0]]]])
    encoded = one_hot(labels, 3)
    assert encoded.shape == (1, 3, 1, 2, 2)
    assert np.array_equal(encoded.argmax(axis=1), labels)
    assert np.all(encoded.sum(axis=1) == 1.0)
    with pytest.raises(ArgumentError):
        one_hot(labels, 2)


def test_dice_loss_of_perfect_prediction_is_zero():
    """Test that probabilities equal to the one-hot targets give zero loss"""
    targets = one_hot(np.array([[[[0, 1], [1, 2]]]]), 3)
    assert dice_loss(tensor(targets), targets).item() == pytest.approx(0.0, abs=1e-12)


def test_dice_loss_half_overlap():
    """Test p = (0.5, 0.5) against t = (1, 0) in one class"""
    probs = tensor(np.array([0.5, 0.5]).reshape(1, 1, 2))
    targets = np.array([1.0, 0.0]).reshape(1, 1, 2)
    eps = 1e-5
    expected = 1.0 - (2 * 0.5 + eps) / (1.0 + 1.0 + eps)
    assert dice_loss(probs, targets, eps=eps).item() == pytest.approx(expected, rel=1e-12)
    assert expected == pytest.approx(0.5, abs=1e-5)


def test_dice_loss_background_exclusion():
    """Test that excluding class 0 averages only the foreground ratios"""
    targets = one_hot(np.array([[[[0, 0], [0, 1]]]]), 2)
    probs = np.array(targets)
    probs[:, 0] = 1.0
    probs[:, 1] = 0.0
    with_bg = dice_loss(tensor(probs), targets).item()
    without_bg = dice_loss(tensor(probs), targets, include_background=False).item()
    assert without_bg > with_bg
    assert without_bg == pytest.approx(1.0 - 1e-5 / (1.0 + 1e-5), rel=1e-12)
    with pytest.raises(ArgumentError):
        dice_loss(tensor(probs[:, :1]), targets[:, :1], include_background=False)


def test_ce_of_uniform_probabilities_is_log_classes():
    """Test cross-entropy of a uniform distribution"""
    targets = one_hot(np.array([[[[0, 1], [2, 3]]]]), 4)
    probs = tensor(np.full(targets.shape, 0.25))
    assert ce_loss(probs, targets).item() == pytest.approx(math.log(4.0), rel=1e-12)


def test_loss_shape_checks():
    """Test mismatched probability and target shapes"""
    probs = tensor(np.full((1, 2, 2, 2, 2), 0.5))
    with pytest.raises(ShapeError):
        dice_loss(probs, np.zeros((1, 3, 2, 2, 2)))
    with pytest.raises(ShapeError):
        ce_loss(probs, np.zeros((1, 2, 2, 2, 1)))
    with pytest.raises(ShapeError):
        dice_ce_loss(probs, np.zeros((1, 2, 2, 3), dtype=np.int64))


def test_dice_ce_is_weighted_sum(rng):
    """Test DiceCE equals w_dl * Dice + w_cl * CE on the softmax"""
    logits = tensor(rng.standard_normal((2, 3, 2, 2, 2)))
    labels = rng.integers(0, 3, (2, 2, 2, 2))
    dice_only = dice_ce_loss(logits, labels, DiceCeConfig(w_dl=1.0, w_cl=0.0)).item()
    ce_only = dice_ce_loss(logits, labels, DiceCeConfig(w_dl=0.0, w_cl=1.0)).item()
    mixed = dice_ce_loss(logits, labels, DiceCeConfig(w_dl=2.0, w_cl=3.0)).item()
    assert mixed == pytest.approx(2.0 * dice_only + 3.0 * ce_only, rel=1e-12)
    assert dice_ce_loss(logits, labels).item() == pytest.approx(dice_only + ce_only, rel=1e-12)


def test_zero_logits_cross_entropy_term():
    """Test that zero logits over two classes give a cross-entropy of ln 2"""
    logits = tensor(np.zeros((1, 2, 2, 2, 2)))
    labels = np.zeros((1, 2, 2, 2), dtype=np.int64)
    ce_only = dice_ce_loss(logits, labels, DiceCeConfig(w_dl=0.0, w_cl=1.0)).item()
    assert ce_only == pytest.approx(math.log(2.0), rel=1e-12)


def test_dice_ce_gradients_match_finite_differences(rng):
    """Test the combined loss gradient with respect to the logits"""
    logits = tensor(rng.standard_normal((1, 3, 2, 2, 2)))
    labels = rng.integers(0, 3, (1, 2, 2, 2))
    result = check_gradients(lambda: dice_ce_loss(logits, labels), [logits])
    assert result.passed(1e-5), result


def test_loss_config_validation():
    """Test rejected weight combinations"""
    with pytest.raises(ArgumentError):
        DiceCeConfig(w_dl=-1.0)
    with pytest.raises(ArgumentError):
        DiceCeConfig(w_dl=0.0, w_cl=0.0)
    with pytest.raises(ArgumentError):
        DiceCeConfig(eps=0.0)


def test_dice_metric_cases(rng):
    """Test identical, disjoint, empty and symmetric cases"""
    a = rng.integers(0, 3, (4, 4, 4))
    b = rng.integers(0, 3, (4, 4, 4))
    assert dice_metric(a, a, 1) == 1.0
    assert dice_metric(a, b, 2) == dice_metric(b, a, 2)
    assert dice_metric(np.zeros((2, 2)), np.zeros((2, 2)), 1) == 1.0
    assert dice_metric(np.array([1, 0]), np.array([0, 1]), 1) == 0.0
    assert dice_metric(np.array([1, 1, 0]), np.array([1, 0, 0]), 1) == pytest.approx(2.0 / 3.0)
    with pytest.raises(ShapeError):
        dice_metric(np.zeros(3), np.zeros(4), 1)


def test_mean_foreground_dice_skips_background():
    """Test averaging over classes 1..C-1 only"""
    truth = np.array([0, 1, 1, 2])
    pred = np.array([1, 1, 1, 0])
    expected = (dice_metric(pred, truth, 1) + dice_metric(pred, truth, 2)) / 2
    assert mean_foreground_dice(pred, truth, 3) == pytest.approx(expected)
    with pytest.raises(ArgumentError):
        mean_foreground_dice(pred, truth, 1)
