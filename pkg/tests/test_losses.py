import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from splat4d.core import NoValidPixels, NoValidPoints
from splat4d.geometry import axis_angle_matrix
from splat4d.gradcheck import TOLERANCE, check_losses
from splat4d.losses import (
    LossWeights, combine, depth_loss, motion_distribution_loss, motion_point_loss, render_loss, total_loss,
)


def test_depth_loss_examples():
    gt = np.arange(12.0).reshape(3, 4)
    ok = np.ones((3, 4), bool)
    assert depth_loss(gt, gt, ok)[0] == 0.0
    assert depth_loss(gt + 0.3, gt, ok)[0] == pytest.approx(0.09, abs=1e-15)
    assert depth_loss(np.array([[0.0], [1.0]]), np.zeros((2, 1)), np.ones((2, 1), bool))[0] == 1.5


def test_depth_loss_drops_pairs_touching_invalid_pixels():
    pred = np.array([[0.0, 5.0, 1.0]])
    gt = np.zeros((1, 3))
    valid = np.array([[True, False, True]])
    value, grad = depth_loss(pred, gt, valid)
    assert value == 0.5  # no valid pair survives
    assert grad[0, 1] == 0.0
    with pytest.raises(NoValidPixels):
        depth_loss(pred, gt, np.zeros((1, 3), bool))


def test_render_loss_examples():
    img = np.random.default_rng(0).uniform(size=(4, 5, 3))
    assert render_loss(img, img)[0] == 0.0
    value, grad = render_loss(img + 0.5, img)
    assert value == pytest.approx(0.25, abs=1e-15)
    np.testing.assert_allclose(grad, 1.0 / 60)


def test_motion_hand_values():
    pred = np.array([[1.0, 0, 0], [0, 0, 0]])
    assert motion_point_loss(pred, np.zeros((2, 3)))[0] == 0.5
    assert motion_distribution_loss(pred, np.zeros((2, 3)))[0] == 0.25


def test_invalid_points_are_ignored():
    pred = np.array([[1e6, 0, 0], [0.1, 0.2, 0.3]])
    gt = np.array([[0.0, 0, 0], [0.1, 0.2, 0.3]])
    valid = np.array([False, True])
    assert motion_point_loss(pred, gt, valid)[0] == 0.0
    assert motion_distribution_loss(pred, gt, valid)[0] == 0.0
    with pytest.raises(NoValidPoints):
        motion_point_loss(pred, gt, np.zeros(2, bool))
    with pytest.raises(NoValidPoints):
        motion_distribution_loss(pred, gt, np.zeros(2, bool))


def test_point_loss_subgradient_is_zero_at_match():
    pred = np.array([[0.5, 0.0, -1.0]])
    _, grad = motion_point_loss(pred, pred.copy())
    np.testing.assert_array_equal(grad, 0.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_distribution_loss_is_rotation_invariant(seed):
    rng = np.random.default_rng(seed)
    R = axis_angle_matrix(rng.normal(size=3), rng.uniform(0, np.pi))
    pred, gt = rng.normal(size=(10, 3)), rng.normal(size=(10, 3))
    a = motion_distribution_loss(pred, gt)[0]
    b = motion_distribution_loss(pred @ R.T, gt @ R.T)[0]
    assert abs(a - b) < 1e-6
    assert a >= 0


def test_distribution_loss_zero_for_matching_gram():
    rng = np.random.default_rng(1)
    gt = rng.normal(size=(6, 3))
    R = axis_angle_matrix([1, 2, 3], 0.8)
    # rotated copy differs pointwise but has the same Gram matrix
    assert motion_distribution_loss(gt @ R.T, gt)[0] < 1e-12


def test_total_loss_decomposition():
    w = LossWeights(1, 1, 1, 1, 1)
    rep = combine({"depth": 0.1, "render": 0.2, "motion_pt": 0.3, "motion_dist": 0.4}, w)
    assert rep.total == pytest.approx(1.0, abs=1e-12)
    assert combine({}, w).total == 0.0
    rng = np.random.default_rng(2)
    w = LossWeights(0.7, 1.3, 0.9, 1.1, 0.4)
    img, ref = rng.uniform(size=(4, 4, 3)), rng.uniform(size=(4, 4, 3))
    d, dg = rng.normal(size=(4, 4)), rng.normal(size=(4, 4))
    mp, mg = rng.normal(size=(7, 3)), rng.normal(size=(7, 3))
    rep, _ = total_loss(w, render=(img, ref), depth=(d, dg, np.ones((4, 4), bool)), motion=(mp, mg, None))
    expected = (0.7 * rep.depth + 1.3 * rep.render + 0.9 * (1.1 * rep.motion_pt + 0.4 * rep.motion_dist))
    assert abs(rep.total - expected) < 1e-9


def test_lambda_placement_factors_out():
    rng = np.random.default_rng(3)
    pred, gt = rng.normal(size=(9, 3)), rng.normal(size=(9, 3))
    lam_pt, lam_dist = 0.8, 0.3
    inside = (np.abs(lam_pt * (pred - gt)).sum() / 9
              + np.abs(lam_dist * (pred @ pred.T - gt @ gt.T)).sum() / 81)
    rep, _ = total_loss(LossWeights(0, 0, 1, lam_pt, lam_dist), motion=(pred, gt, None))
    assert abs(rep.total - inside) < 1e-12


def test_zero_motion_weight_skips_motion_terms():
    rep, grads = total_loss(LossWeights(lambda_m=0), motion=(np.ones((2, 3)), np.zeros((2, 3)), None))
    assert rep.total == 0.0 and "motion" not in grads


def test_negative_weight_rejected():
    with pytest.raises(ValueError, match="lambda_r"):
        LossWeights(lambda_r=-1)


def test_finite_difference_suite():
    errors = check_losses()
    assert max(errors.values()) < TOLERANCE, errors
