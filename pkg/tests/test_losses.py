"""Per-level pose loss and the weighted multi-level total."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_pose
from vlodom.geometry import Pose
from vlodom.gradcheck import OP_TOL, max_rel_error, suite_loss
from vlodom.losses import DEFAULT_ALPHA, LossWeights, layer_loss, total_loss


def direct_loss(q, t, q_gt, t_gt, k_x, k_q):
    if np.dot(q, q_gt) < 0:
        q = -q
    return np.abs(t_gt - t).sum() * np.exp(-k_x) + k_x + np.sqrt(((q_gt - q) ** 2).sum()) * np.exp(-k_q) + k_q


class TestLayerLoss:
    def test_perfect_prediction_leaves_scales(self, rng):
        gt = random_pose(rng)
        assert layer_loss(gt, gt, 0.0, -2.5) == -2.5

    def test_unit_translation_residual(self, rng):
        gt = random_pose(rng)
        pred = Pose(gt.q, gt.t - np.array([1.0, 0.0, 0.0]))
        np.testing.assert_allclose(layer_loss(pred, gt, 0.0, -2.5), -1.5, atol=1e-15)

    def test_matches_direct_formula(self, rng):
        for _ in range(500):
            gt, pred = random_pose(rng), random_pose(rng)
            k_x, k_q = rng.normal(size=2)
            expected = direct_loss(pred.q, pred.t, gt.q, gt.t, k_x, k_q)
            assert abs(layer_loss(pred, gt, k_x, k_q) - expected) < 1e-9

    def test_sign_flip_invariance(self, rng):
        for _ in range(200):
            gt, pred = random_pose(rng), random_pose(rng)
            base = layer_loss(pred, gt, 0.3, -1.0)
            np.testing.assert_allclose(layer_loss(Pose(-pred.q, pred.t), gt, 0.3, -1.0), base, atol=1e-12)
            np.testing.assert_allclose(layer_loss(pred, Pose(-gt.q, gt.t), 0.3, -1.0), base, atol=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(0.05, 20.0), st.integers(0, 2**32 - 1))
    def test_minimized_over_k_x_at_log_residual(self, scale, seed):
        rng = np.random.default_rng(seed)
        gt = random_pose(rng)
        r = rng.normal(size=3)
        r *= scale / np.abs(r).sum()
        pred = Pose(gt.q, gt.t - r)
        ks = np.log(scale) + np.linspace(-1, 1, 2001)
        vals = [layer_loss(pred, gt, k, -2.5) for k in ks]
        assert abs(ks[int(np.argmin(vals))] - np.log(scale)) <= 1e-3


class TestDefaults:
    def test_published_weights_and_initial_scales(self, micro_cfg):
        assert DEFAULT_ALPHA == (1.6, 0.8, 0.4, 0.2)
        assert tuple(micro_cfg.loss.alpha) == DEFAULT_ALPHA
        assert (micro_cfg.loss.k_x_init, micro_cfg.loss.k_q_init) == (0.0, -2.5)
        assert (LossWeights().k_x, LossWeights().k_q) == (0.0, -2.5)

    def test_published_optimizer_settings(self, micro_cfg):
        t = micro_cfg.train
        assert (t.learning_rate, t.beta1, t.beta2) == (0.001, 0.9, 0.999)


class TestTotalLoss:
    def test_zero_losses(self):
        assert total_loss([0.0] * 4) == 0.0

    def test_unit_losses_sum_of_weights(self):
        np.testing.assert_allclose(total_loss([1.0] * 4), 3.0, atol=1e-15)

    def test_matches_dot_product(self, rng):
        for _ in range(200):
            L = rng.normal(size=4)
            alpha = rng.uniform(0, 2, 4)
            expected = sum(a * l for a, l in zip(alpha, L))
            assert abs(total_loss(L, LossWeights(tuple(alpha))) - expected) < 1e-12
            assert abs(total_loss(L) - sum(a * l for a, l in zip(DEFAULT_ALPHA, L))) < 1e-12

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(-100, 100), min_size=4, max_size=4), st.integers(0, 3), st.floats(-100, 100))
    def test_linear_in_each_level(self, L, level, delta):
        bumped = list(L)
        bumped[level] += delta
        np.testing.assert_allclose(total_loss(bumped) - total_loss(L), DEFAULT_ALPHA[level] * delta, atol=1e-9)

    def test_wrong_level_count(self):
        with pytest.raises(ValueError):
            total_loss([1.0, 2.0])

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError):
            LossWeights((1.0, -0.1, 0.0, 0.0))


class TestLossGradient:
    def test_matches_central_differences(self):
        checks = suite_loss(np.random.default_rng(42))
        assert max_rel_error(checks)[0] < OP_TOL
