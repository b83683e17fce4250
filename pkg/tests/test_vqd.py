import math

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from vqdet import numerics as nm
from vqdet.geometry import AnchorBox6D, GroundTruthObject
from vqdet.gradcheck import OP_TOLERANCE, check_params_fn
from vqdet.losses import LossWeights, PredictionRows
from vqdet.vqd import (
    DETERMINISTIC,
    VARIATIONAL,
    DenoisingConfig,
    LatentDistribution,
    VariationalQueryGenerator,
    denoising_loss,
    sample_reparameterized,
)


def _generator(seed=0, num_classes=3, width=8):
    store = nm.ParameterStore(rng_seed=seed)
    return VariationalQueryGenerator(store, num_classes, width), store


def _anchors_and_tuples():
    anchors = [AnchorBox6D(0.4, 0.5, 0.1, 0.12, 0.08, 0.2),
               AnchorBox6D(0.6, 0.3, 0.05, 0.1, 0.1, 0.1)]
    tuples = [(1, 3.5, 1.6, 1.5, 0.4, 11.0), (2, 0.8, 0.7, 1.8, -0.9, 7.0)]
    return anchors, tuples


class TestEncoder:
    def test_deterministic(self):
        gen, _ = _generator()
        anchors, tuples = _anchors_and_tuples()
        a = gen.encode(anchors, tuples)
        b = gen.encode(anchors, tuples)
        assert_array_equal(a.mu.data, b.mu.data)
        assert_array_equal(a.log_var.data, b.log_var.data)

    def test_empty_input_empty_output(self):
        gen, _ = _generator()
        dist = gen.encode([], [])
        assert dist.mu.data.shape == (0, 8)
        assert nm.gaussian_kl(dist.mu, dist.log_var).item() == 0.0

    def test_category_out_of_range(self):
        gen, _ = _generator(num_classes=2)
        anchors, tuples = _anchors_and_tuples()
        with pytest.raises(IndexError, match="category"):
            gen.encode(anchors, tuples)

    def test_log_var_clamped(self):
        gen, store = _generator()
        store["vqg.lv.b"].data[:] = 50.0
        anchors, tuples = _anchors_and_tuples()
        dist = gen.encode(anchors, tuples)
        assert dist.log_var.data.max() <= 10.0

    def test_gradient_through_embedding(self):
        gen, store = _generator(seed=11, width=6)
        anchors, tuples = _anchors_and_tuples()
        rng = np.random.default_rng(0)
        pm = rng.normal(size=(2, 6))

        def loss_fn():
            return nm.sum_all(gen.encode(anchors, tuples).mu * nm.Tensor(pm))

        assert check_params_fn(loss_fn, store) <= OP_TOLERANCE


class TestReparameterization:
    def _dist(self, mu, log_var):
        return LatentDistribution(mu=nm.Tensor(mu), log_var=nm.Tensor(log_var))

    def test_zero_eps_returns_mu(self):
        mu = np.array([[1.0, -2.0]])
        dist = self._dist(mu, np.zeros((1, 2)))
        z = sample_reparameterized(dist, None, VARIATIONAL, eps=np.zeros((1, 2)))
        assert_array_equal(z.data, mu)

    def test_clamp_floor_vanishing_variance(self):
        mu = np.array([[0.5, 0.5]])
        dist = self._dist(mu, np.full((1, 2), -10.0))
        eps = np.array([[1.0, -1.0]])
        z = sample_reparameterized(dist, None, VARIATIONAL, eps=eps)
        assert np.abs(z.data - mu).max() <= math.exp(-5.0) + 1e-12

    def test_deterministic_mode_is_mu(self):
        dist = self._dist(np.array([[0.3, 0.7]]), np.zeros((1, 2)))
        z = sample_reparameterized(dist, np.random.default_rng(0), DETERMINISTIC)
        assert z is dist.mu

    def test_sample_statistics(self):
        n, d = 10 ** 5, 4
        mu = np.tile([0.5, -1.0, 0.0, 2.0], (n, 1))
        log_var = np.tile([0.0, 1.0, -1.0, 0.5], (n, 1))
        dist = self._dist(mu, log_var)
        z = sample_reparameterized(dist, np.random.default_rng(42), VARIATIONAL).data
        var = np.exp(log_var[0])
        for j in range(d):
            se = math.sqrt(var[j] / n)
            assert abs(z[:, j].mean() - mu[0, j]) <= 3 * se
            assert abs(z[:, j].var() - var[j]) <= 0.05 * var[j]

    def test_gradient_flows_to_mu_and_log_var_not_eps(self):
        mu = nm.Tensor(np.ones((2, 3)), requires_grad=True)
        log_var = nm.Tensor(np.zeros((2, 3)), requires_grad=True)
        dist = LatentDistribution(mu=mu, log_var=log_var)
        eps = np.full((2, 3), 0.7)
        z = sample_reparameterized(dist, None, VARIATIONAL, eps=eps)
        nm.backward(nm.sum_all(z))
        assert_array_equal(mu.grad, np.ones((2, 3)))
        np.testing.assert_allclose(log_var.grad, 0.5 * 0.7 * np.ones((2, 3)), atol=1e-12)


def _perfect_block(gt: GroundTruthObject, num_classes=2):
    logits = np.full((1, num_classes), -40.0)
    logits[0, gt.c] = 40.0
    return PredictionRows(
        class_logits=nm.Tensor(logits),
        centers=nm.Tensor(np.array([[gt.x_c, gt.y_c]])),
        lrtb=nm.Tensor(np.array([[gt.l, gt.r, gt.t, gt.b]])),
        size3d=nm.Tensor(np.array([[gt.l3d, gt.w3d, gt.h3d]])),
        angle=nm.Tensor(np.array([[math.sin(gt.theta), math.cos(gt.theta)]])),
        depth=nm.Tensor(np.array([[gt.d]])))


class TestDenoisingLoss:
    GT = GroundTruthObject(1, 0.5, 0.5, 0.1, 0.1, 0.1, 0.1, 3.5, 1.6, 1.5, 0.3, 20.0)

    def _dist(self, mu=0.0, log_var=0.0):
        return LatentDistribution(mu=nm.Tensor(np.full((1, 4), mu)),
                                  log_var=nm.Tensor(np.full((1, 4), log_var)))

    def test_beta_zero_equals_reconstruction(self):
        blocks = [[(_perfect_block(self.GT), [self.GT])]]
        out = denoising_loss(blocks, self._dist(0.5, 0.3),
                             DenoisingConfig(beta=0.0), LossWeights())
        assert out.total.item() == out.reconstruction.item()

    def test_perfect_reconstruction_and_standard_latent_is_zero(self):
        blocks = [[(_perfect_block(self.GT), [self.GT])]]
        out = denoising_loss(blocks, self._dist(0.0, 0.0),
                             DenoisingConfig(beta=0.7), LossWeights())
        assert out.kl.item() == 0.0
        assert out.total.item() == pytest.approx(0.0, abs=1e-10)

    def test_deterministic_mode_skips_kl(self):
        blocks = [[(_perfect_block(self.GT), [self.GT])]]
        out = denoising_loss(blocks, self._dist(3.0, 2.0),
                             DenoisingConfig(beta=0.7, mode=DETERMINISTIC), LossWeights())
        assert out.kl.item() == 0.0
        assert out.total.item() == out.reconstruction.item()

    def test_hand_executed_tiny_instance(self):
        """K=1 block with known offsets; reconstruction + KL recomputed by hand."""
        gt = self.GT
        w = LossWeights()
        logits = np.array([[0.2, 1.1]])
        pred = PredictionRows(
            class_logits=nm.Tensor(logits),
            centers=nm.Tensor(np.array([[0.47, 0.55]])),
            lrtb=nm.Tensor(np.array([[0.12, 0.1, 0.09, 0.1]])),
            size3d=nm.Tensor(np.array([[3.0, 1.5, 1.6]])),
            angle=nm.Tensor(np.array([[0.1, 1.0]])),
            depth=nm.Tensor(np.array([[21.5]])))
        mu, log_var = 0.4, -0.6
        dist = LatentDistribution(mu=nm.Tensor(np.full((1, 3), mu)),
                                  log_var=nm.Tensor(np.full((1, 3), log_var)))
        cfg = DenoisingConfig(beta=0.25)
        out = denoising_loss([[(pred, [gt])]], dist, cfg, w, beta_scale=0.5)

        from vqdet.geometry import box2d_corners, giou2d
        p = 1.0 / (1.0 + np.exp(-logits))
        onehot = np.array([[0.0, 1.0]])
        cls = float((-(onehot * 0.25 * (1 - p) ** 2 * np.log(p))
                     - ((1 - onehot) * 0.75 * p ** 2 * np.log(1 - p))).sum())
        center = abs(0.47 - 0.5) + abs(0.55 - 0.5)
        lrtb = abs(0.12 - 0.1) + abs(0.1 - 0.1) + abs(0.09 - 0.1) + abs(0.1 - 0.1)
        pred_box = (0.47 - 0.12, 0.55 - 0.09, 0.47 + 0.1, 0.55 + 0.1)
        giou_term = 1.0 - giou2d(pred_box, box2d_corners(gt.anchor()))
        size = abs(3.0 - 3.5) + abs(1.5 - 1.6) + abs(1.6 - 1.5)
        angle = abs(0.1 - math.sin(0.3)) + abs(1.0 - math.cos(0.3))
        depth = abs(21.5 - 20.0)
        recon = (w.w_cls * cls + w.w_center * center + w.w_lrtb * lrtb
                 + w.w_giou * giou_term + w.w_size * size
                 + w.w_angle * angle + w.w_depth * depth)
        kl = 3 * 0.5 * (math.exp(log_var) + mu ** 2 - 1.0 - log_var)
        expected = recon + 0.25 * 0.5 * kl
        assert out.total.item() == pytest.approx(expected, abs=1e-10)
        assert out.kl.item() == pytest.approx(kl, abs=1e-12)

    def test_count_mismatch_rejected(self):
        blocks = [[(_perfect_block(self.GT), [self.GT, self.GT])]]
        with pytest.raises(ValueError, match="targets"):
            denoising_loss(blocks, self._dist(), DenoisingConfig(), LossWeights())

    def test_layer_and_block_normalization(self):
        """Two layers sum; two blocks in a layer average."""
        blk = (_perfect_block(self.GT), [self.GT])
        one = denoising_loss([[blk]], None, DenoisingConfig(mode=DETERMINISTIC),
                             LossWeights())
        two_blocks = denoising_loss([[blk, blk]], None,
                                    DenoisingConfig(mode=DETERMINISTIC), LossWeights())
        two_layers = denoising_loss([[blk], [blk]], None,
                                    DenoisingConfig(mode=DETERMINISTIC), LossWeights())
        assert two_blocks.total.item() == pytest.approx(one.total.item(), abs=1e-12)
        assert two_layers.total.item() == pytest.approx(2 * one.total.item(), abs=1e-12)


def test_denoising_config_validation():
    with pytest.raises(ValueError):
        DenoisingConfig(beta=-0.1)
    with pytest.raises(ValueError):
        DenoisingConfig(mode="other")
