"""Central finite-difference verification of every backward closure.

All checks run in 64-bit so the difference quotient itself is trustworthy;
the helper in conftest compares analytic gradients against central
differences at randomly probed positions.
"""

import numpy as np
import pytest

from hiloseg import nn
from hiloseg.nn import functional as F
from hiloseg.nn.layers import (
    BatchNorm,
    ConditionalBatchNorm,
    Conv3d,
    Dense,
    ResidualBlockConv3d,
    ResidualBlockFC,
)

from conftest import finite_difference_check


def t64(rng, *shape):
    return nn.parameter(rng.normal(size=shape).astype(np.float64))


class TestPrimitiveGradients:
    def test_arithmetic_chain(self, rng):
        a = t64(rng, 4, 3)
        b = t64(rng, 4, 3)
        c = t64(rng, 3)

        def loss():
            return F.mean_all(F.mul(F.add(a, c), F.scale(b, 1.7)))

        finite_difference_check(loss, [a, b, c], rng=rng)

    def test_matmul_reshape_concat(self, rng):
        a = t64(rng, 2, 3, 4)
        w = t64(rng, 4, 5)
        b = t64(rng, 2, 3, 5)

        def loss():
            h = F.concat([F.matmul(a, w), b], axis=-1)
            return F.mean_all(F.reshape(h, (6, 10)))

        finite_difference_check(loss, [a, w, b], rng=rng)

    def test_activations(self, rng):
        for act in (F.leaky_relu, F.selu, F.sigmoid):
            x = t64(rng, 40)
            weights = nn.Tensor(rng.normal(size=40).astype(np.float64))

            def loss():
                return F.mean_all(F.mul(act(x), weights))

            finite_difference_check(loss, [x], rng=rng)

    def test_resampling_chain(self, rng):
        x = t64(rng, 2, 4, 4, 4, 3)

        def loss():
            h = F.avg_pool3d(x, 2)
            h = F.upsample_nearest3d(h, 2)
            h = F.pad_right3d(h, (5, 6, 4))
            h = F.adaptive_avg_pool3d(h, (2, 2, 2))
            return F.mean_all(h)

        finite_difference_check(loss, [x], rng=rng)

    def test_adaptive_pool_ragged(self, rng):
        x = t64(rng, 1, 5, 7, 3, 2)

        def loss():
            return F.mean_all(F.adaptive_avg_pool3d(x, (2, 3, 2)))

        finite_difference_check(loss, [x], rng=rng)

    def test_repeat_middle(self, rng):
        x = t64(rng, 3, 6)
        weights = nn.Tensor(rng.normal(size=(3, 5, 6)).astype(np.float64))

        def loss():
            return F.mean_all(F.mul(F.repeat_middle(x, 5), weights))

        finite_difference_check(loss, [x], rng=rng)


class TestConvGradients:
    def test_stride1_padded(self, rng):
        x = t64(rng, 2, 4, 4, 4, 3)
        w = t64(rng, 3, 3, 3, 3, 2)

        def loss():
            return F.mean_all(F.conv3d(x, w, stride=1, padding=1))

        finite_difference_check(loss, [x, w], rng=rng)

    def test_stride2_unpadded(self, rng):
        x = t64(rng, 1, 5, 5, 5, 2)
        w = t64(rng, 3, 3, 3, 2, 4)

        def loss():
            return F.mean_all(F.conv3d(x, w, stride=2, padding=0))

        finite_difference_check(loss, [x, w], rng=rng)

    def test_pointwise(self, rng):
        x = t64(rng, 2, 3, 3, 3, 4)
        w = t64(rng, 1, 1, 1, 4, 2)

        def loss():
            return F.mean_all(F.sigmoid(F.conv3d(x, w)))

        finite_difference_check(loss, [x, w], rng=rng)

    def test_layer_with_bias(self, rng):
        conv = Conv3d(2, 3, 3, rng=7, dtype=np.float64)
        x = t64(rng, 2, 4, 4, 4, 2)

        def loss():
            return F.mean_all(F.selu(conv(x)))

        finite_difference_check(loss, [x, conv.w, conv.b], rng=rng)


class TestNormalizationGradients:
    def test_batchnorm_training(self, rng):
        bn = BatchNorm(3, dtype=np.float64)
        bn.gamma.data = rng.normal(1.0, 0.2, size=3)
        bn.beta.data = rng.normal(0.0, 0.2, size=3)
        x = t64(rng, 6, 4, 3)

        def loss():
            return F.mean_all(F.sigmoid(bn(x, training=True)))

        finite_difference_check(loss, [x, bn.gamma, bn.beta], rng=rng)

    def test_batchnorm_eval(self, rng):
        bn = BatchNorm(3, dtype=np.float64)
        bn._buffers["running_mean"] = rng.normal(size=3)
        bn._buffers["running_var"] = rng.uniform(0.5, 2.0, size=3)
        x = t64(rng, 4, 3)

        def loss():
            return F.mean_all(F.sigmoid(bn(x, training=False)))

        finite_difference_check(loss, [x, bn.gamma, bn.beta], rng=rng)

    def test_conditional_batchnorm(self, rng):
        cbn = ConditionalBatchNorm(4, 3, rng=5, dtype=np.float64)
        # move the zero-initialized heads off their fixed point so the
        # condition path carries real gradients
        for stack in (cbn.gamma_stack, cbn.beta_stack):
            stack[1].w.data = rng.normal(size=stack[1].w.data.shape) * 0.3
        x = t64(rng, 5, 4)
        cond = t64(rng, 5, 3)

        def loss():
            return F.mean_all(F.sigmoid(cbn(x, cond, training=True)))

        finite_difference_check(loss, [x, cond] + cbn.parameters(), rng=rng, n_probes=80)


class TestBlockGradients:
    def test_residual_fc(self, rng):
        block = ResidualBlockFC(4, 6, rng=2, dtype=np.float64)
        x = t64(rng, 5, 4)

        def loss():
            return F.mean_all(F.sigmoid(block(x, training=True)))

        finite_difference_check(loss, [x] + block.parameters(), rng=rng, n_probes=80)

    def test_residual_fc_conditioned(self, rng):
        block = ResidualBlockFC(4, 4, rng=3, cond_dim=3, dtype=np.float64)
        x = t64(rng, 4, 4)
        cond = t64(rng, 4, 3)

        def loss():
            return F.mean_all(F.sigmoid(block(x, cond=cond, training=True)))

        finite_difference_check(loss, [x, cond] + block.parameters(), rng=rng, n_probes=80)

    def test_residual_conv(self, rng):
        block = ResidualBlockConv3d(2, 3, rng=4, dtype=np.float64)
        x = t64(rng, 2, 3, 3, 3, 2)

        def loss():
            return F.mean_all(F.sigmoid(block(x, training=True)))

        finite_difference_check(loss, [x] + block.parameters(), rng=rng, n_probes=80)

    def test_dense_layer(self, rng):
        dense = Dense(5, 7, rng=6, dtype=np.float64)
        x = t64(rng, 8, 5)

        def loss():
            return F.mean_all(F.leaky_relu(dense(x)))

        finite_difference_check(loss, [x, dense.w, dense.b], rng=rng)


class TestLossGradients:
    def test_bce(self, rng):
        z = t64(rng, 60)
        target = (rng.random(60) > 0.6).astype(np.float64)

        def loss():
            return F.bce_loss(F.sigmoid(z), target)

        finite_difference_check(loss, [z], rng=rng)

    def test_focal(self, rng):
        z = t64(rng, 60)
        target = (rng.random(60) > 0.6).astype(np.float64)

        def loss():
            return F.focal_loss(F.sigmoid(z), target, gamma=2.0, alpha=0.25)

        finite_difference_check(loss, [z], rng=rng)

    def test_focal_unit_gamma(self, rng):
        """gamma = 1 stresses the (gamma - 1) power term in the closure."""
        z = t64(rng, 40)
        target = (rng.random(40) > 0.4).astype(np.float64)

        def loss():
            return F.focal_loss(F.sigmoid(z), target, gamma=1.0, alpha=0.4)

        finite_difference_check(loss, [z], rng=rng)


class TestEndToEndGradient:
    def test_small_conv_net(self, rng):
        """Conv encoder into dense head, the full op mix in one graph."""
        conv1 = Conv3d(1, 3, 3, rng=8, dtype=np.float64)
        bn = BatchNorm(3, dtype=np.float64)
        dense = Dense(3 * 8, 1, rng=9, dtype=np.float64)
        x = t64(rng, 2, 4, 4, 4, 1)
        target = np.array([[1.0], [0.0]])

        def loss():
            h = F.selu(bn(conv1(x), training=True))
            h = F.avg_pool3d(h, 2)
            h = F.reshape(h, (2, 3 * 8))
            return F.bce_loss(F.sigmoid(dense(h)), target)

        params = [x, conv1.w, conv1.b, bn.gamma, bn.beta, dense.w, dense.b]
        finite_difference_check(loss, params, rng=rng, n_probes=100)
