"""Attention, forecasting, fusion, the recurrent baseline, regressors and the discriminator."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spsnet.autograd import Tensor
from spsnet.discriminator import DiscriminatorNet, adversarial_losses, discriminate, motion_representation
from spsnet.optim import ParameterStore
from spsnet.regressors import CAMERA_DIM, Heads, RegressorHead, regress_iterative, regress_sequence
from spsnet.temporal import (AttentionModule, ForecastModule, FusionModule, RecurrentAggregator,
                             attention_weights, feature_loss, forecast, fuse, self_attention)


def leaky(z):
    return np.where(z > 0, z, 0.01 * z)


def two_layer_np(store, prefix, x):
    h = leaky(x @ store[f"{prefix}.fc1.W"].data.T + store[f"{prefix}.fc1.b"].data)
    return leaky(h @ store[f"{prefix}.fc2.W"].data.T + store[f"{prefix}.fc2.b"].data)


@pytest.fixture
def att():
    store = ParameterStore()
    return store, AttentionModule(store, "att", 6, seed=3)


class TestAttention:
    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000), st.integers(1, 9))
    def test_rows_sum_to_one(self, seed, n):
        store = ParameterStore()
        mod = AttentionModule(store, "att", 5, seed)
        f = np.random.default_rng(seed).normal(scale=2.0, size=(2, n, 5))
        a = attention_weights(mod, f).data
        assert np.abs(a.sum(-1) - 1.0).max() < 1e-12
        assert (a >= 0).all()

    def test_three_frame_oracle(self, att):
        store, mod = att
        f = np.random.default_rng(0).normal(size=(3, 6))
        q, k = two_layer_np(store, "att.Q", f), two_layer_np(store, "att.K", f)
        e = np.exp(q @ k.T)
        oracle = e / e.sum(1, keepdims=True)
        a = attention_weights(mod, f).data
        assert np.abs(a - oracle).max() < 1e-12
        h = self_attention(mod, f).data
        assert np.abs(h - (f + oracle @ f)).max() < 1e-12

    def test_permutation_covariance(self, att):
        # exact up to the reassociation of the weighted sum over frames
        _, mod = att
        rng = np.random.default_rng(1)
        for _ in range(20):
            f = rng.normal(size=(7, 6))
            perm = rng.permutation(7)
            h, a = self_attention(mod, f, return_weights=True)
            hp, ap = self_attention(mod, f[perm], return_weights=True)
            assert np.abs(hp.data - h.data[perm]).max() < 1e-14
            assert np.abs(ap.data - a.data[perm][:, perm]).max() < 1e-15

    def test_equal_features_give_twice_the_feature(self, att):
        _, mod = att
        f = np.tile(np.random.default_rng(2).normal(size=6), (5, 1))
        h, a = self_attention(mod, f, return_weights=True)
        assert np.abs(a.data - 0.2).max() < 1e-12
        assert np.abs(h.data - 2 * f).max() < 1e-12

    def test_query_and_key_nets_are_distinct(self, att):
        store, _ = att
        assert not np.array_equal(store["att.Q.fc1.W"].data, store["att.K.fc1.W"].data)


class TestForecastFusion:
    def test_feature_loss_aligns_prediction_rows(self):
        f = np.arange(12.0).reshape(4, 3)
        fp = np.zeros((4, 3))
        fp[:3] = f[1:]                   # row i predicts frame i + 1
        fp[3] = 99.0                     # the last prediction has no target
        assert feature_loss(f, fp).item() == 0.0

    def test_feature_loss_single_frame_is_zero(self):
        assert feature_loss(np.ones((2, 1, 3)), np.zeros((2, 1, 3))).data.tolist() == [0.0, 0.0]

    def test_forecast_is_two_leaky_layers(self):
        store = ParameterStore()
        fm = ForecastModule(store, "fc", 4, 0)
        f = np.random.default_rng(0).normal(size=(5, 4))
        np.testing.assert_allclose(forecast(fm, f).data, two_layer_np(store, "fc", f), atol=1e-14)

    def test_first_frame_is_attention_output(self):
        store = ParameterStore()
        fu = FusionModule(store, "fu", 4, 0)
        rng = np.random.default_rng(1)
        h, fp = rng.normal(size=(2, 6, 4)), rng.normal(size=(2, 6, 4))
        out, w = fuse(fu, h, fp, return_weights=True)
        np.testing.assert_array_equal(out.data[:, 0], h[:, 0])
        assert np.abs(w.data.sum(-1) - 1.0).max() < 1e-12

    def test_fusion_mixes_aligned_prediction(self):
        store = ParameterStore()
        fu = FusionModule(store, "fu", 4, 0)
        rng = np.random.default_rng(2)
        h, fp = rng.normal(size=(5, 4)), rng.normal(size=(5, 4))
        out, w = fuse(fu, h, fp, return_weights=True)
        expect = w.data[:, :1] * h[1:] + w.data[:, 1:] * fp[:-1]
        np.testing.assert_allclose(out.data[1:], expect, atol=1e-14)

    def test_single_frame_passthrough(self):
        store = ParameterStore()
        fu = FusionModule(store, "fu", 4, 0)
        h = np.ones((1, 4))
        np.testing.assert_array_equal(fuse(fu, h, np.zeros((1, 4))).data, h)


class TestRecurrent:
    def test_causal(self):
        store = ParameterStore()
        gru = RecurrentAggregator(store, "gru", 4, 0)
        rng = np.random.default_rng(0)
        f = rng.normal(size=(1, 6, 4))
        g = f.copy()
        g[:, 4:] = rng.normal(size=(1, 2, 4))
        np.testing.assert_array_equal(gru(f).data[:, :4], gru(g).data[:, :4])


class TestRegressors:
    def test_zero_init_output_returns_mean_param(self):
        store = ParameterStore()
        head = RegressorHead(store, "r", 5, 4, 8, 0, mean_param=np.array([1.0, 2.0, 3.0, 4.0]))
        out = regress_iterative(head, np.random.default_rng(0).normal(size=(3, 5)))
        np.testing.assert_array_equal(out.data, np.tile([1.0, 2.0, 3.0, 4.0], (3, 1)))

    def test_iterations_accumulate_corrections(self):
        store = ParameterStore()
        head = RegressorHead(store, "r", 3, 2, 6, 0)
        store["r.out.W"].data = np.random.default_rng(1).normal(size=(2, 6))
        f = np.random.default_rng(2).normal(size=(4, 3))
        p = np.zeros((4, 2))
        for _ in range(3):
            p = p + head.net(Tensor(np.concatenate([f, p], -1))).data
        np.testing.assert_allclose(regress_iterative(head, f, 3).data, p, atol=1e-14)

    def test_rejects_zero_iterations(self):
        store = ParameterStore()
        with pytest.raises(ValueError):
            regress_iterative(RegressorHead(store, "r", 3, 2, 4, 0), np.zeros((1, 3)), 0)

    def test_sequence_shapes(self):
        store = ParameterStore()
        heads = Heads.build(store, 8, 36, 16, 0)
        est = regress_sequence(heads, np.random.default_rng(0).normal(size=(2, 5, 8)))
        assert est.pose.shape == (2, 5, 36)
        assert est.shape.shape == (2, 10)
        assert est.camera_raw.shape == (2, 5, CAMERA_DIM)
        assert est.camera.scale.shape == (2, 5)


class TestDiscriminator:
    @pytest.fixture
    def net(self):
        return DiscriminatorNet(ParameterStore(), 9, 0)

    def test_representation_repeats_shape(self):
        rep = motion_representation(np.zeros((2, 4, 9)), np.arange(20.0).reshape(2, 10)).data
        assert rep.shape == (2, 4, 19)
        np.testing.assert_array_equal(rep[1, 3, :10], np.arange(10.0, 20.0))

    def test_scores_in_unit_interval(self, net):
        d = discriminate(net, np.random.default_rng(0).normal(size=(3, 5, 9)),
                         np.random.default_rng(1).normal(size=(3, 10))).data
        assert d.shape == (3,) and ((d > 0) & (d < 1)).all()

    def test_least_squares_objectives(self, net):
        rng = np.random.default_rng(2)
        rp, rs = rng.normal(size=(2, 4, 9)), rng.normal(size=(2, 10))
        fp, fs = rng.normal(size=(2, 4, 9)), rng.normal(size=(2, 10))
        d_loss, g_loss = adversarial_losses(net, rp, rs, Tensor(fp), Tensor(fs))
        dr, df = discriminate(net, rp, rs).data, discriminate(net, fp, fs).data
        assert d_loss.item() == pytest.approx(np.mean((dr - 1) ** 2 + df ** 2), abs=1e-14)
        assert g_loss.item() == pytest.approx(np.mean((df - 1) ** 2), abs=1e-14)

    def test_d_loss_does_not_reach_generator(self, net):
        rng = np.random.default_rng(3)
        fp = Tensor(rng.normal(size=(2, 4, 9)), requires_grad=True)
        fs = Tensor(rng.normal(size=(2, 10)), requires_grad=True)
        d_loss, _ = adversarial_losses(net, rng.normal(size=(2, 4, 9)), rng.normal(size=(2, 10)), fp, fs)
        d_loss.backward()
        assert fp.grad is None and fs.grad is None
