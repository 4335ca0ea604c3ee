import numpy as np
import pytest

from morphlabel import autodiff as ad
from morphlabel.autodiff import Tensor, backward
from morphlabel.errors import InvalidConfig
from morphlabel.losses import bce_loss, composite_loss, dice_loss, supervision_weights
from morphlabel.network import ModelConfig, build_model, infer, ma_block


def small_cfg(mode, seed=0):
    return ModelConfig(depth=3, base_channels=4, mode=mode, seed=seed)


class TestBuildModel:
    def test_plain_single_output(self):
        m = build_model(small_cfg("plain"))
        outs = m.forward(np.zeros((2, 1, 32, 32)))
        assert len(outs) == 1
        assert outs[0].data.shape == (2, 1, 32, 32)

    def test_ma_output_pyramid(self):
        m = build_model(small_cfg("ma"))
        outs = m.forward(np.zeros((1, 1, 64, 64)))
        assert [o.data.shape for o in outs] == [
            (1, 1, 64, 64), (1, 1, 32, 32), (1, 1, 16, 16)
        ]

    def test_seeded_builds_bit_identical(self):
        m1 = build_model(small_cfg("ma", seed=7))
        m2 = build_model(small_cfg("ma", seed=7))
        for k in m1.params:
            assert np.array_equal(m1.params[k].data, m2.params[k].data)
        m3 = build_model(small_cfg("ma", seed=8))
        assert any(
            not np.array_equal(m1.params[k].data, m3.params[k].data)
            for k in m1.params
        )

    def test_param_count_differences(self):
        plain = build_model(small_cfg("plain"))
        ds = build_model(small_cfg("ds"))
        ma = build_model(small_cfg("ma"))
        b = 4
        extra = sum((b * (1 << n)) + 1 for n in range(1, 3))
        assert ma.param_count() - plain.param_count() == extra
        assert ds.param_count() == ma.param_count()

    def test_backbone_shared_across_modes(self):
        plain = build_model(small_cfg("plain", seed=3))
        ma = build_model(small_cfg("ma", seed=3))
        for k in plain.params:
            assert np.array_equal(plain.params[k].data, ma.params[k].data)

    def test_invalid_configs(self):
        with pytest.raises(InvalidConfig):
            ModelConfig(depth=1).validate()
        with pytest.raises(InvalidConfig):
            ModelConfig(base_channels=0).validate()
        with pytest.raises(InvalidConfig):
            ModelConfig(mode="fancy").validate()
        with pytest.raises(InvalidConfig):
            ModelConfig(ma_loss_on="sideways").validate()


class TestMaBlock:
    def test_zero_weights_half_attention(self):
        rng = np.random.default_rng(0)
        f = Tensor(rng.normal(size=(2, 4, 8, 8)))
        w = Tensor(np.zeros((1, 4)))
        b = Tensor(np.zeros(1))
        enhanced, sub = ma_block(f, w, b, "post-sigmoid")
        assert np.array_equal(enhanced.data, 0.5 * f.data)
        assert np.all(sub.data == 0.5)

    def test_saturation_passes_features_through(self):
        f = Tensor(np.full((1, 2, 4, 4), 3.0))
        w = Tensor(np.full((1, 2), 50.0))
        b = Tensor(np.zeros(1))
        enhanced, _ = ma_block(f, w, b)
        assert np.abs(enhanced.data - f.data).max() < 1e-9

    def test_pre_vs_post_sigmoid_sub_output(self):
        rng = np.random.default_rng(1)
        f = Tensor(rng.normal(size=(1, 3, 4, 4)))
        w = Tensor(rng.normal(size=(1, 3)))
        b = Tensor(rng.normal(size=1))
        _, sub_pre = ma_block(f, w, b, "pre-sigmoid")
        _, sub_post = ma_block(f, w, b, "post-sigmoid")
        assert np.abs(sub_post.data - 1 / (1 + np.exp(-sub_pre.data))).max() < 1e-12

    def test_linf_gradient_reaches_attention_weights(self):
        rng = np.random.default_rng(2)
        f = Tensor(rng.normal(size=(1, 3, 8, 8)))
        w = Tensor(rng.normal(size=(1, 3)) * 0.3, requires_grad=True)
        b = Tensor(np.zeros(1), requires_grad=True)
        target = rng.random((1, 1, 4, 4))

        def loss_value():
            _, sub = ma_block(f, w, b, "post-sigmoid")
            pooled = ad.max_pool_2x2(sub)
            return ad.max_reduce(ad.abs_(pooled - Tensor(target)))

        out = loss_value()
        w.grad = None
        b.grad = None
        backward(out)
        assert w.grad is not None and np.abs(w.grad).max() > 0
        step = 1e-5
        flat = w.data.reshape(-1)
        idx = int(np.abs(w.grad).argmax() % flat.size)
        orig = flat[idx]
        flat[idx] = orig + step
        hi = loss_value().item()
        flat[idx] = orig - step
        lo = loss_value().item()
        flat[idx] = orig
        num = (hi - lo) / (2 * step)
        assert abs(num - w.grad.reshape(-1)[idx]) <= 1e-4 * max(1.0, abs(num))


class TestModeEquivalences:
    def test_zero_attention_with_gain_two_matches_plain_forward(self):
        plain = build_model(small_cfg("plain", seed=5))
        ma = build_model(small_cfg("ma", seed=5))
        for n in (1, 2):
            ma.params[f"head{n}.weight"].data[:] = 0.0
            ma.params[f"head{n}.bias"].data[:] = 0.0
        ma.attention_gain = 2.0  # 2 * sigmoid(0) = 1: identity modulation
        x = np.random.default_rng(6).normal(size=(2, 1, 32, 32))
        out_plain = plain.forward(x)[0]
        out_ma = ma.forward(x)[0]
        assert np.abs(out_plain.data - out_ma.data).max() < 1e-12

    def test_zero_ds_weights_match_plain_gradients(self):
        # with w = [1, 0, 0] and identity attention, ma-mode gradients on
        # the shared backbone equal plain-mode gradients
        plain = build_model(small_cfg("plain", seed=5))
        ma = build_model(small_cfg("ma", seed=5))
        for n in (1, 2):
            ma.params[f"head{n}.weight"].data[:] = 0.0
            ma.params[f"head{n}.bias"].data[:] = 0.0
        ma.attention_gain = 2.0
        rng = np.random.default_rng(7)
        x = rng.normal(size=(2, 1, 32, 32))
        strong = (rng.random((2, 1, 32, 32)) > 0.5).astype(float)
        pyramid = [rng.random((2, 1, 16, 16)), rng.random((2, 1, 8, 8))]

        outs_p = plain.forward(x)
        loss_p = dice_loss(outs_p[0], strong) + bce_loss(outs_p[0], strong)
        backward(loss_p)

        outs_m = ma.forward(x)
        loss_m, _ = composite_loss(outs_m, strong, pyramid, [1.0, 0.0, 0.0])
        backward(loss_m)

        for k in plain.params:
            gp = plain.params[k].grad
            gm = ma.params[k].grad
            assert gp is not None and gm is not None
            assert np.abs(gp - gm).max() <= 1e-9

    def test_first_epoch_loss_finite_all_modes(self):
        rng = np.random.default_rng(8)
        x = rng.normal(size=(2, 1, 32, 32))
        strong = (rng.random((2, 1, 32, 32)) > 0.5).astype(float)
        pyramid = [rng.random((2, 1, 16, 16)), rng.random((2, 1, 8, 8))]
        for seed in range(10):
            for mode in ("plain", "ds", "ma"):
                model = build_model(small_cfg(mode, seed=seed))
                outs = model.forward(x)
                if mode == "plain":
                    loss = dice_loss(outs[0], strong) + bce_loss(outs[0], strong)
                else:
                    loss, _ = composite_loss(
                        outs, strong, pyramid, supervision_weights(3)
                    )
                assert np.isfinite(loss.item())


class TestInfer:
    def test_threshold(self):
        class Fixed:
            def forward(self, x):
                return [Tensor(np.full((1, 1, 8, 8), 0.6))]

        assert infer(Fixed(), np.zeros((8, 8))).all()

        class Low:
            def forward(self, x):
                return [Tensor(np.full((1, 1, 8, 8), 0.4))]

        assert not infer(Low(), np.zeros((8, 8))).any()

    def test_state_roundtrip(self):
        m = build_model(small_cfg("ma", seed=1))
        state = m.state()
        m2 = build_model(small_cfg("ma", seed=2))
        m2.load_state(state)
        x = np.random.default_rng(0).normal(size=(1, 1, 32, 32))
        a = m.forward(x)[0].data
        b = m2.forward(x)[0].data
        assert np.array_equal(a, b)
