import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from screenpipe import segnet
from screenpipe.dataset import make_phantom
from screenpipe.errors import ConfigError, DataError, DimensionError
from screenpipe.nn.gradcheck import check_gradients
from screenpipe.nn.tensor import Tensor


def small_cfg(**kw):
    base = dict(depth=2, base_channels=4, size=16, epochs=0)
    base.update(kw)
    return segnet.UnetConfig(**base)


class TestUnet:
    def test_output_shape(self):
        net = segnet.build_unet(segnet.UnetConfig(depth=3, base_channels=16, size=64))
        out = net(np.zeros((2, 1, 64, 64)))
        assert out.shape == (2, 1, 64, 64)
        assert np.all((out.data > 0) & (out.data < 1))

    def test_skip_sizes_halve(self):
        net = segnet.build_unet(small_cfg(depth=3, size=32))
        net(np.zeros((1, 1, 32, 32)))
        sides = [s.shape[2] for s in net.skips]
        assert sides == [32, 16, 8]

    @pytest.mark.parametrize("depth,base", [(1, 2), (2, 4), (3, 16), (4, 8)])
    def test_parameter_count(self, depth, base):
        net = segnet.build_unet(segnet.UnetConfig(depth=depth, base_channels=base, size=2 ** depth * 2))
        assert net.num_parameters() == segnet.unet_parameter_count(depth, base)

    def test_parameter_count_by_hand(self):
        # depth 1, base 2: down 1->2 (20+38), bottleneck 2->4 (76+148),
        # up 6->2 (110+38), head 2->1 (3)
        assert segnet.unet_parameter_count(1, 2) == 20 + 38 + 76 + 148 + 110 + 38 + 3

    def test_indivisible_size(self):
        with pytest.raises(ConfigError):
            segnet.UnetConfig(depth=3, size=60)
        net = segnet.build_unet(small_cfg())
        with pytest.raises(ConfigError):
            net(np.zeros((1, 1, 18, 18)))


class TestDice:
    def test_hand_values(self):
        a = np.zeros((4, 4), np.uint8)
        b = np.zeros((4, 4), np.uint8)
        a[0, :4] = 255
        b[0, 2:4] = 255
        b[1, 0:2] = 255
        assert segnet.dice_coefficient(a, b) == 0.5
        assert segnet.dice_coefficient(a, a) == 1.0
        assert segnet.dice_coefficient(a, 255 - a) == 0.0
        assert segnet.dice_coefficient(np.zeros((3, 3)), np.zeros((3, 3))) == 1.0

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            segnet.dice_coefficient(np.zeros((3, 3)), np.zeros((3, 4)))

    @settings(max_examples=1000, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_properties(self, seed):
        rng = np.random.default_rng(seed)
        shape = tuple(rng.integers(1, 12, size=2))
        a = rng.random(shape) < rng.random()
        b = rng.random(shape) < rng.random()
        d = segnet.dice_coefficient(a, b)
        assert d == segnet.dice_coefficient(b, a)
        assert 0.0 <= d <= 1.0
        if a.any():
            assert segnet.dice_coefficient(a, a) == 1.0
            if not (a & b).any() and b.any():
                assert d == 0.0
        # soft loss on hard predictions tracks 1 - DSC within the smoothing bound
        n = int(a.sum() + b.sum())
        loss = float(segnet.dice_loss(Tensor(b.astype(float)), a).data)
        if n:
            assert abs(loss - (1 - d)) < 2 * segnet.DICE_EPS / n + 1e-12

    def test_monotone_in_symmetric_difference(self):
        a = np.zeros(40, bool)
        a[:20] = True
        prev = 1.0
        for shift in range(0, 21):
            b = np.roll(a, shift)
            d = segnet.dice_coefficient(a, b)
            assert d <= prev
            prev = d

    def test_loss_extremes(self):
        g = np.zeros((1, 1, 8, 8))
        g[..., 2:6, 2:6] = 1
        assert float(segnet.dice_loss(Tensor(g), g).data) == pytest.approx(0.0, abs=1e-12)
        assert float(segnet.dice_loss(Tensor(np.zeros_like(g)), g).data) == pytest.approx(1 - 1 / 17)

    def test_loss_gradient(self):
        rng = np.random.default_rng(3)
        p = Tensor(rng.uniform(0.05, 0.95, size=(2, 1, 5, 5)), requires_grad=True)
        g = rng.random((2, 1, 5, 5)) < 0.4
        assert check_gradients(lambda: segnet.dice_loss(p, g), [p]) < 1e-4


class TestMaskOps:
    def test_apply_mask(self):
        img = np.arange(16, dtype=np.uint8).reshape(4, 4)
        assert np.array_equal(segnet.apply_mask(img, np.full((4, 4), 255)), img)
        m = np.zeros((4, 4), np.uint8)
        m[1, 1] = 255
        out = segnet.apply_mask(img, m)
        assert out.sum() == img[1, 1]
        with pytest.raises(DimensionError):
            segnet.apply_mask(img, np.zeros((3, 4)))

    def test_difference_map(self):
        rng = np.random.default_rng(0)
        a = np.where(rng.random((20, 20)) < 0.5, 255, 0).astype(np.uint8)
        assert not segnet.difference_map(a, a).any()
        b = a.copy()
        flat = rng.choice(400, size=7, replace=False)
        b.flat[flat] = 255 - b.flat[flat]
        d = segnet.difference_map(a, b)
        assert int((d == 255).sum()) == 7 and set(np.unique(d)) <= {0, 255}


class TestTraining:
    def test_zero_epochs(self):
        cfg = small_cfg()
        fresh = segnet.build_unet(cfg)
        net, hist = segnet.train_segmenter([make_phantom(1, False, 32)], cfg)
        assert hist.epoch == []
        assert all(np.array_equal(a.data, b.data) for a, b in zip(net.parameters(), fresh.parameters()))

    def test_missing_mask(self):
        s = make_phantom(1, False, 32)
        s.mask = None
        with pytest.raises(DataError, match="phantom-n1"):
            segnet.train_segmenter([s], small_cfg(epochs=1))

    def test_deterministic_history(self):
        samples = [make_phantom(i, i % 2 == 0, 32) for i in range(6)]
        cfg = small_cfg(epochs=2, batch_size=3)
        _, h1 = segnet.train_segmenter(samples[:4], cfg, samples[4:])
        _, h2 = segnet.train_segmenter(samples[:4], cfg, samples[4:])
        assert h1.to_csv() == h2.to_csv()
        assert h1.to_csv().splitlines()[0] == "epoch,train_loss,val_loss,train_dsc,val_dsc"
        assert len(h1.to_csv().splitlines()) == 3

    def test_segment_dims(self):
        net = segnet.build_unet(small_cfg())
        for shape in ((16, 16), (37, 23)):
            m = segnet.segment(net, np.zeros(shape, np.uint8))
            assert m.shape == shape and set(np.unique(m)) <= {0, 255}
