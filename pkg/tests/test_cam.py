import numpy as np
import pytest

from screenpipe import cam
from screenpipe.classifier import ClassifierConfig, build_classifier
from screenpipe.dataset import Box
from screenpipe.errors import ConfigError, DimensionError
from screenpipe.nn import functional as F


class MeanOfChannel:
    """Feature map = input; class score = global mean of one channel."""

    def __init__(self, channel=0):
        self.channel = channel

    def forward_features(self, x):
        return x

    def forward_head(self, fmap):
        n, c, h, w = fmap.shape
        pooled = F.global_avg_pool(fmap)
        sel = np.zeros((c, 2))
        sel[self.channel, 0] = 1.0
        return pooled @ sel


class TestGradCam:
    def test_constant_gradient_gives_uniform_map(self):
        hm = cam.grad_cam(MeanOfChannel(), np.full((3, 8, 8), 2.5), class_index=0)
        assert np.all(hm.grid == 1.0)
        assert hm.upsampled.shape == (8, 8)

    def test_zero_features_give_zero_map(self):
        hm = cam.grad_cam(MeanOfChannel(), np.zeros((3, 8, 8)), class_index=0)
        assert not hm.grid.any() and not hm.upsampled.any()

    def test_class_out_of_range(self):
        with pytest.raises(ConfigError):
            cam.grad_cam(MeanOfChannel(), np.ones((3, 4, 4)), class_index=2)

    def test_classifier_contract(self):
        net = build_classifier(ClassifierConfig(arch="inception-ish", input_size=32, seed=1))
        net.out.weight.data[:] = np.random.default_rng(0).normal(size=net.out.weight.shape)
        img = np.random.default_rng(1).integers(0, 256, size=(32, 32), dtype=np.uint8)
        hm = cam.grad_cam(net, img, 1)
        assert hm.grid.shape == (4, 4) and hm.upsampled.shape == (32, 32)
        assert hm.grid.min() >= 0 and (hm.grid.max() == 1.0 or not hm.grid.any())
        again = cam.grad_cam(net, img, 1)
        assert np.array_equal(hm.upsampled, again.upsampled)
        assert all(p.grad is None for p in net.backbone.parameters())

    def test_peak_in_boxes(self):
        grid = np.zeros((4, 4))
        grid[1, 2] = 1.0
        hm = cam.Heatmap(grid, grid, 1)
        assert cam.peak_in_boxes(hm, [Box(0, 2, 2, 3)])
        assert not cam.peak_in_boxes(hm, [Box(2, 2, 4, 4)])

    def test_csv(self):
        hm = cam.Heatmap(np.eye(2), np.eye(2), 1)
        assert hm.to_csv().splitlines() == ["1.0,0.0", "0.0,1.0"]


class TestOverlay:
    img = np.arange(64, dtype=np.uint8).reshape(8, 8) * 3

    def test_alpha_zero_is_gray(self):
        hm = cam.Heatmap(np.ones((2, 2)), np.ones((8, 8)), 1)
        out = cam.overlay(self.img, hm, alpha=0.0)
        assert out.shape == (8, 8, 3) and all(np.array_equal(out[..., c], self.img) for c in range(3))

    def test_zero_map_is_blue_tint(self):
        hm = cam.Heatmap(np.zeros((2, 2)), np.zeros((8, 8)), 1)
        out = cam.overlay(self.img, hm, alpha=0.5).astype(int)
        assert np.array_equal(out[..., 0], out[..., 1])
        assert np.all(out[..., 2] - out[..., 0] == np.rint(self.img * 0.5 + 127.5).astype(int) - np.rint(self.img * 0.5).astype(int))

    def test_hottest(self):
        hm = cam.Heatmap(np.ones((1, 1)), np.ones((8, 8)), 1)
        out = cam.overlay(self.img, hm, alpha=1.0)
        assert np.all(out == np.array([255, 0, 0], np.uint8))

    def test_stops(self):
        got = cam.colormap([0, 0.25, 0.5, 0.75, 1.0, 0.125])
        expected = [[0, 0, 255], [0, 255, 255], [0, 255, 0], [255, 255, 0], [255, 0, 0], [0, 127.5, 255]]
        assert np.allclose(got, expected)

    def test_dim_mismatch(self):
        hm = cam.Heatmap(np.zeros((2, 2)), np.zeros((4, 4)), 1)
        with pytest.raises(DimensionError):
            cam.overlay(self.img, hm)
