import math

import numpy as np
import pytest

from screenpipe import gan
from screenpipe.errors import ConfigError, DataError, DimensionError, TrainingDivergedError
from screenpipe.nn import snapshot
from screenpipe.nn.optim import Adam
from screenpipe.nn.tensor import Tensor


def tiny(**kw):
    base = dict(latent_dim=16, base_channels=8, batch_size=4, epochs=1, seed=0)
    base.update(kw)
    return gan.GanConfig(**base)


class TestArchitecture:
    def test_generator_shape_and_range(self):
        cfg = gan.GanConfig(latent_dim=64, output_size=32)
        G = gan.build_generator(cfg)
        out = G(Tensor(np.random.default_rng(0).normal(size=(3, 64)) * 10)).data
        assert out.shape == (3, 1, 32, 32)
        assert np.all(np.abs(out) <= 1.0)

    def test_discriminator_output(self):
        cfg = gan.GanConfig()
        D = gan.build_discriminator(cfg)
        out = D(Tensor(np.random.default_rng(1).uniform(-1, 1, size=(5, 1, 32, 32)))).data
        assert out.shape == (5, 1)
        assert np.all((out > 0) & (out < 1))

    def test_stage_count_is_log2_of_size_over_4(self):
        def n_stages(size):
            G = gan.build_generator(tiny(output_size=size))
            return sum(type(l).__name__ == "ConvTranspose2d" for l in G.layers())

        assert [n_stages(s) for s in (32, 64, 128)] == [3, 4, 5]
        assert gan.build_generator(tiny(output_size=64))(Tensor(np.zeros((1, 16)))).shape == (1, 1, 64, 64)

    def test_no_batchnorm_in_discriminator(self):
        D = gan.build_discriminator(tiny())
        assert not any(type(l).__name__ == "BatchNorm2d" for l in D.layers())

    @pytest.mark.parametrize("kw", [dict(output_size=48), dict(output_size=256), dict(latent_dim=0),
                                    dict(lr_generator=0.0), dict(epochs=-1)])
    def test_config_errors(self, kw):
        with pytest.raises(ConfigError):
            tiny(**kw)


class TestTraining:
    def test_zero_epochs(self):
        cfg = tiny(epochs=0)
        run = gan.dcgan_train([np.zeros((32, 32), np.uint8)] * 4, cfg)
        assert run.snapshots == [] and run.steps == []
        assert snapshot.dumps(run.generator) == snapshot.dumps(gan.build_generator(cfg))

    def test_too_few_images(self):
        with pytest.raises(DataError):
            gan.dcgan_train([np.zeros((32, 32), np.uint8)] * 3, tiny())

    def test_constant_image_is_learned(self):
        # statistical smoke check; 500 single-batch epochs = 500 steps
        img = np.full((32, 32), 160, np.uint8)
        cfg = tiny(epochs=500, lr_generator=1e-3)
        run = gan.dcgan_train([img] * 4, cfg)
        assert len(run.steps) == 500 and all(math.isfinite(v) for v in run.d_loss + run.g_loss)
        out = np.stack(gan.generate(run.generator, 16, cfg.latent_dim, seed=1)) / 127.5 - 1.0
        assert np.abs(out - (160 / 127.5 - 1.0)).mean() < 0.15

    def test_discriminator_separates_untrained_generator(self):
        cfg = tiny()
        G, D = gan.build_generator(cfg), gan.build_discriminator(cfg)
        real = gan.to_unit_range([np.full((32, 32), v, np.uint8) for v in (40, 90, 140, 200)], 32)
        opt = Adam(D.trainable_parameters(), lr=2e-4, betas=(0.5, 0.999))
        rng = np.random.default_rng(0)
        for _ in range(100):
            gan.discriminator_step(G, D, opt, real, rng, cfg.latent_dim)
        G.eval()
        fake = G(Tensor(gan.latent(32, cfg.latent_dim, rng))).data
        correct = np.sum(D(Tensor(real)).data > 0.5) + np.sum(D(Tensor(fake)).data < 0.5)
        assert correct / (len(real) + len(fake)) > 0.9

    def test_deterministic_and_snapshot_roundtrip(self):
        imgs = [np.random.default_rng(i).integers(0, 256, (32, 32), dtype=np.uint8) for i in range(8)]
        cfg = tiny(epochs=2)
        a, b = gan.dcgan_train(imgs, cfg), gan.dcgan_train(imgs, cfg)
        assert a.loss_csv() == b.loss_csv()
        assert [s.generator for s in a.snapshots] == [s.generator for s in b.snapshots]
        assert [s.epoch for s in a.snapshots] == [1, 2]
        assert sum(len(s.steps) for s in a.snapshots) == len(a.steps) == 4
        assert a.loss_csv().splitlines()[0] == "step,d_loss,g_loss"

        G = gan.build_generator(cfg)
        snapshot.loads(G, a.snapshots[-1].generator)
        assert all(np.array_equal(x, y) for x, y in zip(gan.generate(G, 4, 16, seed=3),
                                                        gan.generate(a.generator, 4, 16, seed=3)))

    def test_divergence_reports_step_and_lr(self):
        imgs = [np.zeros((32, 32), np.uint8)] * 4
        cfg = tiny()
        D = gan.build_discriminator(cfg)
        D.layers()[-2].weight.data[:] = np.nan
        with pytest.raises(TrainingDivergedError, match=r"step 0 \(lr=0.0002\)"):
            list(gan.dcgan_epochs(imgs, cfg, discriminator=D))

    def test_sample_grid(self, tmp_path):
        imgs = [np.full((4, 4), v, np.uint8) for v in (10, 20, 30)]
        grid = gan.sample_grid(imgs, cols=2)
        assert grid.shape == (9, 9)
        assert grid[0, 0] == 10 and grid[0, 5] == 20 and grid[5, 0] == 30 and grid[5, 5] == 0
        gan.save_grid(tmp_path / "g.pgm", imgs, cols=2)
        assert (tmp_path / "g.pgm").read_bytes().startswith(b"P5")


class TestPsnr:
    def test_identical_is_inf(self):
        a = np.arange(16, dtype=np.uint8).reshape(4, 4)
        assert gan.psnr(a, a) == math.inf

    def test_mse_one(self):
        a = np.zeros((4, 4), np.uint8)
        b = np.ones((4, 4), np.uint8)
        assert abs(gan.psnr(a, b) - 48.1308) < 1e-4
        assert gan.psnr(a, b) == pytest.approx(20 * math.log10(255))

    def test_black_vs_white(self):
        assert gan.psnr(np.zeros((3, 3), np.uint8), np.full((3, 3), 255, np.uint8)) == 0.0

    def test_no_uint8_wraparound(self):
        assert gan.psnr(np.array([[0]], np.uint8), np.array([[10]], np.uint8)) == pytest.approx(10 * math.log10(255 ** 2 / 100))

    def test_dim_mismatch(self):
        with pytest.raises(DimensionError):
            gan.psnr(np.zeros((3, 3), np.uint8), np.zeros((3, 4), np.uint8))


def _with_psnr(ref, db):
    # a single changed pixel of size d gives MSE d^2 / n
    n = ref.size
    d = math.sqrt(n * 255.0 ** 2 / 10 ** (db / 10))
    out = ref.astype(np.float64)
    out.flat[0] += d
    return out


class TestSelection:
    ref = np.full((10, 10), 100.0)

    def test_hand_psnrs(self):
        cands = [_with_psnr(self.ref, db) for db in (20, 30, 25)]
        idx, scores = gan.select_generated(cands, [self.ref], 2)
        assert idx == [1, 2]
        assert scores == pytest.approx([30, 25])

    def test_identical_first_and_all_sorted(self):
        cands = [_with_psnr(self.ref, 22), self.ref.copy(), _with_psnr(self.ref, 40)]
        idx, scores = gan.select_generated(cands, [np.zeros((10, 10)), self.ref], 3)
        assert idx == [1, 2, 0] and scores[0] == math.inf

    def test_best_reference_counts(self):
        far = np.zeros((10, 10))
        cand = _with_psnr(self.ref, 30)
        _, scores = gan.select_generated([cand], [far, self.ref], 1)
        assert scores[0] == pytest.approx(30)

    def test_ties_by_index(self):
        c = _with_psnr(self.ref, 25)
        assert gan.select_generated([c, c.copy(), c.copy()], [self.ref], 2)[0] == [0, 1]

    def test_errors(self):
        with pytest.raises(ConfigError):
            gan.select_generated([self.ref], [], 1)
        with pytest.raises(ConfigError):
            gan.select_generated([self.ref], [self.ref], 2)
