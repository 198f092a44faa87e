import numpy as np
import pytest
from scipy import special

from screenpipe import classifier as C
from screenpipe.dataset import make_phantom, make_phantom_set, split
from screenpipe.errors import ConfigError, ContractError, DimensionError
from screenpipe.gatune import Genome
from screenpipe.imgproc import preprocess_u8
from screenpipe.nn import snapshot
from screenpipe.nn.tensor import Tensor


def rand_images(n, size=32, seed=0):
    rng = np.random.default_rng(seed)
    return [rng.integers(0, 256, size=(size, size), dtype=np.uint8) for _ in range(n)]


def small(arch="vgg-ish", **kw):
    base = dict(arch=arch, input_size=32, epochs=3, seed=1)
    base.update(kw)
    return C.ClassifierConfig(**base)


class TestBackbones:
    def test_vgg_feature_map_side(self):
        bb = C.build_backbone("vgg-ish")
        assert bb(Tensor(np.zeros((1, 3, 128, 128)))).shape == (1, 64, 16, 16)

    def test_inception_channels_are_branch_sums(self):
        bb = C.build_backbone("inception-ish")
        for stage in bb.stages:
            out = stage(Tensor(np.zeros((1, stage.branches[0].weight.shape[1], 16, 16))))
            assert out.shape[1] == sum(b.weight.shape[0] for b in stage.branches) == stage.out_channels

    def test_archs_differ_and_are_frozen(self):
        a, b = C.build_backbone("vgg-ish"), C.build_backbone("inception-ish")
        assert a.num_parameters() != b.num_parameters()
        assert a.frozen and b.frozen

    def test_unknown_arch(self):
        with pytest.raises(ConfigError):
            C.build_backbone("resnet-ish")
        with pytest.raises(ConfigError):
            C.ClassifierConfig(arch="resnet-ish")

    def test_pretrain(self):
        samples = [make_phantom(i, i % 2 == 0, 32) for i in range(6)]
        bb = C.build_backbone("vgg-ish", 3)
        before = [p.data.copy() for p in bb.parameters()]
        C.pretrain_backbone(bb, samples, 0)
        assert all(np.array_equal(a, p.data) for a, p in zip(before, bb.parameters()))
        C.pretrain_backbone(bb, samples, 2, size=32)
        assert bb.frozen
        assert any(not np.array_equal(a, p.data) for a, p in zip(before, bb.parameters()))


def test_pretrained_features_beat_random_ones():
    # paired over 5 seeds; the source corpus is disjoint from the evaluated phantoms (about 5 minutes)
    gains = []
    for seed in range(5):
        samples = make_phantom_set(200, seed=seed, size=64)
        source = make_phantom_set(200, seed=seed + 1000, size=64)
        train, val, _ = split(samples, seed, (0.6, 0.4, 0.0)).apply(samples)
        imgs = [[preprocess_u8(s.image, 64) for s in part] for part in (train, val)]
        accs = []
        for steps in (0, 200):
            bb = C.build_backbone("vgg-ish", seed)
            C.pretrain_backbone(bb, source, steps, seed=seed)
            cfg = C.ClassifierConfig(arch="vgg-ish", input_size=64, epochs=60, seed=seed)
            net = C.build_classifier(cfg, bb)
            _, hist = C.train_head(net, imgs[0], [s.label for s in train], cfg, imgs[1], [s.label for s in val],
                                   masks=[s.mask for s in train], val_masks=[s.mask for s in val])
            accs.append(hist.val_acc[-1])
        gains.append(accs[1] - accs[0])
    assert np.mean(gains) > 0


class TestConfig:
    def test_head_shape(self):
        with pytest.raises(ConfigError):
            C.ClassifierConfig(head_widths=(64,))
        with pytest.raises(ConfigError):
            C.ClassifierConfig(dropout=1.0)

    def test_with_genome(self):
        cfg = C.ClassifierConfig().with_genome(Genome(2e-3, 1e-5, 0.8, 32, 0.25))
        assert (cfg.learning_rate, cfg.decay, cfg.momentum, cfg.batch_size, cfg.dropout) == (2e-3, 1e-5, 0.8, 32, 0.25)


class TestHead:
    def test_untrained_is_half(self):
        net = C.build_classifier(small())
        preds = C.predict_proba(net, rand_images(4))
        assert all(p.prob_positive == 0.5 for p in preds)

    def test_probabilities_sum_to_one_and_batching(self):
        net = C.build_classifier(small("inception-ish"))
        rng = np.random.default_rng(2)
        net.out.weight.data[:] = rng.normal(size=net.out.weight.shape)
        imgs = rand_images(5, seed=3)
        probs = net(Tensor(C.to_input(imgs))).data
        assert np.all(np.abs(probs.sum(axis=1) - 1) < 1e-12)
        batched = [p.prob_positive for p in C.predict_proba(net, imgs)]
        single = [C.predict_proba(net, [im])[0].prob_positive for im in imgs]
        # BLAS may reorder sums by batch width, so allow last-ulp differences
        assert np.allclose(batched, single, rtol=0, atol=1e-12)

    def test_eval_passes_identical(self):
        net = C.build_classifier(small(dropout=0.5))
        net.out.weight.data[:] = 1.0
        x = Tensor(C.to_input(rand_images(3)))
        net.eval()
        assert np.array_equal(net(x).data, net(x).data)

    def test_separable_features(self):
        rng = np.random.default_rng(0)
        labels = np.repeat([0, 1], 40)
        sign = np.where(labels == 1, 1.0, -1.0)
        feats = rng.normal(size=(80, 64)) + 0.5 * sign[:, None]
        assert np.all(feats.sum(axis=1) * sign > 0)  # separated by the all-ones hyperplane
        cfg = small(epochs=50)
        net = C.build_classifier(cfg)
        _, hist = C.train_head(net, None, labels[::2], cfg, (), labels[1::2],
                               features=feats[::2], val_features=feats[1::2])
        assert hist.val_acc[-1] == 1.0
        assert len(hist.epoch) == 50
        assert hist.to_csv().splitlines()[0] == "epoch,train_loss,train_acc,val_loss,val_acc"

    def test_calibration_keeps_decisions_and_lowers_nll(self):
        rng = np.random.default_rng(4)
        labels = rng.integers(0, 2, 120)
        feats = rng.normal(size=(120, 64))
        feats[:, :4] += np.where(labels == 1, 0.6, -0.6)[:, None]
        cfg = small(epochs=60)
        net = C.build_classifier(cfg)
        C.train_head(net, None, labels[:80], cfg, (), labels[80:], features=feats[:80], val_features=feats[80:])
        net.eval()

        def nll(z):
            return -np.mean(special.log_softmax(z, axis=1)[np.arange(40), labels[80:]])

        logits = net.forward_head(Tensor(feats[80:])).data
        t = C.calibrate(net, labels[80:], features=feats[80:])
        after = net.forward_head(Tensor(feats[80:])).data
        assert t > 0 and np.allclose(after, logits / t)
        assert np.array_equal(after.argmax(1), logits.argmax(1))
        assert nll(after) <= nll(logits) + 1e-12

        clone = C.build_classifier(cfg)
        snapshot.loads(clone, snapshot.dumps(net))
        assert clone.temperature[0] == t

    def test_backbone_untouched_and_deterministic(self):
        imgs = rand_images(8, seed=5)
        labels = [0, 1] * 4
        results = []
        for _ in range(2):
            net = C.build_classifier(small(optimizer="adam", learning_rate=1e-3))
            before = [p.data.copy() for p in net.backbone.parameters()]
            net, hist = C.train_head(net, imgs, labels, net.cfg, imgs[:2], labels[:2])
            assert all(np.array_equal(a, p.data) for a, p in zip(before, net.backbone.parameters()))
            results.append((hist.to_csv(), snapshot.dumps(net)))
        assert results[0] == results[1]

    def test_unfrozen_backbone_rejected(self):
        net = C.build_classifier(small())
        net.backbone.unfreeze()
        with pytest.raises(ContractError):
            C.train_head(net, rand_images(2), [0, 1])

    def test_masks_zero_background_after_normalization(self):
        img = np.full((32, 32), 200, np.uint8)
        mask = np.zeros((32, 32), np.uint8)
        mask[8:24, 8:24] = 255
        x = C.to_input([img], masks=[mask])[0]
        assert np.all(x[:, 0, 0] == 0) and np.all(x[:, 10, 10] > 0)

    def test_size_contract(self):
        net = C.build_classifier(small())
        with pytest.raises(DimensionError):
            C.predict_proba(net, rand_images(1, size=40))

    def test_predictions_csv_round_trip(self):
        net = C.build_classifier(small())
        preds = C.predict_proba(net, rand_images(3), ids=["a", "b", "c"])
        text = C.predictions_csv(preds)
        assert text.splitlines()[0] == "id,prob_positive,label"
        assert C.read_predictions_csv(text) == preds
