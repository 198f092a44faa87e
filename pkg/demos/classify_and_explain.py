"""Two frozen-backbone classifiers, their weighted ensemble, and Grad-CAM
overlays on one seed of 400 phantoms.

    python3 demos/classify_and_explain.py [out_dir]

Lung masks come from a segmenter trained first, as in the full pipeline.
Runs in a few minutes on one core.
"""

import sys
from pathlib import Path

import numpy as np

from screenpipe import cam, classifier as C, dataset, evalkit, imgproc, segnet

SEED = 0

if __name__ == "__main__":
    out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_clf")
    out.mkdir(parents=True, exist_ok=True)
    unet, _ = segnet.train_segmenter(dataset.make_phantom_set(160, seed=1, size=64), segnet.UnetConfig())

    samples = dataset.make_phantom_set(400, seed=SEED, size=128)
    train, val, test = dataset.split(samples, SEED).apply(samples)

    def prepare(part):
        return ([imgproc.preprocess_u8(s.image, 128) for s in part],
                [segnet.segment(unet, s.image) for s in part],
                [s.label for s in part])

    (tri, trm, trl), (vai, vam, val_y), (tei, tem, tel) = prepare(train), prepare(val), prepare(test)
    probs, nets = [], {}
    for arch in C.ARCHS:
        cfg = C.ClassifierConfig(arch=arch, seed=SEED)
        net = C.build_classifier(cfg, C.build_backbone(arch, SEED))
        C.train_head(net, tri, trl, cfg, vai, val_y, masks=trm, val_masks=vam)
        t = C.calibrate(net, val_y, vai, vam)
        preds = C.predict_proba(net, tei, [s.id for s in test], masks=tem)
        probs.append([p.prob_positive for p in preds])
        nets[arch] = net
        cm = evalkit.confusion(preds, tel)
        print(f"{arch}: accuracy {evalkit.accuracy(cm):.3f} (temperature {t:.2f})")
    ens = evalkit.ensemble(probs, (0.4, 0.6))
    print("ensemble 0.4/0.6:")
    print(evalkit.report(evalkit.confusion(ens, tel)).to_text())

    hits = n = 0
    for img, mask, s, p in zip(tei, tem, test, probs[1]):
        if s.label == 1 and p >= 0.5:
            hm = cam.grad_cam(nets["inception-ish"], img, 1, mask=mask)
            hits += cam.peak_in_boxes(hm, s.lesion_boxes)
            n += 1
            cam.save_overlay(out / f"{s.id}_cam.ppm", img, hm)
    print(f"CAM peak inside a lesion box for {hits}/{n} correctly classified positives; overlays in {out}/")
