"""Command-line pipeline: phantoms -> GAN synthesis -> segmentation ->
GA tuning -> classification -> ensemble evaluation -> CAM.

Every stage reads its inputs from and writes its outputs to the run
directory, then records a manifest fragment in ``manifests/<stage>.json``
with SHA-256 digests of everything it read and wrote. Wall-clock times go
to ``manifests/<stage>.timing.json`` so the manifests themselves are
byte-identical across reruns.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import io
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__, cam, classifier, dataset, evalkit, gan, gatune, imgproc, segnet
from .config import load_config, stage_seed, validate_config
from .errors import ConfigError, DataError, DependencyError, ScreenpipeError
from .nn import snapshot

STAGES = ("phantoms", "train-gan", "synthesize", "train-seg", "segment", "ga-tune", "train-clf",
          "evaluate", "cam")
# longest matching prefix names the stage that writes an artifact
PRODUCERS = (
    ("data/", "phantoms"),
    ("gan/", "train-gan"),
    ("synth/", "synthesize"),
    ("seg/unet.spt", "train-seg"),
    ("seg/history.csv", "train-seg"),
    ("seg/", "segment"),
    ("ga/", "ga-tune"),
    ("clf/", "train-clf"),
    ("eval/", "evaluate"),
)


def producer(rel):
    for prefix, stage in PRODUCERS:
        if rel.startswith(prefix):
            return stage
    return "an earlier stage"


def _digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _json(obj):
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


class Stage:
    """One stage's view of the run directory; tracks what it reads and writes."""

    def __init__(self, name, cfg, out, threads=1, options=None):
        self.name = name
        self.cfg = cfg
        self.out = Path(out)
        self.threads = threads
        self.options = options or {}
        self.seed = stage_seed(cfg["seed"], name)
        self.inputs, self.outputs, self.metrics = set(), set(), {}
        self.cache = {}

    def path(self, rel):
        return self.out / rel

    def require(self, rel):
        p = self.path(rel)
        if not p.exists():
            err = DependencyError(f"stage {self.name!r} needs {rel}, produced by {producer(rel)!r}; "
                                  "run that stage first")
            err.missing = rel
            raise err
        self.inputs.add(rel)
        return p

    def read_text(self, rel):
        return self.require(rel).read_text()

    def read_image(self, rel):
        return imgproc.read_pnm(self.require(rel))

    def _target(self, rel):
        p = self.path(rel)
        p.parent.mkdir(parents=True, exist_ok=True)
        self.outputs.add(rel)
        return p

    def write_text(self, rel, text):
        self._target(rel).write_text(text)

    def write_bytes(self, rel, data):
        self._target(rel).write_bytes(data)

    def write_image(self, rel, img):
        imgproc.write_pnm(self._target(rel), img)

    def map(self, fn, items):
        """Order-preserving map, threaded when ``--threads`` > 1."""
        items = list(items)
        if self.threads > 1 and len(items) > 1:
            with ThreadPoolExecutor(self.threads) as pool:
                return list(pool.map(fn, items))
        return [fn(x) for x in items]

    def manifest(self):
        snap = {k: v for k, v in self.cfg.items() if k != "out"}
        return {
            "stage": self.name,
            "tool_version": __version__,
            "seed": self.seed,
            "config": snap,
            "inputs": {r: _digest(self.path(r)) for r in sorted(self.inputs)},
            "outputs": {r: _digest(self.path(r)) for r in sorted(self.outputs)},
            "metrics": self.metrics,
        }


# -- sample tables -----------------------------------------------------------

INDEX_FIELDS = ["id", "path", "mask_path", "label", "origin"]


def _index_csv(rows):
    buf = io.StringIO()
    w = csv.DictWriter(buf, INDEX_FIELDS, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def _read_index(st, rel):
    """Samples listed in an index CSV; paths are relative to the run directory."""
    rows = list(csv.DictReader(io.StringIO(st.read_text(rel))))
    samples = []
    for r in rows:
        mask = st.read_image(r["mask_path"]) if r["mask_path"] else None
        samples.append(dataset.Sample(r["id"], st.read_image(r["path"]), int(r["label"]), r["origin"], mask))
    return samples


def _data(st):
    """(samples by id, split manifest, lesion boxes by id) from the phantoms stage."""
    if "data" not in st.cache:
        samples = _read_index(st, "data/index.csv")
        split = dataset.SplitManifest.from_json(st.read_text("data/split.json"))
        boxes = {k: [dataset.Box(*b) for b in v]
                 for k, v in json.loads(st.read_text("data/lesions.json")).items()}
        st.cache["data"] = ({s.id: s for s in samples}, split, boxes)
    return st.cache["data"]


def _synthetic(st):
    if not st.cfg["gan"]["enabled"] or st.cfg["gan"]["select"] == 0:
        return []
    if "synth" not in st.cache:
        st.cache["synth"] = _read_index(st, "synth/index.csv")
    return st.cache["synth"]


# -- stages ------------------------------------------------------------------

def stage_phantoms(st):
    d = st.cfg["data"]
    size = d["size"]
    if d["source"] == "phantoms":
        samples = dataset.make_phantom_set(d["n"], st.seed, size=size, positive_fraction=d["positive_fraction"])
    else:
        warnings = []
        samples = dataset.scan_dataset(d["root"], d["layout"], warnings)
        st.metrics["skipped_files"] = warnings
        samples = [_resized(s, size) for s in samples]
    split = dataset.split(samples, st.seed, tuple(d["split"]))
    rows, lesions = [], {}
    for s in samples:
        img_rel, mask_rel = f"data/images/{s.id}.pgm", f"data/masks/{s.id}.pgm" if s.mask is not None else ""
        st.write_image(img_rel, s.image)
        if mask_rel:
            st.write_image(mask_rel, s.mask)
        rows.append({"id": s.id, "path": img_rel, "mask_path": mask_rel, "label": s.label, "origin": s.origin})
        lesions[s.id] = [list(b) for b in s.lesion_boxes]
    st.write_text("data/index.csv", _index_csv(rows))
    st.write_text("data/split.json", split.to_json() + "\n")
    st.write_text("data/lesions.json", _json(lesions))
    st.metrics.update(samples=len(samples), counts=split.counts)


def _resized(s, size):
    img = np.asarray(s.image)
    if img.ndim == 3:
        img = imgproc._to_u8(img.astype(np.float64).mean(axis=2))
    mask = None if s.mask is None else imgproc.resize_nearest(s.mask, size, size)
    return dataset.Sample(s.id, imgproc.resize_bilinear(img, size, size), s.label, s.origin, mask)


def _gan_config(st):
    g = {k: v for k, v in st.cfg["gan"].items() if k not in ("enabled", "candidates", "select")}
    return gan.GanConfig(seed=st.seed, **g)


def stage_train_gan(st):
    if not st.cfg["gan"]["enabled"]:
        st.metrics["skipped"] = True
        return
    by_id, split, _ = _data(st)
    positives = [by_id[i].image for i in split.train if by_id[i].label == dataset.POSITIVE]
    cfg = _gan_config(st)
    fixed = np.random.default_rng([st.seed, 1])
    z = gan.latent(16, cfg.latent_dim, fixed)

    def on_epoch(snap):
        G = gan.build_generator(cfg)
        snapshot.loads(G, snap.generator)
        G.eval()
        imgs = [gan.from_unit_range(x[0]) for x in G(z).data]
        st.write_image(f"gan/epoch_{snap.epoch:03d}.pgm", gan.sample_grid(imgs, cols=4))

    run = gan.dcgan_train(positives, cfg, on_epoch=on_epoch)
    st.write_bytes("gan/generator.spt", snapshot.dumps(run.generator))
    st.write_text("gan/losses.csv", run.loss_csv())
    st.metrics.update(steps=len(run.steps), final_d_loss=run.d_loss[-1] if run.d_loss else None,
                      final_g_loss=run.g_loss[-1] if run.g_loss else None)


def stage_synthesize(st):
    g = st.cfg["gan"]
    if not g["enabled"] or g["select"] == 0:
        st.metrics["skipped"] = True
        return
    cfg = _gan_config(st)
    G = gan.build_generator(cfg)
    snapshot.loads(G, st.require("gan/generator.spt").read_bytes())
    by_id, split, _ = _data(st)
    size = st.cfg["data"]["size"]
    pool = [imgproc.resize_bilinear(by_id[i].image, cfg.output_size, cfg.output_size)
            for i in split.train if by_id[i].label == dataset.POSITIVE]
    candidates = gan.generate(G, g["candidates"], cfg.latent_dim, seed=st.seed)
    picked, scores = gan.select_generated(candidates, pool, g["select"])
    rows, score_rows = [], [["id", "candidate", "psnr"]]
    for rank, (k, score) in enumerate(zip(picked, scores)):
        sid = f"generated-{rank:04d}"
        rel = f"synth/images/{sid}.pgm"
        st.write_image(rel, imgproc.resize_bilinear(candidates[k], size, size))
        rows.append({"id": sid, "path": rel, "mask_path": "", "label": dataset.POSITIVE,
                     "origin": dataset.GENERATED})
        score_rows.append([sid, k, repr(float(score))])
    st.write_text("synth/index.csv", _index_csv(rows))
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(score_rows)
    st.write_text("synth/psnr.csv", buf.getvalue())
    st.metrics.update(selected=len(rows), mean_psnr=float(np.mean(scores)) if scores else None)


def _unet_config(st, seed):
    return segnet.UnetConfig(seed=seed, **st.cfg["segnet"])


def stage_train_seg(st):
    by_id, split, _ = _data(st)
    train = [by_id[i] for i in split.train if by_id[i].mask is not None]
    val = [by_id[i] for i in split.validation if by_id[i].mask is not None]
    if not train:
        raise DataError("no training samples with lung masks for the segmenter")
    net, hist = segnet.train_segmenter(train, _unet_config(st, st.seed), val)
    st.write_bytes("seg/unet.spt", snapshot.dumps(net))
    st.write_text("seg/history.csv", hist.to_csv())
    st.metrics["val_dsc"] = hist.val_dsc[-1] if hist.val_dsc else None


def stage_segment(st):
    net = segnet.build_unet(_unet_config(st, 0))
    snapshot.loads(net, st.require("seg/unet.spt").read_bytes())
    by_id, split, _ = _data(st)
    samples = list(by_id.values()) + _synthetic(st)
    masks = st.map(lambda s: segnet.segment(net, s.image), samples)
    rows, dice_rows = [], [["id", "dsc"]]
    test = set(split.test)
    for s, m in zip(samples, masks):
        rel = f"seg/masks/{s.id}.pgm"
        st.write_image(rel, m)
        src = "data" if s.origin == dataset.REAL else "synth"
        rows.append({"id": s.id, "path": f"{src}/images/{s.id}.pgm", "mask_path": rel, "label": s.label,
                     "origin": s.origin})
        if s.id in test and s.mask is not None:
            dice_rows.append([s.id, repr(segnet.dice_coefficient(s.mask, m))])
    st.write_text("seg/index.csv", _index_csv(rows))
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(dice_rows)
    st.write_text("seg/dice.csv", buf.getvalue())
    scores = [float(r[1]) for r in dice_rows[1:]]
    st.metrics["test_dsc"] = float(np.mean(scores)) if scores else None


def _seg_masks(st, ids):
    if st.options.get("no_mask"):
        return None
    st.require("seg/index.csv")
    return [st.read_image(f"seg/masks/{i}.pgm") for i in ids]


def _clf_settings(st, i):
    c = dict(st.cfg["classifiers"][i])
    pretrain, tune = c.pop("pretrain_steps"), c.pop("tune")
    c.pop("calibrate")
    c["seed"] = stage_seed(st.cfg["seed"], f"classifier:{i}")
    return classifier.ClassifierConfig(**c), pretrain, tune


def _model_name(st, i):
    return f"{i}-{st.cfg['classifiers'][i]['arch']}"


def _prepared(st, ids, size):
    by_id, _, _ = _data(st)
    synth = {s.id: s for s in (_synthetic(st) if any(i not in by_id for i in ids) else [])}
    samples = [by_id.get(i) or synth[i] for i in ids]
    imgs = st.map(lambda s: imgproc.preprocess_u8(s.image, size), samples)
    masks = _seg_masks(st, ids)
    if masks is not None:
        masks = [imgproc.resize_nearest(m, size, size) for m in masks]
    return samples, imgs, masks


def _backbone(st, i, cfg, pretrain):
    bb = classifier.build_backbone(cfg.arch, cfg.seed)
    if pretrain:
        by_id, split, boxes = _data(st)
        real = [dataclasses.replace(by_id[k], lesion_boxes=boxes.get(k, []))
                for k in split.train if by_id[k].mask is not None]
        classifier.pretrain_backbone(bb, real, pretrain, seed=cfg.seed)
    return bb


def _train_ids(st):
    _, split, _ = _data(st)
    return list(split.train) + [s.id for s in _synthetic(st)], list(split.validation), list(split.test)


def stage_ga_tune(st):
    train_ids, val_ids, _ = _train_ids(st)
    tuned = []
    for i in range(len(st.cfg["classifiers"])):
        cfg, pretrain, tune = _clf_settings(st, i)
        if not tune:
            continue
        net = classifier.build_classifier(cfg, _backbone(st, i, cfg, pretrain))
        tr, tr_imgs, tr_masks = _prepared(st, train_ids, cfg.input_size)
        va, va_imgs, va_masks = _prepared(st, val_ids, cfg.input_size)
        feats = classifier.extract_features(net, tr_imgs, tr_masks)
        val_feats = classifier.extract_features(net, va_imgs, va_masks)
        ga_cfg = gatune.GaConfig(seed=stage_seed(st.seed, f"ga:{i}"), **dict(st.cfg["ga"], workers=st.threads))
        fitness = gatune.classifier_fitness(feats, [s.label for s in tr], val_feats, [s.label for s in va],
                                            cfg, net.backbone, epochs=ga_cfg.fitness_epochs, train_seed=cfg.seed)
        best, record = gatune.run_ga(fitness, ga_cfg)
        name = _model_name(st, i)
        # worker count is execution detail, not part of the result
        st.write_text(f"ga/{name}.json", record.to_json() + "\n")
        st.write_text(f"ga/{name}_summary.csv", record.summary_csv())
        st.metrics[name] = {"best_fitness": record.best_fitness, "best_genome": best.to_dict()}
        tuned.append(name)
    st.metrics["tuned"] = tuned


def _genome(st, i):
    rec = json.loads(st.read_text(f"ga/{_model_name(st, i)}.json"))
    return gatune.Genome(**rec["best_genome"])


def stage_train_clf(st):
    train_ids, val_ids, test_ids = _train_ids(st)
    for i in range(len(st.cfg["classifiers"])):
        cfg, pretrain, tune = _clf_settings(st, i)
        if tune:
            cfg = cfg.with_genome(_genome(st, i))
        net = classifier.build_classifier(cfg, _backbone(st, i, cfg, pretrain))
        tr, tr_imgs, tr_masks = _prepared(st, train_ids, cfg.input_size)
        va, va_imgs, va_masks = _prepared(st, val_ids, cfg.input_size)
        te, te_imgs, te_masks = _prepared(st, test_ids, cfg.input_size)
        _, hist = classifier.train_head(net, tr_imgs, [s.label for s in tr], cfg, va_imgs, [s.label for s in va],
                                        tr_masks, va_masks)
        if st.cfg["classifiers"][i]["calibrate"] and va:
            st.metrics.setdefault("temperature", {})[_model_name(st, i)] = classifier.calibrate(
                net, [s.label for s in va], va_imgs, va_masks)
        preds = classifier.predict_proba(net, te_imgs, ids=test_ids, masks=te_masks,
                                         threshold=st.cfg["eval"]["threshold"])
        name = _model_name(st, i)
        st.write_bytes(f"clf/{name}.spt", snapshot.dumps(net))
        st.write_text(f"clf/{name}_history.csv", hist.to_csv())
        st.write_text(f"clf/{name}_predictions.csv", classifier.predictions_csv(preds))
        truth = [s.label for s in te]
        st.metrics[name] = {"val_acc": hist.val_acc[-1] if hist.val_acc else None,
                            "test_acc": float(np.mean([p.label == t for p, t in zip(preds, truth)]))}


def _read_truth(text, source):
    rows = csv.DictReader(io.StringIO(text))
    fields = rows.fieldnames or []
    key = "truth" if "truth" in fields else "label" if "id" in fields and "prob_positive" not in fields else None
    if key is None:
        raise DataError(f"{source} has no truth column; pass --truth with id,truth (or id,label) rows")
    return {r["id"]: int(r[key]) for r in rows}


def stage_evaluate(st):
    e = st.cfg["eval"]
    pred_paths = st.options.get("predictions")
    if pred_paths:
        external = [Path(p) for p in pred_paths] + ([Path(st.options["truth"])] if st.options.get("truth") else [])
        missing = [str(p) for p in external if not p.exists()]
        if missing:
            raise DependencyError(f"missing input file(s): {', '.join(missing)}")
        st.metrics["external_inputs"] = {p.name: _digest(p) for p in external}
        preds = {Path(p).stem: classifier.read_predictions_csv(Path(p).read_text()) for p in pred_paths}
        names = list(preds)
        truth_src = external[-1] if st.options.get("truth") else external[0]
        truth = _read_truth(truth_src.read_text(), truth_src)
        weights = st.options.get("weights") or [1.0] * len(names)
    else:
        by_id, split, _ = _data(st)
        names = [_model_name(st, i) for i in range(len(st.cfg["classifiers"]))]
        preds = {n: classifier.read_predictions_csv(st.read_text(f"clf/{n}_predictions.csv")) for n in names}
        truth = {i: by_id[i].label for i in split.test}
        weights = st.cfg["ensemble"]["weights"]
    ids = [p.id for p in preds[names[0]]]
    for n in names[1:]:
        if [p.id for p in preds[n]] != ids:
            raise DataError(f"predictions of {n!r} do not cover the same ids in the same order")
    results = {}
    if len(names) > 1:
        probs = evalkit.ensemble([preds[n] for n in names], weights)
        preds["ensemble"] = [evalkit.Prediction.from_prob(i, p, e["threshold"]) for i, p in zip(ids, probs)]
        st.write_text("eval/ensemble_predictions.csv", classifier.predictions_csv(preds["ensemble"]))
    for n, ps in preds.items():
        cm = evalkit.confusion(ps, truth, e["threshold"])
        results[n] = evalkit.report(cm, e["threshold"], e["level"]).to_dict()
        try:
            roc = evalkit.roc_curve(ps, truth)
            st.write_text(f"eval/roc_{n}.csv", roc.to_csv())
            results[n]["auc"] = roc.auc
        except ScreenpipeError:
            results[n]["auc"] = None
    st.write_text("eval/metrics.json", _json(results))
    headline = "ensemble" if "ensemble" in results else names[0]
    st.metrics.update({n: {k: r[k] for k in ("sensitivity", "specificity", "accuracy", "youden")}
                       for n, r in results.items()})
    cm = evalkit.ConfusionMatrix(**results[headline]["confusion"])
    print(f"[{headline}]\n" + evalkit.report(cm, e["threshold"], e["level"]).to_text())


def stage_cam(st):
    c = st.cfg["cam"]
    i = c["model"]
    cfg, pretrain, tune = _clf_settings(st, i)
    if tune:
        cfg = cfg.with_genome(_genome(st, i))
    name = _model_name(st, i)
    net = classifier.build_classifier(cfg, classifier.build_backbone(cfg.arch, cfg.seed))
    snapshot.loads(net, st.require(f"clf/{name}.spt").read_bytes())
    by_id, _, boxes = _data(st)
    preds = classifier.read_predictions_csv(st.read_text(f"clf/{name}_predictions.csv"))
    hits = [p.id for p in preds if p.label == dataset.POSITIVE and by_id[p.id].label == dataset.POSITIVE]
    if c["max_images"]:
        hits = hits[:c["max_images"]]
    samples, imgs, masks = _prepared(st, hits, cfg.input_size)
    scale = cfg.input_size / st.cfg["data"]["size"]
    rows = [["id", "peak_row", "peak_col", "in_box"]]
    inside = []
    for k, (s, img) in enumerate(zip(samples, imgs)):
        hm = cam.grad_cam(net, img, c["class_index"], None if masks is None else masks[k])
        st.write_image(f"cam/{s.id}.ppm", cam.overlay(img, hm, c["alpha"]))
        st.write_text(f"cam/{s.id}.csv", hm.to_csv())
        ok = cam.peak_in_boxes(hm, [b.scaled(scale) for b in boxes.get(s.id, [])])
        inside.append(ok)
        rows.append([s.id, *hm.peak, int(ok)])
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    st.write_text("cam/summary.csv", buf.getvalue())
    st.metrics.update(model=name, images=len(inside),
                      hit_rate=float(np.mean(inside)) if inside else None)


RUNNERS = {
    "phantoms": stage_phantoms,
    "train-gan": stage_train_gan,
    "synthesize": stage_synthesize,
    "train-seg": stage_train_seg,
    "segment": stage_segment,
    "ga-tune": stage_ga_tune,
    "train-clf": stage_train_clf,
    "evaluate": stage_evaluate,
    "cam": stage_cam,
}


def run_stage(name, cfg, out, threads=1, options=None):
    """Run one stage and write its manifest fragment; returns the fragment."""
    st = Stage(name, cfg, out, threads, options)
    start = time.perf_counter()
    RUNNERS[name](st)
    seconds = time.perf_counter() - start
    fragment = st.manifest()
    mdir = Path(out) / "manifests"
    mdir.mkdir(parents=True, exist_ok=True)
    (mdir / f"{name}.json").write_text(_json(fragment))
    (mdir / f"{name}.timing.json").write_text(_json({"stage": name, "seconds": seconds}))
    return fragment


def run_pipeline(cfg, out, threads=1, options=None, only=None):
    stages = [only] if only else list(STAGES)
    fragments = {name: run_stage(name, cfg, out, threads, options) for name in stages}
    if not only:
        manifest = {"tool_version": __version__, "config": {k: v for k, v in cfg.items() if k != "out"},
                    "stages": fragments}
        (Path(out) / "manifest.json").write_text(_json(manifest))
    return fragments


# -- argument handling -------------------------------------------------------

def _threads(value):
    if value is not None:
        return value
    env = os.environ.get("SCREENPIPE_THREADS")
    if env is None:
        return 1
    try:
        n = int(env)
    except ValueError:
        raise ConfigError(f"SCREENPIPE_THREADS must be an integer, got {env!r}") from None
    if n < 1:
        raise ConfigError("SCREENPIPE_THREADS must be >= 1")
    return n


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config (comments allowed)")
    common.add_argument("--out", help="run directory (overrides the config)")
    common.add_argument("--seed", type=int, help="global seed (overrides the config)")
    common.add_argument("--threads", type=int, help="worker threads (default: $SCREENPIPE_THREADS or 1)")
    parser = argparse.ArgumentParser(prog="screenpipe", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in STAGES:
        p = sub.add_parser(name, parents=[common], help=f"run the {name} stage")
        if name in ("ga-tune", "train-clf", "cam"):
            p.add_argument("--no-mask", action="store_true", help="classify unmasked images")
        if name == "evaluate":
            p.add_argument("--predictions", nargs="+", help="predictions CSVs (id,prob_positive,label[,truth])")
            p.add_argument("--truth", help="CSV with id and truth (or label) columns")
            p.add_argument("--weights", nargs="+", type=float, help="ensemble weights for --predictions")
    p = sub.add_parser("pipeline", parents=[common], help="run every stage in order")
    p.add_argument("--stage-only", choices=STAGES, help="run just this stage")
    p.add_argument("--no-mask", action="store_true", help="classify unmasked images")
    sub.add_parser("validate", parents=[common], help="check a config and list every problem")
    return parser


def _fail(exc, code=2):
    payload = {"error": type(exc).__name__, "message": str(exc).splitlines()[0]}
    if getattr(exc, "errors", None):
        payload["errors"] = exc.errors
    if getattr(exc, "missing", None):
        payload["missing"] = exc.missing
    print(json.dumps(payload, sort_keys=True), file=sys.stderr)
    return code


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.command == "validate":
            errors = validate_config(args.config) if args.config else []
            print(json.dumps({"ok": not errors, "errors": errors}, indent=2))
            return 0 if not errors else 1
        overrides = {}
        if args.out is not None:
            overrides["out"] = args.out
        if args.seed is not None:
            overrides["seed"] = args.seed
        cfg = load_config(args.config, overrides)
        threads = _threads(args.threads)
        if threads < 1:
            raise ConfigError("--threads must be >= 1")
        options = {"no_mask": getattr(args, "no_mask", False),
                   "predictions": getattr(args, "predictions", None),
                   "truth": getattr(args, "truth", None),
                   "weights": getattr(args, "weights", None)}
        out = Path(cfg["out"])
        if args.command == "pipeline":
            run_pipeline(cfg, out, threads, options, args.stage_only)
        else:
            run_stage(args.command, cfg, out, threads, options)
    except ScreenpipeError as exc:
        return _fail(exc)
    except OSError as exc:
        return _fail(exc)
    return 0


if __name__ == "__main__":
    sys.exit(main())
