"""Run configuration: JSON with comments, defaults for every section,
exhaustive validation and per-stage seed derivation."""

from __future__ import annotations

import copy
import hashlib
import json
import re
from pathlib import Path

from .errors import ConfigError
from .gatune import DEFAULT_RANGES

DEFAULTS = {
    "seed": 0,
    "out": "runs/default",
    "data": {
        "source": "phantoms",  # or "directory"
        "n": 400,
        "size": 128,
        "positive_fraction": 0.5,
        "root": None,
        "layout": "shenzhen",
        "split": [0.8, 0.1, 0.1],
    },
    "gan": {
        "enabled": True,
        "latent_dim": 64,
        "output_size": 32,
        "base_channels": 16,
        "lr_generator": 1e-3,
        "lr_discriminator": 2e-4,
        "batch_size": 16,
        "epochs": 20,
        "candidates": 64,
        "select": 16,
    },
    "segnet": {
        "depth": 3,
        "base_channels": 16,
        "size": 64,
        "learning_rate": 1e-3,
        "epochs": 10,
        "batch_size": 8,
        "threshold": 0.5,
    },
    "classifiers": [
        {"arch": "vgg-ish", "input_size": 128, "epochs": 120, "learning_rate": 1e-2, "decay": 1e-5,
         "momentum": 0.9, "batch_size": 16, "dropout": 0.5, "pretrain_steps": 0, "tune": False,
         "calibrate": True},
        {"arch": "inception-ish", "input_size": 128, "epochs": 120, "learning_rate": 1e-2, "decay": 1e-5,
         "momentum": 0.9, "batch_size": 16, "dropout": 0.5, "pretrain_steps": 0, "tune": False,
         "calibrate": True},
    ],
    "ga": {
        "population": 20,
        "parents": 5,
        "generations": 30,
        "fitness_epochs": 30,
        "mutation_rate": 0.2,
        "workers": 1,
    },
    "ensemble": {"weights": [0.4, 0.6]},
    "eval": {"threshold": 0.5, "level": 0.95},
    "cam": {"model": 1, "class_index": 1, "alpha": 0.4, "max_images": 20},
}

CLASSIFIER_KEYS = set(DEFAULTS["classifiers"][0])

_TOKEN = re.compile(r'"(?:\\.|[^"\\])*"|//[^\n]*|/\*.*?\*/', re.S)


def strip_comments(text):
    """Drop ``//`` and ``/* */`` comments that are not inside strings."""
    return _TOKEN.sub(lambda m: m.group(0) if m.group(0).startswith('"') else "", text)


def _merge(base, override, path, errors):
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            errors.append(f"{where}: unknown key")
        elif isinstance(base[key], dict) and base[key]:
            if isinstance(value, dict):
                out[key] = _merge(base[key], value, where, errors)
            else:
                errors.append(f"{where}: expected an object")
        else:
            out[key] = value
    return out


def _merge_classifiers(value, errors):
    if not isinstance(value, list):
        errors.append("classifiers: expected a list")
        return copy.deepcopy(DEFAULTS["classifiers"])
    out = []
    for i, entry in enumerate(value):
        if not isinstance(entry, dict):
            errors.append(f"classifiers[{i}]: expected an object")
            continue
        base = DEFAULTS["classifiers"][min(i, len(DEFAULTS["classifiers"]) - 1)]
        out.append(_merge(base, entry, f"classifiers[{i}]", errors))
    return out


def resolve(raw):
    """Defaults merged with ``raw``; returns ``(config, errors)``."""
    errors = []
    if not isinstance(raw, dict):
        return copy.deepcopy(DEFAULTS), ["<root>: expected a JSON object"]
    raw = dict(raw)
    classifiers = raw.pop("classifiers", None)
    cfg = _merge(DEFAULTS, raw, "", errors)
    if classifiers is not None:
        cfg["classifiers"] = _merge_classifiers(classifiers, errors)
    errors += _semantic_errors(cfg)
    return cfg, errors


def _is_number(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _is_int(v):
    return isinstance(v, int) and not isinstance(v, bool)


def _semantic_errors(cfg):
    from .classifier import ClassifierConfig
    from .gan import GanConfig
    from .gatune import GaConfig
    from .segnet import UnetConfig

    errors = []

    def need(cond, where, msg):
        if not cond:
            errors.append(f"{where}: {msg}")
        return cond

    def build(factory, kwargs, where):
        try:
            factory(**kwargs)
        except (ConfigError, TypeError, ValueError) as exc:
            errors.append(f"{where}: {exc}")

    need(_is_int(cfg["seed"]) and cfg["seed"] >= 0, "seed", "must be a non-negative integer")
    need(isinstance(cfg["out"], str) and cfg["out"], "out", "must be a non-empty path")

    d = cfg["data"]
    if need(d["source"] in ("phantoms", "directory"), "data.source", "must be 'phantoms' or 'directory'"):
        if d["source"] == "directory":
            root = d["root"]
            need(isinstance(root, str) and Path(root).is_dir(), "data.root", f"directory {root!r} does not exist")
            need(d["layout"] in ("shenzhen", "montgomery", "flat"), "data.layout",
                 "must be one of shenzhen, montgomery, flat")
    need(_is_int(d["n"]) and d["n"] >= 10, "data.n", "must be an integer >= 10")
    need(_is_int(d["size"]) and d["size"] >= 32, "data.size", "must be an integer >= 32")
    need(_is_number(d["positive_fraction"]) and 0 < d["positive_fraction"] < 1, "data.positive_fraction",
         "must be strictly between 0 and 1")
    sp = d["split"]
    need(isinstance(sp, list) and len(sp) == 3 and all(_is_number(v) and v >= 0 for v in sp)
         and abs(sum(sp) - 1.0) < 1e-9, "data.split", "must be three non-negative ratios summing to 1")

    g = dict(cfg["gan"])
    need(isinstance(g.pop("enabled"), bool), "gan.enabled", "must be true or false")
    cand, sel = g.pop("candidates"), g.pop("select")
    need(_is_int(cand) and _is_int(sel) and 0 <= sel <= cand, "gan.select",
         "must be an integer between 0 and gan.candidates")
    build(GanConfig, g, "gan")

    build(UnetConfig, cfg["segnet"], "segnet")

    allowed = tuple(DEFAULT_RANGES.batch_size)
    if need(len(cfg["classifiers"]) >= 1, "classifiers", "at least one classifier is required"):
        for i, c in enumerate(cfg["classifiers"]):
            where = f"classifiers[{i}]"
            c = dict(c)
            steps = c.pop("pretrain_steps")
            need(_is_int(steps) and steps >= 0, f"{where}.pretrain_steps", "must be a non-negative integer")
            for flag in ("tune", "calibrate"):
                need(isinstance(c.pop(flag), bool), f"{where}.{flag}", "must be true or false")
            need(c["batch_size"] in allowed, f"{where}.batch_size",
                 f"{c['batch_size']!r} is not in the allowed set {allowed}")
            build(ClassifierConfig, c, where)

    ga = dict(cfg["ga"])
    build(GaConfig, {k: ga[k] for k in ga}, "ga")

    w = cfg["ensemble"]["weights"]
    if need(isinstance(w, list) and all(_is_number(v) for v in w), "ensemble.weights", "must be a list of numbers"):
        need(len(w) == len(cfg["classifiers"]), "ensemble.weights",
             f"{len(w)} weights for {len(cfg['classifiers'])} classifiers")
        need(all(v >= 0 for v in w) and sum(w) > 0, "ensemble.weights",
             "must be non-negative with a positive sum")

    e = cfg["eval"]
    need(_is_number(e["threshold"]) and 0 <= e["threshold"] <= 1, "eval.threshold", "must be in [0, 1]")
    need(_is_number(e["level"]) and 0 < e["level"] < 1, "eval.level", "must be in (0, 1)")

    c = cfg["cam"]
    need(_is_int(c["model"]) and 0 <= c["model"] < max(len(cfg["classifiers"]), 1), "cam.model",
         "must index one of the classifiers")
    need(c["class_index"] in (0, 1), "cam.class_index", "must be 0 or 1")
    need(_is_number(c["alpha"]) and 0 <= c["alpha"] <= 1, "cam.alpha", "must be in [0, 1]")
    need(_is_int(c["max_images"]) and c["max_images"] >= 0, "cam.max_images", "must be a non-negative integer")
    return errors


def read_config_file(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        return json.loads(strip_comments(text))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc


def validate_config(source):
    """``[]`` when valid, else every violation as ``"section.key: message"``.

    ``source`` is a path or an already-parsed dict. Nothing is written.
    """
    raw = read_config_file(source) if isinstance(source, (str, Path)) else source
    return resolve(raw)[1]


def load_config(source=None, overrides=None):
    """Resolved config dict; raises :class:`ConfigError` listing all problems."""
    raw = {} if source is None else (read_config_file(source) if isinstance(source, (str, Path)) else source)
    raw = dict(raw)
    raw.update(overrides or {})
    cfg, errors = resolve(raw)
    if errors:
        err = ConfigError("invalid configuration:\n  " + "\n  ".join(errors))
        err.errors = errors
        raise err
    return cfg


def stage_seed(seed, stage):
    """Per-stage seed: first 4 bytes of sha256("<stage>:<seed>") as an integer."""
    return int.from_bytes(hashlib.sha256(f"{stage}:{int(seed)}".encode()).digest()[:4], "little")

