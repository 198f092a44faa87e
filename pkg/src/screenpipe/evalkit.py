"""Diagnostic metrics: confusion matrices, sensitivity/specificity/accuracy,
Youden's index, exact binomial intervals, ROC curves and probability
ensembling."""

from __future__ import annotations

import csv
import io
import json
from collections.abc import Mapping
from dataclasses import asdict, dataclass

import numpy as np
from scipy import stats

from .errors import ConfigError, DataError, DimensionError, UndefinedMetricError


@dataclass(frozen=True)
class Prediction:
    """One classifier output. Class order is [negative, positive]."""

    id: str
    prob_positive: float
    label: int

    @classmethod
    def from_prob(cls, id, prob, threshold=0.5):
        return cls(str(id), float(prob), int(prob >= threshold))


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise DataError(f"confusion counts must be non-negative: {self}")

    @property
    def total(self):
        return self.tp + self.fp + self.fn + self.tn

    @property
    def positives(self):
        return self.tp + self.fn

    @property
    def negatives(self):
        return self.tn + self.fp


def _probs_and_truths(preds, truths):
    preds = list(preds)
    if isinstance(truths, Mapping):
        probs, labels = [], []
        for p in preds:
            if not isinstance(p, Prediction):
                raise DataError("id-keyed truths require Prediction objects")
            if p.id not in truths:
                raise DataError(f"prediction id {p.id!r} has no ground-truth label")
            probs.append(p.prob_positive)
            labels.append(truths[p.id])
        if len(preds) != len(truths):
            raise DataError(f"{len(truths) - len(preds)} ground-truth ids have no prediction")
    else:
        truths = list(truths)
        if len(preds) != len(truths):
            raise DataError(f"{len(preds)} predictions vs {len(truths)} labels")
        probs = [p.prob_positive if isinstance(p, Prediction) else float(p) for p in preds]
        labels = truths
    labels = np.asarray(labels, dtype=int)
    if not np.isin(labels, (0, 1)).all():
        raise DataError("ground-truth labels must be 0 or 1")
    return np.asarray(probs, dtype=np.float64), labels


def confusion(preds, truths, threshold=0.5):
    """Count outcomes; a sample is called positive iff ``prob >= threshold``."""
    probs, labels = _probs_and_truths(preds, truths)
    called = probs >= threshold
    pos = labels == 1
    return ConfusionMatrix(
        tp=int(np.sum(called & pos)),
        fp=int(np.sum(called & ~pos)),
        fn=int(np.sum(~called & pos)),
        tn=int(np.sum(~called & ~pos)),
    )


def _ratio(num, den, what):
    if den == 0:
        raise UndefinedMetricError(f"{what} is undefined: denominator is zero")
    return num / den


def sensitivity(cm):
    return _ratio(cm.tp, cm.tp + cm.fn, "sensitivity")


def specificity(cm):
    return _ratio(cm.tn, cm.tn + cm.fp, "specificity")


def accuracy(cm):
    return _ratio(cm.tp + cm.tn, cm.total, "accuracy")


def youden(cm):
    return sensitivity(cm) + specificity(cm) - 1.0


def clopper_pearson_ci(successes, trials, level=0.95):
    """Exact (Clopper-Pearson) binomial confidence interval."""
    if trials <= 0 or not 0 <= successes <= trials:
        raise DataError(f"need 0 <= successes <= trials and trials > 0, got {successes}/{trials}")
    alpha = 1.0 - level
    low = 0.0 if successes == 0 else float(stats.beta.ppf(alpha / 2, successes, trials - successes + 1))
    high = 1.0 if successes == trials else float(stats.beta.ppf(1 - alpha / 2, successes + 1, trials - successes))
    return low, high


@dataclass
class MetricsReport:
    sensitivity: float
    specificity: float
    accuracy: float
    youden: float
    sensitivity_ci: tuple
    specificity_ci: tuple
    accuracy_ci: tuple
    youden_ci: tuple
    threshold: float
    confusion: ConfusionMatrix
    level: float = 0.95

    def to_dict(self):
        d = asdict(self)
        for k in ("sensitivity_ci", "specificity_ci", "accuracy_ci", "youden_ci"):
            d[k] = list(d[k])
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_text(self):
        pct = int(round(self.level * 100))
        rows = [f"{'metric':<12} {'value':>7}   {pct}% CI"]
        for name in ("sensitivity", "specificity", "accuracy", "youden"):
            lo, hi = getattr(self, f"{name}_ci")
            rows.append(f"{name:<12} {getattr(self, name):7.3f}   ({lo:.3f}, {hi:.3f})")
        cm = self.confusion
        rows.append(f"tp={cm.tp} fp={cm.fp} fn={cm.fn} tn={cm.tn} threshold={self.threshold:g}")
        return "\n".join(rows)


def report(cm, threshold=0.5, level=0.95):
    """All four metrics with exact intervals.

    Youden's interval combines the sensitivity and specificity bounds
    (low + low - 1, high + high - 1), which is conservative.
    """
    sens_ci = clopper_pearson_ci(cm.tp, cm.positives, level) if cm.positives else (np.nan, np.nan)
    spec_ci = clopper_pearson_ci(cm.tn, cm.negatives, level) if cm.negatives else (np.nan, np.nan)
    return MetricsReport(
        sensitivity=sensitivity(cm),
        specificity=specificity(cm),
        accuracy=accuracy(cm),
        youden=youden(cm),
        sensitivity_ci=sens_ci,
        specificity_ci=spec_ci,
        accuracy_ci=clopper_pearson_ci(cm.tp + cm.tn, cm.total, level),
        youden_ci=(sens_ci[0] + spec_ci[0] - 1.0, sens_ci[1] + spec_ci[1] - 1.0),
        threshold=threshold,
        confusion=cm,
        level=level,
    )


@dataclass
class RocCurve:
    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float

    @property
    def points(self):
        return list(zip(self.fpr.tolist(), self.tpr.tolist()))

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["threshold", "fpr", "tpr"])
        for t, f, p in zip(self.thresholds, self.fpr, self.tpr):
            w.writerow([repr(float(t)), repr(float(f)), repr(float(p))])
        return buf.getvalue()


def roc_curve(preds, truths):
    """Sweep thresholds over the distinct scores (plus +inf) and integrate
    the curve with the trapezoid rule."""
    probs, labels = _probs_and_truths(preds, truths)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("ROC needs both classes in the ground truth")
    thresholds = np.concatenate(([np.inf], np.unique(probs)[::-1]))
    called = probs[None, :] >= thresholds[:, None]
    tpr = (called & (labels == 1)).sum(axis=1) / n_pos
    fpr = (called & (labels == 0)).sum(axis=1) / n_neg
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    return RocCurve(thresholds, fpr, tpr, auc)


def ensemble(prob_lists, weights):
    """Weighted mean of per-model positive-class probabilities.

    Weights must be non-negative; they are normalised to sum to one.
    """
    arrays = [np.asarray([p.prob_positive if isinstance(p, Prediction) else p for p in probs], dtype=np.float64)
              for probs in prob_lists]
    w = np.asarray(weights, dtype=np.float64)
    if len(arrays) != len(w):
        raise DimensionError(f"{len(arrays)} models but {len(w)} weights")
    if len({a.shape for a in arrays}) > 1:
        raise DimensionError("all models must score the same number of samples")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ConfigError(f"ensemble weights must be finite and non-negative, got {weights}")
    if w.sum() == 0:
        raise ConfigError("ensemble weights are all zero")
    w = w / w.sum()
    out = w[0] * arrays[0]
    for wi, a in zip(w[1:], arrays[1:]):
        out = out + wi * a
    return out
