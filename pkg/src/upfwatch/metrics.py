"""Regression error metrics for latency estimates and multiclass scoring.

Normalized regression metrics use one min-max range taken jointly over the
truth and estimate series, so both land on the same [0, 1] scale.
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np


class MetricsError(ValueError):
    pass


class EmptyInput(MetricsError):
    pass


class LengthMismatch(MetricsError):
    pass


class UnknownLabel(MetricsError):
    pass


class DegenerateClass(MetricsError):
    pass


def min_max_normalize(series, lo: Optional[float] = None, hi: Optional[float] = None) -> np.ndarray:
    x = np.asarray(series, dtype=np.float64)
    if x.size == 0:
        raise EmptyInput("cannot normalize an empty series")
    lo = float(x.min()) if lo is None else lo
    hi = float(x.max()) if hi is None else hi
    if hi == lo:
        return np.zeros_like(x)
    return (x - lo) / (hi - lo)


def _r2(t: np.ndarray, e: np.ndarray) -> float:
    ss_res = float(((t - e) ** 2).sum())
    ss_tot = float(((t - t.mean()) ** 2).sum())
    if ss_tot == 0.0:
        return 1.0 if ss_res == 0.0 else 0.0
    return 1.0 - ss_res / ss_tot


def _mape(t: np.ndarray, e: np.ndarray) -> tuple[float, int]:
    keep = t != 0
    excluded = int((~keep).sum())
    if not keep.any():
        return math.nan, excluded
    with np.errstate(over="ignore"):  # near-zero truth may legitimately give inf
        return float(np.mean(np.abs((t[keep] - e[keep]) / t[keep])) * 100.0), excluded


@dataclass
class RegressionReport:
    mse_norm: float
    mae_norm: float
    mape_norm: float
    r2_norm: float
    mape_orig: float
    mse_orig: float
    mae_orig: float
    n: int
    zero_truth_excluded_norm: int
    zero_truth_excluded_orig: int

    def to_dict(self) -> dict:
        return asdict(self)


def regression_report(truth, estimate) -> RegressionReport:
    t = np.asarray(truth, dtype=np.float64)
    e = np.asarray(estimate, dtype=np.float64)
    if t.shape != e.shape:
        raise LengthMismatch(f"truth has {t.size} values, estimate {e.size}")
    if t.size == 0:
        raise EmptyInput("no values to compare")
    lo = min(float(t.min()), float(e.min()))
    hi = max(float(t.max()), float(e.max()))
    tn = min_max_normalize(t, lo, hi)
    en = min_max_normalize(e, lo, hi)
    mape_norm, excl_norm = _mape(tn, en)
    mape_orig, excl_orig = _mape(t, e)
    return RegressionReport(
        mse_norm=float(np.mean((tn - en) ** 2)),
        mae_norm=float(np.mean(np.abs(tn - en))),
        mape_norm=mape_norm,
        r2_norm=_r2(tn, en),
        mape_orig=mape_orig,
        mse_orig=float(np.mean((t - e) ** 2)),
        mae_orig=float(np.mean(np.abs(t - e))),
        n=int(t.size),
        zero_truth_excluded_norm=excl_norm,
        zero_truth_excluded_orig=excl_orig,
    )


def error_histogram(errors, bins: int = 41, min_half_width: float = 1e-6) -> tuple[np.ndarray, np.ndarray]:
    """Histogram on edges symmetric about zero; ``bins`` is forced odd so one bin straddles 0.

    The range is at least ``+-min_half_width`` so that pure float rounding
    (errors of 1e-11 ms and the like) lands in the zero bin.
    """
    err = np.asarray(errors, dtype=np.float64)
    if bins % 2 == 0:
        bins += 1
    half = float(np.abs(err).max()) if err.size else 0.0
    half = max(half, min_half_width)
    edges = np.linspace(-half, half, bins + 1)
    counts, _ = np.histogram(err, bins=edges)
    return counts, edges


# ---------------------------------------------------------- classification


@dataclass
class ConfusionMatrix:
    classes: list
    counts: np.ndarray  # rows = truth, columns = prediction

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def to_dict(self) -> dict:
        return {"classes": list(self.classes), "counts": self.counts.tolist()}


@dataclass
class ClassifierReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    macro_precision: float = 0.0
    macro_recall: float = 0.0
    macro_f1: float = 0.0
    support: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def mean(reports: Sequence["ClassifierReport"]) -> "ClassifierReport":
        keys = ("accuracy", "precision", "recall", "f1", "macro_precision", "macro_recall", "macro_f1")
        vals = {k: float(np.mean([getattr(r, k) for r in reports])) for k in keys}
        return ClassifierReport(**vals)


def _encode(labels, classes) -> np.ndarray:
    index = {c: i for i, c in enumerate(classes)}
    try:
        return np.array([index[v] for v in labels], dtype=np.int64)
    except KeyError as exc:
        raise UnknownLabel(f"label {exc.args[0]!r} not in {list(classes)}") from None


def confusion_matrix(truth, predicted, classes: Sequence) -> ConfusionMatrix:
    t = _encode(truth, classes)
    p = _encode(predicted, classes)
    if t.size != p.size:
        raise LengthMismatch(f"{t.size} truth labels vs {p.size} predictions")
    if t.size == 0:
        raise EmptyInput("no labels")
    k = len(classes)
    counts = np.bincount(t * k + p, minlength=k * k).reshape(k, k)
    return ConfusionMatrix(list(classes), counts)


def report_from_confusion(cm: ConfusionMatrix) -> ClassifierReport:
    c = cm.counts.astype(np.float64)
    tp = np.diag(c)
    support = c.sum(axis=1)
    predicted = c.sum(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(predicted > 0, tp / predicted, 0.0)
        recall = np.where(support > 0, tp / support, 0.0)
        denom = precision + recall
        f1 = np.where(denom > 0, 2 * precision * recall / denom, 0.0)
    total = c.sum()
    w = support / total
    seen = (support > 0) | (predicted > 0)
    return ClassifierReport(
        accuracy=float(tp.sum() / total),
        precision=float((w * precision).sum()),
        recall=float((w * recall).sum()),
        f1=float((w * f1).sum()),
        macro_precision=float(precision[seen].mean()),
        macro_recall=float(recall[seen].mean()),
        macro_f1=float(f1[seen].mean()),
        support=[int(s) for s in support],
    )


def classification_report(truth, predicted, classes: Optional[Sequence] = None):
    """Confusion matrix plus support-weighted (and macro) precision/recall/F1.

    ``classes`` defaults to the sorted union of observed labels.
    """
    if classes is None:
        classes = sorted(set(truth) | set(predicted))
    cm = confusion_matrix(truth, predicted, classes)
    return cm, report_from_confusion(cm)


# ------------------------------------------------------------------ curves


@dataclass
class CurvePoints:
    x: np.ndarray
    y: np.ndarray
    thresholds: np.ndarray
    auc: float
    positive_class: object = None

    def rows(self):
        return zip(self.x.tolist(), self.y.tolist(), self.thresholds.tolist())

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x", "y", "threshold"])
            for x, y, thr in self.rows():
                w.writerow([repr(x), repr(y), repr(thr)])


def _binary_scores(truth, scores, positive_class, classes):
    S = np.asarray(scores, dtype=np.float64)
    if S.ndim != 2:
        raise MetricsError("scores must be an (n, class_count) matrix")
    if not np.allclose(S.sum(axis=1), 1.0, rtol=0, atol=1e-6):
        raise MetricsError("score rows must sum to 1 within 1e-6")
    if classes is not None:
        t = _encode(truth, classes)
        col = list(classes).index(positive_class)
    else:
        t = np.asarray(truth, dtype=np.int64)
        col = int(positive_class)
    if t.size != S.shape[0]:
        raise LengthMismatch(f"{t.size} labels vs {S.shape[0]} score rows")
    pos = t == col
    if not pos.any():
        raise DegenerateClass(f"class {positive_class!r} does not occur in truth")
    return pos, S[:, col]


def _trapezoid(y: np.ndarray, x: np.ndarray) -> float:
    return float((np.diff(x) * (y[1:] + y[:-1]) * 0.5).sum())


def _threshold_counts(pos: np.ndarray, s: np.ndarray):
    """Cumulative (tp, fp) at each distinct score, scanning from high to low."""
    order = np.argsort(-s, kind="stable")
    s_sorted = s[order]
    p_sorted = pos[order]
    last = np.r_[np.flatnonzero(np.diff(s_sorted) != 0), s_sorted.size - 1]
    tp = np.cumsum(p_sorted)[last]
    fp = np.cumsum(~p_sorted)[last]
    return tp.astype(np.float64), fp.astype(np.float64), s_sorted[last]


def roc_curve(truth, scores, positive_class, classes: Optional[Sequence] = None) -> CurvePoints:
    """One-vs-rest ROC; AUC by the trapezoid rule. Starts at (0, 0) with threshold +inf."""
    pos, s = _binary_scores(truth, scores, positive_class, classes)
    tp, fp, thr = _threshold_counts(pos, s)
    n_pos = float(pos.sum())
    n_neg = float(pos.size - pos.sum())
    tpr = np.r_[0.0, tp / n_pos]
    fpr = np.r_[0.0, fp / n_neg] if n_neg > 0 else np.r_[0.0, np.ones_like(fp)]
    auc = _trapezoid(tpr, fpr) if n_neg > 0 else 1.0
    return CurvePoints(fpr, tpr, np.r_[np.inf, thr], auc, positive_class)


def precision_recall_curve(truth, scores, positive_class, classes: Optional[Sequence] = None) -> CurvePoints:
    """One-vs-rest precision (y) against recall (x), recall ascending.

    The first point is (recall 0, precision 1) at threshold +inf; AUC is the
    trapezoid area under that polyline.
    """
    pos, s = _binary_scores(truth, scores, positive_class, classes)
    tp, fp, thr = _threshold_counts(pos, s)
    recall = np.r_[0.0, tp / float(pos.sum())]
    precision = np.r_[1.0, tp / (tp + fp)]
    auc = _trapezoid(precision, recall)
    return CurvePoints(recall, precision, np.r_[np.inf, thr], auc, positive_class)
