"""Evaluation metrics for classification, calibration, OOD detection and regression.

Conventions
-----------
* ECE bins are half-open on the left, ``((m-1)/M, m/M]``; a confidence of
  exactly 0 falls into the first bin.
* OOD scores are max-softmax probabilities with in-distribution as the
  positive class. A point is called "in" when ``score > threshold``.
* AUROC is the Mann-Whitney statistic with ties counted as one half.
* AUPR integrates the threshold-sweep precision/recall curve with the
  trapezoid rule, anchored at ``(recall=0, precision=1)``.
"""
from __future__ import annotations

import csv
import io
import json
import math
import warnings
from dataclasses import dataclass, field, fields
from fractions import Fraction

import numpy as np

PROB_FLOOR = 1e-12
SCHEMA_VERSION = 1

_trapezoid = getattr(np, "trapezoid", None) or np.trapz


def _probs_labels(probs, labels):
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels).astype(np.int64).ravel()
    if p.ndim != 2:
        raise ValueError(f"probs must be 2-d (n, C), got shape {p.shape}")
    if len(p) != len(y):
        raise ValueError(f"{len(p)} probability rows but {len(y)} labels")
    if len(y) and (y.min() < 0 or y.max() >= p.shape[1]):
        raise ValueError("labels out of range for the number of classes")
    return p, y


def nll(probs, labels) -> float:
    """Mean negative log-probability of the true labels."""
    p, y = _probs_labels(probs, labels)
    picked = p[np.arange(len(y)), y]
    if np.any(picked < PROB_FLOOR):
        warnings.warn(f"probabilities below {PROB_FLOOR} at true labels were clamped", RuntimeWarning)
        picked = np.maximum(picked, PROB_FLOOR)
    return float(-np.mean(np.log(picked)))


def error_rate(probs, labels) -> float:
    p, y = _probs_labels(probs, labels)
    return float(np.mean(np.argmax(p, axis=1) != y))


def _bin_index(conf, n_bins):
    # bin m (0-based) holds (m/M, (m+1)/M]; conf == 0 goes to bin 0
    scaled = conf * n_bins
    idx = np.ceil(scaled).astype(np.int64) - 1
    # float rounding of conf * M can cross a boundary (0.7 * 10 > 7); settle those exactly
    for i in np.flatnonzero(np.abs(scaled - np.round(scaled)) < 1e-9):
        idx[i] = math.ceil(Fraction(float(conf[i])) * n_bins) - 1
    return np.clip(idx, 0, n_bins - 1)


def ece(probs, labels, n_bins: int = 15) -> float:
    """Expected calibration error over ``n_bins`` equal-width confidence bins."""
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    p, y = _probs_labels(probs, labels)
    if len(y) == 0:
        return 0.0
    conf = p.max(axis=1)
    correct = (np.argmax(p, axis=1) == y).astype(np.float64)
    idx = _bin_index(conf, n_bins)
    total = 0.0
    for m in range(n_bins):
        mask = idx == m
        if mask.any():
            total += mask.mean() * abs(correct[mask].mean() - conf[mask].mean())
    return float(total)


def reliability_table(probs, labels, n_bins: int = 15):
    """Per-bin ``(lower, upper, count, accuracy, confidence)`` rows for plotting."""
    p, y = _probs_labels(probs, labels)
    conf = p.max(axis=1)
    correct = (np.argmax(p, axis=1) == y).astype(np.float64)
    idx = _bin_index(conf, n_bins)
    rows = []
    for m in range(n_bins):
        mask = idx == m
        n = int(mask.sum())
        rows.append((m / n_bins, (m + 1) / n_bins, n,
                     float(correct[mask].mean()) if n else float("nan"),
                     float(conf[mask].mean()) if n else float("nan")))
    return rows


@dataclass
class EntropySummary:
    entropies: np.ndarray
    bin_edges: np.ndarray
    counts: np.ndarray
    cdf_x: np.ndarray
    cdf_y: np.ndarray

    @property
    def mean(self) -> float:
        return float(self.entropies.mean()) if len(self.entropies) else 0.0


def entropy(probs, normalize_by_classes: bool = False) -> np.ndarray:
    """Row-wise Shannon entropy in nats; ``0 log 0 = 0``.

    With ``normalize_by_classes`` the sum is divided by the number of classes.
    """
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 2:
        raise ValueError("probs must be 2-d")
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, -p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    h = np.maximum(terms.sum(axis=1), 0.0)
    return h / p.shape[1] if normalize_by_classes else h


def predictive_entropy(probs, n_bins: int = 20, normalize_by_classes: bool = False) -> EntropySummary:
    """Entropies with a fixed-range histogram and the empirical CDF.

    The histogram spans ``[0, log C]`` (or ``[0, log C / C]`` when normalized)
    so histograms from different models share bin edges.
    """
    p = np.asarray(probs, dtype=np.float64)
    h = entropy(p, normalize_by_classes)
    upper = math.log(p.shape[1]) if p.shape[1] > 1 else 1.0
    if normalize_by_classes:
        upper /= p.shape[1]
    edges = np.linspace(0.0, upper, n_bins + 1)
    counts, _ = np.histogram(np.clip(h, 0.0, upper), bins=edges)
    xs = np.sort(h)
    ys = np.arange(1, len(xs) + 1) / max(len(xs), 1)
    return EntropySummary(h, edges, counts, xs, ys)


def max_softmax(probs) -> np.ndarray:
    return np.asarray(probs, dtype=np.float64).max(axis=1)


def _check_scores(scores_in, scores_out):
    s_in = np.asarray(scores_in, dtype=np.float64).ravel()
    s_out = np.asarray(scores_out, dtype=np.float64).ravel()
    if len(s_in) == 0 or len(s_out) == 0:
        raise ValueError("both score sets must be nonempty")
    return s_in, s_out


def auroc(scores_in, scores_out) -> float:
    """P(score_in > score_out) + 0.5 P(tie), from average ranks."""
    s_in, s_out = _check_scores(scores_in, scores_out)
    from scipy.stats import rankdata

    ranks = rankdata(np.concatenate([s_in, s_out]))
    n_in, n_out = len(s_in), len(s_out)
    u = ranks[:n_in].sum() - n_in * (n_in + 1) / 2.0
    return float(u / (n_in * n_out))


def _pr_curve(pos, neg):
    """Precision/recall at every distinct threshold, positive when ``score >= t``."""
    thresholds = np.unique(np.concatenate([pos, neg]))[::-1]
    recall = [0.0]
    precision = [1.0]
    for t in thresholds:
        tp = np.sum(pos >= t)
        fp = np.sum(neg >= t)
        recall.append(tp / len(pos))
        precision.append(tp / (tp + fp))
    return np.asarray(recall), np.asarray(precision)


def aupr(pos_scores, neg_scores) -> float:
    r, p = _pr_curve(np.asarray(pos_scores, float), np.asarray(neg_scores, float))
    return float(_trapezoid(p, r))


def fpr_at_tpr(scores_in, scores_out, tpr_target: float = 0.95) -> float:
    """Smallest false-positive rate over thresholds whose TPR reaches the target."""
    s_in, s_out = _check_scores(scores_in, scores_out)
    best = 1.0
    for t in np.unique(np.concatenate([s_in, s_out])):
        tpr = np.mean(s_in >= t)
        if tpr >= tpr_target:
            best = min(best, float(np.mean(s_out >= t)))
    return best


def detection_error(scores_in, scores_out) -> float:
    """``min_t 0.5 P_in(q <= t) + 0.5 P_out(q > t)`` over ``t`` in {-inf} and all scores."""
    s_in, s_out = _check_scores(scores_in, scores_out)
    best = 0.5  # t = -inf: everything called "in"
    for t in np.unique(np.concatenate([s_in, s_out])):
        err = 0.5 * np.mean(s_in <= t) + 0.5 * np.mean(s_out > t)
        best = min(best, float(err))
    return best


def ood_metrics(scores_in, scores_out) -> dict:
    s_in, s_out = _check_scores(scores_in, scores_out)
    return {
        "auroc": auroc(s_in, s_out),
        "aupr_in": aupr(s_in, s_out),
        # out-of-distribution as the positive class, so lower score means "more positive"
        "aupr_out": aupr(-s_out, -s_in),
        "fpr_at_95_tpr": fpr_at_tpr(s_in, s_out, 0.95),
        "detection_error": detection_error(s_in, s_out),
    }


def regression_metrics(pred_mean, pred_var, targets) -> dict:
    mean = np.asarray(pred_mean, dtype=np.float64).ravel()
    var = np.asarray(pred_var, dtype=np.float64).ravel()
    y = np.asarray(targets, dtype=np.float64).ravel()
    if not (len(mean) == len(var) == len(y)):
        raise ValueError("pred_mean, pred_var and targets must have equal length")
    if np.any(var <= 0):
        raise ValueError("predictive variances must be positive")
    resid = y - mean
    ll = -0.5 * (np.log(2 * np.pi * var) + resid ** 2 / var)
    return {"rmse": float(np.sqrt(np.mean(resid ** 2))), "gaussian_pred_ll": float(np.mean(ll))}


@dataclass
class MetricsReport:
    """Serializable bag of metrics. Unset fields stay ``None`` and are omitted."""

    nll: float | None = None
    error_rate: float | None = None
    ece: float | None = None
    mean_predictive_entropy: float | None = None
    entropy_histogram: dict | None = None
    auroc: float | None = None
    aupr_in: float | None = None
    aupr_out: float | None = None
    fpr_at_95_tpr: float | None = None
    detection_error: float | None = None
    rmse: float | None = None
    gaussian_pred_ll: float | None = None
    diagnostics: dict | None = None
    meta: dict = field(default_factory=dict)

    _RATES = ("error_rate", "ece", "auroc", "aupr_in", "aupr_out", "fpr_at_95_tpr", "detection_error")

    def __post_init__(self):
        for name in self._RATES:
            v = getattr(self, name)
            if v is not None and not (0.0 <= v <= 1.0):
                raise ValueError(f"{name}={v} outside [0, 1]")
        if self.mean_predictive_entropy is not None and self.mean_predictive_entropy < 0:
            raise ValueError("mean_predictive_entropy must be >= 0")

    def to_dict(self) -> dict:
        out = {"schema_version": SCHEMA_VERSION}
        for f in fields(self):
            v = getattr(self, f.name)
            if v is None or (f.name == "meta" and not v):
                continue
            out[f.name] = v
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        d = dict(d)
        version = d.pop("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ValueError(f"unsupported report schema_version {version}")
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown report keys: {sorted(unknown)}")
        return cls(**d)

    def scalar_items(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, (int, float)) and not isinstance(v, bool):
                yield f.name, v

    def to_csv(self) -> str:
        """Two-column ``metric,value`` table of the scalar fields."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "value"])
        for name, v in self.scalar_items():
            w.writerow([name, repr(float(v))])
        return buf.getvalue()


def classification_report(probs, labels, n_bins: int = 15, entropy_bins: int = 20,
                          normalize_entropy: bool = False) -> MetricsReport:
    ent = predictive_entropy(probs, entropy_bins, normalize_entropy)
    return MetricsReport(
        nll=nll(probs, labels), error_rate=error_rate(probs, labels), ece=ece(probs, labels, n_bins),
        mean_predictive_entropy=ent.mean,
        entropy_histogram={"bin_edges": ent.bin_edges.tolist(), "counts": ent.counts.tolist()},
    )


__all__ = [
    "nll", "error_rate", "ece", "reliability_table", "entropy", "predictive_entropy", "EntropySummary",
    "max_softmax", "auroc", "aupr", "fpr_at_tpr", "detection_error", "ood_metrics",
    "regression_metrics", "MetricsReport", "classification_report", "SCHEMA_VERSION",
]
