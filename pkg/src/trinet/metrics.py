"""Screening evaluation: confusion matrices, rates, ROC/AUC, PPV-maximizing
threshold selection, per-class feature distributions and literature benchmarks.

Undefined rates (zero denominators) are returned as ``None``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import CONTINUOUS_FEATURES, Dataset


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass(frozen=True)
class Rates:
    ppv: float | None
    tpr: float | None
    tnr: float | None
    fpr: float | None


@dataclass(frozen=True)
class RocCurve:
    fpr: tuple[float, ...]
    tpr: tuple[float, ...]
    thresholds: tuple[float, ...]
    auc: float


def _check(probs, labels):
    probs = np.asarray(probs, dtype=float)
    labels = np.asarray(labels).astype(int)
    if probs.shape != labels.shape or probs.ndim != 1:
        raise ValueError(f"length mismatch: {probs.shape} scores vs {labels.shape} labels")
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be 0/1")
    return probs, labels


def confusion(probs, labels, threshold: float) -> ConfusionMatrix:
    """Predicted positive iff ``prob >= threshold``."""
    probs, labels = _check(probs, labels)
    if probs.size == 0:
        raise ValueError("need at least one prediction")
    pred = probs >= threshold
    pos = labels == 1
    return ConfusionMatrix(
        tp=int(np.sum(pred & pos)),
        fp=int(np.sum(pred & ~pos)),
        tn=int(np.sum(~pred & ~pos)),
        fn=int(np.sum(~pred & pos)),
    )


def _ratio(num, den):
    return num / den if den else None


def rates(cm: ConfusionMatrix) -> Rates:
    tnr = _ratio(cm.tn, cm.tn + cm.fp)
    return Rates(
        ppv=_ratio(cm.tp, cm.tp + cm.fp),
        tpr=_ratio(cm.tp, cm.tp + cm.fn),
        tnr=tnr,
        fpr=None if tnr is None else 1.0 - tnr,
    )


def roc_auc(probs, labels) -> RocCurve:
    """ROC points with tied scores grouped into one step; AUC by trapezoid."""
    probs, labels = _check(probs, labels)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs both classes present")
    order = np.argsort(-probs, kind="stable")
    s, y = probs[order], labels[order]
    # last index of each run of equal scores
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp = np.r_[0, np.cumsum(y)[ends]]
    fp = np.r_[0, np.cumsum(1 - y)[ends]]
    # integer trapezoid sum, scaled once
    area2 = int(np.sum((fp[1:] - fp[:-1]) * (tp[1:] + tp[:-1])))
    auc = area2 / (2 * n_pos * n_neg)
    return RocCurve(
        fpr=tuple((fp / n_neg).tolist()),
        tpr=tuple((tp / n_pos).tolist()),
        thresholds=(np.inf, *s[ends].tolist()),
        auc=auc,
    )


@dataclass(frozen=True)
class ThresholdChoice:
    threshold: float
    ppv: float
    tpr: float
    predicted_positives: int


class NoFeasibleThreshold(ValueError):
    pass


def threshold_candidates(probs) -> np.ndarray:
    """Midpoints between consecutive distinct scores, plus one sentinel below and above."""
    u = np.unique(np.asarray(probs, dtype=float))
    return np.r_[u[0] - 1.0, (u[1:] + u[:-1]) / 2.0, u[-1] + 1.0]


def sweep_thresholds(probs, labels):
    """Yield ``(threshold, tp, fp)`` for every candidate threshold, descending."""
    probs, labels = _check(probs, labels)
    cands = threshold_candidates(probs)[::-1]
    order = np.argsort(-probs, kind="stable")
    s, y = probs[order], labels[order]
    # number of scores >= each candidate
    counts = np.searchsorted(-s, -cands, side="right")
    ctp = np.r_[0, np.cumsum(y)]
    for t, c in zip(cands, counts):
        yield float(t), int(ctp[c]), int(c - ctp[c])


def select_threshold_max_ppv(
    val_probs, val_labels, min_predicted_positives: int = 10, min_tpr: float = 0.05
) -> ThresholdChoice:
    """Highest-PPV threshold subject to a minimum positive count and sensitivity.

    Ties go to higher TPR, then to the lower threshold.
    """
    probs, labels = _check(val_probs, val_labels)
    n_pos = int(labels.sum())
    if n_pos == 0 or n_pos == labels.size:
        raise ValueError("threshold selection needs both classes in the validation set")

    best, best_key = None, None
    loose, loose_key = None, None
    for t, tp, fp in sweep_thresholds(probs, labels):
        if tp + fp == 0:
            continue
        ppv, tpr = tp / (tp + fp), tp / n_pos
        key = (ppv, tpr, -t)
        if loose_key is None or key > loose_key:
            loose, loose_key = ThresholdChoice(t, ppv, tpr, tp + fp), key
        if tp + fp >= min_predicted_positives and tpr >= min_tpr:
            if best_key is None or key > best_key:
                best, best_key = ThresholdChoice(t, ppv, tpr, tp + fp), key
    if best is None:
        raise NoFeasibleThreshold(
            f"no threshold has >= {min_predicted_positives} predicted positives and "
            f"TPR >= {min_tpr}; best unconstrained: threshold={loose.threshold:.6g} "
            f"PPV={loose.ppv:.4f} TPR={loose.tpr:.4f} ({loose.predicted_positives} positives)"
        )
    return best


@dataclass(frozen=True)
class Distribution:
    n: int
    min: float
    q1: float
    median: float
    q3: float
    max: float
    bin_edges: tuple[float, ...]
    counts: tuple[int, ...]


def feature_distribution(ds: Dataset, feature: str, bins: int = 20) -> dict[int, Distribution]:
    """Five-number summary and histogram of a continuous feature, per class label."""
    if feature not in CONTINUOUS_FEATURES:
        raise ValueError(f"{feature!r} is not a continuous feature")
    values = {0: [], 1: []}
    for lr in ds.records:
        v = getattr(lr.record, feature)
        if v is not None:
            values[lr.label].append(v)
    for cls, vals in values.items():
        if not vals:
            raise ValueError(f"class {cls} has no observed values for {feature}")
    pooled = np.concatenate([np.asarray(v, dtype=float) for v in values.values()])
    lo, hi = float(pooled.min()), float(pooled.max())
    edges = np.linspace(lo, hi, bins + 1) if hi > lo else np.linspace(lo - 0.5, hi + 0.5, bins + 1)
    out = {}
    for cls in (0, 1):
        v = np.asarray(values[cls], dtype=float)
        q = np.percentile(v, [0, 25, 50, 75, 100])
        counts, _ = np.histogram(v, bins=edges)
        out[cls] = Distribution(
            n=v.size, min=float(q[0]), q1=float(q[1]), median=float(q[2]), q3=float(q[3]),
            max=float(q[4]), bin_edges=tuple(edges.tolist()), counts=tuple(counts.tolist()),
        )
    return out


# (condition, method) -> (PPV, TNR, TPR); None where the source reports nothing
BENCHMARKS = {
    ("pneumonia", "trinet"): (0.86, 0.97, 0.13),
    ("pneumonia", "physician"): (0.27, 0.84, 0.74),
    ("pneumonia", "khalil2007"): (0.30, 0.76, 0.90),
    ("pneumonia", "jones2012"): (0.51, None, 0.74),
    ("uti", "trinet"): (0.93, 0.97, 0.25),
    ("uti", "physician"): (0.77, 0.69, 0.65),
}


@dataclass(frozen=True)
class Benchmark:
    ppv: float | None
    tnr: float | None
    tpr: float | None


def benchmark_table() -> dict[tuple[str, str], Benchmark]:
    return {key: Benchmark(*vals) for key, vals in BENCHMARKS.items()}


def benchmark(condition: str, method: str) -> Benchmark | None:
    """Published rates for ``method`` on ``condition``, or None if not reported."""
    vals = BENCHMARKS.get((condition, method))
    return None if vals is None else Benchmark(*vals)
