"""Evaluation metrics for binary and multiclass tasks, and a paired Wilcoxon test."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np


class MetricError(ValueError):
    """A metric is undefined for the given input."""


def predict(probs: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, so ties go to the lower class index
    return np.argmax(np.asarray(probs), axis=1)


def confusion_matrix(y_true, y_pred, num_cls: int) -> np.ndarray:
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    cm = np.zeros((num_cls, num_cls), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


@dataclass
class BinaryRates:
    SEN: float
    SPE: float
    ACC: float
    G_mean: float
    Ba_ACC: float


def binary_rates(probs, labels) -> BinaryRates:
    """Rates for the positive class 1, predicting the larger-probability class."""
    labels = np.asarray(labels, dtype=np.int64)
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim == 1:
        probs = np.column_stack([1.0 - probs, probs])
    if set(np.unique(labels)) - {0, 1}:
        raise MetricError("binary labels must be 0 or 1")
    if np.all(labels == labels[0]):
        raise MetricError("only one class present; SEN or SPE is undefined")
    pred = predict(probs)
    (tn, fp), (fn, tp) = confusion_matrix(labels, pred, 2)
    return rates_from_counts(tp=tp, fn=fn, tn=tn, fp=fp)


def rates_from_counts(tp: int, fn: int, tn: int, fp: int) -> BinaryRates:
    tp, fn, tn, fp = int(tp), int(fn), int(tn), int(fp)
    if tp + fn == 0 or tn + fp == 0:
        raise MetricError("only one class present; SEN or SPE is undefined")
    sen = tp / (tp + fn)
    spe = tn / (tn + fp)
    return BinaryRates(
        SEN=sen,
        SPE=spe,
        ACC=(tp + tn) / (tp + tn + fp + fn),
        G_mean=math.sqrt(sen * spe),
        Ba_ACC=(sen + spe) / 2.0,
    )


def _check_two_classes(labels: np.ndarray) -> None:
    if labels.size == 0 or np.all(labels == labels[0]):
        raise MetricError("both classes must be present")


def auc_roc(scores, labels) -> float:
    """Mann-Whitney AUC: P(score_pos > score_neg) + 0.5 P(tie)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    _check_two_classes(labels)
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = labels.size - n_pos
    ranks = _average_ranks(scores)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auprc(scores, labels) -> float:
    """Average precision: sum over thresholds of (recall step) x precision."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    _check_two_classes(labels)
    order = np.argsort(-scores, kind="mergesort")
    s = scores[order]
    hits = (labels[order] == 1).astype(np.float64)
    tp = np.cumsum(hits)
    fp = np.cumsum(1.0 - hits)
    # keep the last index of each run of tied scores
    last = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    tp, fp = tp[last], fp[last]
    precision = tp / (tp + fp)
    recall = tp / tp[-1]
    steps = np.diff(np.r_[0.0, recall])
    return float(np.sum(steps * precision))


def _average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties assigned their average rank."""
    order = np.argsort(values, kind="mergesort")
    sorted_vals = values[order]
    ranks = np.empty(values.size, dtype=np.float64)
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


@dataclass
class MulticlassReport:
    ACC: float
    per_class_ACC: list[float]
    weighted_F1: float
    macro_F1: float
    AUC: float
    empty_classes: list[int] = field(default_factory=list)


def multiclass_report(probs, labels) -> MulticlassReport:
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if not np.allclose(probs.sum(axis=1), 1.0, atol=1e-6):
        raise MetricError("probability rows must sum to 1")
    C = probs.shape[1]
    cm = confusion_matrix(labels, predict(probs), C)
    support = cm.sum(axis=1)
    predicted = cm.sum(axis=0)
    tp = np.diag(cm).astype(np.float64)
    empty = [c for c in range(C) if support[c] == 0]
    recall = np.divide(tp, support, out=np.zeros(C), where=support > 0)
    precision = np.divide(tp, predicted, out=np.zeros(C), where=predicted > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros(C), where=denom > 0)
    aucs = [auc_roc(probs[:, c], (labels == c).astype(np.int64)) for c in range(C) if c not in empty]
    return MulticlassReport(
        ACC=float(tp.sum() / labels.size),
        per_class_ACC=[float(r) for r in recall],
        weighted_F1=float(np.sum(f1 * support) / support.sum()),
        macro_F1=float(f1.mean()),
        AUC=float(np.mean(aucs)) if len(aucs) >= 2 else float("nan"),
        empty_classes=empty,
    )


# --- reports ------------------------------------------------------------

BINARY_FIELDS = ["SEN", "SPE", "ACC", "G_mean", "Ba_ACC", "AUPRC", "AUC"]


@dataclass
class MetricsReport:
    """Flat bag of metrics; unused fields stay ``None``."""

    task: str = "binary"
    n: int = 0
    SEN: float | None = None
    SPE: float | None = None
    ACC: float | None = None
    G_mean: float | None = None
    Ba_ACC: float | None = None
    AUPRC: float | None = None
    AUC: float | None = None
    per_class_ACC: list[float] | None = None
    weighted_F1: float | None = None
    macro_F1: float | None = None

    def flat(self) -> dict:
        d = asdict(self)
        pcs = d.pop("per_class_ACC")
        if pcs is not None:
            for c, v in enumerate(pcs):
                d[f"ACC_class{c}"] = v
        return {k: v for k, v in d.items() if v is not None}

    def scalar_metrics(self) -> dict[str, float]:
        return {k: v for k, v in self.flat().items() if k not in ("task", "n")}

    def to_json(self) -> str:
        return json.dumps(self.flat(), indent=2, sort_keys=True)

    def to_csv_row(self) -> str:
        flat = self.flat()
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=list(flat), lineterminator="\n")
        w.writeheader()
        w.writerow(flat)
        return buf.getvalue()


def evaluate_probs(probs, labels) -> MetricsReport:
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if probs.shape[1] == 2:
        r = binary_rates(probs, labels)
        return MetricsReport(
            task="binary", n=int(labels.size), SEN=r.SEN, SPE=r.SPE, ACC=r.ACC,
            G_mean=r.G_mean, Ba_ACC=r.Ba_ACC,
            AUPRC=auprc(probs[:, 1], labels), AUC=auc_roc(probs[:, 1], labels),
        )
    m = multiclass_report(probs, labels)
    return MetricsReport(
        task="multiclass", n=int(labels.size), ACC=m.ACC, per_class_ACC=m.per_class_ACC,
        weighted_F1=m.weighted_F1, macro_F1=m.macro_F1, AUC=m.AUC,
    )


def mean_std(reports: list[MetricsReport]) -> dict[str, tuple[float, float]]:
    """Mean and population std of every scalar metric across runs."""
    keys = list(reports[0].scalar_metrics())
    out = {}
    for k in keys:
        vals = np.array([r.scalar_metrics()[k] for r in reports], dtype=np.float64)
        out[k] = (float(vals.mean()), float(vals.std()))
    return out


# --- Wilcoxon signed-rank -------------------------------------------------

EXACT_MAX_N = 12


@dataclass
class WilcoxonResult:
    statistic: float  # min(W+, W-)
    w_plus: float
    w_minus: float
    pvalue: float
    n: int
    method: str


def _exact_two_sided(ranks: np.ndarray, w_plus: float) -> float:
    """P(|W+ - mean| >= |observed - mean|) under random signs, by counting.

    Ranks may be half-integers (ties), so the rank sums are doubled to stay
    integral and counted with a subset-sum table.
    """
    r2 = np.rint(2 * ranks).astype(np.int64)
    total = int(r2.sum())
    counts = np.zeros(total + 1, dtype=object)
    counts[0] = 1
    for r in r2:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[:total + 1 - r]
        counts = counts + shifted
    obs = int(round(2 * w_plus))
    dev = abs(2 * obs - total)
    sums = np.arange(total + 1)
    extreme = np.abs(2 * sums - total) >= dev
    return float(sum(counts[extreme])) / float(2 ** ranks.size)


def wilcoxon_signed_rank(a, b, method: str = "auto") -> WilcoxonResult:
    """Two-sided paired Wilcoxon signed-rank test on ``a - b``.

    Zero differences are dropped. ``method`` is ``"exact"``, ``"normal"`` or
    ``"auto"`` (exact for n <= 12).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("paired samples must have equal length")
    d = a - b
    d = d[d != 0]
    n = d.size
    if n == 0:
        raise MetricError("degenerate pairs: every difference is zero")
    if n < 5:
        raise MetricError(f"need at least 5 nonzero differences, got {n}")
    ranks = _average_ranks(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    if method == "auto":
        method = "exact" if n <= EXACT_MAX_N else "normal"
    if method == "exact":
        p = _exact_two_sided(ranks, w_plus)
    elif method == "normal":
        _, tie_counts = np.unique(np.abs(d), return_counts=True)
        var = n * (n + 1) * (2 * n + 1) / 24.0 - np.sum(tie_counts ** 3 - tie_counts) / 48.0
        mean = n * (n + 1) / 4.0
        dev = abs(w_plus - mean)
        z = max(dev - 0.5, 0.0) / math.sqrt(var) if var > 0 else 0.0
        p = math.erfc(z / math.sqrt(2.0))
    else:
        raise ValueError(f"unknown method {method!r}")
    return WilcoxonResult(statistic=min(w_plus, w_minus), w_plus=w_plus, w_minus=w_minus,
                          pvalue=min(1.0, p), n=n, method=method)
