"""Evaluation protocol: discrimination, calibration, bootstrap CIs, veto metrics.

AUROC follows the Mann-Whitney convention (ties count 1/2). AUPRC is the
step-wise area over descending-score thresholds with tied scores grouped at
one threshold. ECE uses equal-width bins, left-closed right-open with the
last bin closed. Bootstrap CIs are percentile intervals over resampled
samples (rows), so the within-sample correlation across labels is preserved;
resample i draws its indices from a generator seeded with seed + i, making
serial and parallel evaluation agree bitwise.

The veto metrics compare a baseline model with a treated model on aligned
predictions: PVR is the fraction of the baseline's high-confidence false
positives (p >= 0.8 on negatives) pushed below 0.5 by the treated model; TSR
is the fraction of true positives below 0.5 under the treated model; veto
selectivity is PVR / TSR (an infinite sentinel when TSR is 0).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import io

logger = logging.getLogger(__name__)

PVR_CONFIDENCE = 0.8
DECISION_THRESHOLD = 0.5
PVR_MIN_COUNT = 5


class SingleClassError(ValueError):
    """The label has only one class present; the metric is undefined."""


@dataclass
class PredictionSet:
    """Aligned per-sample, per-label targets and probabilities for one model."""

    sample_ids: list[str]
    labels: list[str]
    y: np.ndarray  # (n, L), values 0/1/nan (nan = missing)
    p: np.ndarray  # (n, L), probabilities in (0, 1)
    model_id: str = ""

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.float64)
        self.p = np.asarray(self.p, dtype=np.float64)
        n, l = len(self.sample_ids), len(self.labels)
        if self.y.shape != (n, l) or self.p.shape != (n, l):
            raise ValueError(
                f"prediction arrays {self.y.shape}/{self.p.shape} inconsistent with {n} samples x {l} labels"
            )

    @property
    def n(self) -> int:
        return len(self.sample_ids)

    def take(self, indices: np.ndarray) -> "PredictionSet":
        return PredictionSet(
            sample_ids=[self.sample_ids[i] for i in indices],
            labels=self.labels,
            y=self.y[indices],
            p=self.p[indices],
            model_id=self.model_id,
        )

    def column(self, label: str) -> tuple[np.ndarray, np.ndarray]:
        """Observed (y, p) pairs for one label, missing rows dropped."""
        j = self.labels.index(label)
        observed = ~np.isnan(self.y[:, j])
        return self.y[observed, j], self.p[observed, j]

    def to_csv(self, path: str) -> None:
        rows = []
        for i, sid in enumerate(self.sample_ids):
            for j, label in enumerate(self.labels):
                y = self.y[i, j]
                rows.append((sid, label, None if math.isnan(y) else int(y), float(self.p[i, j])))
        io.write_csv(path, ["sample_id", "label", "y", "p_model"], rows)

    @classmethod
    def from_csv(cls, path: str, model_id: str = "") -> "PredictionSet":
        header, rows = io.read_csv(path)
        assert header == ["sample_id", "label", "y", "p_model"]
        ids: list[str] = []
        labels: list[str] = []
        cells: dict[tuple[str, str], tuple[float, float]] = {}
        for sid, label, y, p in rows:
            if sid not in ids:
                ids.append(sid)
            if label not in labels:
                labels.append(label)
            cells[(sid, label)] = (float("nan") if y == "NA" else float(y), float(p))
        y_arr = np.full((len(ids), len(labels)), np.nan)
        p_arr = np.full((len(ids), len(labels)), np.nan)
        for (sid, label), (y, p) in cells.items():
            y_arr[ids.index(sid), labels.index(label)] = y
            p_arr[ids.index(sid), labels.index(label)] = p
        return cls(sample_ids=ids, labels=labels, y=y_arr, p=p_arr, model_id=model_id)


def _average_ranks(scores: np.ndarray) -> np.ndarray:
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(scores.size, dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0  # average 1-based rank
        i = j + 1
    return ranks


def auroc(scores: np.ndarray, labels: np.ndarray) -> float:
    """P(random positive outranks random negative), ties counted 1/2."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise SingleClassError(f"need both classes, got {n_pos} positives / {n_neg} negatives")
    ranks = _average_ranks(scores)
    rank_sum = ranks[labels == 1].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def auprc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Step-wise area under precision-recall, tied scores grouped per threshold."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    if n_pos == 0:
        raise SingleClassError("AUPRC undefined without positives")
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    y = labels[order]
    area = 0.0
    tp = 0
    fp = 0
    prev_recall = 0.0
    i = 0
    n = scores.size
    while i < n:
        j = i
        while j + 1 < n and s[j + 1] == s[i]:
            j += 1
        tp += int((y[i : j + 1] == 1).sum())
        fp += int((y[i : j + 1] == 0).sum())
        recall = tp / n_pos
        precision = tp / (tp + fp)
        area += (recall - prev_recall) * precision
        prev_recall = recall
        i = j + 1
    return float(area)


def ece(probs: np.ndarray, labels: np.ndarray, bins: int = 10) -> float:
    """Expected calibration error over equal-width bins [0,.1), ..., [.9,1]."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if probs.size == 0:
        return 0.0
    if probs.min() < 0.0 or probs.max() > 1.0:
        raise ValueError("probabilities outside [0, 1]")
    idx = np.minimum((probs * bins).astype(int), bins - 1)
    total = probs.size
    value = 0.0
    for b in range(bins):
        sel = idx == b
        n_b = int(sel.sum())
        if n_b == 0:
            continue
        acc = labels[sel].mean()
        conf = probs[sel].mean()
        value += (n_b / total) * abs(acc - conf)
    return float(value)


def macro_metric(pset: PredictionSet, per_label_fn) -> tuple[float, dict[str, float]]:
    """Mean of a per-label metric; single-class labels are excluded with a warning."""
    values: dict[str, float] = {}
    for label in pset.labels:
        y, p = pset.column(label)
        try:
            values[label] = per_label_fn(p, y)
        except SingleClassError:
            logger.warning("label %r excluded from macro average (single class)", label)
    macro = float(np.mean(list(values.values()))) if values else float("nan")
    return macro, values


def macro_auroc(pset: PredictionSet) -> float:
    return macro_metric(pset, lambda p, y: auroc(p, y))[0]


def macro_auprc(pset: PredictionSet) -> float:
    return macro_metric(pset, lambda p, y: auprc(p, y))[0]


def macro_ece(pset: PredictionSet, bins: int = 10) -> float:
    return macro_metric(pset, lambda p, y: ece(p, y, bins))[0]


def bootstrap_ci(
    metric_fn,
    pset: PredictionSet,
    n_resamples: int = 1000,
    level: float = 0.95,
    seed: int = 0,
) -> tuple[float, float]:
    """Percentile CI from resampling whole samples (rows) with replacement.

    Resample i uses np.random.default_rng(seed + i), so results do not depend
    on evaluation order. Resamples where the metric degenerates (e.g. every
    label single-class) are dropped from the percentile computation.
    """
    if pset.n == 0:
        raise ValueError("empty prediction set")
    values = []
    for i in range(n_resamples):
        rng = np.random.default_rng(seed + i)
        idx = rng.integers(0, pset.n, size=pset.n)
        v = metric_fn(pset.take(idx))
        if not math.isnan(v):
            values.append(v)
    alpha = (1.0 - level) / 2.0
    lo, hi = np.percentile(values, [100.0 * alpha, 100.0 * (1.0 - alpha)])
    return float(lo), float(hi)


# -- veto metrics -------------------------------------------------------------


def _check_aligned(baseline: PredictionSet, treated: PredictionSet) -> None:
    if baseline.sample_ids != treated.sample_ids or baseline.labels != treated.labels:
        raise ValueError("prediction sets are not aligned (sample ids / labels differ)")


@dataclass
class VetoReport:
    per_label_pvr: dict[str, float]
    per_label_counts: dict[str, int]
    macro_pvr: float | None
    per_label_tsr: dict[str, float] = field(default_factory=dict)
    per_label_selectivity: dict[str, float] = field(default_factory=dict)
    macro_tsr: float | None = None
    macro_selectivity: float | None = None


def pvr(
    baseline: PredictionSet,
    treated: PredictionSet,
    conf: float = PVR_CONFIDENCE,
    thresh: float = DECISION_THRESHOLD,
    min_count: int = PVR_MIN_COUNT,
) -> VetoReport:
    """Fraction of baseline high-confidence false positives suppressed below thresh.

    The macro averages labels whose qualifying set has at least ``min_count``
    members; if no label qualifies the macro is None (empty-report signal).
    """
    _check_aligned(baseline, treated)
    per_label: dict[str, float] = {}
    counts: dict[str, int] = {}
    for j, label in enumerate(baseline.labels):
        observed = ~np.isnan(baseline.y[:, j])
        y = baseline.y[observed, j]
        pb = baseline.p[observed, j]
        pt = treated.p[observed, j]
        qualifying = (y == 0) & (pb >= conf)
        counts[label] = int(qualifying.sum())
        if counts[label] > 0:
            per_label[label] = float((pt[qualifying] < thresh).mean())
    eligible = [per_label[l] for l in per_label if counts[l] >= min_count]
    if eligible:
        macro = float(np.mean(eligible))
    else:
        macro = None
        logger.warning("PVR: no label has >= %d qualifying false positives", min_count)
    return VetoReport(per_label_pvr=per_label, per_label_counts=counts, macro_pvr=macro)


def tsr_and_selectivity(
    baseline: PredictionSet,
    treated: PredictionSet,
    thresh: float = DECISION_THRESHOLD,
    conf: float = PVR_CONFIDENCE,
    min_count: int = PVR_MIN_COUNT,
) -> VetoReport:
    """True-positive suppression rate and PVR/TSR selectivity per label and macro."""
    _check_aligned(baseline, treated)
    report = pvr(baseline, treated, conf=conf, thresh=thresh, min_count=min_count)
    for j, label in enumerate(treated.labels):
        observed = ~np.isnan(treated.y[:, j])
        y = treated.y[observed, j]
        pt = treated.p[observed, j]
        positives = y == 1
        if not positives.any():
            logger.warning("TSR: label %r skipped (no positives)", label)
            continue
        tsr = float((pt[positives] < thresh).mean())
        report.per_label_tsr[label] = tsr
        if label in report.per_label_pvr:
            report.per_label_selectivity[label] = (
                report.per_label_pvr[label] / tsr if tsr > 0 else math.inf
            )
    if report.per_label_tsr:
        report.macro_tsr = float(np.mean(list(report.per_label_tsr.values())))
        if report.macro_pvr is not None:
            report.macro_selectivity = (
                report.macro_pvr / report.macro_tsr if report.macro_tsr > 0 else math.inf
            )
    return report


# -- report assembly -----------------------------------------------------------


@dataclass
class MetricReport:
    model_id: str
    per_label: dict[str, dict[str, tuple[float, float, float]]]  # label -> metric -> (value, lo, hi)
    macro: dict[str, tuple[float, float, float]]

    def to_json_dict(self) -> dict:
        return {
            "model_id": self.model_id,
            "per_label": {
                label: {m: {"value": v[0], "ci_lo": v[1], "ci_hi": v[2]} for m, v in metrics.items()}
                for label, metrics in self.per_label.items()
            },
            "macro": {m: {"value": v[0], "ci_lo": v[1], "ci_hi": v[2]} for m, v in self.macro.items()},
        }

    def rows(self) -> list[tuple]:
        out = []
        for metric, (value, lo, hi) in sorted(self.macro.items()):
            out.append(("macro", metric, value, lo, hi))
        for label in sorted(self.per_label):
            for metric, (value, lo, hi) in sorted(self.per_label[label].items()):
                out.append((label, metric, value, lo, hi))
        return out

    def write(self, base_path: str) -> None:
        io.dump_json(self.to_json_dict(), base_path + ".json")
        io.write_csv(base_path + ".csv", ["label", "metric", "value", "ci_lo", "ci_hi"], self.rows())


def evaluate_predictions(
    pset: PredictionSet,
    n_resamples: int = 1000,
    bins: int = 10,
    seed: int = 0,
) -> MetricReport:
    """Point estimates plus bootstrap CIs for AUROC/AUPRC/ECE, per label and macro."""
    macro_fns = {
        "auroc": macro_auroc,
        "auprc": macro_auprc,
        "ece": lambda ps: macro_ece(ps, bins),
    }
    macro: dict[str, tuple[float, float, float]] = {}
    for name, fn in macro_fns.items():
        point = fn(pset)
        lo, hi = bootstrap_ci(fn, pset, n_resamples=n_resamples, seed=seed)
        macro[name] = (point, lo, hi)
    per_label: dict[str, dict[str, tuple[float, float, float]]] = {}
    for label in pset.labels:
        per_label[label] = {}
        for name, base_fn in (("auroc", auroc), ("auprc", auprc), ("ece", lambda p, y: ece(p, y, bins))):
            def label_fn(ps, label=label, base_fn=base_fn):
                y, p = ps.column(label)
                try:
                    return base_fn(p, y)
                except SingleClassError:
                    return float("nan")

            point = label_fn(pset)
            if math.isnan(point):
                continue
            lo, hi = bootstrap_ci(label_fn, pset, n_resamples=n_resamples, seed=seed)
            per_label[label][name] = (point, lo, hi)
    return MetricReport(model_id=pset.model_id, per_label=per_label, macro=macro)
