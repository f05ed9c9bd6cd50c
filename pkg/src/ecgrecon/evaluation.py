"""Fidelity metrics, per-class breakdowns, and k-NN class affinity.

All metrics run in double precision. Undefined cases (constant target
for R^2/Pearson) raise rather than returning 0; report assembly records
them as missing.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .dataset import TARGET_LEADS, segment_record_nonoverlap
from .errors import DataError, MetricUndefinedError
from .reconstruction import reconstruct_record, reconstruct_segments


def rmse(y_hat, y):
    y_hat, y = np.asarray(y_hat, float).ravel(), np.asarray(y, float).ravel()
    if y_hat.shape != y.shape or y.size < 2:
        raise DataError(f"rmse needs equal lengths >= 2, got {y_hat.size}/{y.size}")
    return float(np.sqrt(np.mean((y_hat - y) ** 2)))


def r2(y_hat, y):
    y_hat, y = np.asarray(y_hat, float).ravel(), np.asarray(y, float).ravel()
    if y_hat.shape != y.shape or y.size < 2:
        raise DataError(f"r2 needs equal lengths >= 2, got {y_hat.size}/{y.size}")
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0.0:
        raise MetricUndefinedError("r2 undefined for constant target")
    ss_res = float(np.sum((y - y_hat) ** 2))
    return 1.0 - ss_res / ss_tot


def pearson(y_hat, y):
    y_hat, y = np.asarray(y_hat, float).ravel(), np.asarray(y, float).ravel()
    if y_hat.shape != y.shape or y.size < 2:
        raise DataError(f"pearson needs equal lengths >= 2, got {y_hat.size}/{y.size}")
    a, b = y_hat - y_hat.mean(), y - y.mean()
    denom = np.sqrt(np.sum(a * a) * np.sum(b * b))
    if denom == 0.0:
        raise MetricUndefinedError("pearson undefined for constant input")
    return float(np.clip(np.sum(a * b) / denom, -1.0, 1.0))


def delta_pct(base, other, higher_is_better=False):
    """Improvement percentage relative to the baseline value.

    Error metrics (RMSE): (base - other) / base * 100, positive = better.
    Score metrics (R^2, Pearson): (other - base) / base * 100.
    """
    if base == 0:
        raise MetricUndefinedError("delta undefined for zero baseline")
    if higher_is_better:
        return (other - base) / base * 100.0
    return (base - other) / base * 100.0


@dataclass
class LeadMetrics:
    lead: str
    rmse: float
    r2: float | None
    pearson: float | None
    n: int
    level: str                     # "segment" or "record"
    rmse_sem: float | None = None  # record-level dispersion (SEM over records)


@dataclass
class AffinityMatrix:
    classes: list
    a: np.ndarray     # [C, C]; row i = mean neighbor-class proportions for class i
    k: int

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["class"] + list(self.classes))
        for i, c in enumerate(self.classes):
            w.writerow([c] + [f"{v:.6f}" for v in self.a[i]])
        return buf.getvalue()


def knn_affinity(vectors, labels, k=10):
    """Class-to-class affinity under cosine k-NN (self excluded,
    ties broken by index order)."""
    vectors = np.asarray(vectors, dtype=np.float64)
    labels = list(labels)
    n = vectors.shape[0]
    if n <= k:
        raise DataError(f"need more than k={k} samples, got {n}")
    classes = sorted(set(labels))
    cls_index = {c: i for i, c in enumerate(classes)}
    norms = np.linalg.norm(vectors, axis=1)
    norms[norms == 0] = 1.0
    unit = vectors / norms[:, None]
    sims = unit @ unit.T
    np.fill_diagonal(sims, -np.inf)
    # stable sort on -sims gives descending similarity, index-order ties
    nbr = np.argsort(-sims, axis=1, kind="stable")[:, :k]
    lab_arr = np.array([cls_index[l] for l in labels])
    c = len(classes)
    a = np.zeros((c, c))
    counts = np.zeros(c)
    for i in range(n):
        row = np.bincount(lab_arr[nbr[i]], minlength=c) / k
        a[lab_arr[i]] += row
        counts[lab_arr[i]] += 1
    if np.any(counts == 0):
        raise DataError("every class needs at least one sample")
    return AffinityMatrix(classes=classes, a=a / counts[:, None], k=k)


def diagonal_consistency(affinity):
    """Mean of the diagonal (intra-class consistency)."""
    return float(np.mean(np.diag(affinity.a)))


def _metric_or_none(fn, y_hat, y):
    try:
        return fn(y_hat, y)
    except MetricUndefinedError:
        return None


def _mean_or_none(values):
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


@dataclass
class EvaluationReport:
    segment_metrics: dict = field(default_factory=dict)   # lead -> LeadMetrics
    record_metrics: dict = field(default_factory=dict)    # lead -> LeadMetrics
    per_class_rmse: dict = field(default_factory=dict)    # class -> lead -> rmse
    mean_segment_rmse: float = 0.0

    def to_dict(self):
        def lm(m):
            return {k: getattr(m, k) for k in
                    ("lead", "rmse", "r2", "pearson", "n", "level", "rmse_sem")}
        return {"segment_metrics": {k: lm(v) for k, v in self.segment_metrics.items()},
                "record_metrics": {k: lm(v) for k, v in self.record_metrics.items()},
                "per_class_rmse": self.per_class_rmse,
                "mean_segment_rmse": self.mean_segment_rmse}


def evaluate_model(records, encoder, decoders, stats, conditioned=True):
    """Segment-level metrics over non-overlapping test segments plus
    record-level metrics over reassembled full signals."""
    seg_rmse = {lead: [] for lead in TARGET_LEADS}
    seg_r2 = {lead: [] for lead in TARGET_LEADS}
    seg_pear = {lead: [] for lead in TARGET_LEADS}
    by_class = {}
    rec_rmse = {lead: [] for lead in TARGET_LEADS}
    rec_r2 = {lead: [] for lead in TARGET_LEADS}
    rec_pear = {lead: [] for lead in TARGET_LEADS}

    for rec in records:
        segments = segment_record_nonoverlap(rec)
        if not segments:
            continue
        preds = reconstruct_segments(segments, encoder, decoders, stats,
                                     conditioned=conditioned)
        hc = sorted(rec.labels.high_confidence())
        cls = hc[0] if len(hc) == 1 else None
        for seg, pred in zip(segments, preds):
            for li, lead in enumerate(TARGET_LEADS):
                e = rmse(pred[li], seg.y[li])
                seg_rmse[lead].append(e)
                seg_r2[lead].append(_metric_or_none(r2, pred[li], seg.y[li]))
                seg_pear[lead].append(_metric_or_none(pearson, pred[li], seg.y[li]))
                if cls is not None:
                    by_class.setdefault(cls, {l: [] for l in TARGET_LEADS})
                    by_class[cls][lead].append(e)
        full = reconstruct_record(rec, encoder, decoders, stats,
                                  conditioned=conditioned)
        truth = np.stack([rec.lead(l) for l in TARGET_LEADS])
        for li, lead in enumerate(TARGET_LEADS):
            rec_rmse[lead].append(rmse(full[li], truth[li]))
            rec_r2[lead].append(_metric_or_none(r2, full[li], truth[li]))
            rec_pear[lead].append(_metric_or_none(pearson, full[li], truth[li]))

    report = EvaluationReport()
    for lead in TARGET_LEADS:
        n_seg = len(seg_rmse[lead])
        if n_seg:
            report.segment_metrics[lead] = LeadMetrics(
                lead=lead, rmse=float(np.mean(seg_rmse[lead])),
                r2=_mean_or_none(seg_r2[lead]), pearson=_mean_or_none(seg_pear[lead]),
                n=n_seg, level="segment")
        n_rec = len(rec_rmse[lead])
        if n_rec:
            vals = np.asarray(rec_rmse[lead])
            sem = float(vals.std(ddof=1) / np.sqrt(n_rec)) if n_rec > 1 else None
            report.record_metrics[lead] = LeadMetrics(
                lead=lead, rmse=float(vals.mean()),
                r2=_mean_or_none(rec_r2[lead]), pearson=_mean_or_none(rec_pear[lead]),
                n=n_rec, level="record", rmse_sem=sem)
    report.per_class_rmse = {
        cls: {lead: float(np.mean(v)) for lead, v in leads.items() if v}
        for cls, leads in sorted(by_class.items())}
    if report.segment_metrics:
        report.mean_segment_rmse = float(np.mean(
            [m.rmse for m in report.segment_metrics.values()]))
    return report


def comparison_table(baseline, proposed):
    """Per-lead deltas between two configurations (baseline C vs C-h),
    mirroring the benchmark-table column layout."""
    rows = []
    for lead in TARGET_LEADS:
        b = baseline.segment_metrics.get(lead)
        p = proposed.segment_metrics.get(lead)
        if b is None or p is None:
            continue
        row = {"lead": lead, "rmse_c": b.rmse, "rmse_ch": p.rmse,
               "rmse_delta_pct": delta_pct(b.rmse, p.rmse)}
        for name in ("r2", "pearson"):
            bv, pv = getattr(b, name), getattr(p, name)
            row[f"{name}_c"], row[f"{name}_ch"] = bv, pv
            row[f"{name}_delta_pct"] = (delta_pct(bv, pv, higher_is_better=True)
                                        if bv not in (None, 0) and pv is not None
                                        else None)
        rows.append(row)
    return rows


def comparison_csv(rows):
    buf = io.StringIO()
    if not rows:
        return ""
    w = csv.DictWriter(buf, fieldnames=list(rows[0].keys()))
    w.writeheader()
    for row in rows:
        w.writerow({k: ("" if v is None else f"{v:.4f}" if isinstance(v, float) else v)
                    for k, v in row.items()})
    return buf.getvalue()
