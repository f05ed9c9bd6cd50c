"""Windowing, quality control, patient-wise splits, and segment stores.

Lead roles are fixed: inputs (I, II, V2), targets (V1, V3, V4, V5, V6).
Stores are a JSON manifest plus a raw little-endian float32 blob,
row-major, so they are language-neutral and memory-mappable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, LeakageError
from .wfdb_io import fold_to_split

INPUT_LEADS = ("I", "II", "V2")
TARGET_LEADS = ("V1", "V3", "V4", "V5", "V6")
ALL_LEADS = INPUT_LEADS + TARGET_LEADS
WINDOW = 256
HOP = 64

SEGSTORE_FORMAT = "ecgrecon-segstore-v1"
VECSTORE_FORMAT = "ecgrecon-vecstore-v1"


@dataclass
class Segment:
    x: np.ndarray            # [3, T] mV: I, II, V2
    y: np.ndarray            # [5, T] mV: V1, V3, V4, V5, V6
    record_id: str
    start: int
    fold: int
    labels: frozenset = frozenset()    # high-confidence codes of the source record

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float32)
        self.y = np.asarray(self.y, dtype=np.float32)
        if not (np.all(np.isfinite(self.x)) and np.all(np.isfinite(self.y))):
            raise DataError(f"non-finite segment from {self.record_id}@{self.start}")


@dataclass
class QcBounds:
    """Closed per-lead intervals for peak-to-peak amplitude and RMS."""

    leads: list
    ptp_lo: np.ndarray
    ptp_hi: np.ndarray
    rms_lo: np.ndarray
    rms_hi: np.ndarray

    def to_dict(self):
        return {"leads": list(self.leads),
                "ptp_lo": self.ptp_lo.tolist(), "ptp_hi": self.ptp_hi.tolist(),
                "rms_lo": self.rms_lo.tolist(), "rms_hi": self.rms_hi.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(leads=list(d["leads"]),
                   ptp_lo=np.asarray(d["ptp_lo"]), ptp_hi=np.asarray(d["ptp_hi"]),
                   rms_lo=np.asarray(d["rms_lo"]), rms_hi=np.asarray(d["rms_hi"]))


def _extract(rec, offsets, t):
    missing = [l for l in ALL_LEADS if l not in rec.lead_names]
    if missing:
        raise DataError(f"record {rec.record_id} missing leads {missing}")
    xi = [rec.lead_names.index(l) for l in INPUT_LEADS]
    yi = [rec.lead_names.index(l) for l in TARGET_LEADS]
    labels = frozenset(rec.labels.high_confidence())
    fold = rec.fold if rec.fold is not None else 0
    segs = []
    for off in offsets:
        win = rec.samples[:, off:off + t]
        segs.append(Segment(x=win[xi], y=win[yi], record_id=rec.record_id,
                            start=int(off), fold=fold, labels=labels))
    return segs


def segment_record(rec, t=WINDOW, hop=HOP):
    """Overlapping training windows at offsets 0, hop, 2*hop, ..."""
    if rec.fs != 100:
        raise DataError(f"record {rec.record_id} not at 100 Hz (fs={rec.fs})")
    n = rec.n_samples
    if n < t:
        return []
    count = (n - t) // hop + 1
    return _extract(rec, [i * hop for i in range(count)], t)


def segment_record_nonoverlap(rec, t=WINDOW):
    """Non-overlapping tiling plus one final right-aligned window."""
    if rec.fs != 100:
        raise DataError(f"record {rec.record_id} not at 100 Hz (fs={rec.fs})")
    n = rec.n_samples
    if n < t:
        return []
    offsets = list(range(0, n - t + 1, t))
    if offsets[-1] != n - t:
        offsets.append(n - t)
    return _extract(rec, offsets, t)


def segment_stats(seg):
    """Per-lead (ptp, rms) over all 8 leads in canonical order."""
    full = np.concatenate([seg.x, seg.y], axis=0).astype(np.float64)
    ptp = full.max(axis=1) - full.min(axis=1)
    rms = np.sqrt(np.mean(full * full, axis=1))
    return ptp, rms


def fit_qc_bounds(segments, lo_pct=0.1, hi_pct=99.9):
    """Empirical percentile bounds fit on training-fold segments only."""
    if not segments:
        raise DataError("cannot fit QC bounds on zero segments")
    stats = [segment_stats(s) for s in segments]
    ptps = np.stack([p for p, _ in stats])
    rmss = np.stack([r for _, r in stats])
    return QcBounds(
        leads=list(ALL_LEADS),
        ptp_lo=np.percentile(ptps, lo_pct, axis=0),
        ptp_hi=np.percentile(ptps, hi_pct, axis=0),
        rms_lo=np.percentile(rmss, lo_pct, axis=0),
        rms_hi=np.percentile(rmss, hi_pct, axis=0))


def apply_qc(segments, bounds):
    """Reject a segment iff any lead statistic falls strictly outside its
    closed interval. Returns (kept, rejected_with_reasons)."""
    kept, rejected = [], []
    for seg in segments:
        ptp, rms = segment_stats(seg)
        reasons = []
        for i, lead in enumerate(bounds.leads):
            if ptp[i] < bounds.ptp_lo[i] or ptp[i] > bounds.ptp_hi[i]:
                reasons.append(f"{lead}:ptp")
            if rms[i] < bounds.rms_lo[i] or rms[i] > bounds.rms_hi[i]:
                reasons.append(f"{lead}:rms")
        if reasons:
            rejected.append((seg, reasons))
        else:
            kept.append(seg)
    return kept, rejected


def split_by_fold(records):
    """Partition records into train (folds 1-8), val (9), test (10).

    Verifies patient independence; a patient spanning splits is a hard error.
    """
    splits = {"train": [], "val": [], "test": []}
    patients = {"train": set(), "val": set(), "test": set()}
    for rec in records:
        if rec.fold is None:
            raise DataError(f"record {rec.record_id} has no fold")
        name = fold_to_split(rec.fold)
        splits[name].append(rec)
        patients[name].add(rec.patient_id)
    for a in ("train", "val", "test"):
        for b in ("train", "val", "test"):
            if a < b:
                shared = patients[a] & patients[b]
                if shared:
                    raise LeakageError(
                        f"patients in both {a} and {b}: {sorted(shared)[:5]}")
    return splits


# -- stores ----------------------------------------------------------------

def save_segments(path_prefix, segments, qc_provenance=None):
    """Write <prefix>.manifest.json + <prefix>.f32.

    Blob layout: per segment, x rows then y rows, row-major float32 LE.
    """
    prefix = Path(path_prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": SEGSTORE_FORMAT,
        "n_segments": len(segments),
        "window": WINDOW,
        "input_leads": list(INPUT_LEADS),
        "target_leads": list(TARGET_LEADS),
        "segments": [{"record_id": s.record_id, "start": s.start, "fold": s.fold,
                      "labels": sorted(s.labels)} for s in segments],
        "qc": qc_provenance or {},
    }
    Path(str(prefix) + ".manifest.json").write_text(json.dumps(manifest))
    if segments:
        blob = np.stack([np.concatenate([s.x, s.y], axis=0) for s in segments])
    else:
        blob = np.zeros((0, len(ALL_LEADS), WINDOW), dtype=np.float32)
    Path(str(prefix) + ".f32").write_bytes(blob.astype("<f4").tobytes())


def load_segments(path_prefix):
    prefix = str(path_prefix)
    man_path = Path(prefix + ".manifest.json")
    blob_path = Path(prefix + ".f32")
    if not man_path.exists() or not blob_path.exists():
        raise DataError(f"segment store not found: {path_prefix}")
    manifest = json.loads(man_path.read_text())
    if manifest.get("format") != SEGSTORE_FORMAT:
        raise DataError(f"unknown segment store format: {manifest.get('format')}")
    n, t = manifest["n_segments"], manifest["window"]
    data = np.frombuffer(blob_path.read_bytes(), dtype="<f4")
    data = data.reshape(n, len(ALL_LEADS), t)
    n_in = len(manifest["input_leads"])
    segments = []
    for i, meta in enumerate(manifest["segments"]):
        segments.append(Segment(x=data[i, :n_in], y=data[i, n_in:],
                                record_id=meta["record_id"], start=meta["start"],
                                fold=meta["fold"], labels=frozenset(meta["labels"])))
    return segments, manifest


def save_vectors(path_prefix, matrix, meta=None):
    """Vector store (e.g. embeddings [N, 128]) in the same manifest+f32 idiom."""
    prefix = Path(path_prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    matrix = np.asarray(matrix, dtype=np.float32)
    manifest = {"format": VECSTORE_FORMAT, "shape": list(matrix.shape),
                "meta": meta or {}}
    Path(str(prefix) + ".manifest.json").write_text(json.dumps(manifest))
    Path(str(prefix) + ".f32").write_bytes(matrix.astype("<f4").tobytes())


def load_vectors(path_prefix):
    prefix = str(path_prefix)
    man_path = Path(prefix + ".manifest.json")
    blob_path = Path(prefix + ".f32")
    if not man_path.exists() or not blob_path.exists():
        raise DataError(f"vector store not found: {path_prefix}")
    manifest = json.loads(man_path.read_text())
    if manifest.get("format") != VECSTORE_FORMAT:
        raise DataError(f"unknown vector store format: {manifest.get('format')}")
    data = np.frombuffer(blob_path.read_bytes(), dtype="<f4")
    return data.reshape(manifest["shape"]).copy(), manifest
