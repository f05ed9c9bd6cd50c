"""Subcommand front-end for the reconstruction pipeline.

Stages: synth -> preprocess -> split -> pretrain -> embed -> train ->
reconstruct / evaluate / affinity. Every artifact-producing stage writes
one manifest.json next to its outputs; downstream stages require it.

Exit codes: 0 ok, 2 config error, 3 dependency error, 4 data error,
5 internal error.
"""

from __future__ import annotations

import argparse
import datetime
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import dsp
from .contrastive import PretrainConfig, embed_all, pretrain, save_pretrained
from .dataset import (TARGET_LEADS, apply_qc, fit_qc_bounds, load_segments,
                      load_vectors, save_segments, save_vectors, segment_record,
                      segment_record_nonoverlap, split_by_fold)
from .errors import ConfigError, DataError, DependencyError, PipelineError
from .evaluation import (comparison_csv, comparison_table, diagonal_consistency,
                         evaluate_model, knn_affinity)
from .nn import load_checkpoint
from .reconstruction import (NormStats, TrainConfig, embedding_stats,
                             normalize_x, reconstruct_record, save_decoders,
                             target_lead_stats, train_decoder)
from .synth import builtin_class_specs, generate_corpus, load_class_specs
from .wfdb_io import (SignalRecord, load_record, parse_ptbxl_metadata,
                      write_record)


def _now():
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


def _config_hash(snapshot):
    return hashlib.sha256(
        json.dumps(snapshot, sort_keys=True, default=str).encode()).hexdigest()


def write_manifest(out_dir, command, config_snapshot, inputs, outputs,
                   started, extras=None):
    manifest = {
        "command": command,
        "config": config_snapshot,
        "config_hash": _config_hash(config_snapshot),
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "tool_version": __version__,
        "started": started,
        "finished": _now(),
    }
    if extras:
        manifest.update(extras)
    (Path(out_dir) / "manifest.json").write_text(json.dumps(manifest, indent=1))


def require_manifest(directory, stage):
    path = Path(directory) / "manifest.json"
    if not path.exists():
        raise DependencyError(f"{stage}: missing upstream manifest {path}")
    return json.loads(path.read_text())


def load_config(args):
    """Merge the JSON config (per-stage sections) with CLI overrides."""
    config = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            config = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}")
        if not isinstance(config, dict):
            raise ConfigError("config root must be a JSON object")
    return config


def stage_section(config, stage, overrides):
    section = dict(config.get(stage, {}))
    for key, value in overrides.items():
        if value is not None:
            section[key] = value
    return section


def _out_dir(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- stages ----------------------------------------------------------------

def cmd_synth(args):
    started = _now()
    out = _out_dir(args)
    config = load_config(args)
    section = stage_section(config, "synth", {
        "classes": args.classes, "patients": args.patients,
        "records_per_patient": args.records, "duration": args.duration,
        "seed": args.seed})
    if args.class_specs:
        specs = load_class_specs(args.class_specs)
    else:
        specs = builtin_class_specs()[:int(section.get("classes", 4))]
    if not specs:
        raise ConfigError("need at least one class spec")
    records = generate_corpus(
        specs,
        n_patients_per_class=int(section.get("patients", 30)),
        records_per_patient=int(section.get("records_per_patient", 2)),
        seed=int(section.get("seed", 0)),
        duration=float(section.get("duration", 10.0)))
    rec_dir = out / "records"
    rows = ["ecg_id,patient_id,scp_codes,strat_fold,filename_lr"]
    for rec in records:
        write_record(rec, rec_dir)
        codes = repr({c: float(v) for c, v in rec.labels.likelihoods.items()})
        rows.append(f'{rec.record_id},{rec.patient_id},"{codes}",'
                    f'{rec.fold},records/{rec.record_id}')
    (out / "database.csv").write_text("\n".join(rows) + "\n")
    classes = sorted({s.class_name for s in specs})
    scp = ["code,diagnostic_class"] + [f"{c},{c}" for c in classes]
    (out / "scp_statements.csv").write_text("\n".join(scp) + "\n")
    (out / "class_specs.json").write_text(
        json.dumps([s.to_dict() for s in specs], indent=1))
    write_manifest(out, "synth", section, [], [rec_dir, out / "database.csv"],
                   started, {"n_records": len(records)})
    print(f"synth: wrote {len(records)} records to {out}")


def _find_database_csv(data_dir):
    for name in ("database.csv", "ptbxl_database.csv"):
        path = Path(data_dir) / name
        if path.exists():
            return path
    raise DependencyError(f"no database CSV found under {data_dir}")


def cmd_preprocess(args):
    started = _now()
    out = _out_dir(args)
    config = load_config(args)
    section = stage_section(config, "preprocess", {"verify_checksums": args.verify_checksums})
    spec = dsp.FilterSpec.from_dict(section.get("filter", {}))
    data_dir = Path(args.data)
    db_path = _find_database_csv(data_dir)
    scp_path = data_dir / "scp_statements.csv"
    if not scp_path.exists():
        raise DependencyError(f"missing {scp_path}")
    meta = parse_ptbxl_metadata(db_path.read_text(), scp_path.read_text())
    if not meta.rows:
        raise DataError("metadata contains no parseable rows")
    fell_back = False
    clean_dir = out / "cleaned"
    index = []
    for ecg_id, row in meta.rows.items():
        hea = data_dir / (row.filename_lr + ".hea")
        if not hea.exists():
            raise DataError(f"record file missing: {hea}")
        rec = load_record(hea, verify_checksum=bool(section.get("verify_checksums")))
        cleaned = np.zeros((rec.samples.shape[0],
                            int(np.floor(rec.n_samples * 100.0 / rec.fs))))
        for i in range(rec.samples.shape[0]):
            x = rec.samples[i]
            if spec.notch_freq < rec.fs / 2.0:
                x = dsp.notch_filter(x, rec.fs, spec)
            _, _, fb = dsp.design_bandpass(rec.fs, spec)
            fell_back = fell_back or fb
            x = dsp.bandpass_filter(x, rec.fs, spec)
            x = dsp.resample_to_100hz(x, rec.fs)
            cleaned[i] = dsp.baseline_remove(x, 100.0, spec)
        out_rec = SignalRecord(samples=cleaned, fs=100.0, lead_names=rec.lead_names,
                               record_id=rec.record_id, patient_id=row.patient_id,
                               labels=row.labels, fold=row.fold)
        write_record(out_rec, clean_dir)
        index.append({"record_id": rec.record_id, "patient_id": row.patient_id,
                      "fold": row.fold,
                      "likelihoods": row.labels.likelihoods,
                      "superclass": row.labels.superclass,
                      "path": f"cleaned/{rec.record_id}.hea"})
    (out / "records_index.json").write_text(json.dumps(index))
    if meta.errors:
        (out / "row_errors.json").write_text(json.dumps(meta.errors, indent=1))
    snapshot = dict(section)
    snapshot["filter"] = spec.to_dict()
    snapshot["bandpass_fallback_40hz"] = bool(fell_back)
    write_manifest(out, "preprocess", snapshot, [db_path], [clean_dir], started,
                   {"n_records": len(index), "n_row_errors": len(meta.errors)})
    print(f"preprocess: cleaned {len(index)} records into {out}")


def _load_cleaned_records(preprocessed_dir):
    from .wfdb_io import DiagnosticLabels
    pre = Path(preprocessed_dir)
    require_manifest(pre, "load-cleaned")
    index = json.loads((pre / "records_index.json").read_text())
    records = []
    for entry in index:
        rec = load_record(pre / entry["path"])
        rec.patient_id = entry["patient_id"]
        rec.fold = entry["fold"]
        rec.labels = DiagnosticLabels(likelihoods=entry["likelihoods"],
                                      superclass=entry["superclass"])
        records.append(rec)
    return records


def cmd_split(args):
    started = _now()
    out = _out_dir(args)
    config = load_config(args)
    section = stage_section(config, "split", {})
    records = _load_cleaned_records(args.data)
    splits = split_by_fold(records)
    train_segs = [s for r in splits["train"] for s in segment_record(r)]
    val_segs = [s for r in splits["val"] for s in segment_record(r)]
    test_segs = [s for r in splits["test"] for s in segment_record_nonoverlap(r)]
    if not train_segs:
        raise DataError("no training segments")
    bounds = fit_qc_bounds(train_segs,
                           lo_pct=float(section.get("lo_pct", 0.1)),
                           hi_pct=float(section.get("hi_pct", 99.9)))
    provenance = {"fit_on": "train", "bounds": bounds.to_dict()}
    kept = {}
    rejected_counts = {}
    for name, segs in (("train", train_segs), ("val", val_segs), ("test", test_segs)):
        ok, bad = apply_qc(segs, bounds)
        kept[name] = ok
        rejected_counts[name] = len(bad)
        save_segments(out / f"segments_{name}", ok, qc_provenance=provenance)
    (out / "splits.json").write_text(json.dumps({
        "preprocessed_dir": str(Path(args.data).resolve()),
        "records": {name: [r.record_id for r in recs]
                    for name, recs in splits.items()},
        "rejected": rejected_counts}))
    write_manifest(out, "split", section, [args.data],
                   [out / f"segments_{n}" for n in ("train", "val", "test")],
                   started, {"kept": {k: len(v) for k, v in kept.items()},
                             "rejected": rejected_counts})
    print("split: kept " + ", ".join(f"{k}={len(v)}" for k, v in kept.items()))


def cmd_pretrain(args):
    started = _now()
    out = _out_dir(args)
    config = load_config(args)
    section = stage_section(config, "pretrain", {
        "epochs": args.epochs, "batch_size": args.batch_size, "seed": args.seed})
    require_manifest(args.data, "pretrain")
    segments, _ = load_segments(Path(args.data) / "segments_train")
    pc = PretrainConfig(
        batch_size=int(section.get("batch_size", 128)),
        epochs=int(section.get("epochs", 30)),
        lr=float(section.get("lr", 1e-3)),
        weight_decay=float(section.get("weight_decay", 1e-4)),
        seed=int(section.get("seed", 0)))
    encoder, head, history = pretrain(segments, pc, log=print)
    save_pretrained(out, encoder, head, history)
    (out / "training_log.json").write_text(json.dumps({"loss": history}))
    write_manifest(out, "pretrain", section, [args.data],
                   [out / "encoder.ckpt.json"], started,
                   {"final_loss": history[-1] if history else None})
    print(f"pretrain: final loss {history[-1]:.6f}" if history else "pretrain: done")


def _load_encoder(encoder_dir):
    path = Path(encoder_dir)
    require_manifest(path, "encoder")
    encoder, _ = load_checkpoint(path / "encoder.ckpt")
    return encoder


def cmd_embed(args):
    started = _now()
    out = _out_dir(args)
    config = load_config(args)
    section = stage_section(config, "embed", {})
    require_manifest(args.data, "embed")
    encoder = _load_encoder(args.encoder)
    outputs = []
    for name in ("train", "val", "test"):
        segments, _ = load_segments(Path(args.data) / f"segments_{name}")
        h = embed_all(segments, encoder)
        save_vectors(out / f"embeddings_{name}", h,
                     meta={"split": name, "dim": h.shape[1] if h.size else 128})
        outputs.append(out / f"embeddings_{name}")
    write_manifest(out, "embed", section, [args.data, args.encoder], outputs, started)
    print(f"embed: wrote embeddings to {out}")


def cmd_train(args):
    started = _now()
    out = _out_dir(args)
    config = load_config(args)
    section = stage_section(config, "train", {
        "epochs": args.epochs, "patience": args.patience, "seed": args.seed,
        "batch_size": args.batch_size})
    require_manifest(args.data, "train")
    require_manifest(args.embeddings, "train")
    leads = (args.leads.split(",") if args.leads else list(TARGET_LEADS))
    bad = [l for l in leads if l not in TARGET_LEADS]
    if bad:
        raise ConfigError(f"unknown target leads: {bad}")
    train_segs, _ = load_segments(Path(args.data) / "segments_train")
    val_segs, _ = load_segments(Path(args.data) / "segments_val")
    h_train, _ = load_vectors(Path(args.embeddings) / "embeddings_train")
    h_val, _ = load_vectors(Path(args.embeddings) / "embeddings_val")
    tc = TrainConfig(
        lr=float(section.get("lr", 1e-3)),
        weight_decay=float(section.get("weight_decay", 1e-4)),
        batch_size=int(section.get("batch_size", 32)),
        max_epochs=int(section.get("epochs", 100)),
        patience=int(section.get("patience", 10)),
        seed=int(section.get("seed", 0)),
        conditioned=not args.clean_only)
    h_mu, h_sigma = embedding_stats(h_train)
    y_mu, y_sigma = target_lead_stats(train_segs)
    stats = NormStats(h_mu=h_mu, h_sigma=h_sigma, y_mu=y_mu, y_sigma=y_sigma)
    results = {}
    for lead in leads:
        results[lead] = train_decoder(lead, train_segs, val_segs, h_train, h_val,
                                      tc, log=print)
    save_decoders(out, results, stats)
    (out / "norm_stats.json").write_text(json.dumps(stats.to_dict()))
    write_manifest(out, "train", dict(section, conditioned=tc.conditioned),
                   [args.data, args.embeddings],
                   [out / f"decoder_{l}.ckpt.json" for l in leads], started,
                   {"best_val_loss": {l: r.best_val_loss for l, r in results.items()}})
    print("train: " + ", ".join(f"{l} val={r.best_val_loss:.5f}"
                                for l, r in results.items()))


def _load_decoders(decoder_dir):
    path = Path(decoder_dir)
    require_manifest(path, "decoders")
    decoders, stats = {}, None
    for lead in TARGET_LEADS:
        ckpt = path / f"decoder_{lead}.ckpt"
        if not (path / f"decoder_{lead}.ckpt.json").exists():
            continue
        model, extra = load_checkpoint(ckpt)
        decoders[lead] = model
        if extra and "norm_stats" in extra:
            stats = NormStats.from_dict(extra["norm_stats"])
    if not decoders:
        raise DependencyError(f"no decoder checkpoints under {decoder_dir}")
    if stats is None:
        stats_path = path / "norm_stats.json"
        if not stats_path.exists():
            raise DependencyError(f"missing norm_stats under {decoder_dir}")
        stats = NormStats.from_dict(json.loads(stats_path.read_text()))
    return decoders, stats


def _conditioned_flag(decoder_dir):
    manifest = require_manifest(decoder_dir, "decoders")
    return bool(manifest.get("config", {}).get("conditioned", True))


def _test_records(split_dir):
    split_path = Path(split_dir)
    require_manifest(split_path, "test-records")
    splits = json.loads((split_path / "splits.json").read_text())
    records = _load_cleaned_records(splits["preprocessed_dir"])
    test_ids = set(splits["records"]["test"])
    return [r for r in records if r.record_id in test_ids]


def cmd_reconstruct(args):
    started = _now()
    out = _out_dir(args)
    load_config(args)
    encoder = _load_encoder(args.encoder)
    decoders, stats = _load_decoders(args.decoders)
    conditioned = _conditioned_flag(args.decoders)
    missing = [l for l in TARGET_LEADS if l not in decoders]
    if missing:
        raise DependencyError(f"missing decoder checkpoints for {missing}")
    records = _test_records(args.data)
    if not records:
        raise DataError("no test records to reconstruct")
    rec_dir = out / "records"
    from .evaluation import rmse as _rmse
    sidecar = {}
    for rec in records:
        recon = reconstruct_record(rec, encoder, decoders, stats,
                                   conditioned=conditioned)
        out_rec = SignalRecord(samples=recon, fs=100.0,
                               lead_names=list(TARGET_LEADS),
                               record_id=f"{rec.record_id}-recon",
                               patient_id=rec.patient_id)
        write_record(out_rec, rec_dir)
        truth = np.stack([rec.lead(l) for l in TARGET_LEADS])
        sidecar[rec.record_id] = {
            lead: _rmse(recon[i], truth[i]) for i, lead in enumerate(TARGET_LEADS)}
    (out / "reconstruction_metrics.json").write_text(json.dumps(sidecar, indent=1))
    write_manifest(out, "reconstruct", {}, [args.data, args.decoders], [rec_dir],
                   started, {"n_records": len(records)})
    print(f"reconstruct: wrote {len(records)} records to {rec_dir}")


def cmd_evaluate(args):
    started = _now()
    out = _out_dir(args)
    load_config(args)
    encoder = _load_encoder(args.encoder)
    decoders, stats = _load_decoders(args.decoders)
    records = _test_records(args.data)
    if not records:
        raise DataError("no test records to evaluate")
    report = evaluate_model(records, encoder, decoders, stats,
                            conditioned=_conditioned_flag(args.decoders))
    (out / "report.json").write_text(json.dumps(report.to_dict(), indent=1))
    lines = ["lead,level,rmse,rmse_sem,r2,pearson,n"]
    for level, metrics in (("segment", report.segment_metrics),
                           ("record", report.record_metrics)):
        for lead, m in metrics.items():
            def f(v):
                return "" if v is None else f"{v:.4f}"
            lines.append(f"{lead},{level},{m.rmse:.4f},{f(m.rmse_sem)},"
                         f"{f(m.r2)},{f(m.pearson)},{m.n}")
    (out / "metrics.csv").write_text("\n".join(lines) + "\n")
    per_class = ["class," + ",".join(TARGET_LEADS)]
    for cls, leads in report.per_class_rmse.items():
        per_class.append(cls + "," + ",".join(
            f"{leads.get(l, float('nan')):.4f}" for l in TARGET_LEADS))
    (out / "per_class_rmse.csv").write_text("\n".join(per_class) + "\n")
    outputs = [out / "report.json", out / "metrics.csv"]
    if args.baseline_decoders:
        base_decoders, base_stats = _load_decoders(args.baseline_decoders)
        base_report = evaluate_model(records, encoder, base_decoders, base_stats,
                                     conditioned=_conditioned_flag(args.baseline_decoders))
        rows = comparison_table(base_report, report)
        (out / "comparison.csv").write_text(comparison_csv(rows))
        (out / "baseline_report.json").write_text(
            json.dumps(base_report.to_dict(), indent=1))
        outputs.append(out / "comparison.csv")
    write_manifest(out, "evaluate", {}, [args.data, args.decoders], outputs, started)
    print(f"evaluate: mean segment RMSE {report.mean_segment_rmse:.4f} mV")


def cmd_affinity(args):
    started = _now()
    out = _out_dir(args)
    config = load_config(args)
    section = stage_section(config, "affinity", {"k": args.k})
    require_manifest(args.data, "affinity")
    require_manifest(args.embeddings, "affinity")
    split = args.split
    segments, _ = load_segments(Path(args.data) / f"segments_{split}")
    h, _ = load_vectors(Path(args.embeddings) / f"embeddings_{split}")
    # single-label samples only; class = the single high-confidence code
    idx = [i for i, s in enumerate(segments) if len(s.labels) == 1]
    if not idx:
        raise DataError("no single-label segments for affinity analysis")
    labels = [next(iter(segments[i].labels)) for i in idx]
    k = int(section.get("k", 10))
    h_aff = knn_affinity(h[idx], labels, k=k)
    x_flat = np.stack([normalize_x(segments[i].x)[0].ravel() for i in idx])
    x_aff = knn_affinity(x_flat, labels, k=k)
    (out / "affinity_h.csv").write_text(h_aff.to_csv())
    (out / "affinity_x.csv").write_text(x_aff.to_csv())
    summary = {"k": k, "n_samples": len(idx),
               "diagonal_consistency_h": diagonal_consistency(h_aff),
               "diagonal_consistency_x": diagonal_consistency(x_aff)}
    (out / "affinity_summary.json").write_text(json.dumps(summary, indent=1))
    write_manifest(out, "affinity", section, [args.data, args.embeddings],
                   [out / "affinity_h.csv", out / "affinity_x.csv"], started, summary)
    print(f"affinity: diag(h)={summary['diagonal_consistency_h']:.3f} "
          f"diag(x)={summary['diagonal_consistency_x']:.3f}")


def build_parser():
    parser = argparse.ArgumentParser(prog="ecgrecon",
                                     description="Reduced-lead ECG reconstruction pipeline")

    def common(sp):
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--config", default=None, help="JSON config file")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--jobs", type=int, default=1,
                        help="worker parallelism (default 1 for determinism)")

    sub = parser.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="generate a synthetic WFDB corpus")
    common(sp)
    sp.add_argument("--classes", type=int, default=None)
    sp.add_argument("--patients", type=int, default=None)
    sp.add_argument("--records", type=int, default=None)
    sp.add_argument("--duration", type=float, default=None)
    sp.add_argument("--class-specs", default=None, help="JSON class spec file")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("preprocess", help="clean and resample a corpus")
    common(sp)
    sp.add_argument("--data", required=True, help="corpus directory")
    sp.add_argument("--verify-checksums", action="store_true", default=None)
    sp.set_defaults(func=cmd_preprocess)

    sp = sub.add_parser("split", help="patient-wise split, QC, segment stores")
    common(sp)
    sp.add_argument("--data", required=True, help="preprocessed directory")
    sp.set_defaults(func=cmd_split)

    sp = sub.add_parser("pretrain", help="contrastive pretraining")
    common(sp)
    sp.add_argument("--data", required=True, help="split directory")
    sp.add_argument("--epochs", type=int, default=None)
    sp.add_argument("--batch-size", type=int, default=None)
    sp.set_defaults(func=cmd_pretrain)

    sp = sub.add_parser("embed", help="export embeddings for all splits")
    common(sp)
    sp.add_argument("--data", required=True, help="split directory")
    sp.add_argument("--encoder", required=True, help="pretrain directory")
    sp.set_defaults(func=cmd_embed)

    sp = sub.add_parser("train", help="train per-lead decoders")
    common(sp)
    sp.add_argument("--data", required=True, help="split directory")
    sp.add_argument("--embeddings", required=True, help="embed directory")
    sp.add_argument("--leads", default=None, help="comma-separated target leads")
    sp.add_argument("--clean-only", action="store_true",
                    help="train the unconditioned (C) ablation")
    sp.add_argument("--epochs", type=int, default=None)
    sp.add_argument("--patience", type=int, default=None)
    sp.add_argument("--batch-size", type=int, default=None)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("reconstruct", help="reconstruct full test records")
    common(sp)
    sp.add_argument("--data", required=True, help="split directory")
    sp.add_argument("--encoder", required=True)
    sp.add_argument("--decoders", required=True)
    sp.set_defaults(func=cmd_reconstruct)

    sp = sub.add_parser("evaluate", help="metrics report on the test split")
    common(sp)
    sp.add_argument("--data", required=True, help="split directory")
    sp.add_argument("--encoder", required=True)
    sp.add_argument("--decoders", required=True)
    sp.add_argument("--baseline-decoders", default=None,
                    help="second decoder set for a comparison table")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("affinity", help="k-NN class-affinity matrices")
    common(sp)
    sp.add_argument("--data", required=True, help="split directory")
    sp.add_argument("--embeddings", required=True, help="embed directory")
    sp.add_argument("--split", default="test", choices=("train", "val", "test"))
    sp.add_argument("--k", type=int, default=None)
    sp.set_defaults(func=cmd_affinity)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except PipelineError as exc:
        print(f"error:{exc.category}: {exc}", file=sys.stderr)
        return exc.exit_code
    except Exception as exc:  # noqa: BLE001 - map anything else to internal
        print(f"error:internal: {exc}", file=sys.stderr)
        return 5
    return 0


if __name__ == "__main__":
    sys.exit(main())
