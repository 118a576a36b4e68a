"""``sleepkit`` command line: one subcommand per pipeline stage.

Every command accepts ``--config FILE`` (JSON whose keys are the long option
names with dashes or underscores); explicit flags override the file. The
fully resolved settings are written to ``<out>/<command>.config.json``.

Exit codes: 0 success, 1 data error, 2 configuration error, 3 internal error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._errors import ConfigError, DataError, SleepkitError

log = logging.getLogger("sleepkit")

EXIT_OK, EXIT_DATA, EXIT_CONFIG, EXIT_INTERNAL = 0, 1, 2, 3
WAVEFORM_SUFFIXES = (".csv", ".f32", ".raw", ".rawf32", ".bin")
HYPNOGRAM_SUFFIX = ".hypnogram.csv"
PROBA_SUFFIX = ".proba.csv"
FEATURES_SUFFIX = ".features.csv"

# Reference values reported for SleepPPG-Net on the held-out test sets. They
# are printed for comparison only and never asserted.
REFERENCE_TARGETS = {
    "kappa_median": 0.75,
    "accuracy_median": 0.84,
    "tst_hours_mse": 0.39,
}


@dataclass
class PipelineConfig:
    """Resolved settings of one training run; JSON round-trip stable."""

    data_dir: str
    output_dir: str
    arch: str = "sleepppg"
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    weights: str | None = None
    folds: str | None = None
    feature_schema: str | None = None
    seed: int = 0

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "PipelineConfig":
        try:
            return cls(**json.loads(text))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid pipeline config: {exc}") from None


# -- helpers --------------------------------------------------------------------

def discover_records(data_dir) -> list[Path]:
    """Waveform files in ``data_dir`` that have a ``.meta.json`` sidecar."""
    data_dir = Path(data_dir)
    if not data_dir.is_dir():
        raise DataError(f"{data_dir}: input directory not found")
    from .records import sidecar_path

    out = []
    for p in sorted(data_dir.iterdir()):
        if p.name.endswith(".meta.json") or "." not in p.name:
            continue
        if "".join(p.suffixes[-1:]).lower() in WAVEFORM_SUFFIXES and len(p.suffixes) == 1:
            if sidecar_path(p).exists():
                out.append(p)
    if not out:
        raise DataError(f"{data_dir}: no records (waveform file + .meta.json sidecar) found")
    return out


def _load_normalized(path, n_windows):
    from .records import load_record, normalize_duration

    return normalize_duration(load_record(path), n_windows)


def _map_records(fn, items, jobs):
    """Apply ``fn`` per item; returns (results, errors) keeping input order."""
    results, errors = [], []
    if jobs > 1 and len(items) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_guard, fn, it) for it in items]
            outs = [f.result() for f in futures]
    else:
        outs = [_guard(fn, it) for it in items]
    for it, (ok, val) in zip(items, outs):
        if ok:
            results.append(val)
        else:
            errors.append((it, val))
    return results, errors


def _guard(fn, item):
    try:
        return True, fn(item)
    except (SleepkitError, ValueError, OSError) as exc:
        return False, str(exc)


def _report_errors(errors) -> int:
    for item, msg in errors:
        print(f"error: {item}: {msg}", file=sys.stderr)
    return EXIT_DATA if errors else EXIT_OK


def write_hypnogram_csv(path, stages):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["window", "stage"])
        w.writerows((i, int(s)) for i, s in enumerate(stages))


def read_hypnogram_csv(path) -> np.ndarray:
    try:
        data = np.loadtxt(path, delimiter=",", skiprows=1, dtype=np.int64, ndmin=2)
    except (OSError, ValueError) as exc:
        raise DataError(f"{path}: unreadable hypnogram ({exc})") from None
    if data.shape[1] != 2 or not np.array_equal(data[:, 0], np.arange(len(data))):
        raise DataError(f"{path}: expected consecutive 'window,stage' rows")
    return data[:, 1].astype(np.uint8)


def write_matrix_csv(path, values, header, fmt="%.6f"):
    np.savetxt(path, values, delimiter=",", header=",".join(header), comments="", fmt=fmt)


def _recorded_windows(record) -> int:
    from .records import WINDOW_SECONDS

    return int(np.ceil(record.n_valid / (record.fs * WINDOW_SECONDS) - 1e-9))


# -- commands -------------------------------------------------------------------

def cmd_synth(a) -> int:
    from .records import SynthProfile, save_record, synthesize_record

    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    profile = SynthProfile(n_windows=a.n_windows, fs=a.fs, kind=a.kind,
                           recorded_fraction=a.recorded_fraction)
    for i in range(a.n_records):
        rec = synthesize_record(a.seed + i, profile)
        save_record(rec, out / f"{rec.id}.f32")
    print(f"wrote {a.n_records} records to {out}")
    return EXIT_OK


def _preprocess_one(args):
    path, out, spw, n_windows = args
    from .dsp import preprocess_wav

    rec = _load_normalized(path, n_windows)
    wav = preprocess_wav(rec, spw)
    (out / f"{rec.id}.wav.f32").write_bytes(wav.samples.astype("<f4").tobytes())
    meta = {"id": rec.id, "fs": wav.fs, "fs_rational": f"{spw}/30", "n_samples": int(len(wav.samples)),
            "n_valid": int(wav.n_valid), "samples_per_window": spw}
    (out / f"{rec.id}.wav.json").write_text(json.dumps(meta, indent=1))
    return rec.id


def cmd_preprocess(a) -> int:
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = discover_records(a.data)
    done, errors = _map_records(_preprocess_one, [(p, out, a.samples_per_window, a.n_windows) for p in paths], a.jobs)
    print(f"preprocessed {len(done)} of {len(paths)} records")
    return _report_errors([(it[0], m) for it, m in errors])


def _beats_one(args):
    path, out, n_windows = args
    from .beats import record_beats

    rec = _load_normalized(path, n_windows)
    beats = record_beats(rec)
    # ibi_ms and valid describe the interval ending at each beat; the first beat has none
    ibi = np.r_[np.nan, beats.ibis]
    valid = np.r_[0, np.asarray(beats.valid, dtype=int)]
    rows = np.column_stack([beats.beat_times, ibi, valid])
    write_matrix_csv(out / f"{rec.id}.beats.csv", rows, ["time_s", "ibi_ms", "valid"],
                     fmt=["%.4f", "%.2f", "%d"])
    return rec.id


def cmd_detect_beats(a) -> int:
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = discover_records(a.data)
    done, errors = _map_records(_beats_one, [(p, out, a.n_windows) for p in paths], a.jobs)
    print(f"detected beats in {len(done)} of {len(paths)} records")
    return _report_errors([(it[0], m) for it, m in errors])


def _features_one(args):
    path, out, n_windows = args
    from .features import standardize_per_patient, windowed_features

    rec = _load_normalized(path, n_windows)
    fm = standardize_per_patient(windowed_features(rec))
    write_matrix_csv(out / f"{rec.id}{FEATURES_SUFFIX}", fm.values, fm.names)
    return rec.id, fm.schema_hash()


def cmd_features(a) -> int:
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = discover_records(a.data)
    done, errors = _map_records(_features_one, [(p, out, a.n_windows) for p in paths], a.jobs)
    if done:
        (out / "feature_schema.txt").write_text(done[0][1] + "\n")
    print(f"wrote features for {len(done)} of {len(paths)} records")
    return _report_errors([(it[0], m) for it, m in errors])


def _model_config(a):
    from .nn.models import SleepPPGConfig, config_from_dict

    values = dict(a.model or {})
    if a.toy:
        if a.arch != "sleepppg":
            raise ConfigError("--toy applies to the sleepppg architecture only")
        base = dataclasses.asdict(SleepPPGConfig.toy(**TOY_OVERRIDES))
        base.update(values)
        values = base
    if a.n_windows is not None:
        values.setdefault("n_windows", a.n_windows)
    return config_from_dict(a.arch, values)


# Small SleepPPG-Net used for desk-scale runs.
TOY_OVERRIDES = dict(n_windows=64, samples_per_window=256, resconv_filters=(8, 16, 16),
                     embedding=16, tcn_filters=16)


def _load_dataset(a, config, paths):
    from .pipeline import build_dataset

    records = [_load_normalized(p, config.n_windows) for p in paths]
    return build_dataset(records, a.arch, config, jobs=a.jobs), records


def cmd_train(a) -> int:
    from .nn.models import build_model
    from .nn.spgw import save_weights
    from .training import TrainConfig, load_fold_manifest, run_training, run_transfer_learning

    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    config = _model_config(a)
    overrides = {k: v for k, v in (("learning_rate", a.learning_rate), ("epochs", a.epochs)) if v is not None}
    tcfg = TrainConfig.preset(a.scheme, batch_size=a.batch_size, seed=a.seed, dropout=a.dropout,
                              validation_fraction=a.validation_fraction,
                              reset_prefixes=tuple(a.reset_prefix or ()), **overrides)
    if a.scheme != "Scratch" and not a.pretrained:
        raise ConfigError(f"--scheme {a.scheme} requires --pretrained WEIGHTS.spgw")
    paths = discover_records(a.data)
    ds, _ = _load_dataset(a, config, paths)
    model_meta = {"arch": a.arch, "config": dataclasses.asdict(config)}
    (out / "model.json").write_text(json.dumps(model_meta, indent=1))
    pc = PipelineConfig(str(a.data), str(out), a.arch, model_meta["config"], dataclasses.asdict(tcfg),
                        a.pretrained, a.folds, None, a.seed)
    (out / "pipeline.json").write_text(pc.to_json())
    if a.scheme == "TransferLearn" and a.folds:
        manifest = load_fold_manifest(a.folds)
        probs, histories = run_transfer_learning(
            lambda: build_model(a.arch, config, seed=a.seed), ds, manifest, tcfg,
            a.pretrained, checkpoint_dir=out / "checkpoints")
        pred_dir = out / "predictions"
        pred_dir.mkdir(exist_ok=True)
        for rid in ds.ids:
            if rid in probs:
                _write_prediction(pred_dir, rid, probs[rid], ds.labels[ds.ids.index(rid)] != 255)
        (out / "history.json").write_text(json.dumps(histories, indent=1))
        print(f"transfer learning over {len(manifest['folds'])} folds done; predictions in {pred_dir}")
        return EXIT_OK
    model = build_model(a.arch, config, seed=a.seed)
    model, history = run_training(model, ds, tcfg, pretrained=a.pretrained,
                                  checkpoint_dir=out / "checkpoints")
    save_weights(model, out / "weights.spgw")
    (out / "history.json").write_text(json.dumps(history, indent=1))
    last = history[-1] if history else {}
    print(f"trained {a.arch} for {len(history)} epochs; final loss {last.get('loss', float('nan')):.4f}")
    return EXIT_OK


def _write_prediction(out, rid, probs, scored):
    stages = probs.argmax(-1).astype(np.uint8)
    stages = np.where(scored, stages, 255)
    write_hypnogram_csv(out / f"{rid}{HYPNOGRAM_SUFFIX}", stages)
    write_matrix_csv(out / f"{rid}{PROBA_SUFFIX}", probs, ["wake", "light", "deep", "rem"])


def cmd_infer(a) -> int:
    from .nn.models import build_model
    from .nn.spgw import load_weights
    from .pipeline import model_inputs, record_demographics

    weights = Path(a.weights)
    meta_path = Path(a.model_json) if a.model_json else weights.with_name("model.json")
    try:
        meta = json.loads(meta_path.read_text())
    except (OSError, ValueError) as exc:
        raise ConfigError(f"{meta_path}: cannot read model description ({exc})") from None
    model = build_model(meta["arch"], meta["config"])
    if not weights.exists():
        raise DataError(f"{weights}: weights file not found")
    load_weights(weights, model)
    cfg = model.config
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)

    if a.features:
        if model.arch != "bm_fe":
            raise ConfigError("--features input requires a bm_fe model")
        files = sorted(Path(a.features).glob(f"*{FEATURES_SUFFIX}"))
        if not files:
            raise DataError(f"{a.features}: no *{FEATURES_SUFFIX} files")
        for f in files:
            x = np.loadtxt(f, delimiter=",", skiprows=1, ndmin=2)
            probs = model.forward(x)
            rid = f.name[: -len(FEATURES_SUFFIX)]
            _write_prediction(out, rid, probs, np.ones(len(probs), bool))
        print(f"wrote predictions for {len(files)} records")
        return EXIT_OK

    errors = []
    n = 0
    for p in discover_records(a.data):
        try:
            rec = _load_normalized(p, cfg.n_windows)
            x = model_inputs(rec, model.arch, cfg)
            probs = model.forward(x, record_demographics(rec, cfg) if getattr(cfg, "n_demographics", 0) else None)
        except (SleepkitError, ValueError) as exc:
            errors.append((p, str(exc)))
            continue
        scored = np.arange(cfg.n_windows) < _recorded_windows(rec)
        _write_prediction(out, rec.id, probs, scored)
        n += 1
    print(f"wrote predictions for {n} records")
    return _report_errors(errors)


def _truth_hypnograms(truth_dir):
    """id -> (hypnogram, groups) from hypnogram CSVs or labelled records."""
    truth_dir = Path(truth_dir)
    csvs = sorted(truth_dir.glob(f"*{HYPNOGRAM_SUFFIX}"))
    if csvs:
        return {f.name[: -len(HYPNOGRAM_SUFFIX)]: (read_hypnogram_csv(f), {}) for f in csvs}
    from .records import load_record

    out = {}
    for p in discover_records(truth_dir):
        rec = load_record(p)
        if rec.hypnogram is None:
            raise DataError(f"{p}: record has no labels")
        out[rec.id] = (rec.hypnogram, dict(rec.groups))
    return out


def cmd_evaluate(a) -> int:
    from . import metrics as M

    truth = _truth_hypnograms(a.truth)
    pred_dir = Path(a.pred)
    ids = sorted(truth)
    preds = {}
    for rid in ids:
        f = pred_dir / f"{rid}{HYPNOGRAM_SUFFIX}"
        if not f.exists():
            raise DataError(f"{f}: prediction missing for record {rid}")
        preds[rid] = read_hypnogram_csv(f)
    hyps = []
    for rid in ids:
        h, p = truth[rid][0], preds[rid]
        if len(p) != len(h):
            if len(p) < len(h):
                raise DataError(f"record {rid}: {len(p)} predicted windows for {len(h)} labels")
            p = p[: len(h)]
            preds[rid] = p
        hyps.append(h)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)

    summary = M.per_patient_summary(hyps, [preds[r] for r in ids], ids=ids)
    cm = sum(M.confusion_matrix(h, preds[r]) for h, r in zip(hyps, ids))
    t_metrics, p_metrics, sm_rows = [], [], []
    for h, rid in zip(hyps, ids):
        # a predicted all-Wake night has undefined fractions; keep it as NaN
        tm = M.sleep_metrics(h, a.depth_order, strict=False)
        pm = M.sleep_metrics(np.where(h == 255, 255, preds[rid]), a.depth_order, strict=False)
        t_metrics.append(tm)
        p_metrics.append(pm)
        sm_rows.append([rid] + [getattr(tm, k) for k in M.SLEEP_METRIC_NAMES]
                       + [getattr(pm, k) for k in M.SLEEP_METRIC_NAMES])
    agreement = M.metric_agreement(t_metrics, p_metrics)
    result = {
        "n_records": len(ids),
        "kappa_median": summary["kappa_median"], "kappa_q1": summary["kappa_q1"],
        "kappa_q3": summary["kappa_q3"], "kappa_text": summary["kappa_text"],
        "accuracy_median": summary["accuracy_median"], "accuracy_q1": summary["accuracy_q1"],
        "accuracy_q3": summary["accuracy_q3"], "accuracy_text": summary["accuracy_text"],
        "kappa_pooled": M.kappa_from_confusion(cm),
        "confusion_matrix": cm.tolist(),
        "sleep_metric_agreement": agreement,
        "depth_order": a.depth_order,
    }
    if a.group_key:
        groups = [truth[r][1] for r in ids]
        g = M.grouped_summary(hyps, [preds[r] for r in ids], a.group_key, groups=groups)
        result["groups"] = {str(k): {kk: vv for kk, vv in v.items() if kk != "table"} for k, v in g.items()}
    (out / "metrics.json").write_text(json.dumps(result, indent=1, sort_keys=True, default=float))
    write_matrix_csv(out / "confusion_matrix.csv", cm, ["wake", "light", "deep", "rem"], fmt="%d")
    with open(out / "per_patient.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "kappa", "accuracy", "n_windows"])
        for row in summary["table"]:
            w.writerow([row["id"], f"{row['kappa']:.6f}", f"{row['accuracy']:.6f}", row["n_windows"]])
    with open(out / "sleep_metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id"] + [f"true_{k}" for k in M.SLEEP_METRIC_NAMES] + [f"pred_{k}" for k in M.SLEEP_METRIC_NAMES])
        for row in sm_rows:
            w.writerow([row[0]] + [f"{v:.6f}" for v in row[1:]])
    if not a.no_plots:
        for name in ("tst_hours", "se_percent", "fr_light", "fr_deep", "fr_rem", "transitions_per_hour"):
            M.plot_metric_scatter([getattr(m, name) for m in t_metrics], [getattr(m, name) for m in p_metrics],
                                  name, out / f"scatter_{name}.svg", agreement[name]["mse"])
        for h, rid in list(zip(hyps, ids))[: a.max_hypnogram_plots]:
            M.plot_hypnograms(h, preds[rid], out / f"hypnogram_{rid}.svg", title=rid)
    print(f"kappa {summary['kappa_text']}, accuracy {summary['accuracy_text']} over {len(ids)} records")
    return EXIT_OK


def cmd_report(a) -> int:
    path = Path(a.metrics)
    try:
        m = json.loads(path.read_text())
    except (OSError, ValueError) as exc:
        raise DataError(f"{path}: cannot read metrics ({exc})") from None
    lines = [
        f"records evaluated: {m.get('n_records')}",
        f"kappa    {m.get('kappa_text')}   (reference {REFERENCE_TARGETS['kappa_median']:.2f})",
        f"accuracy {m.get('accuracy_text')}   (reference {REFERENCE_TARGETS['accuracy_median']:.2f})",
    ]
    agree = m.get("sleep_metric_agreement", {})
    if "tst_hours" in agree:
        lines.append(f"TST MSE  {agree['tst_hours']['mse']:.3f} h   (reference {REFERENCE_TARGETS['tst_hours_mse']:.2f})")
    for name, vals in agree.items():
        lines.append(f"  {name:22s} MSE {vals['mse']:.4g}  R2 {vals['r2']:.3f}")
    for cat, g in sorted(m.get("groups", {}).items()):
        flag = " (low n)" if g.get("low_n") else ""
        lines.append(f"  group {cat}: kappa {g['kappa_text']} n={g['n_records']}{flag}")
    text = "\n".join(lines)
    print(text)
    if a.out:
        Path(a.out).write_text(text + "\n")
    return EXIT_OK


# -- argument handling ---------------------------------------------------------

COMMANDS = {}


def _command(name, func, help_text, out_attr="out"):
    COMMANDS[name] = (func, help_text, out_attr)


_command("synth", cmd_synth, "generate synthetic labelled records")
_command("preprocess", cmd_preprocess, "filter, resample and standardize records to WAV arrays")
_command("detect-beats", cmd_detect_beats, "detect pulse beats and IBI quality flags")
_command("features", cmd_features, "compute standardized per-window feature matrices")
_command("train", cmd_train, "train a model under one of the training schemes")
_command("infer", cmd_infer, "predict hypnograms and stage probabilities")
_command("evaluate", cmd_evaluate, "score predictions against reference hypnograms")
_command("report", cmd_report, "print a text summary of an evaluation")

# defaults live here rather than in argparse so a config file can sit between them
DEFAULTS = {
    "seed": None, "jobs": 1, "n_windows": None, "verbose": False,
    "n_records": 10, "fs": 256.0, "kind": "PPG", "recorded_fraction": 1.0,
    "samples_per_window": 1024,
    "arch": "sleepppg", "model": None, "toy": False, "scheme": "Scratch", "pretrained": None,
    "learning_rate": None, "epochs": None, "batch_size": 8, "dropout": 0.2,
    "validation_fraction": 0.1, "folds": None, "reset_prefix": None,
    "weights": None, "model_json": None, "features": None,
    "depth_order": "rem_between", "group_key": None, "no_plots": False, "max_hypnogram_plots": 5,
    "data": None, "out": None, "truth": None, "pred": None, "metrics": None,
}
REQUIRED = {
    "synth": ("out",), "preprocess": ("data", "out"), "detect-beats": ("data", "out"),
    "features": ("data", "out"), "train": ("data", "out"), "infer": ("weights", "out"),
    "evaluate": ("truth", "pred", "out"), "report": ("metrics",),
}


def build_parser() -> argparse.ArgumentParser:
    S = argparse.SUPPRESS
    common = argparse.ArgumentParser(add_help=False, argument_default=S)
    common.add_argument("--config", help="JSON file with option values")
    common.add_argument("--seed", type=int, help="random seed (mandatory when CI is set)")
    common.add_argument("--jobs", type=int, help="worker processes across records")
    common.add_argument("--n-windows", type=int, help="30 s windows per record after normalization")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="sleepkit", description="Sleep staging from PPG/ECG waveforms.")
    sub = parser.add_subparsers(dest="command", required=True)
    p = {name: sub.add_parser(name, parents=[common], help=h, argument_default=S)
         for name, (_, h, _) in COMMANDS.items()}

    p["synth"].add_argument("--out")
    p["synth"].add_argument("--n-records", type=int)
    p["synth"].add_argument("--fs", type=float)
    p["synth"].add_argument("--kind", choices=["PPG", "ECG"])
    p["synth"].add_argument("--recorded-fraction", type=float)

    for name in ("preprocess", "detect-beats", "features"):
        p[name].add_argument("--data")
        p[name].add_argument("--out")
    p["preprocess"].add_argument("--samples-per-window", type=int)

    t = p["train"]
    t.add_argument("--data")
    t.add_argument("--out")
    t.add_argument("--arch", choices=["sleepppg", "bm_dts", "bm_fe"])
    t.add_argument("--model", type=json.loads, help="JSON object of architecture overrides")
    t.add_argument("--toy", action="store_true", help="small SleepPPG-Net for desk-scale runs")
    t.add_argument("--scheme", choices=["Scratch", "FromPretrained", "TransferLearn"])
    t.add_argument("--pretrained", help="SPGW checkpoint for FromPretrained/TransferLearn")
    t.add_argument("--learning-rate", type=float)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--dropout", type=float)
    t.add_argument("--validation-fraction", type=float)
    t.add_argument("--folds", help="fold manifest JSON for TransferLearn")
    t.add_argument("--reset-prefix", action="append", help="reinitialize weights under this name prefix")

    i = p["infer"]
    i.add_argument("--data")
    i.add_argument("--weights")
    i.add_argument("--model-json", help="model description (default: model.json beside the weights)")
    i.add_argument("--features", help="directory of feature CSVs (bm_fe models)")
    i.add_argument("--out")

    e = p["evaluate"]
    e.add_argument("--truth", help="labelled records or hypnogram CSVs")
    e.add_argument("--pred", help="directory of predicted hypnogram CSVs")
    e.add_argument("--out")
    e.add_argument("--depth-order", choices=["rem_between", "rem_excluded"])
    e.add_argument("--group-key")
    e.add_argument("--no-plots", action="store_true")
    e.add_argument("--max-hypnogram-plots", type=int)

    r = p["report"]
    r.add_argument("--metrics")
    r.add_argument("--out")
    return parser


def resolve_args(argv=None) -> argparse.Namespace:
    """Parse ``argv`` and merge defaults < config file < explicit flags."""
    ns = build_parser().parse_args(argv)
    given = {k: v for k, v in vars(ns).items() if k not in ("command", "config")}
    values = dict(DEFAULTS)
    if getattr(ns, "config", None):
        try:
            file_values = json.loads(Path(ns.config).read_text())
        except (OSError, ValueError) as exc:
            raise ConfigError(f"{ns.config}: cannot read config ({exc})") from None
        if not isinstance(file_values, dict):
            raise ConfigError(f"{ns.config}: config must be a JSON object")
        for k, v in file_values.items():
            key = k.replace("-", "_")
            if key not in DEFAULTS:
                raise ConfigError(f"{ns.config}: unknown option {k!r}")
            values[key] = v
    values.update(given)
    values["command"] = ns.command
    a = argparse.Namespace(**values)
    missing = [k for k in REQUIRED[ns.command] if getattr(a, k) in (None, "")]
    if a.command == "infer" and not (a.data or a.features):
        missing.append("data")
    if missing:
        raise ConfigError(f"{ns.command}: missing required option(s) " + ", ".join("--" + m.replace("_", "-") for m in missing))
    if a.seed is None:
        if os.environ.get("CI"):
            raise ConfigError("--seed is mandatory when CI is set")
        a.seed = 0
    if a.jobs < 1:
        raise ConfigError("--jobs must be >= 1")
    if a.n_windows is None and a.command in ("synth", "preprocess", "detect-beats", "features"):
        a.n_windows = 1200
    return a


def _write_resolved(a):
    out = getattr(a, "out", None)
    if not out or a.command == "report":
        return
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = {k: v for k, v in sorted(vars(a).items())}
    (out / f"{a.command}.config.json").write_text(json.dumps(cfg, indent=1, sort_keys=True, default=str))


def main(argv=None) -> int:
    try:
        a = resolve_args(argv)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    func = COMMANDS[a.command][0]
    try:
        _write_resolved(a)
        return func(a)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception:  # noqa: BLE001
        traceback.print_exc()
        print("internal error; please report with the traceback above", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
