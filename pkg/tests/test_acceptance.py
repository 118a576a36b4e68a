"""Acceptance gate: one PASS/FAIL line per criterion.

Run with ``pytest tests/test_acceptance.py -v``; the criterion lines are
printed in the terminal summary (and immediately with ``-s``).
"""

import json
import math
import time
from dataclasses import asdict

import numpy as np
import pytest

from beat_fixtures import match_beats, pulse_train, ramp_beat_times
from conftest import ACCEPTANCE_LINES, SMALL_MODEL, SMALL_PROFILE
from oracles import finite_difference_check, kappa_bruteforce
from sleepkit import cli
from sleepkit.beats import detect_beats
from sleepkit.dsp import WAV_FS, bandpass_filter, filtfilt, lowpass_filter, resample_linear
from sleepkit.metrics import accuracy, cohens_kappa, per_patient_summary, sleep_metrics
from sleepkit.nn import SleepPPGConfig, build_sleepppg_net, load_weights, save_weights
from sleepkit.pipeline import build_dataset
from sleepkit.records import SynthProfile, synthesize_record
from sleepkit.training import TrainConfig, predict_proba, run_training

from test_dsp import EDGE_TOL_DB, measured_gain_db


def report(n, title, ok, detail=""):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {title}" + (f" ({detail})" if detail else "")
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def test_1_shape_ledger():
    model = build_sleepppg_net()
    t0 = time.perf_counter()
    probs, tape = model.forward(np.zeros(1_228_800, np.float32), np.zeros(2), trace=True)
    elapsed = time.perf_counter() - t0
    shapes = dict(tape.shapes)
    expected = {
        "input": (1_228_800, 1),
        "encoder.resconv8": (4800, 256),
        "encoder.window": (1200, 1024),
        "classifier.softmax": (1200, 4),
    }
    ok = all(shapes.get(k) == v for k, v in expected.items()) and probs.shape == (1200, 4) and elapsed < 60
    report(1, "shape ledger", ok, f"{elapsed:.1f} s")


def test_2_gradient_check():
    cfg = SleepPPGConfig.toy()
    model = build_sleepppg_net(cfg, seed=1, dtype=np.float64)
    rng = np.random.default_rng(2)
    x = rng.standard_normal(cfg.n_windows * cfg.samples_per_window)
    demo = rng.random(2)
    r = rng.standard_normal((cfg.n_windows, 4))
    t0 = time.perf_counter()
    worst, name, retries, n = finite_difference_check(model, x, demo, r)
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-4 and n == model.n_params and elapsed < 300
    report(2, "gradient correctness", ok,
           f"max rel err {worst:.2e} at {name}, {n} params, {retries} kink retries, {elapsed:.0f} s")


def test_3_metric_oracles():
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(1, 500))
        y = rng.integers(0, 4, n)
        p = rng.integers(0, 4, n)
        if rng.random() < 0.5:  # correlated pairs as well as random ones
            p = np.where(rng.random(n) < 0.6, y, p)
        q, k = kappa_bruteforce(y, p)
        worst = max(worst, abs(cohens_kappa(y, p) - k), abs(accuracy(y, p) - q))
    hand = [0, 0, 1, 1], [0, 1, 1, 1]
    ok = worst <= 1e-12 and accuracy(*hand) == 0.75 and cohens_kappa(*hand) == 0.5
    report(3, "metric oracles", ok, f"max deviation {worst:.1e}")


def test_4_dsp():
    lp = lowpass_filter(256.0)
    bp = bandpass_filter(256.0)
    edges = [measured_gain_db(lp, 8.0), measured_gain_db(bp, 0.4, seconds=1200), measured_gain_db(bp, 8.0)]
    mids = [measured_gain_db(lp, 4.0), measured_gain_db(bp, math.sqrt(0.4 * 8))]
    x = np.zeros(4001)
    x[2000] = 1.0
    x = np.convolve(x, np.hanning(61), mode="same")
    lags = [int(np.argmax(filtfilt(f, x))) - 2000 for f in (lp, bp)]
    n_out = len(resample_linear(np.zeros(256 * 30), 256.0, WAV_FS))
    ok = (all(e <= -40 + EDGE_TOL_DB for e in edges) and all(abs(m) <= 1 for m in mids)
          and all(abs(v) <= 1 for v in lags) and n_out == 1024)
    report(4, "DSP", ok, f"edges {np.round(edges, 3).tolist()} dB, mid {np.round(mids, 3).tolist()} dB, "
           f"lags {lags}, {n_out} samples/30 s")


def test_5_beat_detection():
    fs = 256.0
    truth = ramp_beat_times(40, 100, 600)
    clean = detect_beats(filtfilt(bandpass_filter(fs), pulse_train(truth, fs, 600)), fs)
    sens, prec, _ = match_beats(truth, clean.beat_times)
    noisy_sens = []
    for seed in range(3):
        x = pulse_train(truth, fs, 600, snr_db=10, seed=seed)
        beats = detect_beats(filtfilt(bandpass_filter(fs), x), fs)
        noisy_sens.append(match_beats(truth, beats.beat_times)[0])
    ok = sens == 1.0 and prec == 1.0 and min(noisy_sens) >= 0.95
    report(5, "beat detection", ok,
           f"clean Se {sens:.3f} P+ {prec:.3f}, 10 dB Se min {min(noisy_sens):.3f}")


def _fit(ds, epochs, lr, seed=0, **kw):
    cfg = TrainConfig(learning_rate=lr, epochs=epochs, seed=seed, validation_fraction=0, **kw)
    return run_training(build_sleepppg_net(SMALL_MODEL, seed=seed), ds, cfg)


def test_6_learning_signal(small_dataset):
    t0 = time.perf_counter()
    two = small_dataset.subset([0, 1])
    _, hist = _fit(two, 50, 3e-3)
    best_acc = max(h["train_accuracy"] for h in hist)
    overfit_s = time.perf_counter() - t0
    model, _ = _fit(small_dataset.subset(range(30)), 30, 3e-3)
    test = small_dataset.subset(range(30, 40))
    pred = predict_proba(model, test).argmax(-1)
    kappa = per_patient_summary(test.labels, pred)["kappa_median"]
    ok = best_acc >= 0.95 and overfit_s < 900 and kappa >= 0.5
    report(6, "learning signal", ok,
           f"2-record train acc {best_acc:.3f} in {overfit_s:.0f} s, test median kappa {kappa:.2f}")


def test_7_training_schemes(small_dataset, tmp_path):
    ecg = SynthProfile(**{**asdict(SMALL_PROFILE), "kind": "ECG"})
    ecg_ds = build_dataset([synthesize_record(1000 + i, ecg) for i in range(30)], "sleepppg", SMALL_MODEL)
    pre, _ = _fit(ecg_ds, 10, 3e-3, seed=1)
    ckpt = save_weights(pre, tmp_path / "ecg.spgw")

    ppg = small_dataset.subset(range(30))
    _, scratch = _fit(ppg, 5, 3e-3, seed=1)
    cfg = TrainConfig.preset("FromPretrained", learning_rate=1e-3, epochs=1, seed=1, validation_fraction=0)
    _, warm = run_training(build_sleepppg_net(SMALL_MODEL, seed=1), ppg, cfg, pretrained=ckpt)
    faster = warm[0]["loss"] <= scratch[4]["loss"]

    head = build_sleepppg_net(SMALL_MODEL, seed=9)
    fresh = {k: v.copy() for k, v in head.weights.items()}
    load_weights(ckpt, head, exclude=("classifier.",))
    exact = all(
        np.array_equal(v, fresh[k] if k.startswith("classifier.") else pre.weights[k])
        and v.dtype == pre.weights[k].dtype
        for k, v in head.weights.items()
    )
    report(7, "training-scheme plumbing", faster and exact,
           f"pretrained epoch-1 loss {warm[0]['loss']:.3f} vs scratch epoch-5 {scratch[4]['loss']:.3f}, "
           f"partial load bit-exact {exact}")


def test_8_sleep_metrics():
    h = np.array([0] * 60 + [1] * 100 + [2] * 80 + [1] * 100 + [3] * 80 + [0] * 60 + [255] * 20)
    m = sleep_metrics(h)
    total = m.fr_light + m.fr_deep + m.fr_rem
    ok = (m.tst_hours == 3.0 and m.se_percent == 75.0 and round(m.fr_light, 1) == 55.6
          and abs(total - 100) <= 1e-6)
    report(8, "sleep metrics", ok,
           f"TST {m.tst_hours} h, SE {m.se_percent}%, FR_L {m.fr_light:.1f}%, sum {total:.9f}")


def _pipeline(root):
    common = ["--seed", "7", "--n-windows", "64"]
    steps = [
        ["synth", "--out", root / "data", "--n-records", "4", "--fs", "128"],
        ["train", "--data", root / "data", "--out", root / "model", "--toy", "--epochs", "2",
         "--learning-rate", "3e-3"],
        ["infer", "--data", root / "data", "--weights", root / "model" / "weights.spgw", "--out", root / "pred"],
        ["evaluate", "--truth", root / "data", "--pred", root / "pred", "--out", root / "eval", "--no-plots"],
    ]
    return [cli.main([str(a) for a in s] + common) for s in steps]


def test_9_determinism(tmp_path):
    codes = _pipeline(tmp_path / "a") + _pipeline(tmp_path / "b")
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a" / "pred").glob("*.csv"))
    same = bool(files) and all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
                               for f in files)
    metrics_same = (json.loads((tmp_path / "a/eval/metrics.json").read_text())
                    == json.loads((tmp_path / "b/eval/metrics.json").read_text()))
    ok = all(c == 0 for c in codes) and same and metrics_same
    report(9, "determinism", ok, f"{len(files)} prediction files compared, exit codes {codes}")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v", "-s"]))
