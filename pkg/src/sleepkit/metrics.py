"""Agreement metrics, per-patient summaries and sleep metrics.

Pad windows are dropped before any metric is computed.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numpy as np

from ._errors import DataError
from .records import N_CLASSES, WINDOW_SECONDS, SleepStage

# Depth orderings for counting deeper -> lighter transitions. ``None`` marks a
# stage outside the depth axis; pairs touching it are not counted.
DEPTH_ORDERS = {
    "rem_between": {SleepStage.WAKE: 0, SleepStage.REM: 1, SleepStage.LIGHT: 2, SleepStage.DEEP: 3},
    "rem_excluded": {SleepStage.WAKE: 0, SleepStage.LIGHT: 1, SleepStage.DEEP: 2, SleepStage.REM: None},
}
DEFAULT_DEPTH_ORDER = "rem_between"
SLEEP_METRIC_NAMES = ("tst_hours", "se_percent", "fr_light", "fr_deep", "fr_rem",
                      "transitions", "transitions_per_hour")


def _scored(y, p):
    y = np.asarray(y).ravel()
    p = np.asarray(p).ravel()
    if y.shape != p.shape:
        raise DataError(f"label sequences differ in length ({y.size} vs {p.size})")
    keep = y != SleepStage.PAD
    if not keep.any():
        raise DataError("no unpadded windows to score")
    return y[keep].astype(np.intp), p[keep].astype(np.intp)


def confusion_matrix(y, p) -> np.ndarray:
    """4x4 counts; rows are ground truth, columns predictions."""
    y, p = _scored(y, p)
    if p.min() < 0 or p.max() >= N_CLASSES or y.max() >= N_CLASSES:
        raise DataError("labels must be stage codes 0-3 outside padding")
    return np.bincount(y * N_CLASSES + p, minlength=N_CLASSES**2).reshape(N_CLASSES, N_CLASSES)


def accuracy(y, p) -> float:
    y, p = _scored(y, p)
    return float(np.mean(y == p))


def cohens_kappa(y, p) -> float:
    """Chance-corrected agreement ``(Q - Qe) / (1 - Qe)``; 1 when ``Qe == 1``."""
    y, p = _scored(y, p)
    n = y.size
    q = np.count_nonzero(y == p) / n
    n1 = np.bincount(y, minlength=N_CLASSES)
    n2 = np.bincount(p, minlength=N_CLASSES)
    qe = float(np.dot(n1, n2)) / (n * n)
    if qe == 1.0:
        return 1.0
    return float((q - qe) / (1 - qe))


def kappa_from_confusion(cm) -> float:
    cm = np.asarray(cm, dtype=np.int64)
    n = cm.sum()
    if n == 0:
        raise DataError("empty confusion matrix")
    q = np.trace(cm) / n
    qe = float(np.dot(cm.sum(axis=1), cm.sum(axis=0))) / (n * n)
    if qe == 1.0:
        return 1.0
    return float((q - qe) / (1 - qe))


def accuracy_from_confusion(cm) -> float:
    cm = np.asarray(cm)
    return float(np.trace(cm) / cm.sum())


# -- per-patient aggregation ------------------------------------------------------

def _hypnogram(obj):
    return np.asarray(getattr(obj, "hypnogram", obj))


def _quartiles(values):
    q1, med, q3 = np.quantile(np.asarray(values, dtype=float), [0.25, 0.5, 0.75], method="linear")
    return float(med), float(q1), float(q3)


def format_median_iqr(median: float, q1: float, q3: float, digits: int = 2) -> str:
    """``"0.75 (0.69 to 0.81)"``."""
    return f"{median:.{digits}f} ({q1:.{digits}f} to {q3:.{digits}f})"


def per_patient_summary(records, predictions, ids: Sequence[str] | None = None) -> dict:
    """Per-record kappa and accuracy plus their median and quartiles.

    ``records`` are Records or hypnogram arrays; ``predictions`` the matching
    predicted label arrays.
    """
    records = list(records)
    predictions = list(predictions)
    if len(records) != len(predictions):
        raise DataError("records and predictions differ in count")
    if not records:
        raise DataError("no records to summarize")
    if ids is None:
        ids = [getattr(r, "id", str(i)) for i, r in enumerate(records)]
    table = []
    for rid, rec, pred in zip(ids, records, predictions):
        h = _hypnogram(rec)
        table.append({"id": rid, "kappa": cohens_kappa(h, pred), "accuracy": accuracy(h, pred),
                      "n_windows": int(np.count_nonzero(h != SleepStage.PAD))})
    km, kq1, kq3 = _quartiles([r["kappa"] for r in table])
    am, aq1, aq3 = _quartiles([r["accuracy"] for r in table])
    return {
        "n_records": len(table),
        "kappa_median": km, "kappa_q1": kq1, "kappa_q3": kq3,
        "accuracy_median": am, "accuracy_q1": aq1, "accuracy_q3": aq3,
        "kappa_text": format_median_iqr(km, kq1, kq3),
        "accuracy_text": format_median_iqr(am, aq1, aq3),
        "table": table,
    }


def grouped_summary(records, predictions, group_key: str, groups=None, min_n: int = 2) -> dict:
    """:func:`per_patient_summary` per category of ``group_key``.

    Categories are read from ``record.groups`` unless ``groups`` (one mapping
    per record) is given. Categories with fewer than ``min_n`` records carry
    ``low_n = True``.
    """
    records = list(records)
    predictions = list(predictions)
    if groups is None:
        groups = [getattr(r, "groups", None) or {} for r in records]
    cats = []
    for i, g in enumerate(groups):
        if group_key not in g:
            raise KeyError(f"record {i} has no group key {group_key!r}")
        cats.append(g[group_key])
    out = {}
    for cat in sorted(set(cats), key=str):
        idx = [i for i, c in enumerate(cats) if c == cat]
        s = per_patient_summary([records[i] for i in idx], [predictions[i] for i in idx],
                                ids=[getattr(records[i], "id", str(i)) for i in idx])
        s["low_n"] = len(idx) < min_n
        out[cat] = s
    return out


# -- sleep metrics ----------------------------------------------------------------

@dataclass(frozen=True)
class SleepMetrics:
    tst_hours: float
    se_percent: float
    fr_light: float
    fr_deep: float
    fr_rem: float
    transitions: int
    transitions_per_hour: float

    def as_dict(self) -> dict:
        return asdict(self)


def count_transitions(h, depth_order: str | Mapping = DEFAULT_DEPTH_ORDER) -> int:
    """Adjacent pairs where the next stage is lighter than the current one."""
    order = DEPTH_ORDERS[depth_order] if isinstance(depth_order, str) else depth_order
    h = np.asarray(h)
    lut = np.full(256, np.nan)
    for stage, depth in order.items():
        if depth is not None:
            lut[int(stage)] = depth
    d = lut[h.astype(np.intp)]
    cur, nxt = d[:-1], d[1:]
    ok = ~np.isnan(cur) & ~np.isnan(nxt)
    return int(np.count_nonzero(nxt[ok] < cur[ok]))


def sleep_metrics(h, depth_order: str | Mapping = DEFAULT_DEPTH_ORDER, strict: bool = True) -> SleepMetrics:
    """TST, sleep efficiency, stage fractions and transitions for one hypnogram.

    Time in bed is the unpadded part of the record. With zero sleep the
    fractions are undefined: ``strict`` raises, otherwise they are NaN.
    """
    h = _hypnogram(h)
    h = h[h != SleepStage.PAD]
    if h.size == 0:
        raise DataError("hypnogram has no unpadded windows")
    counts = np.bincount(h.astype(np.intp), minlength=N_CLASSES)[:N_CLASSES]
    sleep = int(counts[1:].sum())
    tst_h = sleep * WINDOW_SECONDS / 3600.0
    se = 100.0 * sleep / h.size
    trans = count_transitions(h, depth_order)
    if sleep == 0:
        if strict:
            raise DataError("total sleep time is zero; stage fractions are undefined")
        nan = float("nan")
        return SleepMetrics(0.0, 0.0, nan, nan, nan, trans, nan)
    fr = 100.0 * counts / sleep
    return SleepMetrics(
        tst_hours=tst_h,
        se_percent=se,
        fr_light=float(fr[SleepStage.LIGHT]),
        fr_deep=float(fr[SleepStage.DEEP]),
        fr_rem=float(fr[SleepStage.REM]),
        transitions=trans,
        transitions_per_hour=trans / tst_h,
    )


def _metric_value(m, name):
    return float(m[name] if isinstance(m, Mapping) else getattr(m, name))


def metric_agreement(truth_metrics, pred_metrics, names=SLEEP_METRIC_NAMES) -> dict:
    """MSE and coefficient of determination per sleep metric across patients."""
    truth_metrics = list(truth_metrics)
    pred_metrics = list(pred_metrics)
    if len(truth_metrics) != len(pred_metrics):
        raise DataError("truth and prediction metric lists differ in length")
    if not truth_metrics:
        raise DataError("no metric pairs")
    out = {}
    for name in names:
        t = np.array([_metric_value(m, name) for m in truth_metrics])
        p = np.array([_metric_value(m, name) for m in pred_metrics])
        ok = np.isfinite(t) & np.isfinite(p)
        t, p = t[ok], p[ok]
        if t.size == 0:
            out[name] = {"mse": float("nan"), "r2": float("nan"), "n": 0}
            continue
        ss_res = float(np.sum((t - p) ** 2))
        ss_tot = float(np.sum((t - t.mean()) ** 2))
        if ss_tot > 0:
            r2 = 1.0 - ss_res / ss_tot
        else:
            r2 = 1.0 if ss_res == 0 else float("nan")
        out[name] = {"mse": ss_res / t.size, "r2": r2, "n": int(t.size)}
    return out


# -- plots ------------------------------------------------------------------------

def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "sleepkit"
    return plt


def plot_metric_scatter(truth, pred, name: str, path, mse: float | None = None):
    """Predicted vs. reference scatter with the identity line and an MSE note."""
    plt = _pyplot()
    t = np.asarray(truth, dtype=float)
    p = np.asarray(pred, dtype=float)
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.scatter(t, p, s=12)
    finite = np.concatenate([t[np.isfinite(t)], p[np.isfinite(p)]])
    lo, hi = (finite.min(), finite.max()) if finite.size else (0.0, 1.0)
    ax.plot([lo, hi], [lo, hi], "k:", lw=1)
    if mse is not None:
        ax.text(0.05, 0.92, f"MSE {mse:.3g}", transform=ax.transAxes)
    ax.set_xlabel(f"reference {name}")
    ax.set_ylabel(f"predicted {name}")
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def plot_hypnograms(truth, pred, path, title: str = ""):
    """Reference and predicted hypnogram strips (padding dropped)."""
    plt = _pyplot()
    truth = np.asarray(truth)
    keep = truth != SleepStage.PAD
    t = truth[keep]
    p = np.asarray(pred)[keep]
    # plot deepest stage at the bottom: W, REM, Light, Deep
    level = np.array([3, 1, 0, 2])
    hours = np.arange(t.size + 1) * WINDOW_SECONDS / 3600
    fig, axes = plt.subplots(2, 1, figsize=(8, 3), sharex=True)
    for ax, seq, label in zip(axes, (t, p), ("reference", "predicted")):
        ax.stairs(level[seq.astype(np.intp)], hours, baseline=None)
        ax.set_yticks([0, 1, 2, 3], ["Deep", "Light", "REM", "Wake"])
        ax.set_ylabel(label)
    axes[-1].set_xlabel("hours")
    if title:
        axes[0].set_title(title)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path
