"""Engineered per-window features for the feature-based benchmark model.

Each 30 s window gets 21 pulse-rate-variability (PRV) measures from its
inter-beat intervals and 41 morphological (MOR) measures from the band-passed
PPG. Both sets are computed twice, once on the window alone and once on the
window with two neighbours on each side (150 s), and the two demographic
values are appended: 2 * (21 + 41) + 2 = 126 columns.

PRV set (21)
    AVNN, SDNN, RMSSD, SDSD, pNN20, pNN50, CV, medianNN, IQRNN, minNN, maxNN,
    SD1, SD2, SD1_SD2, SampEn, VLF, LF, HF, TP, LF_HF, LFnu

MOR set (41)
    mean and SD over beats of 14 per-beat measures: amplitude, crest_time,
    downslope_time, duration, crest_ratio, width25, width50, width75,
    max_upslope, max_downslope, a_wave, b_wave, b_a_ratio, area; plus 13
    window measures: bp_0.04_0.15, bp_0.15_0.4, bp_0.4_2, bp_2_8,
    spec_centroid, spec_entropy, dominant_freq, spec_edge95, skewness,
    kurtosis, zero_cross_rate, std, ptp.
"""

from __future__ import annotations

import hashlib
import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import signal as sps
from scipy import stats

from .beats import BeatSeries, record_beats
from .dsp import bandpass_filter, filtfilt
from .records import WINDOW_SECONDS, Record

PRV_NAMES = (
    "AVNN", "SDNN", "RMSSD", "SDSD", "pNN20", "pNN50", "CV", "medianNN",
    "IQRNN", "minNN", "maxNN", "SD1", "SD2", "SD1_SD2", "SampEn",
    "VLF", "LF", "HF", "TP", "LF_HF", "LFnu",
)
BEAT_NAMES = (
    "amplitude", "crest_time", "downslope_time", "duration", "crest_ratio",
    "width25", "width50", "width75", "max_upslope", "max_downslope",
    "a_wave", "b_wave", "b_a_ratio", "area",
)
WINDOW_NAMES = (
    "bp_0.04_0.15", "bp_0.15_0.4", "bp_0.4_2", "bp_2_8", "spec_centroid",
    "spec_entropy", "dominant_freq", "spec_edge95", "skewness", "kurtosis",
    "zero_cross_rate", "std", "ptp",
)
MOR_NAMES = tuple(
    f"{n}_{agg}" for n in BEAT_NAMES for agg in ("mean", "sd")
) + WINDOW_NAMES
DEMOGRAPHIC_NAMES = ("age", "sex")

# how each MOR feature responds to scaling the signal by c > 0
MOR_SCALING = {
    **{f"{n}_{a}": 1 for n in ("amplitude", "max_upslope", "max_downslope",
                               "a_wave", "b_wave", "area") for a in ("mean", "sd")},
    **{f"{n}_{a}": 0 for n in ("crest_time", "downslope_time", "duration",
                               "crest_ratio", "width25", "width50", "width75",
                               "b_a_ratio") for a in ("mean", "sd")},
    "bp_0.04_0.15": 2, "bp_0.15_0.4": 2, "bp_0.4_2": 2, "bp_2_8": 2,
    "spec_centroid": 0, "spec_entropy": 0, "dominant_freq": 0, "spec_edge95": 0,
    "skewness": 0, "kurtosis": 0, "zero_cross_rate": 0, "std": 1, "ptp": 1,
}

assert len(PRV_NAMES) == 21 and len(MOR_NAMES) == 41

VLF_BAND = (0.003, 0.04)
LF_BAND = (0.04, 0.15)
HF_BAND = (0.15, 0.4)
LOMB_FREQS = np.arange(0.003, 0.4005, 0.001)
MIN_IBIS = 4


# -- PRV ---------------------------------------------------------------------

def sample_entropy(x: np.ndarray, m: int = 2, r: float | None = None) -> float:
    """Sample entropy with Chebyshev distance, tolerance ``r`` (default 0.2 SD)."""
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    if r is None:
        r = 0.2 * x.std(ddof=1)
    if n <= m + 1:
        return math.nan

    def matches(length):
        templ = np.lib.stride_tricks.sliding_window_view(x, length)[: n - m]
        dist = np.max(np.abs(templ[:, None, :] - templ[None, :, :]), axis=2)
        return (np.count_nonzero(dist <= r) - len(templ)) / 2

    b = matches(m)
    a = matches(m + 1)
    if a == 0 or b == 0:
        return math.nan
    return float(-math.log(a / b))


def _lomb_band_powers(ibis: np.ndarray) -> tuple[float, float, float]:
    t = np.cumsum(ibis) / 1000.0
    y = ibis - ibis.mean()
    if not np.any(y):
        return 0.0, 0.0, 0.0
    p = sps.lombscargle(t, y, 2 * np.pi * LOMB_FREQS, precenter=False, normalize=False)
    # scale to a one-sided density in ms^2/Hz
    psd = 2.0 * p * (t[-1] - t[0]) / len(t)
    out = []
    for lo, hi in (VLF_BAND, LF_BAND, HF_BAND):
        sel = (LOMB_FREQS >= lo) & (LOMB_FREQS < hi)
        out.append(float(np.trapezoid(psd[sel], LOMB_FREQS[sel])))
    return tuple(out)


def prv_features(ibis) -> np.ndarray:
    """The 21 PRV measures of a sequence of valid IBIs (ms), ordered as PRV_NAMES.

    Fewer than four IBIs gives an all-NaN row.
    """
    nn = np.asarray(ibis, dtype=np.float64)
    if len(nn) < MIN_IBIS:
        return np.full(len(PRV_NAMES), np.nan)
    diff = np.diff(nn)
    avnn = nn.mean()
    sdnn = nn.std(ddof=1)
    sdsd = diff.std(ddof=1) if len(diff) > 1 else 0.0
    sd1 = math.sqrt(0.5) * sdsd
    sd2 = math.sqrt(max(2 * sdnn**2 - 0.5 * sdsd**2, 0.0))
    q75, q25 = np.percentile(nn, [75, 25])
    vlf, lf, hf = _lomb_band_powers(nn)
    tp = vlf + lf + hf
    with np.errstate(divide="ignore", invalid="ignore"):
        values = [
            avnn,
            sdnn,
            math.sqrt(np.mean(diff**2)),
            sdsd,
            np.mean(np.abs(diff) > 20),
            np.mean(np.abs(diff) > 50),
            sdnn / avnn,
            np.median(nn),
            q75 - q25,
            nn.min(),
            nn.max(),
            sd1,
            sd2,
            sd1 / sd2 if sd2 > 0 else math.nan,
            sample_entropy(nn, 2, 0.2 * sdnn),
            vlf,
            lf,
            hf,
            tp,
            lf / hf if hf > 0 else math.nan,
            lf / (lf + hf) if lf + hf > 0 else math.nan,
        ]
    return np.asarray(values, dtype=np.float64)


# -- MOR ---------------------------------------------------------------------

def _crossing(x: np.ndarray, i_from: int, i_to: int, level: float) -> float:
    """Fractional index where x crosses ``level`` walking from i_from towards i_to."""
    step = 1 if i_to > i_from else -1
    prev = i_from
    for i in range(i_from + step, i_to + step, step):
        if x[i] <= level:
            # x[prev] > level >= x[i]
            frac = (x[prev] - level) / (x[prev] - x[i])
            return prev + step * frac
        prev = i
    return float(i_to)


def beat_morphology(x: np.ndarray, fs: float, peak_times, max_span_s: float = 1.5) -> np.ndarray:
    """Per-beat morphology, shape ``(n_beats, 14)`` ordered as BEAT_NAMES.

    Feet are the minima between a peak and its neighbouring peaks (bounded by
    ``max_span_s``); the second-derivative a-wave is the largest acceleration on
    the upstroke and the b-wave the smallest acceleration after it.
    """
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    peaks = np.clip(np.round(np.asarray(peak_times) * fs).astype(int), 0, n - 1)
    d1 = np.gradient(x) * fs
    d2 = np.gradient(d1) * fs
    span = int(round(max_span_s * fs))
    out = np.full((len(peaks), len(BEAT_NAMES)), np.nan)
    for k, p in enumerate(peaks):
        lo = max(peaks[k - 1] if k > 0 else p - span, p - span, 0)
        hi = min(peaks[k + 1] if k + 1 < len(peaks) else p + span, p + span, n - 1)
        if p - lo < 2 or hi - p < 2:
            continue
        fb = lo + int(np.argmin(x[lo : p + 1]))
        fa = p + int(np.argmin(x[p : hi + 1]))
        if fb >= p or fa <= p:
            continue
        base = x[fb]
        amp = x[p] - base
        if amp <= 0:
            continue
        widths = []
        for q in (0.25, 0.5, 0.75):
            level = base + q * amp
            left = _crossing(x, p, fb, level)
            right = _crossing(x, p, fa, level)
            widths.append((right - left) / fs)
        up = d2[fb : p + 1]
        ia = fb + int(np.argmax(up))
        a_wave = d2[ia]
        ib = ia + int(np.argmin(d2[ia : fa + 1]))
        b_wave = d2[ib]
        out[k] = (
            amp,
            (p - fb) / fs,
            (fa - p) / fs,
            (fa - fb) / fs,
            (p - fb) / (fa - fb),
            *widths,
            d1[fb : p + 1].max(),
            d1[p : fa + 1].min(),
            a_wave,
            b_wave,
            b_wave / a_wave if a_wave > 0 else np.nan,
            np.sum(x[fb : fa + 1] - base) / fs,
        )
    return out


def _aggregate_beats(per_beat: np.ndarray) -> np.ndarray:
    out = np.full(2 * len(BEAT_NAMES), np.nan)
    if len(per_beat) == 0:
        return out
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        out[0::2] = np.nanmean(per_beat, axis=0)
        out[1::2] = np.nanstd(per_beat, axis=0)
    return out


def window_spectral(x: np.ndarray, fs: float) -> np.ndarray:
    """The 13 window-level MOR measures ordered as WINDOW_NAMES."""
    x = np.asarray(x, dtype=np.float64)
    out = np.full(len(WINDOW_NAMES), np.nan)
    if len(x) < 4:
        return out
    f, p = sps.periodogram(x, fs, window="hann", detrend="constant")
    df = f[1] - f[0]
    for i, (lo, hi) in enumerate(((0.04, 0.15), (0.15, 0.4), (0.4, 2.0), (2.0, 8.0))):
        out[i] = p[(f >= lo) & (f < hi)].sum() * df
    sel = (f >= 0.04) & (f <= 8.0)
    fb, pb = f[sel], p[sel]
    total = pb.sum()
    if total > 0:
        pn = pb / total
        out[4] = np.sum(fb * pn)
        nz = pn[pn > 0]
        out[5] = -np.sum(nz * np.log(nz)) / math.log(len(pn)) if len(pn) > 1 else 0.0
        out[6] = fb[np.argmax(pb)]
        out[7] = fb[min(np.searchsorted(np.cumsum(pn), 0.95), len(fb) - 1)]
    sd = x.std()
    if sd > 0:
        out[8] = stats.skew(x)
        out[9] = stats.kurtosis(x)
    centred = x - x.mean()
    out[10] = np.count_nonzero(np.diff(np.signbit(centred))) / (len(x) / fs)
    out[11] = sd
    out[12] = np.ptp(x)
    return out


def mor_features(x: np.ndarray, fs: float, beats: BeatSeries | np.ndarray) -> np.ndarray:
    """The 41 MOR measures of one band-passed window (NaN row without beats).

    ``beats`` holds beat times in seconds relative to the start of ``x``.
    """
    times = beats.beat_times if isinstance(beats, BeatSeries) else np.asarray(beats)
    times = times[(times >= 0) & (times < len(x) / fs)]
    if len(times) == 0:
        return np.full(len(MOR_NAMES), np.nan)
    per_beat = beat_morphology(x, fs, times)
    return np.concatenate([_aggregate_beats(per_beat), window_spectral(x, fs)])


# -- feature matrix ----------------------------------------------------------

@dataclass(frozen=True)
class FeatureMatrix:
    values: np.ndarray
    names: tuple
    mask: np.ndarray

    @property
    def n_demographics(self) -> int:
        return sum(n.startswith("demo_") for n in self.names)

    def schema_hash(self) -> str:
        return hashlib.sha256("\n".join(self.names).encode()).hexdigest()[:16]


def feature_names() -> tuple:
    names = []
    for prefix in ("win", "ctx"):
        names += [f"{prefix}_prv_{n}" for n in PRV_NAMES]
        names += [f"{prefix}_mor_{n}" for n in MOR_NAMES]
    names += [f"demo_{n}" for n in DEMOGRAPHIC_NAMES]
    return tuple(names)


def demographic_columns(demographics) -> np.ndarray:
    """Scale (age, sex) to (age / 100, sex)."""
    demo = np.asarray(demographics, dtype=np.float64)
    return np.array([demo[0] / 100.0, demo[1]])


def windowed_features(
    record: Record,
    beats: BeatSeries | None = None,
    context: int = 2,
) -> FeatureMatrix:
    """Raw (unstandardized) 126-column feature matrix of a normalized record.

    Column order: window PRV, window MOR, context PRV, context MOR,
    demographics. Context sets span windows l - context .. l + context and
    shrink at the record edges.
    """
    fs = float(record.fs)
    n_win = record.n_windows or int(round(len(record.signal) / (fs * WINDOW_SECONDS)))
    n_valid = record.n_valid
    sig = np.asarray(record.signal, dtype=np.float64)[:n_valid]
    x = filtfilt(bandpass_filter(fs), sig)
    if beats is None:
        beats = record_beats(record)
    times = beats.beat_times
    per_beat = beat_morphology(x, fs, times)
    beat_win = np.floor(times / WINDOW_SECONDS).astype(int)
    ibi_end = times[1:]
    ibi_win = np.floor(ibi_end / WINDOW_SECONDS).astype(int)
    ibis = beats.ibis
    valid_ibi = np.asarray(beats.valid, dtype=bool)

    win_len = int(round(WINDOW_SECONDS * fs))
    n_rec_win = min(n_win, int(math.ceil(n_valid / win_len)))
    hyp = record.hypnogram
    mask = np.zeros(n_win, dtype=bool)
    mask[:n_rec_win] = True
    if hyp is not None:
        mask &= np.asarray(hyp) != 255

    n_set = len(PRV_NAMES) + len(MOR_NAMES)
    values = np.full((n_win, 2 * n_set + 2), np.nan)
    for l in range(n_rec_win):
        for j, (w0, w1) in enumerate(((l, l), (max(l - context, 0), min(l + context, n_rec_win - 1)))):
            sel_ibi = valid_ibi & (ibi_win >= w0) & (ibi_win <= w1)
            sel_beat = (beat_win >= w0) & (beat_win <= w1)
            seg = x[w0 * win_len : (w1 + 1) * win_len]
            prv = prv_features(ibis[sel_ibi])
            if sel_beat.any():
                mor = np.concatenate([_aggregate_beats(per_beat[sel_beat]), window_spectral(seg, fs)])
            else:
                mor = np.full(len(MOR_NAMES), np.nan)
            values[l, j * n_set : (j + 1) * n_set] = np.concatenate([prv, mor])
    values[:, -2:] = demographic_columns(record.demographics)
    return FeatureMatrix(values, feature_names(), mask)


def standardize_per_patient(fm: FeatureMatrix) -> FeatureMatrix:
    """Median-impute NaNs, then z-score every non-demographic column.

    Statistics use the masked (scored) windows only; unmasked rows become 0.
    Zero-variance and all-NaN columns become 0. Demographic columns are
    passed through.
    """
    values = np.array(fm.values, dtype=np.float64)
    mask = np.asarray(fm.mask, dtype=bool)
    n_demo = fm.n_demographics
    n_feat = values.shape[1] - n_demo
    out = values.copy()
    for c in range(n_feat):
        col = values[mask, c]
        finite = np.isfinite(col)
        if not finite.any():
            out[:, c] = 0.0
            continue
        col = np.where(finite, col, np.median(col[finite]))
        sd = col.std()
        res = np.zeros(len(values))
        if sd > 0:
            res[mask] = (col - col.mean()) / sd
        out[:, c] = res
    if n_demo:
        out[~mask, n_feat:] = values[~mask, n_feat:]
    out[~np.isfinite(out)] = 0.0
    return FeatureMatrix(out, fm.names, mask)
