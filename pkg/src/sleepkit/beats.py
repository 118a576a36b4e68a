"""Beat detection, inter-beat interval quality and instantaneous rate series."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from ._errors import DataError
from .dsp import bandpass_filter, filtfilt
from .records import WINDOW_SECONDS, Record

IBI_RANGE_MS = (300.0, 2000.0)
MAX_IBI_JUMP = 0.40
RATE_SAMPLES_PER_WINDOW = 64
RATE_FS = RATE_SAMPLES_PER_WINDOW / WINDOW_SECONDS  # 2.1333... Hz
RATE_CLAMP_BPM = (20.0, 220.0)


@dataclass(frozen=True)
class BeatSeries:
    """Beat times (s) with one quality flag per inter-beat interval."""

    beat_times: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        bt = np.asarray(self.beat_times, dtype=np.float64)
        if bt.ndim != 1 or np.any(np.diff(bt) <= 0):
            raise DataError("beat times must be strictly increasing")
        if len(self.valid) != max(len(bt) - 1, 0):
            raise DataError("need one validity flag per inter-beat interval")

    @classmethod
    def from_times(cls, beat_times) -> "BeatSeries":
        bt = np.asarray(beat_times, dtype=np.float64)
        return cls(bt, np.ones(max(len(bt) - 1, 0), dtype=bool))

    @property
    def ibis(self) -> np.ndarray:
        """Inter-beat intervals in milliseconds."""
        return 1000.0 * np.diff(self.beat_times)

    def __len__(self):
        return len(self.beat_times)


def _refine_peak(x: np.ndarray, i: int) -> float:
    # parabolic interpolation around a sample maximum
    if 0 < i < len(x) - 1:
        y0, y1, y2 = x[i - 1], x[i], x[i + 1]
        denom = y0 - 2 * y1 + y2
        if denom < 0:
            return i + 0.5 * (y0 - y2) / denom
    return float(i)


def detect_beats(
    x: np.ndarray,
    fs: float,
    *,
    percentile: float = 60.0,
    history: int = 50,
    refractory_s: float = 0.33,
    block_s: float = 10.0,
    rel_threshold: float = 0.5,
) -> BeatSeries:
    """Block-adaptive PPG peak detector on a band-passed signal.

    The signal is scanned in ``block_s`` blocks. Candidate beats are local
    maxima reached by a rising upstroke. A candidate is kept when it exceeds
    both the block's ``percentile``-th signal percentile and ``rel_threshold``
    times the ``percentile``-th percentile of the last ``history`` accepted
    peak amplitudes. Within ``refractory_s`` only the tallest candidate
    survives.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or len(x) < 3:
        raise DataError("beat detection needs at least 3 samples")
    d = np.diff(x)
    cand = np.flatnonzero((d[:-1] > 0) & (d[1:] <= 0)) + 1
    refractory = int(round(refractory_s * fs))
    block = max(int(round(block_s * fs)), 1)
    amps_hist: deque = deque(maxlen=history)
    accepted: list[int] = []

    for start in range(0, len(x), block):
        stop = min(start + block, len(x))
        lo, hi = np.searchsorted(cand, [start, stop])
        c = cand[lo:hi]
        if c.size == 0:
            continue
        floor = np.percentile(x[start:stop], percentile)
        amps = x[c]
        if amps_hist:
            ref = np.percentile(np.fromiter(amps_hist, float), percentile)
        else:
            above = amps[amps > floor]
            ref = np.percentile(above, percentile) if above.size else np.inf
        keep = c[(amps > floor) & (amps > rel_threshold * ref)]
        if keep.size == 0:
            continue
        # tallest first; reject anything inside the refractory period of a kept beat
        recent = [p for p in accepted[-3:] if p > start - refractory]
        chosen: list[int] = []
        for i in keep[np.argsort(-x[keep], kind="stable")]:
            if all(abs(i - p) >= refractory for p in recent + chosen):
                chosen.append(int(i))
        chosen.sort()
        accepted.extend(chosen)
        amps_hist.extend(x[chosen])

    times = np.array([_refine_peak(x, i) for i in accepted]) / fs
    return BeatSeries.from_times(times)


def ibi_quality(beats: BeatSeries) -> BeatSeries:
    """Flag IBIs outside [300, 2000] ms or jumping > 40 % from the last valid IBI."""
    ibis = beats.ibis
    valid = np.zeros(len(ibis), dtype=bool)
    prev = None
    lo, hi = IBI_RANGE_MS
    for i, ibi in enumerate(ibis):
        if not lo <= ibi <= hi:
            continue
        if prev is not None and abs(ibi - prev) > MAX_IBI_JUMP * prev:
            continue
        valid[i] = True
        prev = ibi
    return BeatSeries(beats.beat_times, valid)


@dataclass(frozen=True)
class RateSeries:
    samples: np.ndarray
    fs: float = RATE_FS


def derive_rate_series(
    beats: BeatSeries,
    duration_s: float,
    fs_out: float = RATE_FS,
    *,
    gap_s: float = 5.0,
    standardize: bool = True,
    default_bpm: float = 60.0,
) -> RateSeries:
    """Instantaneous rate (bpm) on a uniform grid from the valid IBIs.

    Each valid IBI contributes ``60000 / ibi`` at the time of its closing beat.
    Points are linearly interpolated; stretches longer than ``gap_s`` without a
    rate point (including the leading and trailing edges) take the median
    rate. Values are clamped to [20, 220] bpm and, by default, z-scored.
    """
    n = int(round(duration_s * fs_out))
    grid = np.arange(n) / fs_out
    ibis = beats.ibis
    mask = np.asarray(beats.valid, dtype=bool)
    t_pts = beats.beat_times[1:][mask]
    r_pts = 60000.0 / ibis[mask]
    if t_pts.size == 0:
        rate = np.full(n, default_bpm)
    else:
        median = float(np.median(r_pts))
        rate = np.interp(grid, t_pts, r_pts)
        gaps = np.zeros(n, dtype=bool)
        if t_pts[0] - 0.0 > gap_s:
            gaps |= grid < t_pts[0]
        if duration_s - t_pts[-1] > gap_s:
            gaps |= grid > t_pts[-1]
        for i in np.flatnonzero(np.diff(t_pts) > gap_s):
            gaps |= (grid > t_pts[i]) & (grid < t_pts[i + 1])
        rate[gaps] = median
    rate = np.clip(rate, *RATE_CLAMP_BPM)
    if standardize and n:
        sd = rate.std()
        rate = (rate - rate.mean()) / sd if sd > 0 else np.zeros_like(rate)
    return RateSeries(rate, fs_out)


def record_beats(record: Record) -> BeatSeries:
    """Band-pass the unpadded part of ``record`` and detect quality-flagged beats."""
    sig = np.asarray(record.signal, dtype=np.float64)[: record.n_valid]
    filt = filtfilt(bandpass_filter(float(record.fs)), sig)
    return ibi_quality(detect_beats(filt, record.fs))


def rate_context_windows(
    rate: np.ndarray,
    samples_per_window: int = RATE_SAMPLES_PER_WINDOW,
    width: int = 256,
) -> np.ndarray:
    """Cut a rate series into per-window rows of ``width`` samples.

    Row ``l`` holds window ``l`` centred in ``width`` samples of context
    (zero outside the series), giving shape ``(n_windows, width)``.
    """
    rate = np.asarray(rate)
    n_win = len(rate) // samples_per_window
    left = (width - samples_per_window) // 2
    padded = np.concatenate([np.zeros(left), rate, np.zeros(width)])
    starts = np.arange(n_win) * samples_per_window
    idx = starts[:, None] + np.arange(width)[None, :]
    return padded[idx]
