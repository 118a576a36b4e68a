"""Waveform preprocessing: Chebyshev II filters, resampling, clipping.

The raw PPG (or ECG) becomes the network input ``WAV`` by a zero-phase 8th
order Chebyshev II low-pass at 8 Hz (40 dB stopband), linear-interpolation
resampling to 1024 samples per 30 s window (34.1333 Hz), clipping at three
standard deviations and z-scoring.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np
from scipy import signal as sps

from ._errors import DataError
from .records import WINDOW_SECONDS, Record

WAV_SAMPLES_PER_WINDOW = 1024
WAV_FS = WAV_SAMPLES_PER_WINDOW / WINDOW_SECONDS  # 34.1333... Hz

LOWPASS_HZ = 8.0
BANDPASS_HZ = (0.4, 8.0)
STOP_ATTEN_DB = 40.0
FILTER_ORDER = 8


@dataclass(frozen=True)
class IIRFilter:
    """Cascade of second-order sections plus the design it came from.

    ``sos`` uses the scipy layout ``[b0, b1, b2, 1, a1, a2]`` per row.
    """

    sos: np.ndarray
    order: int
    kind: str
    edges_hz: tuple
    stop_atten_db: float
    fs: float

    @property
    def sections(self) -> list[tuple[float, float, float, float, float]]:
        """Sections as ``(b0, b1, b2, a1, a2)`` tuples (``a0`` normalized to 1)."""
        return [(r[0], r[1], r[2], r[4], r[5]) for r in self.sos]

    def poles(self) -> np.ndarray:
        return np.concatenate([np.roots(r[3:]) for r in self.sos])

    def is_stable(self) -> bool:
        return bool(np.all(np.abs(self.poles()) < 1.0))

    def response(self, freqs_hz) -> np.ndarray:
        """Complex frequency response of the cascade at ``freqs_hz``."""
        z = np.exp(1j * 2 * np.pi * np.asarray(freqs_hz, dtype=float) / self.fs)
        h = np.ones_like(z)
        for r in self.sos:
            h *= np.polyval(r[2::-1], 1 / z) / np.polyval(r[:2:-1], 1 / z)
        return h

    @property
    def pad_length(self) -> int:
        return 3 * (2 * self.order + 1)


def design_cheby2(
    order: int,
    kind: str,
    edges_hz,
    stop_atten_db: float,
    fs: float,
) -> IIRFilter:
    """Design a Chebyshev type II filter as second-order sections.

    ``edges_hz`` are the stopband edges, i.e. the frequencies at which the
    attenuation first reaches ``stop_atten_db``. A band-pass design of
    ``order`` N has 2N poles.
    """
    edges = tuple(float(e) for e in np.atleast_1d(edges_hz))
    if kind == "lowpass":
        if len(edges) != 1:
            raise ValueError("lowpass design takes one edge frequency")
    elif kind == "bandpass":
        if len(edges) != 2 or edges[0] >= edges[1]:
            raise ValueError("bandpass design takes two increasing edge frequencies")
    else:
        raise ValueError(f"unsupported filter kind {kind!r}")
    if order < 1:
        raise ValueError("order must be positive")
    if stop_atten_db <= 0:
        raise ValueError("stopband attenuation must be positive")
    nyq = fs / 2
    if not all(0 < e < nyq for e in edges):
        raise ValueError(f"edges {edges} Hz outside (0, {nyq}) Hz for fs={fs}")
    wn = edges[0] if kind == "lowpass" else list(edges)
    sos = sps.cheby2(order, stop_atten_db, wn, btype=kind, output="sos", fs=fs)
    filt = IIRFilter(np.asarray(sos), order, kind, edges, float(stop_atten_db), float(fs))
    if not filt.is_stable():
        raise RuntimeError("Chebyshev II design produced an unstable filter")
    return filt


@functools.lru_cache(maxsize=16)
def lowpass_filter(fs: float) -> IIRFilter:
    return design_cheby2(FILTER_ORDER, "lowpass", LOWPASS_HZ, STOP_ATTEN_DB, fs)


@functools.lru_cache(maxsize=16)
def bandpass_filter(fs: float) -> IIRFilter:
    return design_cheby2(FILTER_ORDER, "bandpass", BANDPASS_HZ, STOP_ATTEN_DB, fs)


def filtfilt(filt: IIRFilter, x: np.ndarray) -> np.ndarray:
    """Zero-phase forward-backward filtering with odd reflection padding."""
    x = np.asarray(x, dtype=np.float64)
    padlen = filt.pad_length
    if x.shape[-1] <= padlen:
        raise DataError(
            f"input of {x.shape[-1]} samples too short for edge padding ({padlen})"
        )
    return sps.sosfiltfilt(filt.sos, x, padtype="odd", padlen=padlen)


def resample_count(n_in: int, fs_in: float, fs_out: float) -> int:
    return int(round(n_in * fs_out / fs_in))


def resample_linear(
    x: np.ndarray, fs_in: float, fs_out: float, n_out: int | None = None
) -> np.ndarray:
    """Linear-interpolation resampling; output sample i sits at time i / fs_out.

    Times past the last input sample hold the last value.
    """
    if not fs_out > 0 or not fs_in > 0:
        raise ValueError("sampling rates must be positive")
    x = np.asarray(x, dtype=np.float64)
    if n_out is None:
        n_out = resample_count(len(x), fs_in, fs_out)
    if fs_in == fs_out and n_out == len(x):
        return x.copy()
    pos = np.arange(n_out) * (fs_in / fs_out)
    return np.interp(pos, np.arange(len(x)), x)


def clip_standardize(x: np.ndarray, n_valid: int | None = None, n_sd: float = 3.0) -> np.ndarray:
    """Clip to mean +/- n_sd SD, then z-score; statistics use ``x[:n_valid]`` only.

    Samples past ``n_valid`` (zero padding) are set to 0.
    """
    x = np.asarray(x, dtype=np.float64)
    n_valid = len(x) if n_valid is None else int(n_valid)
    region = x[:n_valid]
    if region.size == 0:
        raise DataError("no unpadded samples to standardize")
    mu = region.mean()
    sd = region.std()
    if not sd > 0:
        raise DataError("cannot standardize a constant signal")
    clipped = np.clip(region, mu - n_sd * sd, mu + n_sd * sd)
    sd2 = clipped.std()
    out = np.zeros_like(x)
    out[:n_valid] = (clipped - clipped.mean()) / sd2
    return out


@dataclass(frozen=True)
class WavSeries:
    samples: np.ndarray
    fs: float
    n_valid: int

    @property
    def n_windows(self) -> int:
        return int(round(len(self.samples) / (self.fs * WINDOW_SECONDS)))

    def windows(self) -> np.ndarray:
        """Samples reshaped to ``(n_windows, samples_per_window)``."""
        return self.samples.reshape(self.n_windows, -1)


def preprocess_wav(
    record: Record, samples_per_window: int = WAV_SAMPLES_PER_WINDOW
) -> WavSeries:
    """Low-pass, resample, clip and standardize a normalized record."""
    fs = float(record.fs)
    if fs < 80:
        raise DataError(f"record {record.id}: sampling rate {fs} Hz below 80 Hz")
    sig = np.asarray(record.signal, dtype=np.float64)
    n_valid = min(record.n_valid, len(sig))
    filtered = np.zeros_like(sig)
    filtered[:n_valid] = filtfilt(lowpass_filter(fs), sig[:n_valid])

    fs_out = samples_per_window / WINDOW_SECONDS
    n_windows = int(round(len(sig) / (fs * WINDOW_SECONDS)))
    n_out = n_windows * samples_per_window
    wav = resample_linear(filtered, fs, fs_out, n_out)
    n_valid_out = min(resample_count(n_valid, fs, fs_out), n_out)
    wav = clip_standardize(wav, n_valid_out)
    return WavSeries(wav.astype(np.float32), fs_out, n_valid_out)
