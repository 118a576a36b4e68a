"""Patient records: waveform, hypnogram and demographics.

A record holds one night of a single-channel cardiovascular waveform (PPG or
ECG), the per-window sleep stage labels and a small demographic vector. Records
are normalized to a fixed number of 30 s windows (1200 windows = 10 h by
default): longer nights are truncated at the end, shorter nights are
zero-padded and their hypnogram is filled with :attr:`SleepStage.PAD`.

On disk a record is a waveform file (``.csv`` with one sample per line, or
``.f32`` raw little-endian float32) next to a JSON sidecar ``<name>.meta.json``.
"""

from __future__ import annotations

import dataclasses
import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from ._errors import DataError

WINDOW_SECONDS = 30
N_WINDOWS = 1200


class SleepStage(enum.IntEnum):
    WAKE = 0
    LIGHT = 1
    DEEP = 2
    REM = 3
    PAD = 255


STAGE_NAMES = {0: "Wake", 1: "Light", 2: "Deep", 3: "REM", 255: "Pad"}
N_CLASSES = 4

# source code -> 4-class stage
_SCHEMES = {
    "AASM": {0: 0, 1: 1, 2: 1, 3: 2, 5: 3, 9: 255},
    "RK": {0: 0, 1: 1, 2: 1, 3: 2, 4: 2, 5: 3, 9: 255},
    "STAGE4": {0: 0, 1: 1, 2: 2, 3: 3, 255: 255},
}
UNSCORED = 9


def map_labels(raw_labels: Sequence[int], scheme: str = "AASM") -> np.ndarray:
    """Map source sleep-scoring codes onto the 4-class hypnogram.

    Parameters
    ----------
    raw_labels : sequence of int
        One code per 30 s window. AASM codes are ``{0: W, 1: N1, 2: N2,
        3: N3, 5: REM, 9: unscored}``; R&K codes are ``{0: W, 1: S1, 2: S2,
        3: S3, 4: S4, 5: REM, 9: unscored}``. ``"STAGE4"`` accepts an already
        mapped hypnogram and returns it unchanged.
    scheme : {"AASM", "RK", "STAGE4"}

    Returns
    -------
    numpy.ndarray of uint8
    """
    try:
        table = _SCHEMES[scheme.upper()]
    except KeyError:
        raise DataError(f"unknown label scheme {scheme!r}") from None
    raw = np.asarray(raw_labels)
    out = np.empty(raw.shape[0], dtype=np.uint8)
    for i, code in enumerate(raw.tolist()):
        try:
            out[i] = table[int(code)]
        except (KeyError, ValueError, TypeError):
            raise DataError(
                f"unknown {scheme} label {code!r} at window {i}"
            ) from None
    return out


def check_hypnogram(stages: np.ndarray) -> None:
    """Raise if ``stages`` holds an invalid code or Pad inside the scored region."""
    stages = np.asarray(stages)
    bad = ~np.isin(stages, (0, 1, 2, 3, 255))
    if bad.any():
        raise DataError(f"invalid stage code at window {int(np.argmax(bad))}")
    pad = stages == SleepStage.PAD
    if pad.any():
        first = int(np.argmax(pad))
        if not pad[first:].all():
            raise DataError("Pad windows must form a contiguous suffix")


@dataclass(frozen=True)
class Record:
    id: str
    signal: np.ndarray
    fs: float
    kind: str = "PPG"
    hypnogram: np.ndarray | None = None
    demographics: np.ndarray = field(default_factory=lambda: np.zeros(2))
    groups: Mapping[str, str] = field(default_factory=dict)
    # samples recorded before any zero padding; None means the whole signal
    valid_samples: int | None = None
    # ground-truth beat times (s) for synthetic records
    beat_times: np.ndarray | None = None

    def __post_init__(self):
        if not self.fs > 0:
            raise DataError(f"record {self.id}: sampling rate must be positive")
        if self.kind not in ("PPG", "ECG"):
            raise DataError(f"record {self.id}: kind must be PPG or ECG")
        demo = np.asarray(self.demographics, dtype=float)
        if not np.all(np.isfinite(demo)):
            raise DataError(f"record {self.id}: non-finite demographics")

    @property
    def n_valid(self) -> int:
        return len(self.signal) if self.valid_samples is None else self.valid_samples

    @property
    def duration_s(self) -> float:
        return len(self.signal) / self.fs

    @property
    def n_windows(self) -> int:
        return 0 if self.hypnogram is None else len(self.hypnogram)


def normalize_duration(record: Record, n_windows: int = N_WINDOWS) -> Record:
    """Pad or truncate ``record`` to exactly ``n_windows`` 30 s windows.

    Truncation keeps the start of the night. Signal padding is zeros,
    hypnogram padding is Pad.
    """
    n_target = int(round(n_windows * WINDOW_SECONDS * record.fs))
    sig = np.asarray(record.signal)
    n_keep = min(len(sig), n_target)
    signal = np.zeros(n_target, dtype=sig.dtype if sig.size else np.float64)
    signal[:n_keep] = sig[:n_keep]

    hyp = np.full(n_windows, SleepStage.PAD, dtype=np.uint8)
    if record.hypnogram is not None:
        src = np.asarray(record.hypnogram, dtype=np.uint8)[:n_windows]
        hyp[: len(src)] = src
    # windows without any recorded signal cannot be scored
    covered = int(math.ceil(n_keep / (WINDOW_SECONDS * record.fs) - 1e-9))
    hyp[covered:] = SleepStage.PAD

    valid = min(record.n_valid, n_keep)
    beats = record.beat_times
    if beats is not None:
        beats = beats[beats < n_target / record.fs]
    return dataclasses.replace(
        record, signal=signal, hypnogram=hyp, valid_samples=valid, beat_times=beats
    )


# -- file format -------------------------------------------------------------

def sidecar_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name.split(".")[0] + ".meta.json")


def _infer_format(path: Path) -> str:
    suffix = path.suffix.lower()
    if suffix == ".csv":
        return "CSV"
    if suffix in (".f32", ".raw", ".rawf32", ".bin"):
        return "RAWF32"
    raise DataError(f"{path}: cannot infer waveform format from suffix {suffix!r}")


def load_record(path: str | Path, format: str | None = None) -> Record:
    """Read a waveform file and its JSON sidecar into a :class:`Record`."""
    path = Path(path)
    fmt = (format or _infer_format(path)).upper()
    meta_path = sidecar_path(path)
    try:
        meta = json.loads(meta_path.read_text())
    except FileNotFoundError:
        raise DataError(f"{meta_path}: sidecar not found") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{meta_path}: malformed sidecar ({exc})") from None
    if not isinstance(meta, dict):
        raise DataError(f"{meta_path}: sidecar must be a JSON object")
    for key in ("fs", "kind"):
        if key not in meta:
            raise DataError(f"{meta_path}: missing field {key!r}")

    if fmt == "CSV":
        try:
            signal = np.loadtxt(path, dtype=np.float64, ndmin=1, delimiter=",")
        except ValueError as exc:
            raise DataError(f"{path}: {exc}") from None
    elif fmt == "RAWF32":
        raw = path.read_bytes()
        if len(raw) % 4:
            raise DataError(f"{path}: byte count {len(raw)} is not a multiple of 4")
        signal = np.frombuffer(raw, dtype="<f4").astype(np.float32)
    else:
        raise DataError(f"unknown waveform format {format!r}")

    declared = meta.get("n_samples")
    if declared is not None and int(declared) != len(signal):
        raise DataError(
            f"{path}: sidecar declares {declared} samples, file holds {len(signal)}"
        )

    hyp = None
    if meta.get("labels") is not None:
        hyp = map_labels(meta["labels"], meta.get("label_scheme", "AASM"))
    demo = meta.get("demographics") or {}
    try:
        fs = float(meta["fs"])
        demographics = np.array(
            [float(demo.get("age", 0.0)), float(demo.get("sex", 0.0))]
        )
    except (TypeError, ValueError) as exc:
        raise DataError(f"{meta_path}: {exc}") from None
    valid = meta.get("valid_samples")
    return Record(
        id=str(meta.get("id", path.name.split(".")[0])),
        signal=signal,
        fs=fs,
        kind=meta["kind"],
        hypnogram=hyp,
        demographics=demographics,
        groups={str(k): str(v) for k, v in (meta.get("groups") or {}).items()},
        valid_samples=None if valid is None else int(valid),
    )


def save_record(record: Record, path: str | Path, format: str | None = None) -> Path:
    """Write ``record`` as waveform + sidecar. Returns the sidecar path."""
    path = Path(path)
    fmt = (format or _infer_format(path)).upper()
    signal = np.asarray(record.signal)
    if fmt == "CSV":
        np.savetxt(path, signal, fmt="%.9g")
    elif fmt == "RAWF32":
        path.write_bytes(signal.astype("<f4").tobytes())
    else:
        raise DataError(f"unknown waveform format {format!r}")
    meta = {
        "id": record.id,
        "fs": record.fs,
        "kind": record.kind,
        "n_samples": int(len(signal)),
        "label_scheme": "STAGE4",
        "labels": None if record.hypnogram is None else [int(v) for v in record.hypnogram],
        "demographics": {
            "age": float(record.demographics[0]),
            "sex": float(record.demographics[1]),
        },
        "groups": dict(record.groups),
    }
    if record.valid_samples is not None:
        meta["valid_samples"] = int(record.valid_samples)
    meta_path = sidecar_path(path)
    meta_path.write_text(json.dumps(meta, indent=1))
    return meta_path


# -- synthetic records --------------------------------------------------------

@dataclass(frozen=True)
class SynthProfile:
    """Stage-dependent generator settings; per-stage tuples are (W, L, D, REM)."""

    n_windows: int = N_WINDOWS
    fs: float = 256.0
    kind: str = "PPG"
    rate_mean: tuple = (74.0, 62.0, 55.0, 68.0)  # bpm
    rate_sd: tuple = (5.0, 2.0, 1.0, 4.0)  # bpm, slow AR(1) beat-rate variation
    rsa_depth: tuple = (1.0, 2.0, 3.0, 0.5)  # bpm, respiratory sinus arrhythmia
    resp_depth: tuple = (0.10, 0.20, 0.35, 0.05)  # baseline modulation, pulse units
    pulse_amp: tuple = (1.0, 1.0, 1.1, 0.7)
    noise: tuple = (0.12, 0.04, 0.03, 0.05)  # white noise SD, pulse units
    resp_rate_hz: float = 0.25
    stay_prob: float = 0.9
    stage_probs: tuple = (0.30, 0.45, 0.12, 0.13)
    # fraction of the night that is recorded; the remainder is padding
    recorded_fraction: float = 1.0

    def validate(self):
        if self.n_windows < 1 or not self.fs > 0:
            raise DataError("profile needs n_windows >= 1 and fs > 0")
        if any(r <= 0 for r in self.rate_mean):
            raise DataError("profile rate_mean must be positive")
        for name in ("rate_sd", "rsa_depth", "resp_depth", "noise"):
            if any(v < 0 for v in getattr(self, name)):
                raise DataError(f"profile {name} must be non-negative")
        if any(a <= 0 for a in self.pulse_amp):
            raise DataError("profile pulse_amp must be positive")
        if not 0 <= self.stay_prob <= 1:
            raise DataError("profile stay_prob must lie in [0, 1]")
        if not 0 < self.recorded_fraction <= 1:
            raise DataError("profile recorded_fraction must lie in (0, 1]")


def _markov_stages(rng: np.random.Generator, profile: SynthProfile, n: int) -> np.ndarray:
    probs = np.asarray(profile.stage_probs, dtype=float)
    stages = np.empty(n, dtype=np.uint8)
    cur = 0
    for i in range(n):
        if i and rng.random() >= profile.stay_prob:
            p = probs.copy()
            p[cur] = 0.0
            cur = int(rng.choice(4, p=p / p.sum()))
        stages[i] = cur
    return stages


def _ppg_pulse(tau: np.ndarray) -> np.ndarray:
    # fast upstroke, slower decay, dicrotic bump; maximum exactly at tau=0
    rise = np.exp(-0.5 * (tau / 0.08) ** 2)
    fall = np.exp(-0.5 * (tau / 0.16) ** 2)
    main = np.where(tau < 0, rise, fall)
    return main + 0.25 * np.exp(-0.5 * ((tau - 0.32) / 0.06) ** 2)


def _ecg_beat(tau: np.ndarray) -> np.ndarray:
    r = np.exp(-0.5 * (tau / 0.012) ** 2)
    q = -0.12 * np.exp(-0.5 * ((tau + 0.03) / 0.01) ** 2)
    s = -0.25 * np.exp(-0.5 * ((tau - 0.03) / 0.012) ** 2)
    t = 0.3 * np.exp(-0.5 * ((tau - 0.25) / 0.05) ** 2)
    return r + q + s + t


def render_waveform(
    beat_times: np.ndarray,
    fs: float,
    n_samples: int,
    kind: str = "PPG",
    amplitudes: np.ndarray | None = None,
) -> np.ndarray:
    """Sum a pulse template centred on each beat time (beat = systolic peak / R wave)."""
    template = _ppg_pulse if kind == "PPG" else _ecg_beat
    lo, hi = (-0.5, 0.8) if kind == "PPG" else (-0.15, 0.5)
    out = np.zeros(n_samples)
    if amplitudes is None:
        amplitudes = np.ones(len(beat_times))
    for tb, amp in zip(beat_times, amplitudes):
        i0 = max(int(math.ceil((tb + lo) * fs)), 0)
        i1 = min(int(math.floor((tb + hi) * fs)) + 1, n_samples)
        if i1 <= i0:
            continue
        tau = np.arange(i0, i1) / fs - tb
        out[i0:i1] += amp * template(tau)
    return out


def synthesize_record(seed: int, profile: SynthProfile | None = None) -> Record:
    """Generate a deterministic PPG/ECG-like record with a Markov hypnogram.

    Beat rate, beat-rate variability, respiratory baseline modulation, pulse
    amplitude and noise all depend on the current sleep stage. Ground-truth
    beat times are kept on the record for detector validation.
    """
    profile = profile or SynthProfile()
    profile.validate()
    rng = np.random.default_rng(seed)
    fs = float(profile.fs)
    n_win = profile.n_windows
    n_rec_win = max(1, int(round(n_win * profile.recorded_fraction)))
    duration = n_rec_win * WINDOW_SECONDS
    n_samples = int(round(duration * fs))

    stages = _markov_stages(rng, profile, n_rec_win)
    mean = np.asarray(profile.rate_mean, dtype=float)
    sd = np.asarray(profile.rate_sd, dtype=float)
    rsa = np.asarray(profile.rsa_depth, dtype=float)
    amp = np.asarray(profile.pulse_amp, dtype=float)
    two_pi_f = 2 * np.pi * profile.resp_rate_hz
    resp_phase = rng.uniform(0, 2 * np.pi)

    beats, amps = [], []
    t = 0.3
    ar = 0.0
    phi = 0.95
    innov = math.sqrt(1 - phi**2)
    while t < duration:
        s = stages[min(int(t // WINDOW_SECONDS), n_rec_win - 1)]
        beats.append(t)
        amps.append(amp[s] * (1.0 + 0.02 * sd[s] * rng.standard_normal()))
        ar = phi * ar + innov * rng.standard_normal()
        rate = mean[s] + sd[s] * ar + rsa[s] * math.sin(two_pi_f * t + resp_phase)
        t += 60.0 / min(max(rate, 30.0), 180.0)
    beat_times = np.asarray(beats)

    signal = render_waveform(beat_times, fs, n_samples, profile.kind, np.asarray(amps))
    tt = np.arange(n_samples) / fs
    win_idx = np.minimum((tt // WINDOW_SECONDS).astype(int), n_rec_win - 1)
    sample_stage = stages[win_idx]
    depth = np.asarray(profile.resp_depth, dtype=float)[sample_stage]
    signal += depth * np.sin(two_pi_f * tt + resp_phase)
    noise = np.asarray(profile.noise, dtype=float)[sample_stage]
    if noise.any():
        signal += noise * rng.standard_normal(n_samples)

    hyp = np.full(n_win, SleepStage.PAD, dtype=np.uint8)
    hyp[:n_rec_win] = stages
    age = float(rng.uniform(40, 85))
    sex = float(rng.integers(0, 2))
    ahi = float(rng.gamma(1.5, 8.0))
    groups = {
        "age": "<60" if age < 60 else ("60-70" if age < 70 else ">=70"),
        "sex": "M" if sex else "F",
        "race": str(rng.choice(["white", "black", "hispanic", "asian"])),
        "smoking": str(rng.choice(["never", "former", "current"])),
        "ahi": "<5" if ahi < 5 else ("5-15" if ahi < 15 else ("15-30" if ahi < 30 else ">=30")),
        "hypertension": str(rng.choice(["no", "yes"])),
        "diabetes": str(rng.choice(["no", "yes"], p=[0.8, 0.2])),
        "beta_blocker": str(rng.choice(["no", "yes"], p=[0.85, 0.15])),
    }
    record = Record(
        id=f"synth-{seed:05d}",
        signal=signal,
        fs=fs,
        kind=profile.kind,
        hypnogram=hyp,
        demographics=np.array([age, sex]),
        groups=groups,
        beat_times=beat_times,
    )
    return normalize_duration(record, n_win)
