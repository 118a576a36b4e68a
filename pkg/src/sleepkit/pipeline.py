"""Record -> model input conversion for the three architectures."""

from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from ._errors import ConfigError, DataError
from .beats import RATE_FS, RATE_SAMPLES_PER_WINDOW, derive_rate_series, rate_context_windows, record_beats
from .dsp import preprocess_wav
from .features import demographic_columns, standardize_per_patient, windowed_features
from .records import WINDOW_SECONDS, Record
from .training import Dataset

CACHE_ENV = "SLEEPKIT_CACHE"


def _cache_file(record: Record, arch: str, config) -> Path | None:
    root = os.environ.get(CACHE_ENV)
    if not root:
        return None
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(record.signal).tobytes())
    h.update(json.dumps([arch, asdict(config), record.fs, record.n_valid], default=str).encode())
    return Path(root) / f"{arch}-{h.hexdigest()[:24]}.npy"


def record_windows(record: Record) -> int:
    return record.n_windows or int(round(len(record.signal) / (record.fs * WINDOW_SECONDS)))


def _compute_inputs(record: Record, arch: str, config) -> np.ndarray:
    n_win = record_windows(record)
    if n_win != config.n_windows:
        raise DataError(
            f"record {record.id}: {n_win} windows, model expects {config.n_windows}"
        )
    if arch == "sleepppg":
        return preprocess_wav(record, config.samples_per_window).samples
    if arch == "bm_dts":
        rate = derive_rate_series(record_beats(record), n_win * WINDOW_SECONDS, RATE_FS)
        return rate_context_windows(rate.samples, RATE_SAMPLES_PER_WINDOW, config.window_width).astype(np.float32)
    if arch == "bm_fe":
        fm = standardize_per_patient(windowed_features(record))
        if fm.values.shape[1] != config.n_features:
            raise ConfigError(f"feature matrix has {fm.values.shape[1]} columns, model expects {config.n_features}")
        return fm.values.astype(np.float32)
    raise ConfigError(f"unknown architecture {arch!r}")


def model_inputs(record: Record, arch: str, config) -> np.ndarray:
    """Model-ready input array for one normalized record (cached when configured)."""
    path = _cache_file(record, arch, config)
    if path is not None and path.exists():
        return np.load(path)
    x = _compute_inputs(record, arch, config)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(".tmp.npy")
        np.save(tmp, x)
        os.replace(tmp, path)
    return x


def record_demographics(record: Record, config) -> np.ndarray:
    n = getattr(config, "n_demographics", 0)
    if n == 0:
        return np.zeros(0, dtype=np.float32)
    if n != 2:
        raise ConfigError("only the (age, sex) demographic pair is supported")
    return demographic_columns(record.demographics).astype(np.float32)


def _one(args):
    record, arch, config = args
    return model_inputs(record, arch, config)


def build_dataset(records, arch: str, config, jobs: int = 1) -> Dataset:
    """Stack model inputs, hypnograms and demographics of ``records``.

    ``jobs > 1`` converts records in worker processes; output order follows
    ``records`` regardless.
    """
    records = list(records)
    if not records:
        raise DataError("no records given")
    work = [(r, arch, config) for r in records]
    if jobs > 1 and len(records) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            inputs = list(pool.map(_one, work))
    else:
        inputs = [_one(w) for w in work]
    labels = []
    for r in records:
        if r.hypnogram is None:
            labels.append(np.full(config.n_windows, 255, dtype=np.uint8))
        else:
            labels.append(np.asarray(r.hypnogram, dtype=np.uint8))
    demo = np.stack([record_demographics(r, config) for r in records])
    return Dataset([r.id for r in records], np.stack(inputs), np.stack(labels), demo)
