"""scikit-learn style wrappers around the preprocessing and staging pipeline.

Estimators take lists of :class:`~sleepkit.records.Record` as ``X``; the
labels are read from each record's hypnogram, so ``y`` is optional.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._errors import DataError
from .beats import RATE_FS, derive_rate_series, rate_context_windows, record_beats
from .dsp import WAV_SAMPLES_PER_WINDOW, preprocess_wav
from .features import standardize_per_patient, windowed_features
from .metrics import per_patient_summary
from .nn.models import CONFIGS, build_model, config_from_dict
from .pipeline import build_dataset, record_windows
from .records import WINDOW_SECONDS, N_CLASSES, Record, normalize_duration
from .training import Dataset, TrainConfig, predict_proba, run_training


def check_records(X, n_windows: int | None = None) -> list:
    """Validate a record collection and optionally normalize its duration."""
    if isinstance(X, Record):
        X = [X]
    X = list(X)
    if not X:
        raise DataError("expected at least one record")
    for i, r in enumerate(X):
        if not isinstance(r, Record):
            raise DataError(f"item {i} is {type(r).__name__}, expected Record")
    if n_windows is not None:
        X = [r if record_windows(r) == n_windows and r.hypnogram is not None
             else normalize_duration(r, n_windows) for r in X]
    return X


class WavPreprocessor(TransformerMixin, BaseEstimator):
    """Records -> ``(n_records, n_windows * samples_per_window)`` WAV arrays."""

    def __init__(self, samples_per_window: int = WAV_SAMPLES_PER_WINDOW):
        self.samples_per_window = samples_per_window

    def fit(self, X, y=None):
        check_records(X)
        return self

    def transform(self, X):
        X = check_records(X)
        return np.stack([preprocess_wav(r, self.samples_per_window).samples for r in X])


class PulseRateTransformer(TransformerMixin, BaseEstimator):
    """Records -> ``(n_records, n_windows, width)`` rate-series context windows."""

    def __init__(self, width: int = 256, standardize: bool = True):
        self.width = width
        self.standardize = standardize

    def fit(self, X, y=None):
        check_records(X)
        return self

    def transform(self, X):
        out = []
        for r in check_records(X):
            rate = derive_rate_series(record_beats(r), record_windows(r) * WINDOW_SECONDS,
                                      RATE_FS, standardize=self.standardize)
            out.append(rate_context_windows(rate.samples, width=self.width))
        return np.stack(out)


class FeatureTransformer(TransformerMixin, BaseEstimator):
    """Records -> ``(n_records, n_windows, 126)`` per-window feature matrices."""

    def __init__(self, context: int = 2, standardize: bool = True):
        self.context = context
        self.standardize = standardize

    def fit(self, X, y=None):
        check_records(X)
        return self

    def transform(self, X):
        out = []
        for r in check_records(X):
            fm = windowed_features(r, context=self.context)
            if self.standardize:
                fm = standardize_per_patient(fm)
            out.append(fm.values)
        return np.stack(out)


class SleepStager(ClassifierMixin, BaseEstimator):
    """Four-class sleep stager over whole records.

    Parameters
    ----------
    arch : {"sleepppg", "bm_dts", "bm_fe"}
    model_config : dict, optional
        Architecture config overrides (e.g. a small SleepPPG-Net).
    scheme : {"Scratch", "FromPretrained", "TransferLearn"}
    pretrained : path, optional
        SPGW checkpoint for the pretrained schemes.
    learning_rate, epochs : float, int, optional
        Defaults follow the scheme preset.
    """

    def __init__(self, arch="sleepppg", model_config=None, scheme="Scratch", pretrained=None,
                 learning_rate=None, epochs=None, batch_size=8, dropout=0.2,
                 validation_fraction=0.1, seed=0):
        self.arch = arch
        self.model_config = model_config
        self.scheme = scheme
        self.pretrained = pretrained
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.dropout = dropout
        self.validation_fraction = validation_fraction
        self.seed = seed

    def _config(self):
        if self.arch not in CONFIGS:
            raise ValueError(f"unknown arch {self.arch!r}")
        return config_from_dict(self.arch, dict(self.model_config or {}))

    def _dataset(self, X, config) -> Dataset:
        if isinstance(X, Dataset):
            return X
        return build_dataset(check_records(X, config.n_windows), self.arch, config)

    def fit(self, X, y=None):
        config = self._config()
        ds = self._dataset(X, config)
        if y is not None:
            ds = Dataset(ds.ids, ds.inputs, np.asarray(y, dtype=np.uint8), ds.demographics)
        overrides = {k: v for k, v in (("learning_rate", self.learning_rate), ("epochs", self.epochs))
                     if v is not None}
        train_cfg = TrainConfig.preset(
            self.scheme, batch_size=self.batch_size, dropout=self.dropout, seed=self.seed,
            validation_fraction=self.validation_fraction, **overrides,
        )
        model = build_model(self.arch, config, seed=self.seed)
        self.model_, self.history_ = run_training(model, ds, train_cfg, pretrained=self.pretrained)
        self.classes_ = np.arange(N_CLASSES)
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        return predict_proba(self.model_, self._dataset(X, self.model_.config), self.batch_size)

    def predict(self, X):
        return self.predict_proba(X).argmax(-1).astype(np.uint8)

    def score(self, X, y=None, sample_weight=None):
        """Median per-record Cohen's kappa."""
        ds = self._dataset(X, self._config() if not hasattr(self, "model_") else self.model_.config)
        labels = ds.labels if y is None else np.asarray(y)
        return per_patient_summary(labels, self.predict(ds))["kappa_median"]
