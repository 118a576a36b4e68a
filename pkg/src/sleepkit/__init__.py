"""Sleep staging from raw PPG/ECG waveforms.

Modules
-------
records     patient records, label mapping, duration normalization, synthesis
dsp         Chebyshev-II filtering, resampling, clipping and standardization
beats       pulse beat detection, IBI quality and instantaneous rate series
features    PRV and morphological per-window feature matrices
nn          numpy layers with reverse-mode gradients and the three architectures
training    loss, class weights, Adam and the training schemes
metrics     kappa/accuracy, per-patient summaries and sleep metrics
pipeline    record -> model input conversion
estimators  scikit-learn style wrappers
cli         the ``sleepkit`` command line
"""

from ._errors import ConfigError, DataError, SleepkitError, UnsupportedLayerError

__version__ = "0.1.0"

__all__ = ["ConfigError", "DataError", "SleepkitError", "UnsupportedLayerError", "__version__"]
