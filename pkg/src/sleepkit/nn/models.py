"""Model container and the three sleep-staging architectures.

All three follow an encoder -> sequence encoder -> classifier layout: the
encoder turns each 30 s window into an embedding, the sequence encoder adds
context from neighbouring windows, and the classifier emits per-window class
probabilities. Weight names are prefixed by ``encoder.``, ``sequence.`` and
``classifier.``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .._errors import ConfigError
from .init import name_seed, xavier_init
from .layers import (
    BiLSTM,
    ConcatDemographics,
    Conv1D,
    Dense,
    Dropout,
    LeakyReLU,
    ResConvBlock,
    Sequential,
    Softmax,
    Tape,
    TCNBlock,
    TimeDistributed,
    WindowReshape,
)

GROUPS = ("encoder", "sequence", "classifier")


@dataclass(frozen=True)
class SleepPPGConfig:
    n_windows: int = 1200
    samples_per_window: int = 1024
    resconv_filters: tuple = (16, 16, 32, 32, 64, 64, 128, 256)
    resconv_kernel: int = 3
    convs_per_block: int = 3
    embedding: int = 128
    n_demographics: int = 2
    tcn_blocks: int = 2
    tcn_kernel: int = 7
    tcn_dilations: tuple = (1, 2, 4, 8, 16, 32)
    tcn_filters: int = 128
    n_classes: int = 4
    dropout: float = 0.2
    leaky_alpha: float = 0.3

    @classmethod
    def toy(cls, **overrides) -> "SleepPPGConfig":
        """2048-sample input, two ResConv blocks and one TCN block."""
        base = dict(
            n_windows=8,
            samples_per_window=256,
            resconv_filters=(4, 8),
            embedding=8,
            tcn_blocks=1,
            tcn_dilations=(1, 2, 4),
            tcn_filters=8,
        )
        base.update(overrides)
        return cls(**base)

    @property
    def input_length(self) -> int:
        return self.n_windows * self.samples_per_window


@dataclass(frozen=True)
class DTSConfig:
    n_windows: int = 1200
    window_width: int = 256
    resconv_filters: tuple = (16, 32, 64)
    resconv_kernel: int = 3
    convs_per_block: int = 3
    embedding: int = 128
    n_demographics: int = 2
    tcn_blocks: int = 2
    tcn_kernel: int = 7
    tcn_dilations: tuple = (1, 2, 4, 8, 16, 32)
    tcn_filters: int = 128
    n_classes: int = 4
    dropout: float = 0.2
    leaky_alpha: float = 0.3


@dataclass(frozen=True)
class FEConfig:
    n_windows: int = 1200
    n_features: int = 126
    encoder_units: tuple = (512, 256, 128, 16, 16)
    lstm_units: int = 128
    lstm_layers: int = 2
    head_units: tuple = (256, 128, 64)
    n_classes: int = 4
    dropout: float = 0.2
    leaky_alpha: float = 0.3
    n_demographics: int = 0


CONFIGS = {"sleepppg": SleepPPGConfig, "bm_dts": DTSConfig, "bm_fe": FEConfig}


@dataclass
class Model:
    """Ordered encoder/sequence/classifier stages plus the shared weight table."""

    arch: str
    config: object
    stages: list = field(default_factory=list)  # (group, layer) pairs
    dtype: type = np.float32

    def __post_init__(self):
        for group, layer in self.stages:
            layer.bind(f"{group}.")

    # -- weights ---------------------------------------------------------------
    @property
    def weights(self) -> dict:
        """Name -> array. The arrays are the live parameters, not copies."""
        out = {}
        for _, layer in self.stages:
            for name, arr in layer.named_params():
                out[name] = arr
        return out

    @property
    def n_params(self) -> int:
        return int(sum(a.size for a in self.weights.values()))

    @property
    def differentiable(self) -> bool:
        return not any(_contains(layer, BiLSTM) for _, layer in self.stages)

    def set_weights(self, values: dict, strict: bool = True) -> None:
        live = self.weights
        if strict:
            missing = set(live) - set(values)
            extra = set(values) - set(live)
            if missing or extra:
                raise ConfigError(
                    f"weight names differ: missing {sorted(missing)[:3]}, unexpected {sorted(extra)[:3]}"
                )
        for name, arr in values.items():
            if name not in live:
                continue
            if live[name].shape != np.shape(arr):
                raise ConfigError(
                    f"{name}: shape {np.shape(arr)} does not match model {live[name].shape}"
                )
        for name, arr in values.items():
            if name in live:
                live[name][...] = arr

    def initialize(self, seed: int = 0) -> "Model":
        """Xavier-uniform kernels, zero biases (LSTM forget-gate bias 1)."""
        for name, arr in self.weights.items():
            if name.endswith("kernel"):
                arr[...] = xavier_init(arr.shape, name_seed(seed, name), arr.dtype)
            else:
                arr[...] = 0
                if ".forward.bias" in name or ".backward.bias" in name:
                    units = arr.shape[0] // 4
                    arr[units : 2 * units] = 1
        return self

    def copy(self) -> "Model":
        clone = build_model(self.arch, self.config, dtype=self.dtype)
        clone.set_weights({k: v.copy() for k, v in self.weights.items()})
        return clone

    # -- execution -------------------------------------------------------------
    def _prepare(self, x):
        cfg = self.config
        x = np.asarray(x, dtype=self.dtype)
        if self.arch == "sleepppg":
            n = cfg.input_length
            if x.ndim == 1:
                x = x[None, :, None]
            elif x.ndim == 2:
                x = x.reshape(x.shape[0], -1)[..., None] if x.shape != (n, 1) else x[None]
            elif x.ndim == 3 and x.shape[1:] == (cfg.n_windows, cfg.samples_per_window):
                x = x.reshape(x.shape[0], n, 1)
            if x.ndim != 3 or x.shape[1:] != (n, 1):
                raise ValueError(f"expected {n} input samples per record, got shape {x.shape}")
            return x
        width = cfg.window_width if self.arch == "bm_dts" else cfg.n_features
        if x.ndim == 2:
            x = x[None]
        if x.ndim != 3 or x.shape[1:] != (cfg.n_windows, width):
            raise ValueError(
                f"expected input ({cfg.n_windows}, {width}) per record, got shape {x.shape}"
            )
        return x

    def forward(self, x, demographics=None, *, mode="infer", seed=0,
                record=False, trace=False, logits=False):
        """Run the network; returns probabilities ``(B, L, classes)``.

        With ``record=True`` (implied by ``mode="train"``) returns
        ``(probs, tape)`` where the tape holds what :meth:`backward` needs.
        ``trace=True`` stores per-stage output shapes on ``tape.shapes``.
        """
        if mode not in ("infer", "train"):
            raise ValueError("mode must be 'infer' or 'train'")
        squeeze = np.asarray(x).ndim == (1 if self.arch == "sleepppg" else 2)
        xb = self._prepare(x)
        demo = None
        if demographics is not None:
            demo = np.asarray(demographics, dtype=self.dtype).reshape(xb.shape[0], -1)
        tape = Tape(
            train=mode == "train",
            rng=np.random.default_rng(seed),
            demographics=demo,
            record=record or mode == "train",
            trace=trace,
        )
        if trace:
            tape.shapes.append(("input", xb.shape[1:]))
        h = xb
        for group, layer in self.stages:
            if logits and isinstance(layer, Softmax):
                break
            h = layer.forward(h, tape)
            if trace:
                tape.shapes.append((layer.path, h.shape[1:]))
        out = h[0] if squeeze else h
        return (out, tape) if (tape.record or trace) else out

    def backward(self, tape, dprobs=None, *, dlogits=None) -> dict:
        """Reverse-mode gradients of every weight; returns name -> array.

        Pass ``dlogits`` to skip the softmax (fused softmax + cross-entropy).
        """
        if not self.differentiable:
            from .._errors import UnsupportedLayerError

            raise UnsupportedLayerError(f"{self.arch}: architecture has inference-only layers")
        tape.grads = {}
        stages = list(self.stages)
        if dlogits is not None:
            dy = np.asarray(dlogits, dtype=self.dtype)
            if isinstance(stages[-1][1], Softmax):
                stages = stages[:-1]
        else:
            dy = np.asarray(dprobs, dtype=self.dtype)
        if dy.ndim == 2:
            dy = dy[None]
        for _, layer in reversed(stages):
            dy = layer.backward(dy, tape)
        grads = {}
        for name, arr in self.weights.items():
            g = tape.grads.get(name)
            grads[name] = np.zeros_like(arr) if g is None else g.astype(arr.dtype, copy=False)
        return grads

    def summary(self) -> list:
        rows = []
        for group, layer in self.stages:
            n = sum(a.size for _, a in layer.named_params())
            rows.append((layer.path, layer.kind, n))
        return rows

    def to_dict(self) -> dict:
        return {"arch": self.arch, "config": asdict(self.config)}


def _contains(layer, cls):
    return isinstance(layer, cls) or any(_contains(c, cls) for c in layer.children())


def _resconv_stack(c_in, filters, kernel, n_convs, alpha, dtype, prefix="resconv"):
    blocks = []
    c = c_in
    for i, f in enumerate(filters):
        blocks.append(ResConvBlock(f"{prefix}{i + 1}", c, f, kernel, n_convs, alpha, dtype))
        c = f
    return blocks


def _tcn_stack(c_in, cfg, dtype):
    blocks = []
    c = c_in
    for i in range(cfg.tcn_blocks):
        blocks.append(
            TCNBlock(f"tcn{i + 1}", c, cfg.tcn_filters, cfg.tcn_kernel, cfg.tcn_dilations,
                     cfg.dropout, cfg.leaky_alpha, dtype)
        )
        c = cfg.tcn_filters
    return blocks


def build_sleepppg_net(config: SleepPPGConfig | None = None, seed: int = 0, dtype=np.float32) -> Model:
    """ResConv feature extractor, window reshape, dense embedding, TCN, 1x1 conv."""
    cfg = config or SleepPPGConfig()
    n_blocks = len(cfg.resconv_filters)
    if cfg.input_length % (2**n_blocks):
        raise ConfigError(f"input length {cfg.input_length} not divisible by 2^{n_blocks}")
    steps = cfg.input_length // 2**n_blocks
    if steps % cfg.n_windows:
        raise ConfigError(f"{steps} encoder steps do not split into {cfg.n_windows} windows")
    per_window = (steps // cfg.n_windows) * cfg.resconv_filters[-1]
    a = cfg.leaky_alpha
    stages = [("encoder", b) for b in _resconv_stack(
        1, cfg.resconv_filters, cfg.resconv_kernel, cfg.convs_per_block, a, dtype)]
    stages += [
        ("encoder", WindowReshape("window", cfg.n_windows)),
        ("encoder", Dense("embed", per_window, cfg.embedding, dtype)),
        ("encoder", LeakyReLU("embed_act", a)),
        ("encoder", ConcatDemographics("demographics", cfg.n_demographics)),
    ]
    stages += [("sequence", b) for b in _tcn_stack(cfg.embedding + cfg.n_demographics, cfg, dtype)]
    stages += [
        ("classifier", Conv1D("conv", cfg.tcn_filters, cfg.n_classes, 1, 1, dtype)),
        ("classifier", Softmax("softmax")),
    ]
    return Model("sleepppg", cfg, stages, dtype).initialize(seed)


def build_bm_dts(config: DTSConfig | None = None, seed: int = 0, dtype=np.float32) -> Model:
    """Time-distributed ResConv encoder on rate-series windows, then TCN."""
    cfg = config or DTSConfig()
    n_blocks = len(cfg.resconv_filters)
    if cfg.window_width % (2**n_blocks):
        raise ConfigError(f"window width {cfg.window_width} not divisible by 2^{n_blocks}")
    flat = (cfg.window_width // 2**n_blocks) * cfg.resconv_filters[-1]
    a = cfg.leaky_alpha
    inner = Sequential("blocks", _resconv_stack(
        1, cfg.resconv_filters, cfg.resconv_kernel, cfg.convs_per_block, a, dtype))
    stages = [
        ("encoder", TimeDistributed("resconv", inner)),
        ("encoder", Dense("embed", flat, cfg.embedding, dtype)),
        ("encoder", LeakyReLU("embed_act", a)),
        ("encoder", ConcatDemographics("demographics", cfg.n_demographics)),
    ]
    stages += [("sequence", b) for b in _tcn_stack(cfg.embedding + cfg.n_demographics, cfg, dtype)]
    stages += [
        ("classifier", Conv1D("conv", cfg.tcn_filters, cfg.n_classes, 1, 1, dtype)),
        ("classifier", Softmax("softmax")),
    ]
    return Model("bm_dts", cfg, stages, dtype).initialize(seed)


def build_bm_fe(config: FEConfig | None = None, seed: int = 0, dtype=np.float32) -> Model:
    """Time-distributed dense encoder, stacked BiLSTM, dense head (inference only)."""
    cfg = config or FEConfig()
    a = cfg.leaky_alpha
    stages = []
    n = cfg.n_features
    for i, u in enumerate(cfg.encoder_units):
        stages.append(("encoder", Dense(f"dense{i + 1}", n, u, dtype)))
        stages.append(("encoder", LeakyReLU(f"act{i + 1}", a)))
        n = u
    for i in range(cfg.lstm_layers):
        stages.append(("sequence", BiLSTM(f"bilstm{i + 1}", n, cfg.lstm_units, dtype)))
        n = 2 * cfg.lstm_units
    for i, u in enumerate(cfg.head_units):
        stages.append(("classifier", Dropout(f"dropout{i + 1}", cfg.dropout)))
        stages.append(("classifier", Dense(f"dense{i + 1}", n, u, dtype)))
        stages.append(("classifier", LeakyReLU(f"act{i + 1}", a)))
        n = u
    stages.append(("classifier", Dense("out", n, cfg.n_classes, dtype)))
    stages.append(("classifier", Softmax("softmax")))
    return Model("bm_fe", cfg, stages, dtype).initialize(seed)


BUILDERS = {"sleepppg": build_sleepppg_net, "bm_dts": build_bm_dts, "bm_fe": build_bm_fe}


def build_model(arch: str, config=None, seed: int = 0, dtype=np.float32) -> Model:
    try:
        builder = BUILDERS[arch]
    except KeyError:
        raise ConfigError(f"unknown architecture {arch!r}; choose from {sorted(BUILDERS)}") from None
    if isinstance(config, dict):
        config = config_from_dict(arch, config)
    return builder(config, seed=seed, dtype=dtype)


def config_from_dict(arch: str, values: dict):
    cls = CONFIGS[arch]
    try:
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in values.items()})
    except TypeError as exc:
        raise ConfigError(f"invalid {arch} config: {exc}") from None


def forward(model: Model, x, demographics=None, mode="infer", rng_seed=0):
    return model.forward(x, demographics, mode=mode, seed=rng_seed)


def backward(model: Model, tape, dprobs) -> dict:
    return model.backward(tape, dprobs)
