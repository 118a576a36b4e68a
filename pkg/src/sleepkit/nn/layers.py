"""Layers with explicit forward and backward passes over numpy arrays.

Every layer maps an array of shape ``(batch, time, channels)`` (or any leading
dims for dense layers) to another. During a recorded forward pass a layer
stores what its backward pass needs on the :class:`Tape`; gradients are
written into the tape's gradient table keyed by fully qualified weight name.
"""

from __future__ import annotations

import numpy as np

from .._errors import UnsupportedLayerError


class Tape:
    """Per-call forward state: mode, dropout RNG, cached activations, gradients."""

    def __init__(self, train=False, rng=None, demographics=None, record=False, trace=False):
        self.train = train
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.demographics = demographics
        self.record = record or train
        self.cache = {}
        self.grads = {}
        self.shapes = [] if trace else None

    def save(self, layer, *values):
        if self.record:
            self.cache[id(layer)] = values

    def load(self, layer):
        try:
            return self.cache[id(layer)]
        except KeyError:
            raise RuntimeError(
                f"no cached activations for {layer.name}; run forward with record=True"
            ) from None

    def add_grad(self, name, g):
        if name in self.grads:
            self.grads[name] += g
        else:
            self.grads[name] = g


class Layer:
    kind = "Layer"

    def __init__(self, name):
        self.name = name
        self.params = {}
        self.prefix = ""

    @property
    def path(self):
        return f"{self.prefix}{self.name}"

    def children(self):
        return []

    def bind(self, prefix=""):
        """Assign fully qualified names below ``prefix``."""
        self.prefix = prefix
        for child in self.children():
            child.bind(f"{self.path}.")

    def named_params(self):
        for k, v in self.params.items():
            yield f"{self.path}.{k}", v
        for child in self.children():
            yield from child.named_params()

    def forward(self, x, tape):
        raise NotImplementedError

    def backward(self, dy, tape):
        raise NotImplementedError

    def __repr__(self):
        return f"{type(self).__name__}({self.path!r})"


class Conv1D(Layer):
    """'same'-padded 1D convolution, kernel layout ``(k, c_in, c_out)``.

    ``y[t, o] = b[o] + sum_{j, c} w[j, c, o] * x[t + (j - (k - 1) // 2) * d, c]``
    """

    kind = "Conv1D"

    def __init__(self, name, c_in, c_out, kernel_size=3, dilation=1, dtype=np.float32):
        super().__init__(name)
        self.c_in, self.c_out = c_in, c_out
        self.kernel_size, self.dilation = kernel_size, dilation
        self.params = {
            "kernel": np.zeros((kernel_size, c_in, c_out), dtype=dtype),
            "bias": np.zeros(c_out, dtype=dtype),
        }
        if dilation > 1:
            self.kind = "DilatedConv1D"

    def _pads(self):
        total = self.dilation * (self.kernel_size - 1)
        left = self.dilation * ((self.kernel_size - 1) // 2)
        return left, total - left

    def forward(self, x, tape):
        if x.ndim != 3 or x.shape[-1] != self.c_in:
            raise ValueError(f"{self.path}: expected (B, T, {self.c_in}), got {x.shape}")
        w, b = self.params["kernel"], self.params["bias"]
        t = x.shape[1]
        d = self.dilation
        left, right = self._pads()
        xp = np.pad(x, ((0, 0), (left, right), (0, 0))) if left or right else x
        y = np.matmul(xp[:, 0:t], w[0])
        for j in range(1, self.kernel_size):
            y += np.matmul(xp[:, j * d : j * d + t], w[j])
        y += b
        tape.save(self, xp)
        return y

    def backward(self, dy, tape):
        (xp,) = tape.load(self)
        w = self.params["kernel"]
        t = dy.shape[1]
        d = self.dilation
        left, _ = self._pads()
        dy2 = dy.reshape(-1, self.c_out)
        dw = np.empty_like(w)
        dxp = np.zeros_like(xp)
        for j in range(self.kernel_size):
            xs = xp[:, j * d : j * d + t]
            dw[j] = xs.reshape(-1, self.c_in).T @ dy2
            dxp[:, j * d : j * d + t] += np.matmul(dy, w[j].T)
        tape.add_grad(f"{self.path}.kernel", dw)
        tape.add_grad(f"{self.path}.bias", dy2.sum(axis=0))
        return dxp[:, left : left + t]


class Dense(Layer):
    """Affine map on the last axis (time-distributed over leading axes)."""

    kind = "Dense"

    def __init__(self, name, n_in, n_out, dtype=np.float32):
        super().__init__(name)
        self.n_in, self.n_out = n_in, n_out
        self.params = {
            "kernel": np.zeros((n_in, n_out), dtype=dtype),
            "bias": np.zeros(n_out, dtype=dtype),
        }

    def forward(self, x, tape):
        if x.shape[-1] != self.n_in:
            raise ValueError(f"{self.path}: expected last dim {self.n_in}, got {x.shape}")
        tape.save(self, x)
        return x @ self.params["kernel"] + self.params["bias"]

    def backward(self, dy, tape):
        (x,) = tape.load(self)
        dy2 = dy.reshape(-1, self.n_out)
        tape.add_grad(f"{self.path}.kernel", x.reshape(-1, self.n_in).T @ dy2)
        tape.add_grad(f"{self.path}.bias", dy2.sum(axis=0))
        return dy @ self.params["kernel"].T


class LeakyReLU(Layer):
    kind = "LeakyReLU"

    def __init__(self, name, alpha=0.3):
        super().__init__(name)
        self.alpha = alpha

    def forward(self, x, tape):
        pos = x > 0
        tape.save(self, pos)
        return np.where(pos, x, x * x.dtype.type(self.alpha))

    def backward(self, dy, tape):
        (pos,) = tape.load(self)
        return np.where(pos, dy, dy * dy.dtype.type(self.alpha))


class MaxPool1D(Layer):
    """Non-overlapping max pooling over time; ties route to the earlier step."""

    kind = "MaxPool1D"

    def __init__(self, name, rate=2):
        super().__init__(name)
        if rate != 2:
            raise ValueError("only pool rate 2 is supported")
        self.rate = rate

    def forward(self, x, tape):
        if x.shape[1] % 2:
            raise ValueError(f"{self.path}: odd time length {x.shape[1]}")
        a, b = x[:, 0::2], x[:, 1::2]
        first = a >= b
        tape.save(self, first)
        return np.where(first, a, b)

    def backward(self, dy, tape):
        (first,) = tape.load(self)
        bsz, t, c = dy.shape
        dx = np.empty((bsz, 2 * t, c), dtype=dy.dtype)
        dx[:, 0::2] = np.where(first, dy, 0)
        dx[:, 1::2] = np.where(first, 0, dy)
        return dx


class Dropout(Layer):
    """Inverted dropout; identity outside training mode."""

    kind = "Dropout"

    def __init__(self, name, rate=0.2):
        super().__init__(name)
        self.rate = rate

    def forward(self, x, tape):
        if not tape.train or self.rate <= 0:
            tape.save(self, None)
            return x
        keep = tape.rng.random(x.shape) >= self.rate
        scale = keep.astype(x.dtype) / x.dtype.type(1 - self.rate)
        tape.save(self, scale)
        return x * scale

    def backward(self, dy, tape):
        (scale,) = tape.load(self)
        return dy if scale is None else dy * scale


class WindowReshape(Layer):
    """``(B, T, C)`` -> ``(B, n_windows, T / n_windows * C)``."""

    kind = "WindowReshape"

    def __init__(self, name, n_windows):
        super().__init__(name)
        self.n_windows = n_windows

    def forward(self, x, tape):
        bsz, t, c = x.shape
        if t % self.n_windows:
            raise ValueError(f"{self.path}: {t} steps do not split into {self.n_windows} windows")
        tape.save(self, x.shape)
        return x.reshape(bsz, self.n_windows, (t // self.n_windows) * c)

    def backward(self, dy, tape):
        (shape,) = tape.load(self)
        return dy.reshape(shape)


class Flatten(Layer):
    """Merge all axes after the first ``keep`` axes."""

    kind = "Flatten"

    def __init__(self, name, keep=2):
        super().__init__(name)
        self.keep = keep

    def forward(self, x, tape):
        tape.save(self, x.shape)
        return x.reshape(*x.shape[: self.keep], -1)

    def backward(self, dy, tape):
        (shape,) = tape.load(self)
        return dy.reshape(shape)


class ConcatDemographics(Layer):
    """Append the per-record demographic vector to every window embedding."""

    kind = "Concat"

    def __init__(self, name, n_demographics):
        super().__init__(name)
        self.n = n_demographics

    def forward(self, x, tape):
        if self.n == 0:
            return x
        demo = tape.demographics
        if demo is None:
            demo = np.zeros((x.shape[0], self.n), dtype=x.dtype)
        demo = np.asarray(demo, dtype=x.dtype).reshape(x.shape[0], self.n)
        tiled = np.broadcast_to(demo[:, None, :], (*x.shape[:2], self.n))
        return np.concatenate([x, tiled], axis=-1)

    def backward(self, dy, tape):
        return dy[..., : dy.shape[-1] - self.n] if self.n else dy


class Softmax(Layer):
    kind = "Softmax"

    def forward(self, x, tape):
        z = x - x.max(axis=-1, keepdims=True)
        e = np.exp(z)
        p = e / e.sum(axis=-1, keepdims=True)
        tape.save(self, p)
        return p

    def backward(self, dy, tape):
        (p,) = tape.load(self)
        return p * (dy - np.sum(dy * p, axis=-1, keepdims=True))


class Sequential(Layer):
    kind = "Sequential"

    def __init__(self, name, layers):
        super().__init__(name)
        self.layers = list(layers)

    def children(self):
        return self.layers

    def forward(self, x, tape):
        for layer in self.layers:
            x = layer.forward(x, tape)
        return x

    def backward(self, dy, tape):
        for layer in reversed(self.layers):
            dy = layer.backward(dy, tape)
        return dy


class ResConvBlock(Layer):
    """Convolutions with LeakyReLU, max pooling, plus a pooled shortcut.

    The shortcut is the block input, passed through a 1x1 convolution when
    the channel count changes, then max pooled.
    """

    kind = "ResConv"

    def __init__(self, name, c_in, filters, kernel_size=3, n_convs=3, alpha=0.3, dtype=np.float32):
        super().__init__(name)
        layers = []
        c = c_in
        for i in range(n_convs):
            layers.append(Conv1D(f"conv{i + 1}", c, filters, kernel_size, 1, dtype))
            layers.append(LeakyReLU(f"act{i + 1}", alpha))
            c = filters
        layers.append(MaxPool1D("pool"))
        self.main = Sequential("main", layers)
        short = []
        if c_in != filters:
            short.append(Conv1D("proj", c_in, filters, 1, 1, dtype))
        short.append(MaxPool1D("pool"))
        self.shortcut = Sequential("shortcut", short)

    def children(self):
        return [self.main, self.shortcut]

    def forward(self, x, tape):
        return self.main.forward(x, tape) + self.shortcut.forward(x, tape)

    def backward(self, dy, tape):
        return self.main.backward(dy, tape) + self.shortcut.backward(dy, tape)


class TCNBlock(Layer):
    """Stacked dilated convolutions, residual addition, then dropout."""

    kind = "TCN"

    def __init__(self, name, c_in, filters, kernel_size=7, dilations=(1, 2, 4, 8, 16, 32),
                 dropout=0.2, alpha=0.3, dtype=np.float32):
        super().__init__(name)
        layers = []
        c = c_in
        for i, d in enumerate(dilations):
            layers.append(Conv1D(f"conv{i + 1}", c, filters, kernel_size, d, dtype))
            layers.append(LeakyReLU(f"act{i + 1}", alpha))
            c = filters
        self.main = Sequential("main", layers)
        self.shortcut = (
            Sequential("shortcut", [Conv1D("proj", c_in, filters, 1, 1, dtype)])
            if c_in != filters
            else Sequential("shortcut", [])
        )
        self.dropout = Dropout("dropout", dropout)
        self.receptive_field = 1 + (kernel_size - 1) * sum(dilations)

    def children(self):
        return [self.main, self.shortcut, self.dropout]

    def forward(self, x, tape):
        y = self.main.forward(x, tape) + self.shortcut.forward(x, tape)
        return self.dropout.forward(y, tape)

    def backward(self, dy, tape):
        dy = self.dropout.backward(dy, tape)
        return self.main.backward(dy, tape) + self.shortcut.backward(dy, tape)


class TimeDistributed(Layer):
    """Apply a sequence-shaped sub-network to every window independently.

    ``(B, L, S)`` is folded into ``(B * L, S, 1)``, run through ``inner`` and
    flattened back to ``(B, L, features)``.
    """

    kind = "TimeDistributed"

    def __init__(self, name, inner):
        super().__init__(name)
        self.inner = inner

    def children(self):
        return [self.inner]

    def forward(self, x, tape):
        bsz, n_win, s = x.shape
        y = self.inner.forward(x.reshape(bsz * n_win, s, 1), tape)
        tape.save(self, y.shape, x.shape)
        return y.reshape(bsz, n_win, -1)

    def backward(self, dy, tape):
        yshape, xshape = tape.load(self)
        dx = self.inner.backward(dy.reshape(yshape), tape)
        return dx.reshape(xshape)


class LSTM(Layer):
    """Unidirectional LSTM (gate order i, f, c, o); inference only."""

    kind = "LSTM"

    def __init__(self, name, n_in, units, reverse=False, dtype=np.float32):
        super().__init__(name)
        self.n_in, self.units, self.reverse = n_in, units, reverse
        self.params = {
            "kernel": np.zeros((n_in, 4 * units), dtype=dtype),
            "recurrent_kernel": np.zeros((units, 4 * units), dtype=dtype),
            "bias": np.zeros(4 * units, dtype=dtype),
        }

    def forward(self, x, tape):
        h_units = self.units
        bsz, n_steps, _ = x.shape
        xw = x @ self.params["kernel"] + self.params["bias"]
        rk = self.params["recurrent_kernel"]
        h = np.zeros((bsz, h_units), dtype=x.dtype)
        c = np.zeros_like(h)
        out = np.empty((bsz, n_steps, h_units), dtype=x.dtype)
        steps = range(n_steps - 1, -1, -1) if self.reverse else range(n_steps)
        for t in steps:
            z = xw[:, t] + h @ rk
            i = _sigmoid(z[:, :h_units])
            f = _sigmoid(z[:, h_units : 2 * h_units])
            g = np.tanh(z[:, 2 * h_units : 3 * h_units])
            o = _sigmoid(z[:, 3 * h_units :])
            c = f * c + i * g
            h = o * np.tanh(c)
            out[:, t] = h
        return out

    def backward(self, dy, tape):
        raise UnsupportedLayerError(f"{self.path}: LSTM layers support inference only")


class BiLSTM(Layer):
    """Forward and reversed LSTM outputs concatenated on the feature axis."""

    kind = "BiLSTM"

    def __init__(self, name, n_in, units, dtype=np.float32):
        super().__init__(name)
        self.fwd = LSTM("forward", n_in, units, False, dtype)
        self.bwd = LSTM("backward", n_in, units, True, dtype)

    def children(self):
        return [self.fwd, self.bwd]

    def forward(self, x, tape):
        return np.concatenate([self.fwd.forward(x, tape), self.bwd.forward(x, tape)], axis=-1)

    def backward(self, dy, tape):
        raise UnsupportedLayerError(f"{self.path}: BiLSTM layers support inference only")


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))
