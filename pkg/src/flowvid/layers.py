"""Neural layers with closed-form trainable-parameter counts.

Each layer knows two ways to count its trainable parameters: the closed
form (``param_count`` / ``formula``) and plain enumeration of its tensors
(``enumerated_count``). The model audit insists they agree.
"""
import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError


def glorot_uniform(rng, shape, fan_in, fan_out, dtype):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Layer:
    """Base class: named trainable ``params`` and non-trainable ``buffers``."""

    kind = "layer"

    def __init__(self, name):
        self.name = name
        self.params = {}
        self.buffers = {}

    def _param(self, key, data):
        t = Tensor(data, requires_grad=True, name=f"{self.name}.{key}")
        self.params[key] = t
        return t

    def _buffer(self, key, data):
        t = Tensor(data, name=f"{self.name}.{key}")
        self.buffers[key] = t
        return t

    @property
    def sublayers(self):
        return [self]

    def param_count(self):
        return 0

    def formula(self):
        return "-"

    def enumerated_count(self):
        return int(sum(t.size for t in self.params.values() if t.requires_grad))

    def forward(self, x, training=False):
        raise NotImplementedError

    def __call__(self, x, training=False):
        return self.forward(x, training)


class Conv2D(Layer):
    """Same-padded 2D convolution followed by ReLU."""

    kind = "conv2d"

    def __init__(self, name, in_channels, units, kernel=(2, 2), rng=None,
                 dtype=np.float32, padding="same", activation="relu"):
        super().__init__(name)
        if units < 1:
            raise ValueError(f"{name}: units must be >= 1")
        self.in_channels, self.units = in_channels, units
        self.kernel = tuple(kernel)
        self.padding, self.activation = padding, activation
        v, h = self.kernel
        rng = rng or np.random.default_rng(0)
        self.weight = self._param("kernel", glorot_uniform(
            rng, (units, in_channels, v, h), in_channels * v * h, units * v * h, dtype))
        self.bias = self._param("bias", np.zeros(units, dtype=dtype))

    def param_count(self):
        v, h = self.kernel
        return (v * h * self.in_channels + 1) * self.units

    def formula(self):
        v, h = self.kernel
        return f"({v}×{h}×{self.in_channels}+1)×{self.units}"

    def forward(self, x, training=False):
        out = ad.conv2d(x, self.weight, self.bias, stride=1, padding=self.padding)
        return ad.relu(out) if self.activation == "relu" else out


class MaxPool2D(Layer):
    kind = "maxpool2d"

    def __init__(self, name, size=2, stride=1, padding=0):
        super().__init__(name)
        self.size, self.stride, self.padding = size, stride, padding

    def forward(self, x, training=False):
        return ad.maxpool2d(x, self.size, self.stride, self.padding)


class BatchNorm2D(Layer):
    kind = "batchnorm2d"

    def __init__(self, name, units, dtype=np.float32, momentum=0.1, eps=1e-5):
        super().__init__(name)
        self.units, self.momentum, self.eps = units, momentum, eps
        self.gamma = self._param("gamma", np.ones(units, dtype=dtype))
        self.beta = self._param("beta", np.zeros(units, dtype=dtype))
        self.running_mean = self._buffer("moving_mean", np.zeros(units, dtype=dtype))
        self.running_var = self._buffer("moving_variance", np.ones(units, dtype=dtype))

    def param_count(self):
        return 2 * self.units

    def formula(self):
        return f"2×{self.units}"

    def forward(self, x, training=False):
        return ad.batchnorm2d(x, self.gamma, self.beta, self.running_mean, self.running_var,
                              training=training, momentum=self.momentum, eps=self.eps)


class ConvBlock(Layer):
    """conv (same pad) -> ReLU -> 2x2 max-pool (stride 1, no pad) -> batch norm.

    Each spatial dimension shrinks by exactly one.
    """

    kind = "conv_block"

    def __init__(self, index, in_channels, units, kernel=(2, 2), rng=None, dtype=np.float32):
        super().__init__(f"block_{index}")
        self.conv = Conv2D(f"CNN_2D_{index}", in_channels, units, kernel, rng, dtype)
        self.pool = MaxPool2D(f"MP_2D_{index}", size=2, stride=1, padding=0)
        self.bn = BatchNorm2D(f"BN_{index}", units, dtype)
        for sub in self.sublayers:
            self.params.update({f"{sub.name}.{k}": t for k, t in sub.params.items()})
            self.buffers.update({f"{sub.name}.{k}": t for k, t in sub.buffers.items()})

    @property
    def sublayers(self):
        return [self.conv, self.pool, self.bn]

    def param_count(self):
        return self.conv.param_count() + self.bn.param_count()

    def formula(self):
        return f"{self.conv.formula()} + {self.bn.formula()}"

    def forward(self, x, training=False):
        if x.ndim == 4 and (x.shape[2] < self.conv.kernel[0] or x.shape[3] < self.conv.kernel[1]):
            raise ShapeError(f"{self.name}: kernel {self.conv.kernel} larger than input {x.shape[2:]}")
        return self.bn(self.pool(self.conv(x, training), training), training)


def conv_block(in_channels, units, kernel=(2, 2), index=0, rng=None, dtype=np.float32):
    return ConvBlock(index, in_channels, units, kernel, rng, dtype)


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x, training=False):
        return ad.reshape(x, (x.shape[0], -1))


class Dense(Layer):
    """Fully connected layer with bias. ``input_desc`` only changes the printed formula."""

    kind = "dense"

    def __init__(self, name, in_features, units, activation="relu", rng=None,
                 dtype=np.float32, input_desc=None):
        super().__init__(name)
        self.in_features, self.units, self.activation = in_features, units, activation
        self.input_desc = input_desc or str(in_features)
        rng = rng or np.random.default_rng(0)
        self.weight = self._param("kernel", glorot_uniform(
            rng, (in_features, units), in_features, units, dtype))
        self.bias = self._param("bias", np.zeros(units, dtype=dtype))

    def param_count(self):
        return self.in_features * self.units + self.units

    def formula(self):
        return f"{self.input_desc}×{self.units}+{self.units}"

    def forward(self, x, training=False):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeError(f"{self.name}: expected (N, {self.in_features}), got {x.shape}")
        out = ad.add_bias(ad.matmul(x, self.weight), self.bias)
        return ad.relu(out) if self.activation == "relu" else out


class TimeDistributed(Layer):
    """Apply one dense layer, with shared weights, to every step of (N, T, S)."""

    kind = "time_distributed"

    def __init__(self, inner):
        super().__init__(f"TD({inner.name})")
        self.inner = inner
        self.params = {k: t for k, t in inner.params.items()}

    @property
    def units(self):
        return self.inner.units

    def param_count(self):
        return self.inner.param_count()

    def formula(self):
        return self.inner.formula()

    def forward(self, x, training=False):
        return time_distributed(self.inner, x, training)


def time_distributed(inner, x, training=False):
    if x.ndim != 3:
        raise ShapeError(f"time_distributed: expected rank-3 (N, T, S) input, got {x.shape}")
    n, t, s = x.shape
    y = inner(ad.reshape(x, (n * t, s)), training)
    return ad.reshape(y, (n, t, y.shape[-1]))


class LSTM(Layer):
    """LSTM over (N, T, S); a rank-2 (N, T) input is read as T scalar steps.

    Keras-style parameter layout: kernel (S, 4U), recurrent (U, 4U), bias (4U),
    gates ordered (input, forget, candidate, output).
    """

    kind = "lstm"

    def __init__(self, name, input_size, units=100, return_sequences=True,
                 output_activation="relu", rng=None, dtype=np.float32, forget_bias=1.0):
        super().__init__(name)
        self.input_size, self.units = input_size, units
        self.return_sequences = return_sequences
        self.output_activation = output_activation
        rng = rng or np.random.default_rng(0)
        u = units
        self.kernel = self._param("kernel", glorot_uniform(rng, (input_size, 4 * u), input_size, 4 * u, dtype))
        self.recurrent = self._param("recurrent_kernel", glorot_uniform(rng, (u, 4 * u), u, 4 * u, dtype))
        bias = np.zeros(4 * u, dtype=dtype)
        bias[u:2 * u] = forget_bias
        self.bias = self._param("bias", bias)

    def param_count(self):
        s, u = self.input_size, self.units
        return 4 * ((s + 1) * u + u * u)

    def formula(self):
        return f"4×[({self.input_size}+1)×{self.units}+{self.units}^2]"

    def forward(self, x, training=False):
        return lstm_forward(x, self)


def lstm_forward(x, layer):
    if x.ndim == 2:
        x = ad.reshape(x, (x.shape[0], x.shape[1], 1))
    if x.ndim != 3 or x.shape[2] != layer.input_size:
        raise ShapeError(f"{layer.name}: expected (N, T, {layer.input_size}), got {x.shape}")
    hs = ad.lstm(x, layer.kernel, layer.recurrent, layer.bias, layer.output_activation)
    if layer.return_sequences:
        return hs
    last = ad.slice_axis(hs, 1, hs.shape[1] - 1, hs.shape[1])
    return ad.reshape(last, (hs.shape[0], layer.units))


def param_count(layer):
    return layer.param_count()
