"""Layer forward/backward passes.

All image tensors are NHWC: ``(batch, height, width, channels)``. Convolution
and pooling use valid windows (no padding), so an extent ``n`` maps to
``(n - window) // stride + 1``.

The module exposes two levels: pure functions (``conv2d_forward`` and
friends) that take arrays and return arrays, and stateful layer classes used
by :class:`platenet.model.Model` that hold parameters and cache whatever the
backward pass needs.
"""

import math

import numpy as np

from platenet.errors import BuildError, ShapeError, StateError

ACTIVATIONS = (None, "relu", "sigmoid")


def window_output_size(size, window, stride):
    """Output extent of a valid (unpadded) sliding window."""
    if size < window:
        return 0
    return (size - window) // stride + 1


def _window_slice(offset, out_size, stride):
    return slice(offset, offset + stride * (out_size - 1) + 1, stride)


# ---------------------------------------------------------------- activations


def relu(x):
    return np.maximum(x, 0, dtype=x.dtype)


def relu_backward(x, grad_out):
    # derivative at exactly 0 is taken as 0
    return np.where(x > 0, grad_out, grad_out.dtype.type(0))


def sigmoid(x):
    """Logistic function, evaluated separately per sign so exp never overflows."""
    x = np.asarray(x)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1 / (1 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1 + ex)
    return out


def sigmoid_backward(y, grad_out):
    """Gradient through the sigmoid given its *output* ``y``."""
    return grad_out * y * (1 - y)


# ---------------------------------------------------------------- convolution


def _check_conv_input(x, weights, stride):
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects (N, H, W, C) input, got shape {x.shape}")
    k, k2, c_in, _ = weights.shape
    if k != k2:
        raise ShapeError(f"only square kernels are supported, got {weights.shape}")
    if x.shape[3] != c_in:
        raise ShapeError(f"input has {x.shape[3]} channels, kernel expects {c_in}")
    if x.shape[1] < k or x.shape[2] < k:
        raise ShapeError(f"input {x.shape[1]}x{x.shape[2]} is smaller than kernel {k}x{k}")
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    return k, window_output_size(x.shape[1], k, stride), window_output_size(x.shape[2], k, stride)


def im2col(x, k, stride):
    """Lower ``(N, H, W, C)`` patches to a ``(N*H'*W', k*k*C)`` matrix.

    Column order is ``(kernel_row, kernel_col, channel)``, matching a
    ``(k, k, C, F)`` weight tensor reshaped to ``(k*k*C, F)``.
    """
    n, h, w, c = x.shape
    oh, ow = window_output_size(h, k, stride), window_output_size(w, k, stride)
    cols = np.empty((n, oh, ow, k, k, c), dtype=x.dtype)
    for a in range(k):
        for b in range(k):
            cols[:, :, :, a, b, :] = x[:, _window_slice(a, oh, stride), _window_slice(b, ow, stride), :]
    return cols.reshape(n * oh * ow, k * k * c)


def col2im(cols, input_shape, k, stride):
    """Adjoint of :func:`im2col`: scatter-add patch gradients back to the input."""
    n, h, w, c = input_shape
    oh, ow = window_output_size(h, k, stride), window_output_size(w, k, stride)
    cols = cols.reshape(n, oh, ow, k, k, c)
    out = np.zeros(input_shape, dtype=cols.dtype)
    for a in range(k):
        for b in range(k):
            out[:, _window_slice(a, oh, stride), _window_slice(b, ow, stride), :] += cols[:, :, :, a, b, :]
    return out


def conv2d_forward(x, weights, bias, stride=1):
    """Valid 2-D cross-correlation.

    ``out[n,i,j,f] = bias[f] + sum_{a,b,c} x[n, i*s+a, j*s+b, c] * weights[a,b,c,f]``
    """
    k, oh, ow = _check_conv_input(x, weights, stride)
    filters = weights.shape[3]
    cols = im2col(x, k, stride)
    out = cols @ weights.reshape(-1, filters)
    out += bias
    return out.reshape(x.shape[0], oh, ow, filters)


def conv2d_backward(x, weights, stride, grad_out, need_input_grad=True):
    """Return ``(grad_input, grad_weights, grad_bias)`` for :func:`conv2d_forward`.

    ``grad_input`` is None when ``need_input_grad`` is false (first layer).
    """
    k, oh, ow = _check_conv_input(x, weights, stride)
    filters = weights.shape[3]
    expected = (x.shape[0], oh, ow, filters)
    if grad_out.shape != expected:
        raise ShapeError(f"grad_out has shape {grad_out.shape}, forward produced {expected}")
    g = grad_out.reshape(-1, filters)
    cols = im2col(x, k, stride)
    grad_w = (cols.T @ g).reshape(weights.shape)
    grad_b = g.sum(axis=0)
    grad_x = None
    if need_input_grad:
        grad_x = col2im(g @ weights.reshape(-1, filters).T, x.shape, k, stride)
    return grad_x, grad_w, grad_b


# ---------------------------------------------------------------- max pooling


def maxpool_forward(x, pool_size=2, stride=2):
    """Max over valid windows. Returns ``(out, argmax)``.

    ``argmax`` holds, per output element, the row-major index inside its
    window of the winning input. Ties go to the first index in scan order.
    """
    if x.ndim != 4:
        raise ShapeError(f"maxpool expects (N, H, W, C) input, got shape {x.shape}")
    if x.shape[1] < pool_size or x.shape[2] < pool_size:
        raise ShapeError(f"input {x.shape[1]}x{x.shape[2]} is smaller than pool window {pool_size}")
    oh = window_output_size(x.shape[1], pool_size, stride)
    ow = window_output_size(x.shape[2], pool_size, stride)
    best = None
    argmax = np.zeros((x.shape[0], oh, ow, x.shape[3]), dtype=np.int32)
    for a in range(pool_size):
        for b in range(pool_size):
            v = x[:, _window_slice(a, oh, stride), _window_slice(b, ow, stride), :]
            if best is None:
                best = v.copy()
                continue
            better = v > best
            best[better] = v[better]
            argmax[better] = a * pool_size + b
    return best, argmax


def maxpool_backward(argmax, input_shape, grad_out, pool_size=2, stride=2):
    """Route each output gradient to the input element that won its window."""
    if argmax is None:
        raise StateError("maxpool backward called before forward")
    if grad_out.shape != argmax.shape:
        raise ShapeError(f"grad_out has shape {grad_out.shape}, forward produced {argmax.shape}")
    _, oh, ow, _ = argmax.shape
    grad_x = np.zeros(input_shape, dtype=grad_out.dtype)
    zero = grad_out.dtype.type(0)
    for a in range(pool_size):
        for b in range(pool_size):
            routed = np.where(argmax == a * pool_size + b, grad_out, zero)
            grad_x[:, _window_slice(a, oh, stride), _window_slice(b, ow, stride), :] += routed
    return grad_x


# ---------------------------------------------------------------- dense


def dense_forward(x, weights, bias):
    if x.ndim != 2 or x.shape[1] != weights.shape[0]:
        raise ShapeError(f"dense expects (N, {weights.shape[0]}) input, got {x.shape}")
    return x @ weights + bias


def dense_backward(x, weights, grad_out, need_input_grad=True):
    if x.ndim != 2 or x.shape[1] != weights.shape[0]:
        raise ShapeError(f"dense expects (N, {weights.shape[0]}) input, got {x.shape}")
    if grad_out.shape != (x.shape[0], weights.shape[1]):
        raise ShapeError(f"grad_out has shape {grad_out.shape}, expected {(x.shape[0], weights.shape[1])}")
    grad_x = grad_out @ weights.T if need_input_grad else None
    return grad_x, x.T @ grad_out, grad_out.sum(axis=0)


# ---------------------------------------------------------------- dropout


def dropout_forward(x, rate, rng, training=True):
    """Inverted dropout. Returns ``(out, mask)``; mask is None when inactive."""
    if not training or rate == 0:
        return x, None
    keep = rng.random(x.shape, dtype=np.float32) >= rate
    scale = x.dtype.type(1.0 / (1.0 - rate))
    return np.where(keep, x * scale, x.dtype.type(0)), keep


def dropout_backward(mask, rate, grad_out):
    if mask is None:
        return grad_out
    scale = grad_out.dtype.type(1.0 / (1.0 - rate))
    return np.where(mask, grad_out * scale, grad_out.dtype.type(0))


# ---------------------------------------------------------------- initialisation


def glorot_uniform(rng, shape, fan_in, fan_out, dtype=np.float32):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


# ---------------------------------------------------------------- layer classes


class Layer:
    """Base class. Subclasses set ``kind`` and implement the hooks below.

    ``params`` and ``grads`` are dicts keyed by parameter name (``"weights"``,
    ``"bias"``); layers without parameters leave them empty.
    """

    kind = "layer"

    def __init__(self):
        self.name = self.kind
        self.params = {}
        self.grads = {}
        self.input_shape = None

    def config(self):
        """Hyperparameters as a plain dict of ints/floats/strings."""
        return {}

    def output_shape(self, input_shape):
        raise NotImplementedError

    def build(self, input_shape, rng):
        """Check the input shape and create parameters; returns the output shape."""
        out = self.output_shape(input_shape)
        self.input_shape = tuple(input_shape)
        return out

    @property
    def param_count(self):
        return int(sum(p.size for p in self.params.values()))

    def forward(self, x, training=False):
        raise NotImplementedError

    def backward(self, grad_out, need_input_grad=True):
        raise NotImplementedError

    def astype(self, dtype):
        for key, value in self.params.items():
            self.params[key] = value.astype(dtype)
        return self

    def __repr__(self):
        args = ", ".join(f"{k}={v!r}" for k, v in self.config().items())
        return f"{type(self).__name__}({args})"


class _Activated(Layer):
    """Mixin for layers with a fused output activation (``relu``/``sigmoid``/None)."""

    def __init__(self, activation):
        super().__init__()
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.activation = activation
        self._input = None
        self._output = None

    def _activate(self, z):
        if self.activation == "relu":
            return relu(z)
        if self.activation == "sigmoid":
            return sigmoid(z)
        return z

    def _activation_backward(self, grad_out, skip_activation):
        if self._output is None:
            raise StateError(f"{self.name}: backward called before forward")
        if skip_activation or self.activation is None:
            return grad_out
        if self.activation == "relu":
            return relu_backward(self._output, grad_out)
        return sigmoid_backward(self._output, grad_out)


class Conv2D(_Activated):
    kind = "conv2d"

    def __init__(self, filters, kernel_size=3, stride=1, activation="relu"):
        super().__init__(activation)
        if filters < 1 or kernel_size < 1 or stride < 1:
            raise ValueError("filters, kernel_size and stride must all be >= 1")
        self.filters = int(filters)
        self.kernel_size = int(kernel_size)
        self.stride = int(stride)

    def config(self):
        return {"filters": self.filters, "kernel_size": self.kernel_size,
                "stride": self.stride, "activation": self.activation}

    def output_shape(self, input_shape):
        if len(input_shape) != 3:
            raise BuildError(f"{self.name}: expects (H, W, C) input, got {input_shape}", self.name)
        h, w, _ = input_shape
        if h < self.kernel_size or w < self.kernel_size:
            raise BuildError(
                f"{self.name}: input {h}x{w} is smaller than kernel {self.kernel_size}x{self.kernel_size}",
                self.name)
        return (window_output_size(h, self.kernel_size, self.stride),
                window_output_size(w, self.kernel_size, self.stride), self.filters)

    def build(self, input_shape, rng):
        out = super().build(input_shape, rng)
        k, c = self.kernel_size, input_shape[2]
        self.params = {
            "weights": glorot_uniform(rng, (k, k, c, self.filters), k * k * c, k * k * self.filters),
            "bias": np.zeros(self.filters, dtype=np.float32),
        }
        return out

    def forward(self, x, training=False):
        self._input = x
        self._output = self._activate(conv2d_forward(x, self.params["weights"], self.params["bias"], self.stride))
        return self._output

    def backward(self, grad_out, need_input_grad=True, skip_activation=False):
        g = self._activation_backward(grad_out, skip_activation)
        gx, gw, gb = conv2d_backward(self._input, self.params["weights"], self.stride, g, need_input_grad)
        self.grads = {"weights": gw, "bias": gb}
        return gx


class MaxPool2D(Layer):
    kind = "max_pooling2d"

    def __init__(self, pool_size=2, stride=2):
        super().__init__()
        if pool_size < 1 or stride < 1:
            raise ValueError("pool_size and stride must be >= 1")
        self.pool_size = int(pool_size)
        self.stride = int(stride)
        self._argmax = None
        self._in_shape = None

    def config(self):
        return {"pool_size": self.pool_size, "stride": self.stride}

    def output_shape(self, input_shape):
        if len(input_shape) != 3:
            raise BuildError(f"{self.name}: expects (H, W, C) input, got {input_shape}", self.name)
        h, w, c = input_shape
        if h < self.pool_size or w < self.pool_size:
            raise BuildError(
                f"{self.name}: input {h}x{w} is smaller than pool window {self.pool_size}x{self.pool_size}",
                self.name)
        return (window_output_size(h, self.pool_size, self.stride),
                window_output_size(w, self.pool_size, self.stride), c)

    def forward(self, x, training=False):
        out, self._argmax = maxpool_forward(x, self.pool_size, self.stride)
        self._in_shape = x.shape
        return out

    def backward(self, grad_out, need_input_grad=True):
        if self._argmax is None:
            raise StateError(f"{self.name}: backward called before forward")
        return maxpool_backward(self._argmax, self._in_shape, grad_out, self.pool_size, self.stride)


class Flatten(Layer):
    kind = "flatten"

    def __init__(self):
        super().__init__()
        self._in_shape = None

    def output_shape(self, input_shape):
        return (math.prod(input_shape),)

    def forward(self, x, training=False):
        self._in_shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad_out, need_input_grad=True):
        if self._in_shape is None:
            raise StateError(f"{self.name}: backward called before forward")
        return grad_out.reshape(self._in_shape)


class Dense(_Activated):
    kind = "dense"

    def __init__(self, units, activation="relu"):
        super().__init__(activation)
        if units < 1:
            raise ValueError("units must be >= 1")
        self.units = int(units)

    def config(self):
        return {"units": self.units, "activation": self.activation}

    def output_shape(self, input_shape):
        if len(input_shape) != 1:
            raise BuildError(f"{self.name}: expects flat input, got {input_shape}", self.name)
        return (self.units,)

    def build(self, input_shape, rng):
        out = super().build(input_shape, rng)
        fan_in = input_shape[0]
        self.params = {
            "weights": glorot_uniform(rng, (fan_in, self.units), fan_in, self.units),
            "bias": np.zeros(self.units, dtype=np.float32),
        }
        return out

    def forward(self, x, training=False):
        self._input = x
        self._output = self._activate(dense_forward(x, self.params["weights"], self.params["bias"]))
        return self._output

    def backward(self, grad_out, need_input_grad=True, skip_activation=False):
        g = self._activation_backward(grad_out, skip_activation)
        gx, gw, gb = dense_backward(self._input, self.params["weights"], g, need_input_grad)
        self.grads = {"weights": gw, "bias": gb}
        return gx


class Dropout(Layer):
    kind = "dropout"

    def __init__(self, rate=0.2, rng=None):
        super().__init__()
        if not 0 <= rate < 1:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = float(rate)
        self.rng = rng if rng is not None else np.random.default_rng()
        self._mask = None

    def config(self):
        return {"rate": self.rate}

    def output_shape(self, input_shape):
        return tuple(input_shape)

    def forward(self, x, training=False):
        out, self._mask = dropout_forward(x, self.rate, self.rng, training)
        return out

    def backward(self, grad_out, need_input_grad=True):
        return dropout_backward(self._mask, self.rate, grad_out)


LAYER_TYPES = {cls.kind: cls for cls in (Conv2D, MaxPool2D, Flatten, Dense, Dropout)}
