"""Layers with explicit forward/backward passes.

Each layer caches what its backward needs during a training-mode forward and
drops the cache once backward has consumed it. Quantized layers run their
forward on ``quantize_symmetric_4bit(master)`` and deposit the resulting
weight gradient straight onto the master (straight-through estimator).
"""

import numpy as np

from . import tensor as T
from .errors import DomainError, ShapeError, StateError
from .quantize import TANH_CLIP_SCALE, QuantResult, quantize_symmetric_4bit


class Param:
    """A trainable FP32 tensor with its accumulated gradient."""

    quantized = False

    def __init__(self, name, value, decay=False):
        self.name = name
        self.value = value
        self.grad = np.zeros_like(value)
        self.decay = decay

    @property
    def size(self):
        return self.value.size

    def zero_grad(self):
        self.grad.fill(0)


class QuantizedParam(Param):
    """Master weights of a Conv4bit/Linear4bit layer.

    ``frozen`` makes forwards reuse ``last_quant`` instead of re-deriving it,
    which is how exported (inference) networks and frozen-level gradient
    checks run.
    """

    quantized = True

    def __init__(self, name, value, quantize=True, per_layer_scaling=True,
                 fixed_bound=TANH_CLIP_SCALE, rounding="half_away"):
        super().__init__(name, value, decay=True)
        self.quantize_on = quantize
        self.per_layer_scaling = per_layer_scaling
        self.fixed_bound = fixed_bound
        self.rounding = rounding
        self.last_quant = None
        self.frozen = False

    @property
    def master(self):
        return self.value

    def quantize(self):
        bound = None if self.per_layer_scaling else self.fixed_bound
        return quantize_symmetric_4bit(self.value, bound, self.rounding)

    def forward_weight(self):
        """Weights the forward pass consumes (refreshing the quantization)."""
        if not self.quantize_on:
            return self.value
        if not self.frozen or self.last_quant is None:
            self.last_quant = self.quantize()
        return self.last_quant.w_q

    def freeze(self, quant=None):
        self.last_quant = quant if quant is not None else self.quantize()
        self.frozen = True

    def unfreeze(self):
        self.frozen = False


class Layer:
    kind = "layer"
    training = True

    def __init__(self):
        self.cache = None

    def params(self):
        return []

    def _take_cache(self):
        if self.cache is None:
            raise StateError(f"{self.kind}: backward called without a training forward")
        cache, self.cache = self.cache, None
        return cache


class Conv4bit(Layer):
    kind = "conv4bit"

    def __init__(self, name, cin, cout, kernel=3, stride=1, pad=1, rng=None,
                 dtype=np.float32, **qopts):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = cin * kernel * kernel
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), (cout, cin, kernel, kernel))
        self.weight = QuantizedParam(f"{name}.weight", w.astype(dtype), **qopts)
        self.bias = Param(f"{name}.bias", np.zeros(cout, dtype=dtype))
        self.kernel, self.stride, self.pad = kernel, stride, pad

    def params(self):
        return [self.weight, self.bias]

    def forward(self, x, training=True):
        w = self.weight.forward_weight()
        cout = w.shape[0]
        if x.ndim != 4 or x.shape[1] != w.shape[1]:
            raise ShapeError(f"{self.weight.name}: expected N x {w.shape[1]} x H x W, got {x.shape}")
        n, _, h, wd = x.shape
        hout = T.conv_output_size(h, self.kernel, self.stride, self.pad)
        wout = T.conv_output_size(wd, self.kernel, self.stride, self.pad)
        x_nhwc = x.transpose(0, 2, 3, 1)
        cols = T.im2col_nhwc(x_nhwc, self.kernel, self.stride, self.pad)
        w_mat = w.transpose(0, 2, 3, 1).reshape(cout, -1)
        y = cols @ w_mat.T
        y += self.bias.value
        if training:
            self.cache = (x_nhwc.shape, cols, w_mat, w.shape)
        return np.ascontiguousarray(y.reshape(n, hout, wout, cout).transpose(0, 3, 1, 2))

    def backward(self, dy):
        x_shape, cols, w_mat, w_shape = self._take_cache()
        cout = w_mat.shape[0]
        dy_mat = np.ascontiguousarray(dy.transpose(0, 2, 3, 1)).reshape(-1, cout)
        # straight-through: dL/dW_q lands on the master unchanged
        dw = (dy_mat.T @ cols).reshape(cout, w_shape[2], w_shape[3], w_shape[1])
        self.weight.grad += dw.transpose(0, 3, 1, 2)
        self.bias.grad += dy_mat.sum(axis=0)
        dcols = dy_mat @ w_mat
        dx = T.col2im_nhwc(dcols, x_shape, self.kernel, self.stride, self.pad)
        return np.ascontiguousarray(dx.transpose(0, 3, 1, 2))


class Linear4bit(Layer):
    kind = "linear4bit"

    def __init__(self, name, fin, fout, rng=None, dtype=np.float32, init="kaiming", **qopts):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        if init == "kaiming":
            w = rng.normal(0.0, np.sqrt(2.0 / fin), (fout, fin))
        else:
            # output layer: no ReLU follows, so use the plain U(-1/sqrt(fan_in), ..) default
            bound = 1.0 / np.sqrt(fin)
            w = rng.uniform(-bound, bound, (fout, fin))
        self.weight = QuantizedParam(f"{name}.weight", w.astype(dtype), **qopts)
        self.bias = Param(f"{name}.bias", np.zeros(fout, dtype=dtype))

    def params(self):
        return [self.weight, self.bias]

    def forward(self, x, training=True):
        w = self.weight.forward_weight()
        if x.ndim != 2 or x.shape[1] != w.shape[1]:
            raise ShapeError(f"{self.weight.name}: expected N x {w.shape[1]}, got {x.shape}")
        y = T.matmul(x, w.T) + self.bias.value
        if training:
            self.cache = (x, w)
        return y

    def backward(self, dy):
        x, w = self._take_cache()
        self.weight.grad += dy.T @ x
        self.bias.grad += dy.sum(axis=0)
        return dy @ w


class BatchNorm(Layer):
    """Batch normalization over channel axis 1 for 2-D or 4-D inputs.

    Running variance is updated with the unbiased batch variance;
    normalization itself uses the biased one.
    """

    kind = "batchnorm"

    def __init__(self, name, num_features, eps=1e-5, momentum=0.1, affine=True,
                 dtype=np.float32):
        super().__init__()
        self.name = name
        self.eps, self.momentum, self.affine = eps, momentum, affine
        self.gamma = Param(f"{name}.gamma", np.ones(num_features, dtype=dtype))
        self.beta = Param(f"{name}.beta", np.zeros(num_features, dtype=dtype))
        self.running_mean = np.zeros(num_features, dtype=dtype)
        self.running_var = np.ones(num_features, dtype=dtype)

    def params(self):
        return [self.gamma, self.beta] if self.affine else []

    def buffers(self):
        return {f"{self.name}.running_mean": self.running_mean,
                f"{self.name}.running_var": self.running_var}

    @staticmethod
    def _axes(x):
        if x.ndim == 2:
            return (0,), (1, -1)
        if x.ndim == 4:
            return (0, 2, 3), (1, -1, 1, 1)
        raise ShapeError(f"batchnorm expects 2-D or 4-D input, got {x.shape}")

    def forward(self, x, training=True):
        axes, bshape = self._axes(x)
        if x.shape[1] != self.running_mean.size:
            raise ShapeError(f"{self.name}: expected {self.running_mean.size} channels, got {x.shape[1]}")
        gamma = self.gamma.value.reshape(bshape)
        beta = self.beta.value.reshape(bshape)
        if not training:
            inv_std = 1.0 / np.sqrt(self.running_var + self.eps)
            xhat = (x - self.running_mean.reshape(bshape)) * inv_std.reshape(bshape)
            return (gamma * xhat + beta).astype(x.dtype, copy=False)
        m = x.size // x.shape[1]
        if m == 0:
            raise DomainError(f"{self.name}: empty batch in training mode")
        mean = x.mean(axis=axes, dtype=np.float64)
        xc = x - mean.astype(x.dtype).reshape(bshape)
        var = np.einsum(*(("nc,nc->c",) if x.ndim == 2 else ("nchw,nchw->c",)), xc, xc,
                        dtype=np.float64) / m
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xc *= inv_std.astype(x.dtype).reshape(bshape)
        xhat = xc
        unbiased = var * m / (m - 1) if m > 1 else var
        mom = self.momentum
        self.running_mean[...] = (1 - mom) * self.running_mean + mom * mean
        self.running_var[...] = (1 - mom) * self.running_var + mom * unbiased
        self.cache = (xhat, inv_std.astype(x.dtype), axes, bshape, m)
        return gamma * xhat + beta

    def backward(self, dy):
        xhat, inv_std, axes, bshape, m = self._take_cache()
        if self.affine:
            self.gamma.grad += (dy * xhat).sum(axis=axes)
            self.beta.grad += dy.sum(axis=axes)
        dxhat = dy * self.gamma.value.reshape(bshape)
        s1 = dxhat.sum(axis=axes).reshape(bshape)
        s2 = (dxhat * xhat).sum(axis=axes).reshape(bshape)
        return (inv_std.reshape(bshape) / m) * (m * dxhat - s1 - xhat * s2)


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, training=True):
        mask = x > 0
        if training:
            self.cache = mask
        return x * mask

    def backward(self, dy):
        return dy * self._take_cache()


class MaxPool2x2(Layer):
    """2x2 max pooling, stride 2. Ties route the gradient to the first maximum."""

    kind = "maxpool"

    def forward(self, x, training=True):
        if x.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
            raise ShapeError(f"maxpool2x2 needs N x C x even H x even W, got {x.shape}")
        n, c, h, w = x.shape
        win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
        win = win.reshape(n, c, h // 2, w // 2, 4)
        idx = win.argmax(axis=-1)
        if training:
            self.cache = (x.shape, idx)
        return np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(self, dy):
        (n, c, h, w), idx = self._take_cache()
        win = np.zeros((n, c, h // 2, w // 2, 4), dtype=dy.dtype)
        np.put_along_axis(win, idx[..., None], dy[..., None], axis=-1)
        win = win.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return np.ascontiguousarray(win.reshape(n, c, h, w))


class Dropout(Layer):
    """Inverted dropout; identity at eval.

    ``rng`` is replaced by the training loop before each step so masks are a
    pure function of (seed, step).
    """

    kind = "dropout"

    def __init__(self, p=0.5, rng=None):
        super().__init__()
        if not 0.0 <= p < 1.0:
            raise DomainError(f"dropout probability must lie in [0, 1), got {p}")
        self.p = p
        self.rng = rng if rng is not None else np.random.default_rng(0)

    def forward(self, x, training=True):
        if not training:
            return x
        if self.p == 0.0:
            self.cache = x.dtype.type(1.0)
            return x
        keep = self.rng.random(x.shape) >= self.p
        mask = keep.astype(x.dtype) / x.dtype.type(1.0 - self.p)
        self.cache = mask
        return x * mask

    def backward(self, dy):
        return dy * self._take_cache()


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x, training=True):
        if training:
            self.cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dy):
        return dy.reshape(self._take_cache())


def cross_entropy_loss(logits, labels):
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    logits = np.asarray(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"logits {logits.shape} and labels {labels.shape} disagree")
    n, k = logits.shape
    if n == 0:
        raise DomainError("cross entropy over an empty batch")
    if labels.min() < 0 or labels.max() >= k:
        raise DomainError(f"labels must lie in [0, {k})")
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(logsumexp - z[rows, labels]))
    probs = np.exp(z - logsumexp[:, None])
    probs[rows, labels] -= 1.0
    return loss, (probs / n).astype(logits.dtype)
