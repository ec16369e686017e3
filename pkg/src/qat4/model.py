"""VGG-style 4-bit network for 32x32x3 inputs."""

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, StateError
from .layers import (BatchNorm, Conv4bit, Dropout, Flatten, Linear4bit, MaxPool2x2,
                     ReLU)
from .quantize import count_unique_levels

ARCH_ID = "vgg4bit"
BLOCK_CHANNELS = ((64, 64), (128, 128), (256, 256))
FLAT_FEATURES = 256 * 4 * 4
HIDDEN = 512

# Trainable parameters (conv/linear weights and biases, BN gamma/beta).
# BN running statistics are buffers and are not counted.
REFERENCE_PARAM_COUNT_CIFAR10 = 3_251_018


def expected_param_count(num_classes):
    count = 0
    cin = 3
    for block in BLOCK_CHANNELS:
        for cout in block:
            count += cin * cout * 9 + cout + 2 * cout
            cin = cout
    count += FLAT_FEATURES * HIDDEN + HIDDEN + 2 * HIDDEN
    count += HIDDEN * num_classes + num_classes
    return count


@dataclass
class ModelConfig:
    num_classes: int = 10
    dropout_p: float = 0.5
    quantize: bool = True
    per_layer_scaling: bool = True
    fixed_clip_bound: float = 3.0
    rounding: str = "half_away"
    bn_affine: bool = True
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1

    def __post_init__(self):
        if self.num_classes < 2:
            raise DomainError(f"num_classes must be >= 2, got {self.num_classes}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise DomainError(f"dropout_p must lie in [0, 1), got {self.dropout_p}")


class Network:
    def __init__(self, layers, config, seed=0):
        self.layers = layers
        self.config = config
        self.seed = seed
        self.inference_only = False

    def params(self):
        return [p for layer in self.layers for p in layer.params()]

    def named_params(self):
        return {p.name: p for p in self.params()}

    def quantized_params(self):
        return [p for p in self.params() if p.quantized]

    def batchnorms(self):
        return [l for l in self.layers if isinstance(l, BatchNorm)]

    def buffers(self):
        out = {}
        for bn in self.batchnorms():
            out.update(bn.buffers())
        return out

    def dropouts(self):
        return [l for l in self.layers if isinstance(l, Dropout)]

    def num_parameters(self):
        return sum(p.size for p in self.params())

    @property
    def dtype(self):
        return self.params()[0].value.dtype

    def forward(self, x, training=True):
        if training and self.inference_only:
            raise StateError("network was loaded from an INT4 export and is inference-only")
        for layer in self.layers:
            x = layer.forward(x, training)
        return x

    __call__ = forward

    def backward(self, dlogits):
        g = dlogits
        for layer in reversed(self.layers):
            g = layer.backward(g)
        return g

    def zero_grad(self):
        for p in self.params():
            p.zero_grad()

    def unique_levels(self):
        """Per-layer distinct-level counts from the most recent quantization."""
        counts = {}
        for p in self.quantized_params():
            if p.last_quant is None:
                p.last_quant = p.quantize()
            counts[p.name] = count_unique_levels(p.last_quant.w_int)
        return counts

    def freeze_quantization(self):
        for p in self.quantized_params():
            p.freeze()

    def unfreeze_quantization(self):
        for p in self.quantized_params():
            p.unfreeze()


def build_vgg4bit(cfg=None, seed=0, dtype=np.float32):
    """Three conv blocks (conv-BN-ReLU x2, maxpool) and a 2-layer classifier."""
    cfg = cfg if cfg is not None else ModelConfig()
    rng = np.random.default_rng([seed, 0])
    qopts = dict(quantize=cfg.quantize, per_layer_scaling=cfg.per_layer_scaling,
                 fixed_bound=cfg.fixed_clip_bound, rounding=cfg.rounding)
    bnopts = dict(eps=cfg.bn_eps, momentum=cfg.bn_momentum, affine=cfg.bn_affine,
                  dtype=dtype)
    layers = []
    cin = 3
    idx = 0
    for b, block in enumerate(BLOCK_CHANNELS, start=1):
        for cout in block:
            idx += 1
            layers += [Conv4bit(f"conv{idx}", cin, cout, rng=rng, dtype=dtype, **qopts),
                       BatchNorm(f"bn{idx}", cout, **bnopts),
                       ReLU()]
            cin = cout
        layers.append(MaxPool2x2())
    layers += [Flatten(),
               Linear4bit("fc1", FLAT_FEATURES, HIDDEN, rng=rng, dtype=dtype, **qopts),
               BatchNorm("bn_fc1", HIDDEN, **bnopts),
               ReLU(),
               Dropout(cfg.dropout_p, rng=np.random.default_rng([seed, 1])),
               Linear4bit("fc2", HIDDEN, cfg.num_classes, rng=rng, dtype=dtype,
                          init="uniform", **qopts)]
    net = Network(layers, cfg, seed)
    if cfg.bn_affine:
        expected = expected_param_count(cfg.num_classes)
        if net.num_parameters() != expected:
            raise AssertionError(
                f"parameter count {net.num_parameters()} != expected {expected}")
    return net
