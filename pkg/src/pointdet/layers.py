"""Thin layer wrappers tying kernels to named parameters."""

from __future__ import annotations

import numpy as np

from . import ops
from .optim import Parameter

__all__ = ["ConvLayer"]


class ConvLayer:
    """3x3 (or kxk) convolution with bias.

    ``forward`` returns ``(y, cache)``; ``backward`` accumulates weight/bias
    gradients into the layer's parameters and returns the input gradient.
    A layer may be applied several times per forward pass (shared across
    pyramid levels), so caches live with the caller.
    """

    def __init__(self, name, cin, cout, rng, k=3, stride=1, padding=1,
                 weight_scale=None, bias_fill=0.0):
        if weight_scale is None:
            weight_scale = np.sqrt(2.0 / (cin * k * k))
        w = rng.normal(0.0, weight_scale, size=(cout, cin, k, k))
        b = np.broadcast_to(np.asarray(bias_fill, dtype=np.float64), (cout,)).copy()
        self.w = Parameter(f"{name}.w", w)
        self.b = Parameter(f"{name}.b", b)
        self.stride = stride
        self.padding = padding

    def forward(self, x):
        return ops.conv2d(x, self.w.value, self.b.value, self.stride, self.padding)

    def backward(self, cache, gy):
        gx, gw, gb = ops.conv2d_backward(cache, gy)
        self.w.grad += gw
        self.b.grad += gb
        return gx

    def parameters(self):
        return [self.w, self.b]
