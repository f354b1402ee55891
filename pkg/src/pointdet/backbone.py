"""Tiny convolutional pyramid standing in for a backbone + FPN.

Two stride-2 stem convs bring a [3,H,W] image to the base stride (4), then
one stride-2 conv per additional level. ReLU follows every conv; strides
double per level and all levels share the channel count.
"""

from __future__ import annotations

import numpy as np

from . import ops
from .layers import ConvLayer

__all__ = ["Backbone"]


class Backbone:
    def __init__(self, rng, channels=32, levels=3, base_stride=4, in_channels=3):
        if base_stride != 4:
            raise ValueError("base stride is fixed at 4 (two stem downsamples)")
        if levels < 1:
            raise ValueError(f"need at least one pyramid level, got {levels}")
        self.channels = channels
        self.levels = levels
        self.strides = tuple(base_stride * (1 << i) for i in range(levels))
        self.layers = [
            ConvLayer("backbone.stem0", in_channels, channels, rng, stride=2),
            ConvLayer("backbone.stem1", channels, channels, rng, stride=2),
        ]
        for i in range(levels - 1):
            self.layers.append(ConvLayer(f"backbone.down{i}", channels, channels, rng, stride=2))
        # pyramid features are tapped after these layer indices
        self._taps = [1 + i for i in range(levels)]

    def parameters(self):
        out = []
        for layer in self.layers:
            out.extend(layer.parameters())
        return out

    def forward(self, image):
        """Run the pyramid. Returns ``(features, cache)`` with one [C,H/s,W/s]
        feature per level."""
        image = np.asarray(image, dtype=np.float64)
        if image.ndim != 3 or image.shape[0] != 3:
            raise ValueError(f"expected a [3,H,W] image, got shape {image.shape}")
        top = self.strides[-1]
        h, w = image.shape[1:]
        if h % top or w % top:
            raise ValueError(
                f"image size {h}x{w} not divisible by the coarsest stride {top}; "
                f"pad to {-(-h // top) * top}x{-(-w // top) * top}"
            )
        x = image
        feats = []
        cache = []
        for idx, layer in enumerate(self.layers):
            y, conv_cache = layer.forward(x)
            act, mask = ops.relu(y)
            cache.append((conv_cache, mask))
            x = act
            if idx in self._taps:
                feats.append(act)
        return feats, cache

    def backward(self, cache, gfeats):
        """Accumulate parameter gradients given per-level feature gradients."""
        g = None
        tap_for = {idx: i for i, idx in enumerate(self._taps)}
        for idx in range(len(self.layers) - 1, -1, -1):
            conv_cache, mask = cache[idx]
            if idx in tap_for:
                gf = gfeats[tap_for[idx]]
                g = gf if g is None else g + gf
            g = ops.relu_backward(mask, g)
            g = self.layers[idx].backward(conv_cache, g)
        return g
