"""Trainable parameters and the SGD optimizer."""

from __future__ import annotations

import numpy as np

__all__ = ["Parameter", "SGD", "NonFiniteGradientError"]


class NonFiniteGradientError(RuntimeError):
    """Raised when a parameter gradient contains NaN or infinity."""

    def __init__(self, param_name: str):
        super().__init__(f"non-finite gradient for parameter '{param_name}'")
        self.param_name = param_name


class Parameter:
    """A named value/gradient pair. The gradient starts at zero and is
    accumulated into by backward passes."""

    __slots__ = ("name", "value", "grad")

    def __init__(self, name: str, value):
        self.name = name
        self.value = np.ascontiguousarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.value.shape})"


class SGD:
    """SGD with momentum and L2 weight decay.

    Per step: ``v = momentum*v + grad + weight_decay*param`` then
    ``param -= lr*v``; gradients are zeroed afterwards. A non-finite gradient
    aborts the step before any parameter is touched.
    """

    def __init__(self, params, lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.params = list(params)
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self._velocity = [np.zeros_like(p.value) for p in self.params]

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        for p in self.params:
            if not np.all(np.isfinite(p.grad)):
                raise NonFiniteGradientError(p.name)
        for p, v in zip(self.params, self._velocity):
            v *= self.momentum
            v += p.grad
            if self.weight_decay:
                v += self.weight_decay * p.value
            p.value -= lr * v
            p.grad[...] = 0.0

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()
