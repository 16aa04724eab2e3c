"""Stochastic gradient optimizers over flat parameter vectors."""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, NumericalError


class SGD:
    def __init__(self, lr: float = 1e-2):
        if lr <= 0:
            raise ConfigError("learning rate must be positive")
        self.lr = lr

    def step(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if theta.shape != grad.shape:
            raise ConfigError("parameter/gradient size mismatch")
        if not np.all(np.isfinite(grad)):
            raise NumericalError("non-finite gradient in SGD step")
        return theta - self.lr * grad


class Adam:
    """Standard Adam with bias-corrected moments."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise ConfigError("learning rate must be positive")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m: np.ndarray | None = None
        self._v: np.ndarray | None = None

    def step(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if theta.shape != grad.shape:
            raise ConfigError("parameter/gradient size mismatch")
        if not np.all(np.isfinite(grad)):
            raise NumericalError("non-finite gradient in Adam step")
        if self._m is None:
            self._m = np.zeros_like(theta)
            self._v = np.zeros_like(theta)
        self.t += 1
        self._m = self.beta1 * self._m + (1 - self.beta1) * grad
        self._v = self.beta2 * self._v + (1 - self.beta2) * grad * grad
        m_hat = self._m / (1 - self.beta1 ** self.t)
        v_hat = self._v / (1 - self.beta2 ** self.t)
        return theta - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
