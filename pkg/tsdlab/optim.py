from typing import Dict, Iterable

import numpy as np


class Sgd:
    def __init__(self, lr: float = 0.01):
        """
        Plain stochastic gradient descent.

        Args:
            lr: Learning rate
        """
        self.lr = lr

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]) -> None:
        """Update every array in ``params`` in place."""
        for k in params:
            params[k] -= self.lr * grads[k]

    def reset(self, names: Iterable[str]) -> None:
        """SGD keeps no per-parameter state."""


class Adam:
    def __init__(self, lr: float = 0.001, beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8):
        """
        Adam with bias-corrected moment estimates, tracked per parameter name.

        Args:
            lr: Learning rate
            beta1: Decay of the first moment
            beta2: Decay of the second moment
            epsilon: Denominator regularizer
        """
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon

        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}
        # step counter per parameter, so parameters added mid-run start fresh
        self.t: Dict[str, int] = {}

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]) -> None:
        for k in params:
            g = grads[k]
            if k not in self.m:
                self.m[k] = np.zeros_like(params[k])
                self.v[k] = np.zeros_like(params[k])
                self.t[k] = 0
            self.t[k] += 1
            t = self.t[k]

            self.m[k] *= self.beta1
            self.m[k] += (1.0 - self.beta1) * g
            self.v[k] *= self.beta2
            self.v[k] += (1.0 - self.beta2) * (g * g)

            bc1 = 1.0 - self.beta1 ** t
            bc2 = 1.0 - self.beta2 ** t
            denom = np.sqrt(self.v[k] / bc2) + self.epsilon
            params[k] -= (self.lr / bc1) * self.m[k] / denom

    def reset(self, names: Iterable[str]) -> None:
        """Forget the moments of parameters that were replaced."""
        for k in names:
            self.m.pop(k, None)
            self.v.pop(k, None)
            self.t.pop(k, None)


def make_optimizer(name: str, lr: float):
    if name == "sgd":
        return Sgd(lr=lr)
    if name == "adam":
        return Adam(lr=lr)
    raise ValueError(f"unknown optimizer {name!r}")
