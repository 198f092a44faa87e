"""SGD with momentum and Adam, both with time-based learning-rate decay.

The effective learning rate at step ``t`` (0-based) is ``lr / (1 + decay * t)``.
Parameters whose ``trainable`` flag is off are skipped entirely, so frozen
layers stay bitwise unchanged.
"""

from __future__ import annotations

import numpy as np

from ..errors import ConfigError, StateError


class Optimizer:
    def __init__(self, params, lr, decay=0.0):
        if lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {lr}")
        if decay < 0:
            raise ConfigError(f"decay factor must be non-negative, got {decay}")
        self.params = list(params)
        self.lr = float(lr)
        self.decay = float(decay)
        self.step_count = 0

    @property
    def effective_lr(self):
        return self.lr / (1.0 + self.decay * self.step_count)

    def _live(self):
        live = []
        for i, p in enumerate(self.params):
            if not p.trainable:
                continue
            if p.grad is None:
                raise StateError(f"parameter {i} ({p.name}) has no gradient; run backward() first")
            live.append((i, p))
        return live

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        raise NotImplementedError


class SGDMomentum(Optimizer):
    """``v <- mu * v - lr_t * g;  w <- w + v``."""

    kind = "sgd-momentum"

    def __init__(self, params, lr=0.01, decay=0.0, momentum=0.0):
        super().__init__(params, lr, decay)
        self.momentum = float(momentum)
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        lr_t = self.effective_lr
        for i, p in self._live():
            v = self.velocity[i]
            v *= self.momentum
            v -= lr_t * p.grad
            p.data += v
        self.step_count += 1


class Adam(Optimizer):
    kind = "adam"

    def __init__(self, params, lr=1e-3, decay=0.0, betas=(0.9, 0.999), eps=1e-8):
        super().__init__(params, lr, decay)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        lr_t = self.effective_lr
        t = self.step_count + 1
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for i, p in self._live():
            g = p.grad
            m, v = self.m[i], self.v[i]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= lr_t * (m / c1) / (np.sqrt(v / c2) + self.eps)
        self.step_count = t


def make_optimizer(kind, params, lr, decay=0.0, momentum=0.9):
    if kind == "adam":
        return Adam(params, lr=lr, decay=decay)
    if kind in ("sgd", "sgd-momentum"):
        return SGDMomentum(params, lr=lr, decay=decay, momentum=momentum)
    raise ConfigError(f"unknown optimizer {kind!r}; expected 'adam' or 'sgd-momentum'")
