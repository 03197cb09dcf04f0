import logging
from typing import List, Sequence

import numpy as np

from models import ConfigError
from modules.tensor import Parameter

logger = logging.getLogger("aligncap")


class AdamOptimizer:
    """Adaptive-moment updates with bias correction, over trainable parameters only."""

    def __init__(self, params: Sequence[Parameter], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        if lr < 0:
            raise ConfigError(f"learning rate must be >= 0, got {lr}")
        if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
            raise ConfigError(f"betas must lie in [0,1), got ({beta1}, {beta2})")
        self.params: List[Parameter] = [p for p in params if p.trainable]
        skipped = len(params) - len(self.params)
        if skipped:
            logger.debug(f"AdamOptimizer: ignoring {skipped} frozen parameters")
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.lr == 0.0:
                continue
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
