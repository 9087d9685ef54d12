"""Plain Adam with fixed hyperparameters and optional per-parameter masks."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor

Array = np.ndarray


class Adam:
    """Adaptive-moment optimizer over a named parameter dict.

    ``learning_rates`` maps parameter name to step size; parameters missing
    from the map are not updated at all (frozen). ``masks`` optionally zeroes
    update entries elementwise, used to freeze embedding rows.
    """

    def __init__(
        self,
        params: dict[str, Tensor],
        learning_rates: dict[str, float],
        masks: dict[str, Array] | None = None,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = params
        self.learning_rates = learning_rates
        self.masks = masks or {}
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m = {k: np.zeros_like(params[k].data) for k in learning_rates}
        self.v = {k: np.zeros_like(params[k].data) for k in learning_rates}

    def step(self, grads: dict[str, Array]) -> None:
        self.step_count += 1
        b1c = 1.0 - self.beta1**self.step_count
        b2c = 1.0 - self.beta2**self.step_count
        for name, lr in self.learning_rates.items():
            g = grads[name]
            if name in self.masks:
                g = g * self.masks[name]
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            update = (self.m[name] / b1c) / (np.sqrt(self.v[name] / b2c) + self.eps)
            if name in self.masks:
                update = update * self.masks[name]
            self.params[name].data -= lr * update
