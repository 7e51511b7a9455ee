"""
Optimizer
Adam with one learning rate per named parameter group
"""

import logging
from typing import Dict

import numpy as np

logger = logging.getLogger(__name__)


class Adam:
    """Adaptive moment estimation over a dict of parameter arrays"""

    def __init__(
        self,
        learning_rates: Dict[str, float],
        beta1: float = 0.9,
        beta2: float = 0.999,
        epsilon: float = 1e-15,
    ):
        """
        Args:
            learning_rates: Step size per parameter group name
            beta1: Decay of the first moment
            beta2: Decay of the second moment
            epsilon: Denominator floor
        """
        self.learning_rates = dict(learning_rates)
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}
        self.step_count = 0

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]) -> None:
        """Update params in place"""
        self.step_count += 1
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count

        for name, value in params.items():
            lr = self.learning_rates.get(name, 0.0)
            if lr == 0.0:
                continue
            g = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(value)
                self.v[name] = np.zeros_like(value)

            self.m[name] *= self.beta1
            self.m[name] += (1.0 - self.beta1) * g
            self.v[name] *= self.beta2
            self.v[name] += (1.0 - self.beta2) * (g * g)

            denom = np.sqrt(self.v[name] / bc2) + self.epsilon
            value -= (lr / bc1) * self.m[name] / denom

    def moments_finite(self) -> bool:
        return all(np.isfinite(self.m[k]).all() and np.isfinite(self.v[k]).all() for k in self.m)
