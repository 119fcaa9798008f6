"""Adam optimizer over the parameters of a layer list."""

from typing import Dict, Sequence

import numpy as np

from ..common.constants import Constants
from .graph import LayerSpec


class Adam:
    """Adam with bias correction; updates parameters in place.

    The optimizer owns its moment buffers, so one instance belongs to one
    training model.
    """

    def __init__(
        self,
        learning_rate: float = Constants.LEARNING_RATE,
        beta1: float = Constants.ADAM_BETA1,
        beta2: float = Constants.ADAM_BETA2,
        epsilon: float = Constants.ADAM_EPSILON,
    ):
        if learning_rate < 0:
            raise ValueError("learning rate must be non-negative")
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.steps = 0
        self._m: Dict[str, np.ndarray] = {}
        self._v: Dict[str, np.ndarray] = {}

    def step(self, specs: Sequence[LayerSpec], grads: Dict[str, Dict[str, np.ndarray]]) -> None:
        self.steps += 1
        correction1 = 1.0 - self.beta1 ** self.steps
        correction2 = 1.0 - self.beta2 ** self.steps
        for spec in specs:
            layer_grads = grads.get(spec.name)
            if not layer_grads:
                continue
            for name, grad in layer_grads.items():
                key = f"{spec.name}.{name}"
                m = self._m.setdefault(key, np.zeros_like(grad))
                v = self._v.setdefault(key, np.zeros_like(grad))
                m *= self.beta1
                m += (1.0 - self.beta1) * grad
                v *= self.beta2
                v += (1.0 - self.beta2) * grad * grad
                update = (m / correction1) / (np.sqrt(v / correction2) + self.epsilon)
                spec.params[name] -= self.learning_rate * update
