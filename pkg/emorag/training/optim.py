import logging
from typing import Dict

import numpy as np

from emorag.errors import CheckpointError, NonFiniteError

logger = logging.getLogger(__name__)


class MomentumSGD(object):
    """Gradient descent with heavy-ball momentum over a dict of named arrays.

    Arrays are updated in place, so every holder of a reference sees the step.
    """

    def __init__(self, params: Dict[str, np.ndarray], lr, momentum=0.9, max_grad_norm=0.0):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.max_grad_norm = max_grad_norm
        self.velocity = {name: np.zeros_like(p) for name, p in params.items()}
        self.steps = 0

    def grad_norm(self, grads):
        return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))

    def step(self, grads: Dict[str, np.ndarray]):
        unknown = set(grads) - set(self.params)
        if unknown:
            raise KeyError(f"gradients for unknown parameters {sorted(unknown)}")

        norm = self.grad_norm(grads)
        if not np.isfinite(norm):
            raise NonFiniteError("non-finite gradient norm", grad_norm=norm)
        factor = 1.0
        if self.max_grad_norm > 0 and norm > self.max_grad_norm:
            factor = self.max_grad_norm / norm

        for name, p in self.params.items():
            g = grads.get(name)
            v = self.velocity[name]
            v *= self.momentum
            if g is not None:
                v += factor * g
            p -= self.lr * v

        self.steps += 1
        return norm

    def state_dict(self):
        return {"steps": self.steps, "velocity": {k: v.copy() for k, v in self.velocity.items()}}

    def load_state_dict(self, state):
        velocity = state.get("velocity", {})
        for name, v in velocity.items():
            if name not in self.velocity:
                raise CheckpointError(f"optimizer state names unknown parameter '{name}'", section="optim")
            if v.shape != self.velocity[name].shape:
                raise CheckpointError(
                    f"optimizer state for '{name}' has shape {v.shape}, expected {self.velocity[name].shape}",
                    section="optim",
                )
            self.velocity[name][...] = v
        self.steps = int(state.get("steps", 0))
