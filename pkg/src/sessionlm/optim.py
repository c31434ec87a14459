"""AdamW with decoupled weight decay and a cosine learning-rate schedule."""

import math

import numpy as np

from .errors import TrainingError
from .kernels import adamw_update


class AdamWState:
    """Per-parameter moment buffers plus the shared step counter.

    The parameter set is fixed at construction; ``step`` applies the update
    in place to ``tensor.data`` and leaves every other tensor untouched.
    """

    def __init__(self, params, lr=1e-4, weight_decay=1e-2, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        seen = set()
        for p in self.params:
            if p.node_id in seen:
                raise TrainingError("duplicate parameter in optimizer set")
            seen.add(p.node_id)
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self._m = {p.node_id: np.zeros_like(p.data) for p in self.params}
        self._v = {p.node_id: np.zeros_like(p.data) for p in self.params}

    def step(self, grads, lr=None):
        """One update from a gradient map keyed by parameter node id."""
        for p in self.params:
            if p.node_id not in grads:
                raise TrainingError(
                    f"missing gradient for parameter of shape {p.data.shape}"
                )
        lr = self.lr if lr is None else lr
        self.step_count += 1
        for p in self.params:
            g = grads[p.node_id]
            if g.shape != p.data.shape:
                raise TrainingError(
                    f"gradient shape {g.shape} does not match parameter {p.data.shape}"
                )
            adamw_update(
                p.data.reshape(-1),
                np.ascontiguousarray(g, dtype=p.data.dtype).reshape(-1),
                self._m[p.node_id].reshape(-1),
                self._v[p.node_id].reshape(-1),
                p.data.dtype.type(lr),
                p.data.dtype.type(self.beta1),
                p.data.dtype.type(self.beta2),
                p.data.dtype.type(self.eps),
                p.data.dtype.type(self.weight_decay),
                self.step_count,
            )


def adamw_step(state, grads, lr=None):
    state.step(grads, lr=lr)


def cosine_lr(base_lr, step, total_steps):
    """Half-cosine decay from ``base_lr`` at step 0 to 0 at ``total_steps``.

    Steps past the end clamp to the final value.
    """
    if total_steps < 1:
        raise TrainingError(f"total_steps must be >= 1, got {total_steps}")
    if step < 0:
        raise TrainingError(f"step must be >= 0, got {step}")
    if step > total_steps:
        step = total_steps
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))
