# -*- coding: utf-8 -*-
# models/optim.py
"""Global-norm clipping and Adam with decoupled weight decay."""
import logging
from dataclasses import dataclass, field
from typing import Dict, Mapping, Tuple

import numpy as np

from models.tensor import NonFiniteError, Tensor

logger = logging.getLogger(__name__)


@dataclass
class OptimizerState:
    """Moment buffers plus the step hyperparameters they were built with."""
    learning_rate: float
    weight_decay: float = 0.0
    clip_norm: float = 5.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    first_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.clip_norm <= 0:
            raise ValueError(f"clip threshold must be > 0, got {self.clip_norm}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning rate must be > 0, got {self.learning_rate}")

    def export_arrays(self) -> Dict[str, np.ndarray]:
        """Flat dict for checkpoint containers."""
        arrays = {f"m/{k}": v for k, v in self.first_moment.items()}
        arrays.update({f"v/{k}": v for k, v in self.second_moment.items()})
        arrays["step"] = np.asarray(self.step)
        return arrays

    def import_arrays(self, arrays: Mapping[str, np.ndarray]) -> None:
        self.first_moment = {k[2:]: np.array(v) for k, v in arrays.items() if k.startswith("m/")}
        self.second_moment = {k[2:]: np.array(v) for k, v in arrays.items() if k.startswith("v/")}
        self.step = int(arrays.get("step", 0))


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def clip_by_global_norm(grads: Mapping[str, np.ndarray], threshold: float) -> Tuple[Dict[str, np.ndarray], float]:
    """
    Scale every gradient by threshold / norm when the global norm exceeds
    the threshold.

    Returns:
        tuple: (clipped gradients, norm before clipping)
    """
    norm = global_norm(grads)
    if norm > threshold:
        factor = threshold / norm
        return {k: g * factor for k, g in grads.items()}, norm
    return dict(grads), norm


def optimizer_step(state: OptimizerState, params: Mapping[str, Tensor]) -> float:
    """
    Apply one clipped AdamW update to `params` in place using their `.grad`.

    Parameters without a gradient are skipped (their moments are untouched).

    Returns:
        float: global gradient norm before clipping
    """
    grads = {name: p.grad for name, p in params.items() if p.grad is not None}
    for name, grad in grads.items():
        if not np.all(np.isfinite(grad)):
            raise NonFiniteError(f"non-finite gradient for parameter '{name}' at step {state.step}")
    grads, norm = clip_by_global_norm(grads, state.clip_norm)

    state.step += 1
    bias1 = 1.0 - state.beta1 ** state.step
    bias2 = 1.0 - state.beta2 ** state.step
    for name, grad in grads.items():
        param = params[name]
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None or m.shape != grad.shape:
            m = np.zeros_like(grad)
            v = np.zeros_like(grad)
        m = state.beta1 * m + (1.0 - state.beta1) * grad
        v = state.beta2 * v + (1.0 - state.beta2) * grad * grad
        state.first_moment[name] = m
        state.second_moment[name] = v
        update = (m / bias1) / (np.sqrt(v / bias2) + state.eps)
        param.data = param.data - state.learning_rate * (update + state.weight_decay * param.data)
    logger.debug("optimizer step %d, grad norm %.4g", state.step, norm)
    return norm


def zero_grads(params: Mapping[str, Tensor]) -> None:
    for p in params.values():
        p.zero_grad()
