# utils/gradcheck.py
"""Central finite-difference checks against the autodiff gradients."""
import logging
from dataclasses import dataclass
from typing import Callable, Dict, Mapping, Optional

import numpy as np

from models.tensor import Tensor, backward, no_grad

logger = logging.getLogger(__name__)

STEP = 1e-5
RTOL = 1e-4


@dataclass
class GradCheckResult:
    worst_name: str
    worst_error: float
    checked: int

    @property
    def ok(self) -> bool:
        return self.worst_error < RTOL


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / scale)) if analytic.size else 0.0


def numeric_grad(fn: Callable[[], Tensor], param: Tensor, step: float = STEP,
                 max_entries: Optional[int] = None, rng: Optional[np.random.Generator] = None) -> Dict[int, float]:
    """d fn / d param for every entry (or a random subset of them)."""
    size = param.data.size
    indices = np.arange(size)
    if max_entries is not None and size > max_entries:
        indices = (rng or np.random.default_rng(0)).choice(size, size=max_entries, replace=False)
    grads = {}
    with no_grad():
        for i in indices:
            where = np.unravel_index(int(i), param.shape)
            original = param.data[where]
            param.data[where] = original + step
            plus = fn().item()
            param.data[where] = original - step
            minus = fn().item()
            param.data[where] = original
            grads[int(i)] = (plus - minus) / (2.0 * step)
    return grads


def check_gradients(
    fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    step: float = STEP,
    max_entries: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> GradCheckResult:
    """
    Compare backward() against central differences for every named parameter.

    `fn` must rebuild the scalar loss from scratch on each call and be
    deterministic (dropout off or fixed masks).
    """
    for p in params.values():
        p.zero_grad()
    backward(fn())
    worst_name, worst = "", 0.0
    checked = 0
    for name, p in params.items():
        analytic = np.zeros(p.shape) if p.grad is None else p.grad
        numeric = numeric_grad(fn, p, step, max_entries, rng)
        idx = np.fromiter(numeric.keys(), dtype=np.int64)
        error = relative_error(analytic.reshape(-1)[idx], np.fromiter(numeric.values(), dtype=np.float64))
        checked += idx.size
        if error > worst:
            worst_name, worst = name, error
    logger.debug("gradcheck over %d entries: worst %.3g at %s", checked, worst, worst_name)
    return GradCheckResult(worst_name, worst, checked)
