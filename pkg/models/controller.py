# -*- coding: utf-8 -*-
# models/controller.py
"""
Autoregressive architecture policy trained with REINFORCE.

The policy emits 1 + 2 * (num_nodes - 1) decisions: the node-0 activation,
then an (input index, activation) pair per later node. Each position has its
own output head and its own embedding table for feeding the chosen token to
the next step. Heads share one width, max(4, num_nodes - 1); tokens that are
not valid at a position are masked out of the softmax.
"""
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from config import CELL_DEFAULTS, CONTROLLER_DEFAULTS, ControllerConfig
from models.cell import ACTIVATIONS, CellArchitecture
from models.layers import Linear, Module, uniform_init
from models.optim import OptimizerState, optimizer_step
from models.recurrent import LstmCellParams, lstm_step
from models.tensor import (
    ReduceOp,
    Tensor,
    add,
    backward,
    constant,
    mul,
    no_grad,
    reduce,
    reshape,
    scale,
    select,
    sum_all,
    tanh,
)
from utils.checkpoints import load_checkpoint, save_checkpoint

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SampleTrace:
    decisions: Tuple[int, ...]
    log_probs: Tuple[float, ...]
    entropy: float

    @property
    def log_prob(self) -> float:
        return float(sum(self.log_probs))


@dataclass
class RewardBaseline:
    """Exponential moving average of rewards."""
    value: float = 0.0
    decay: float = CONTROLLER_DEFAULTS.baseline_decay
    updates: int = 0

    def __post_init__(self):
        if not 0.0 < self.decay < 1.0:
            raise ValueError(f"baseline decay must be in (0, 1), got {self.decay}")

    def update(self, mean_reward: float) -> float:
        self.value = self.decay * self.value + (1.0 - self.decay) * float(mean_reward)
        self.updates += 1
        return self.value


class ControllerPolicy(Module):
    def __init__(
        self,
        rng: np.random.Generator,
        num_nodes: int = CELL_DEFAULTS.num_nodes,
        config: ControllerConfig = CONTROLLER_DEFAULTS,
    ):
        self.config = config
        self.num_nodes = num_nodes
        self.width = max(len(ACTIVATIONS), num_nodes - 1)
        hidden = config.hidden_size
        r = config.init_range

        self.lstm = LstmCellParams(hidden, hidden, rng)
        self.start = uniform_init(rng, (1, hidden), r)
        self.embeddings = [uniform_init(rng, (self.width, hidden), r) for _ in range(self.num_decisions)]
        self.heads = [Linear(hidden, self.width, rng) for _ in range(self.num_decisions)]
        self._optimizer = OptimizerState(learning_rate=config.learning_rate, clip_norm=config.grad_clip)

    @property
    def num_decisions(self) -> int:
        return 1 + 2 * (self.num_nodes - 1)

    @property
    def optimizer(self) -> OptimizerState:
        return self._optimizer

    def valid_count(self, position: int) -> int:
        """Number of legal tokens at a decision position."""
        if position == 0 or position % 2 == 0:
            return len(ACTIVATIONS)
        return (position + 1) // 2

    def valid_mask(self, position: int) -> np.ndarray:
        mask = np.zeros((1, self.width))
        mask[0, : self.valid_count(position)] = 1.0
        return mask

    def _logits(self, position: int, h: Tensor) -> Tensor:
        logits = self.heads[position](h)
        if self.config.temperature:
            logits = scale(logits, 1.0 / self.config.temperature)
        if self.config.tanh_constant:
            logits = scale(tanh(logits), self.config.tanh_constant)
        return logits

    def _advance(self, position: int, token: Optional[int], h: Tensor, c: Tensor) -> Tuple[Tensor, Tensor]:
        if token is None:
            x = self.start
        else:
            x = reshape(select(self.embeddings[position - 1], 0, token), (1, self.config.hidden_size))
        return lstm_step(self.lstm, x, h, c)

    def _initial_state(self) -> Tuple[Tensor, Tensor]:
        zeros = np.zeros((1, self.config.hidden_size))
        return constant(zeros), constant(zeros)

    def distributions(self, decisions: Sequence[int]) -> List[Tuple[Tensor, Tensor]]:
        """
        (log-probabilities, probabilities) rows along a fixed decision sequence, one pair per
        position, each of shape [1 x width].
        """
        h, c = self._initial_state()
        rows = []
        previous: Optional[int] = None
        for position in range(self.num_decisions):
            h, c = self._advance(position, previous, h, c)
            logits = self._logits(position, h)
            mask = self.valid_mask(position)
            rows.append((reduce(ReduceOp.LOG_SOFTMAX, logits, axis=-1, mask=mask),
                         reduce(ReduceOp.SOFTMAX, logits, axis=-1, mask=mask)))
            if position < len(decisions):
                previous = int(decisions[position])
        return rows


def _scalar_at(row: Tensor, index: int) -> Tensor:
    return select(select(row, 0, 0), 0, index)


def _entropy(log_probs: Tensor, probs: Tensor) -> Tensor:
    return scale(sum_all(mul(probs, log_probs)), -1.0)


def sample(policy: ControllerPolicy, rng: np.random.Generator) -> Tuple[CellArchitecture, SampleTrace]:
    """Draw one genotype token by token under the current policy."""
    decisions: List[int] = []
    log_probs: List[float] = []
    entropy = 0.0
    with no_grad():
        h, c = policy._initial_state()
        previous: Optional[int] = None
        for position in range(policy.num_decisions):
            h, c = policy._advance(position, previous, h, c)
            logits = policy._logits(position, h)
            mask = policy.valid_mask(position)
            log_row = reduce(ReduceOp.LOG_SOFTMAX, logits, axis=-1, mask=mask).data[0]
            probs = reduce(ReduceOp.SOFTMAX, logits, axis=-1, mask=mask).data[0]
            token = int(rng.choice(policy.width, p=probs))
            decisions.append(token)
            log_probs.append(float(log_row[token]))
            entropy -= float(np.sum(probs * log_row))
            previous = token
    arch = CellArchitecture.from_decisions(decisions)
    return arch, SampleTrace(tuple(decisions), tuple(log_probs), entropy)


def decision_log_prob(policy: ControllerPolicy, decisions: Sequence[int]) -> float:
    """Log-probability of a raw decision sequence; -inf if any token is illegal."""
    if len(decisions) != policy.num_decisions:
        raise ValueError(f"expected {policy.num_decisions} decisions, got {len(decisions)}")
    for position, token in enumerate(decisions):
        if not 0 <= int(token) < policy.valid_count(position):
            return float("-inf")
    with no_grad():
        rows = policy.distributions(decisions)
    return float(sum(rows[k][0].data[0, int(t)] for k, t in enumerate(decisions)))


def log_prob(policy: ControllerPolicy, arch: CellArchitecture) -> float:
    return decision_log_prob(policy, arch.decisions())


def _log_prob_and_entropy(policy: ControllerPolicy, decisions: Sequence[int]) -> Tuple[Tensor, Tensor]:
    rows = policy.distributions(decisions)
    total_lp = _scalar_at(rows[0][0], int(decisions[0]))
    total_h = _entropy(*rows[0])
    for position in range(1, len(rows)):
        total_lp = add(total_lp, _scalar_at(rows[position][0], int(decisions[position])))
        total_h = add(total_h, _entropy(*rows[position]))
    return total_lp, total_h


def reinforce_update(
    policy: ControllerPolicy,
    traces: Sequence[SampleTrace],
    rewards: Sequence[float],
    baseline: RewardBaseline,
    entropy_weight: Optional[float] = None,
) -> Dict[str, float]:
    """
    One policy-gradient step on
    -mean[(R - b) * log pi(decisions)] - entropy_weight * mean entropy,
    where b is the baseline before this update. The baseline then moves
    toward the batch mean reward.
    """
    if not traces:
        raise ValueError("reinforce_update needs at least one trace")
    if len(traces) != len(rewards):
        raise ValueError(f"{len(traces)} traces but {len(rewards)} rewards")
    weight = policy.config.entropy_weight if entropy_weight is None else entropy_weight
    b = baseline.value
    n = len(traces)

    policy.zero_grad()
    loss: Optional[Tensor] = None
    for trace, reward in zip(traces, rewards):
        lp, ent = _log_prob_and_entropy(policy, trace.decisions)
        term = add(scale(lp, -(float(reward) - b) / n), scale(ent, -weight / n))
        loss = term if loss is None else add(loss, term)
    backward(loss)
    norm = optimizer_step(policy.optimizer, policy.parameters())

    mean_reward = float(np.mean(rewards))
    baseline.update(mean_reward)
    logger.debug("controller step %d: loss %.5f, grad norm %.4g, baseline %.4f",
                 policy.optimizer.step, loss.item(), norm, baseline.value)
    return {"loss": loss.item(), "grad_norm": norm, "baseline": baseline.value, "mean_reward": mean_reward}


def save_controller(path: Union[str, Path], policy: ControllerPolicy, baseline: RewardBaseline) -> Path:
    arrays = {f"param/{k}": v for k, v in policy.state_arrays().items()}
    arrays.update({f"optim/{k}": v for k, v in policy.optimizer.export_arrays().items()})
    meta = {
        "kind": "controller",
        "num_nodes": policy.num_nodes,
        "config": asdict(policy.config),
        "baseline": {"value": baseline.value, "decay": baseline.decay, "updates": baseline.updates},
    }
    return save_checkpoint(path, arrays, meta)


def load_controller(
    path: Union[str, Path],
    rng: Optional[np.random.Generator] = None,
) -> Tuple[ControllerPolicy, RewardBaseline]:
    arrays, meta = load_checkpoint(path)
    if meta.get("kind") != "controller":
        raise ValueError(f"{path} is not a controller checkpoint")
    config = ControllerConfig(**meta["config"])
    policy = ControllerPolicy(rng or np.random.default_rng(0), meta["num_nodes"], config)
    policy.load_state_arrays({k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")})
    policy.optimizer.import_arrays({k[len("optim/"):]: v for k, v in arrays.items() if k.startswith("optim/")})
    saved = meta["baseline"]
    baseline = RewardBaseline(value=saved["value"], decay=saved["decay"], updates=saved["updates"])
    return policy, baseline
