# -*- coding: utf-8 -*-
# services/nas_engine.py
"""
ENAS search (alternating shared-weight and controller phases), architecture
derivation, and fixed-architecture training for tuned trials.
"""
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from config import (
    CELL_DEFAULTS,
    CONTROLLER_DEFAULTS,
    DERIVE_COUNT,
    HIDDEN_DIMS,
    SEARCH_GRAD_NORM,
    SEARCH_LEARNING_RATE,
    ControllerConfig,
)
from models.cell import CellArchitecture, read_architecture_file, serialize, write_architecture_file
from models.controller import (
    ControllerPolicy,
    RewardBaseline,
    SampleTrace,
    load_controller,
    reinforce_update,
    sample,
    save_controller,
)
from models.optim import OptimizerState, optimizer_step
from models.sentpair import (
    LSTM,
    LayerSpec,
    ModelSpec,
    SentencePairModel,
    make_batch,
    predict,
    predict_and_score,
    write_predictions,
)
from models.tensor import LossKind, NonFiniteError, backward, loss
from utils.checkpoints import checkpoint_exists, load_checkpoint, save_checkpoint
from utils.data_io import DatasetSplits, Example, iterate_minibatches
from utils.embeddings import EmbeddingProvider, LayeredEmbedding
from utils.metrics import MetricReport

logger = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss, gradient or parameter."""


@dataclass(frozen=True)
class TrialSpec:
    """Child-model hyperparameters for one training run."""
    batch_size: int = 32
    learning_rate: float = 1e-3
    loss: str = "mse"
    weight_decay: float = 0.01
    grad_norm: float = 5.0
    hidden_dim: int = 16
    dropout: float = 0.0
    dropout_final: float = 0.0
    variational_dropout: float = 0.0
    seed: int = 0
    architecture: Optional[str] = None

    @classmethod
    def from_params(cls, params: Mapping[str, Any], **overrides) -> "TrialSpec":
        known = {k: v for k, v in params.items() if k in cls.__dataclass_fields__}
        known.update(overrides)
        return cls(**known)

    def loss_kind(self, task: str) -> LossKind:
        if task == "classification":
            return LossKind.CROSS_ENTROPY
        if self.loss not in ("mse", "mae"):
            raise ValueError(f"regression loss must be mse or mae, got '{self.loss}'")
        return LossKind(self.loss)


def apply_search_memory_cap(trial: TrialSpec, dims_family: str) -> TrialSpec:
    """Halve a 64 batch and step down to the next smaller hidden dim."""
    batch = 32 if trial.batch_size >= 64 else trial.batch_size
    smaller = [d for d in sorted(HIDDEN_DIMS[dims_family]) if d < trial.hidden_dim]
    return replace(trial, batch_size=batch, hidden_dim=smaller[-1] if smaller else trial.hidden_dim)


def build_model_spec(
    model_kind: str,
    layers: Sequence[LayerSpec],
    trial: TrialSpec,
    provider: EmbeddingProvider,
    task: str,
    highway: bool = CELL_DEFAULTS.highway,
    compiled: bool = True,
    num_nodes: int = CELL_DEFAULTS.num_nodes,
) -> ModelSpec:
    return ModelSpec(
        kind=model_kind,
        layers=tuple(layers),
        hidden_dims=tuple(trial.hidden_dim for _ in layers),
        input_dim=provider.dim,
        task=task,
        dropout=trial.dropout,
        dropout_final=trial.dropout_final,
        variational_dropout=trial.variational_dropout,
        highway=highway,
        compiled=compiled,
        num_nodes=num_nodes,
        embedding_layers=provider.num_layers if isinstance(provider, LayeredEmbedding) else 0,
    )


def _train_minibatch(
    model: SentencePairModel,
    optimizer: OptimizerState,
    provider: EmbeddingProvider,
    examples: Sequence[Example],
    loss_kind: LossKind,
    rng: np.random.Generator,
    archs: Optional[Mapping[int, CellArchitecture]] = None,
) -> float:
    batch = make_batch(provider, examples, model.spec.task)
    model.zero_grad()
    try:
        value = loss(loss_kind, model(batch, training=True, rng=rng, archs=archs), batch.labels)
        backward(value)
        optimizer_step(optimizer, model.parameters())
    except NonFiniteError as e:
        raise DivergenceError(f"training diverged: {e}") from e
    return value.item()


# ------------------------------------------------------------------ search

@dataclass
class SearchConfig:
    max_epochs: int = 150
    patience: int = 10
    child_learning_rate: float = SEARCH_LEARNING_RATE
    child_grad_norm: float = SEARCH_GRAD_NORM
    controller_steps_per_epoch: int = 5
    samples_per_step: int = 4
    derive_count: int = DERIVE_COUNT
    reward_batch: Optional[int] = None
    reward_workers: int = 1
    num_nodes: int = CELL_DEFAULTS.num_nodes
    controller: ControllerConfig = CONTROLLER_DEFAULTS
    child: TrialSpec = field(default_factory=TrialSpec)
    seed: int = 0

    def __post_init__(self):
        if self.patience < 1:
            raise ValueError(f"patience must be >= 1, got {self.patience}")
        if self.derive_count < 1:
            raise ValueError(f"derive count must be >= 1, got {self.derive_count}")
        if self.max_epochs < 1:
            raise ValueError(f"max epochs must be >= 1, got {self.max_epochs}")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class SearchState:
    model: SentencePairModel
    policy: ControllerPolicy
    baseline: RewardBaseline
    child_optimizer: OptimizerState
    rng: np.random.Generator
    epoch: int = 0
    best_reward: float = -math.inf
    epochs_since_best: int = 0
    reward_history: List[float] = field(default_factory=list)
    history: List[Dict[str, Any]] = field(default_factory=list)

    def cell_layers(self) -> List[int]:
        return [i for i, layer in enumerate(self.model.spec.layers) if layer.is_cell]

    def archs_for(self, arch: CellArchitecture) -> Dict[int, CellArchitecture]:
        # the sampled genotype drives every cell layer at once
        return {i: arch for i in self.cell_layers()}


def init_search_state(config: SearchConfig, model_spec: ModelSpec) -> SearchState:
    rng = np.random.default_rng(config.seed)
    model = SentencePairModel(model_spec, rng)
    policy = ControllerPolicy(rng, config.num_nodes, config.controller)
    return SearchState(
        model=model,
        policy=policy,
        baseline=RewardBaseline(decay=config.controller.baseline_decay),
        child_optimizer=OptimizerState(
            learning_rate=config.child_learning_rate,
            weight_decay=config.child.weight_decay,
            clip_norm=config.child_grad_norm,
        ),
        rng=rng,
    )


ArchSampler = Callable[[SearchState], CellArchitecture]


def _controller_sampler(state: SearchState) -> CellArchitecture:
    return sample(state.policy, state.rng)[0]


def train_shared_epoch(
    state: SearchState,
    train: Sequence[Example],
    provider: EmbeddingProvider,
    batch_size: int,
    loss_kind: LossKind,
    sampler: ArchSampler = _controller_sampler,
) -> Dict[str, float]:
    """
    One pass over the training set; every minibatch runs under a freshly
    sampled genotype and updates the shared child parameters only.
    """
    losses = []
    seen = 0
    for examples in iterate_minibatches(train, batch_size, state.rng):
        arch = sampler(state)
        losses.append(_train_minibatch(state.model, state.child_optimizer, provider, examples,
                                       loss_kind, state.rng, state.archs_for(arch)))
        seen += len(examples)
        logger.debug("shared step: arch %s loss %.5f", serialize(arch), losses[-1])
    return {"train_loss": float(np.mean(losses)) if losses else float("nan"), "examples": seen}


RewardFn = Callable[[CellArchitecture], float]


def dev_reward_fn(state: SearchState, dev: Sequence[Example], provider: EmbeddingProvider,
                  reward_batch: Optional[int] = None) -> RewardFn:
    """Dev-set metric of the shared child model under a given genotype."""
    subset = list(dev)
    if reward_batch is not None and reward_batch < len(subset):
        picks = state.rng.choice(len(subset), size=reward_batch, replace=False)
        subset = [subset[i] for i in sorted(picks)]

    def reward(arch: CellArchitecture) -> float:
        return predict_and_score(state.model, provider, subset, archs=state.archs_for(arch)).primary

    return reward


def controller_phase(
    state: SearchState,
    reward_fn: RewardFn,
    steps: int,
    samples_per_step: int,
    task: str = "regression",
    workers: int = 1,
) -> Dict[str, float]:
    """
    `steps` REINFORCE updates, each over `samples_per_step` genotypes scored by
    `reward_fn` against frozen shared parameters.
    """
    all_rewards: List[float] = []
    for _ in range(steps):
        drawn: List[Tuple[CellArchitecture, SampleTrace]] = [sample(state.policy, state.rng) for _ in range(samples_per_step)]
        archs = [arch for arch, _ in drawn]
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                rewards = list(pool.map(reward_fn, archs))
        else:
            rewards = [reward_fn(a) for a in archs]
        if task == "regression":
            bad = [r for r in rewards if not -1.0 <= r <= 1.0]
            if bad:
                raise ValueError(f"Pearson rewards must lie in [-1, 1], got {bad}")
        reinforce_update(state.policy, [trace for _, trace in drawn], rewards, state.baseline)
        all_rewards.extend(rewards)
    return {"mean_reward": float(np.mean(all_rewards)), "max_reward": float(np.max(all_rewards)),
            "baseline": state.baseline.value}


def derive_architectures(policy: ControllerPolicy, rng: np.random.Generator, k: int,
                         max_attempts: Optional[int] = None) -> List[CellArchitecture]:
    """Sample until `k` distinct genotypes are found or attempts run out."""
    max_attempts = max_attempts or 100 * k
    found: List[CellArchitecture] = []
    for _ in range(max_attempts):
        if len(found) == k:
            break
        arch, _ = sample(policy, rng)
        if arch not in found:
            found.append(arch)
    if len(found) < k:
        logger.warning("only %d unique architectures after %d attempts (wanted %d)", len(found), max_attempts, k)
    return found


# ------------------------------------------------------------- persistence

STATE_FILE = "search_state"
CONTROLLER_FILE = "controller"
METRICS_FILE = "search_metrics.jsonl"
DERIVED_FILE = "derived_architectures.txt"


def save_search_state(run_dir: Path, state: SearchState) -> None:
    arrays = {f"param/{k}": v for k, v in state.model.state_arrays().items()}
    arrays.update({f"optim/{k}": v for k, v in state.child_optimizer.export_arrays().items()})
    meta = {
        "kind": "search_state",
        "epoch": state.epoch,
        "best_reward": state.best_reward,
        "epochs_since_best": state.epochs_since_best,
        "reward_history": state.reward_history,
        "rng_state": state.rng.bit_generator.state,
    }
    save_checkpoint(run_dir / STATE_FILE, arrays, meta)
    save_controller(run_dir / CONTROLLER_FILE, state.policy, state.baseline)


def load_search_state(run_dir: Path, state: SearchState) -> SearchState:
    arrays, meta = load_checkpoint(run_dir / STATE_FILE)
    state.model.load_state_arrays({k[6:]: v for k, v in arrays.items() if k.startswith("param/")})
    state.child_optimizer.import_arrays({k[6:]: v for k, v in arrays.items() if k.startswith("optim/")})
    state.policy, state.baseline = load_controller(run_dir / CONTROLLER_FILE)
    state.rng.bit_generator.state = meta["rng_state"]
    state.epoch = int(meta["epoch"])
    state.best_reward = float(meta["best_reward"])
    state.epochs_since_best = int(meta["epochs_since_best"])
    state.reward_history = list(meta["reward_history"])
    metrics = run_dir / METRICS_FILE
    if metrics.exists():
        state.history = [json.loads(line) for line in metrics.read_text(encoding="utf-8").splitlines() if line.strip()]
        state.history = [h for h in state.history if h["epoch"] <= state.epoch]
    return state


def run_search(
    config: SearchConfig,
    splits: DatasetSplits,
    provider: EmbeddingProvider,
    model_spec: ModelSpec,
    run_dir: Optional[Union[str, Path]] = None,
) -> Tuple[SearchState, List[CellArchitecture]]:
    """
    Alternate shared-weight epochs and controller phases with early stopping
    on the epoch's mean dev reward, then derive `config.derive_count` unique
    genotypes from the final controller.

    With `run_dir`, progress is checkpointed every epoch and a rerun resumes
    from the last completed epoch.
    """
    state = init_search_state(config, model_spec)
    task = splits.task
    loss_kind = config.child.loss_kind(task)
    run_dir = Path(run_dir) if run_dir else None

    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        derived_path = run_dir / DERIVED_FILE
        if derived_path.exists() and checkpoint_exists(run_dir / STATE_FILE):
            load_search_state(run_dir, state)
            logger.info("search already complete in %s", run_dir)
            return state, read_architecture_file(derived_path, config.num_nodes)
        if checkpoint_exists(run_dir / STATE_FILE):
            load_search_state(run_dir, state)
            logger.info("resuming search at epoch %d", state.epoch + 1)
        else:
            (run_dir / METRICS_FILE).write_text("", encoding="utf-8")

    while state.epoch < config.max_epochs and state.epochs_since_best < config.patience:
        state.epoch += 1
        shared = train_shared_epoch(state, splits.train.examples, provider, config.child.batch_size, loss_kind)
        reward_fn = dev_reward_fn(state, splits.dev.examples, provider, config.reward_batch)
        phase = controller_phase(state, reward_fn, config.controller_steps_per_epoch,
                                 config.samples_per_step, task, config.reward_workers)

        reward = phase["mean_reward"]
        state.reward_history.append(reward)
        if reward > state.best_reward:
            state.best_reward, state.epochs_since_best = reward, 0
        else:
            state.epochs_since_best += 1
        record = {"epoch": state.epoch, **shared, **phase, "best_reward": state.best_reward}
        state.history.append(record)
        logger.info("epoch %d: train loss %.4f, mean reward %.4f, baseline %.4f",
                    state.epoch, shared["train_loss"], reward, state.baseline.value)
        if run_dir is not None:
            with open(run_dir / METRICS_FILE, "a", encoding="utf-8") as f:
                f.write(json.dumps(record, sort_keys=True) + "\n")
            save_search_state(run_dir, state)

    if state.epochs_since_best >= config.patience:
        logger.info("early stop after epoch %d (no improvement for %d epochs)", state.epoch, config.patience)

    derived = derive_architectures(state.policy, state.rng, config.derive_count)
    if run_dir is not None:
        write_architecture_file(run_dir / DERIVED_FILE, derived,
                                header=f"{len(derived)} architectures derived after {state.epoch} epochs")
    return state, derived


# ----------------------------------------------------------- fixed training

@dataclass
class FixedResult:
    model: SentencePairModel
    dev: MetricReport
    best_epoch: int
    epochs_run: int
    test: Optional[MetricReport] = None
    train: Optional[MetricReport] = None
    history: List[Dict[str, float]] = field(default_factory=list)


def train_fixed(
    model_kind: str,
    layers: Sequence[LayerSpec],
    trial: TrialSpec,
    splits: DatasetSplits,
    provider: EmbeddingProvider,
    max_epochs: int = 75,
    patience: int = 10,
    evaluate_test: bool = False,
    score_train: bool = False,
    target: Optional[float] = None,
    highway: bool = CELL_DEFAULTS.highway,
    compiled: bool = True,
) -> FixedResult:
    """
    Train a model from scratch with early stopping on the dev metric and
    restore the best-dev epoch's parameters.

    `target` stops as soon as the dev metric reaches it.

    Raises:
        DivergenceError: a non-finite loss or gradient appeared
    """
    task = splits.task
    loss_kind = trial.loss_kind(task)
    spec = build_model_spec(model_kind, layers, trial, provider, task, highway, compiled)
    rng = np.random.default_rng(trial.seed)
    model = SentencePairModel(spec, rng)
    optimizer = OptimizerState(learning_rate=trial.learning_rate, weight_decay=trial.weight_decay,
                               clip_norm=trial.grad_norm)

    best_score, best_epoch, best_arrays = -math.inf, 0, model.state_arrays()
    best_report: Optional[MetricReport] = None
    history: List[Dict[str, float]] = []
    epoch = 0
    for epoch in range(1, max_epochs + 1):
        losses = [
            _train_minibatch(model, optimizer, provider, batch, loss_kind, rng)
            for batch in iterate_minibatches(splits.train.examples, trial.batch_size, rng)
        ]
        report = predict_and_score(model, provider, splits.dev.examples)
        history.append({"epoch": epoch, "train_loss": float(np.mean(losses)), "dev": report.primary})
        logger.debug("epoch %d: loss %.5f dev %.4f", epoch, history[-1]["train_loss"], report.primary)
        if report.primary > best_score:
            best_score, best_epoch, best_arrays, best_report = report.primary, epoch, model.state_arrays(), report
        elif epoch - best_epoch >= patience:
            break
        if target is not None and report.primary >= target:
            break

    model.load_state_arrays(best_arrays)
    result = FixedResult(model=model, dev=best_report, best_epoch=best_epoch, epochs_run=epoch, history=history)
    if evaluate_test:
        result.test = predict_and_score(model, provider, splits.test.examples)
    if score_train:
        result.train = predict_and_score(model, provider, splits.train.examples)
    return result


def layers_for_plan(plan: Sequence[str], arch: Optional[CellArchitecture]) -> List[LayerSpec]:
    """Layer specs for an `E / L` style plan with one genotype for every cell layer."""
    layers = []
    for kind in plan:
        if kind == LSTM:
            layers.append(LayerSpec(LSTM))
        else:
            if arch is None:
                raise ValueError(f"plan {' / '.join(plan)} needs an architecture")
            layers.append(LayerSpec(kind, arch))
    return layers


def dump_predictions(result: FixedResult, splits: DatasetSplits, provider: EmbeddingProvider, out_dir: Path) -> None:
    write_predictions(out_dir / "predictions_dev.tsv", splits.dev.examples,
                      predict(result.model, provider, splits.dev.examples))
    write_predictions(out_dir / "predictions_test.tsv", splits.test.examples,
                      predict(result.model, provider, splits.test.examples))
