# -*- coding: utf-8 -*-
# models/sentpair.py
"""
Sentence-pair models: BiRNN-max (BLM) and ESIM, each recurrent layer being an
LSTM, an ENAS cell or a random cell.
"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from config import CELL_DEFAULTS
from models.cell import ArchitectureError, CellArchitecture, EnasCell, SharedCellParams, parse, serialize
from models.layers import Linear, Module, zeros_init
from models.recurrent import LstmCell, LstmCellParams, birnn
from models.tensor import (
    DropoutKind,
    ReduceOp,
    Tensor,
    absolute,
    concat,
    dropout,
    matmul,
    mul,
    no_grad,
    reduce,
    relu,
    sub,
    tanh,
    transpose,
)
from utils.checkpoints import load_checkpoint, save_checkpoint
from utils.data_io import Example
from utils.embeddings import EmbeddingProvider, embed_batch, mix_layers
from utils.metrics import MetricReport, score

logger = logging.getLogger(__name__)

LSTM, ENAS, RANDOM = "L", "E", "RND"
LAYER_COUNT = {"BLM": 1, "ESIM": 2}


@dataclass(frozen=True)
class LayerSpec:
    """One recurrent layer: L, E or RND. E / RND layers may leave `arch` unset
    while searching, in which case every forward call supplies one."""
    kind: str = LSTM
    arch: Optional[CellArchitecture] = None

    def __post_init__(self):
        if self.kind not in (LSTM, ENAS, RANDOM):
            raise ArchitectureError(f"unknown layer kind '{self.kind}'")
        if self.kind == LSTM and self.arch is not None:
            raise ArchitectureError("LSTM layers take no architecture")

    @property
    def is_cell(self) -> bool:
        return self.kind != LSTM


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    layers: Tuple[LayerSpec, ...]
    hidden_dims: Tuple[int, ...]
    input_dim: int
    task: str
    dropout: float = 0.0
    dropout_final: float = 0.0
    variational_dropout: float = 0.0
    highway: bool = CELL_DEFAULTS.highway
    compiled: bool = True
    ff_ratio: float = 0.5
    num_nodes: int = CELL_DEFAULTS.num_nodes
    clamp_range: Optional[Tuple[float, float]] = None
    embedding_layers: int = 0

    def __post_init__(self):
        if self.kind not in LAYER_COUNT:
            raise ValueError(f"unknown model kind '{self.kind}'")
        if len(self.layers) != LAYER_COUNT[self.kind]:
            raise ValueError(f"{self.kind} has exactly {LAYER_COUNT[self.kind]} recurrent layer(s), got {len(self.layers)}")
        if len(self.hidden_dims) != len(self.layers):
            raise ValueError(f"{len(self.hidden_dims)} hidden dims for {len(self.layers)} layers")
        if self.task not in ("classification", "regression"):
            raise ValueError(f"unknown task '{self.task}'")

    @property
    def plan(self) -> str:
        return " / ".join(layer.kind for layer in self.layers)

    @property
    def output_size(self) -> int:
        return 2 if self.task == "classification" else 1

    def to_dict(self) -> Dict[str, object]:
        return {
            "kind": self.kind,
            "layers": [{"kind": l.kind, "arch": serialize(l.arch) if l.arch else None} for l in self.layers],
            "hidden_dims": list(self.hidden_dims),
            "input_dim": self.input_dim,
            "task": self.task,
            "dropout": self.dropout,
            "dropout_final": self.dropout_final,
            "variational_dropout": self.variational_dropout,
            "highway": self.highway,
            "compiled": self.compiled,
            "ff_ratio": self.ff_ratio,
            "num_nodes": self.num_nodes,
            "clamp_range": list(self.clamp_range) if self.clamp_range else None,
            "embedding_layers": self.embedding_layers,
        }

    @classmethod
    def from_dict(cls, raw: Mapping[str, object]) -> "ModelSpec":
        data = dict(raw)
        num_nodes = int(data.get("num_nodes", CELL_DEFAULTS.num_nodes))
        data["layers"] = tuple(
            LayerSpec(l["kind"], parse(l["arch"], num_nodes) if l.get("arch") else None) for l in data["layers"]
        )
        data["hidden_dims"] = tuple(data["hidden_dims"])
        if data.get("clamp_range"):
            data["clamp_range"] = tuple(data["clamp_range"])
        return cls(**data)


def layer_plan_kinds(plan: str) -> Tuple[str, ...]:
    return tuple(part.strip().upper() for part in plan.split("/"))


@dataclass
class EmbeddedBatch:
    a: Tensor
    mask_a: np.ndarray
    b: Tensor
    mask_b: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return self.mask_a.shape[0]


def make_batch(provider: EmbeddingProvider, examples: Sequence[Example], task: str) -> EmbeddedBatch:
    ids = [ex.pair_id for ex in examples]
    a, mask_a = embed_batch(provider, [ex.a for ex in examples], ids)
    b, mask_b = embed_batch(provider, [ex.b for ex in examples], ids, offsets=[len(ex.a) for ex in examples])
    labels = np.array([ex.label for ex in examples], dtype=np.float64)
    if task == "classification":
        labels = labels.astype(np.int64)
    return EmbeddedBatch(a, mask_a, b, mask_b, labels)


# ------------------------------------------------------------ building blocks

def joint_representation(s1: Tensor, s2: Tensor) -> Tensor:
    """[s1; s2; |s1 - s2|; s1 * s2] on the last axis."""
    return concat([s1, s2, absolute(sub(s1, s2)), mul(s1, s2)], axis=-1)


def enhance(x: Tensor, x_tilde: Tensor) -> Tensor:
    return concat([x, x_tilde, sub(x, x_tilde), mul(x, x_tilde)], axis=-1)


def attention_weights(a_states: Tensor, b_states: Tensor, mask_a: np.ndarray, mask_b: np.ndarray) -> Tuple[Tensor, Tensor]:
    """
    Soft alignments from dot-product scores e_ij = <a_i, b_j>.

    Returns:
        tuple: ([batch x Ta x Tb] normalized over b positions,
                [batch x Ta x Tb] normalized over a positions)
    """
    scores = matmul(a_states, transpose(b_states))
    over_b = reduce(ReduceOp.SOFTMAX, scores, axis=2, mask=np.asarray(mask_b)[:, None, :])
    over_a = reduce(ReduceOp.SOFTMAX, scores, axis=1, mask=np.asarray(mask_a)[:, :, None])
    return over_b, over_a


def cross_attention(a_states: Tensor, b_states: Tensor, mask_a: np.ndarray, mask_b: np.ndarray) -> Tuple[Tensor, Tensor]:
    over_b, over_a = attention_weights(a_states, b_states, mask_a, mask_b)
    a_tilde = matmul(over_b, b_states)
    b_tilde = matmul(transpose(over_a), a_states)
    return a_tilde, b_tilde


def masked_max(states: Tensor, mask: np.ndarray) -> Tensor:
    return reduce(ReduceOp.MAX, states, axis=1, mask=np.asarray(mask)[:, :, None])


def masked_mean(states: Tensor, mask: np.ndarray) -> Tensor:
    return reduce(ReduceOp.MEAN, states, axis=1, mask=np.asarray(mask)[:, :, None])


# --------------------------------------------------------------------- model

class SentencePairModel(Module):
    """
    BLM:  BiRNN -> masked max-pool -> joint -> tanh FF -> projection
    ESIM: BiRNN -> cross attention + enhancement -> ReLU FF -> BiRNN
          -> masked mean and max pools -> tanh FF -> projection
    """

    def __init__(self, spec: ModelSpec, rng: np.random.Generator):
        self.spec = spec
        self.mixing_logits = zeros_init((spec.embedding_layers,)) if spec.embedding_layers else None

        input_dims = [spec.input_dim]
        if spec.kind == "ESIM":
            self.enhance_proj = Linear(8 * spec.hidden_dims[0], spec.hidden_dims[1], rng)
            input_dims.append(spec.hidden_dims[1])
            joint = 8 * spec.hidden_dims[1]
        else:
            joint = 8 * spec.hidden_dims[0]

        self.rnn: List[Tuple[Module, Module]] = []
        for layer, in_dim, hidden in zip(spec.layers, input_dims, spec.hidden_dims):
            self.rnn.append(tuple(self._layer_params(layer, in_dim, hidden, rng) for _ in range(2)))

        ff_width = max(1, int(round(joint * spec.ff_ratio)))
        self.ff = Linear(joint, ff_width, rng)
        self.out = Linear(ff_width, spec.output_size, rng)

    def _layer_params(self, layer: LayerSpec, in_dim: int, hidden: int, rng: np.random.Generator) -> Module:
        if layer.kind == LSTM:
            return LstmCellParams(in_dim, hidden, rng)
        num_nodes = layer.arch.num_nodes if layer.arch is not None else self.spec.num_nodes
        return SharedCellParams(in_dim, hidden, rng, num_nodes=num_nodes, highway=self.spec.highway)

    def shared_cell_params(self) -> Dict[str, Tensor]:
        """Parameters of ENAS / random cell layers only."""
        names = {}
        for i, (layer, pair) in enumerate(zip(self.spec.layers, self.rnn)):
            if layer.is_cell:
                for d, params in enumerate(pair):
                    names.update({f"rnn.{i}.{d}.{k}": v for k, v in params.parameters().items()})
        return names

    def _cells(self, index: int, arch: Optional[CellArchitecture]):
        layer = self.spec.layers[index]
        fwd, bwd = self.rnn[index]
        if layer.kind == LSTM:
            return LstmCell(fwd), LstmCell(bwd)
        arch = arch or layer.arch
        if arch is None:
            raise ArchitectureError(f"layer {index + 1} is a cell layer without an architecture")
        return (EnasCell(arch, fwd, self.spec.highway, self.spec.compiled),
                EnasCell(arch, bwd, self.spec.highway, self.spec.compiled))

    def _embed(self, stacked: Tensor) -> Tensor:
        if stacked.ndim == 4:
            if self.mixing_logits is None:
                raise ValueError("layered embeddings given to a model built without embedding_layers")
            return mix_layers(stacked, self.mixing_logits)
        return stacked

    def _encode(self, index: int, x: Tensor, mask: np.ndarray, arch, training: bool, rng) -> Tensor:
        x = dropout(DropoutKind.VARIATIONAL, x, self.spec.variational_dropout, training, rng)
        fwd, bwd = self._cells(index, arch)
        return birnn(fwd, bwd, x, mask)

    def forward(
        self,
        batch: EmbeddedBatch,
        training: bool = False,
        rng: Optional[np.random.Generator] = None,
        archs: Optional[Mapping[int, CellArchitecture]] = None,
    ) -> Tensor:
        """
        Predictions for a batch: [batch x 2] logits or [batch x 1] values.

        `archs` maps layer index to a genotype overriding the ModelSpec one, used
        while searching.
        """
        archs = archs or {}
        spec = self.spec
        a, b = self._embed(batch.a), self._embed(batch.b)

        a = self._encode(0, a, batch.mask_a, archs.get(0), training, rng)
        b = self._encode(0, b, batch.mask_b, archs.get(0), training, rng)

        if spec.kind == "BLM":
            a = dropout(DropoutKind.STANDARD, a, spec.dropout, training, rng)
            b = dropout(DropoutKind.STANDARD, b, spec.dropout, training, rng)
            joint = joint_representation(masked_max(a, batch.mask_a), masked_max(b, batch.mask_b))
        else:
            a_tilde, b_tilde = cross_attention(a, b, batch.mask_a, batch.mask_b)
            m_a = dropout(DropoutKind.STANDARD, enhance(a, a_tilde), spec.dropout, training, rng)
            m_b = dropout(DropoutKind.STANDARD, enhance(b, b_tilde), spec.dropout, training, rng)
            a = self._encode(1, relu(self.enhance_proj(m_a)), batch.mask_a, archs.get(1), training, rng)
            b = self._encode(1, relu(self.enhance_proj(m_b)), batch.mask_b, archs.get(1), training, rng)
            joint = concat([masked_mean(a, batch.mask_a), masked_max(a, batch.mask_a),
                            masked_mean(b, batch.mask_b), masked_max(b, batch.mask_b)], axis=-1)

        hidden = tanh(self.ff(joint))
        hidden = dropout(DropoutKind.STANDARD, hidden, spec.dropout_final, training, rng)
        return self.out(hidden)

    __call__ = forward


# -------------------------------------------------------------- evaluation

def predictions_from_outputs(outputs: np.ndarray, spec: ModelSpec) -> np.ndarray:
    if spec.task == "classification":
        return outputs.argmax(axis=1).astype(np.float64)
    values = outputs.reshape(-1)
    if spec.clamp_range is not None:
        values = np.clip(values, *spec.clamp_range)
    return values


def predict(
    model: SentencePairModel,
    provider: EmbeddingProvider,
    examples: Sequence[Example],
    batch_size: int = 64,
    archs: Optional[Mapping[int, CellArchitecture]] = None,
) -> np.ndarray:
    out = []
    with no_grad():
        for start in range(0, len(examples), batch_size):
            batch = make_batch(provider, examples[start:start + batch_size], model.spec.task)
            out.append(predictions_from_outputs(model(batch, archs=archs).data, model.spec))
    return np.concatenate(out) if out else np.zeros(0)


def predict_and_score(
    model: SentencePairModel,
    provider: EmbeddingProvider,
    examples: Sequence[Example],
    batch_size: int = 64,
    archs: Optional[Mapping[int, CellArchitecture]] = None,
) -> MetricReport:
    """Accuracy for classification, Pearson for regression."""
    predicted = predict(model, provider, examples, batch_size, archs)
    gold = np.array([ex.label for ex in examples], dtype=np.float64)
    return score(model.spec.task, predicted, gold)


def write_predictions(path: Union[str, Path], examples: Sequence[Example], predicted: np.ndarray) -> Path:
    """One TSV line per example: pair id, gold, predicted."""
    frame = pd.DataFrame({
        "pair_id": [ex.pair_id for ex in examples],
        "gold": [ex.label for ex in examples],
        "predicted": np.asarray(predicted, dtype=np.float64),
    })
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, sep="\t", index=False)
    return path


def save_model(path: Union[str, Path], model: SentencePairModel, extra: Optional[Dict[str, object]] = None) -> Path:
    meta = {"kind": "sentpair", "spec": model.spec.to_dict()}
    meta.update(extra or {})
    return save_checkpoint(path, model.state_arrays(), meta)


def load_model(path: Union[str, Path]) -> Tuple[SentencePairModel, Dict[str, object]]:
    arrays, meta = load_checkpoint(path)
    if meta.get("kind") != "sentpair":
        raise ValueError(f"{path} is not a sentence-pair model checkpoint")
    model = SentencePairModel(ModelSpec.from_dict(meta["spec"]), np.random.default_rng(0))
    model.load_state_arrays(arrays)
    return model, meta
