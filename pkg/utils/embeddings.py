# utils/embeddings.py
"""
Frozen embedding providers.

toy-hash   deterministic pseudo-vectors derived from a token digest
static     one vector per token from a text file (`token v1 ... vD`)
layered    L vectors per key (`key layer v1 ... vD`), combined by softmax-normalized
           mixing logits that belong to the model reading them
"""
import csv
import hashlib
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from config import EmbeddingBlock
from models.tensor import ReduceOp, Tensor, constant, reduce, weighted_layer_sum

logger = logging.getLogger(__name__)


class EmbeddingProvider:
    kind = "base"
    key = "token"

    def __init__(self, dim: int):
        self.dim = dim

    def vectors(self, keys: Sequence[str]) -> np.ndarray:
        """[time x dim] (or [time x layers x dim] for layered providers)."""
        raise NotImplementedError

    def zeros(self) -> np.ndarray:
        return np.zeros(self.dim)


class ToyHashEmbedding(EmbeddingProvider):
    kind = "toy-hash"

    def __init__(self, dim: int, seed: int = 0):
        super().__init__(dim)
        self.seed = seed
        self._cache: Dict[str, np.ndarray] = {}

    def vector(self, token: str) -> np.ndarray:
        if token not in self._cache:
            digest = hashlib.blake2b(f"{self.seed}:{token}".encode("utf-8"), digest_size=8).digest()
            rng = np.random.default_rng(int.from_bytes(digest, "little"))
            self._cache[token] = rng.normal(0.0, 1.0 / np.sqrt(self.dim), size=self.dim)
        return self._cache[token]

    def vectors(self, keys: Sequence[str]) -> np.ndarray:
        return np.stack([self.vector(k) for k in keys]) if keys else np.zeros((0, self.dim))


class StaticEmbedding(EmbeddingProvider):
    """Lookup table; unknown tokens map to the zero vector."""
    kind = "static"

    def __init__(self, table: Dict[str, np.ndarray], dim: int):
        super().__init__(dim)
        self._table = table

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "StaticEmbedding":
        frame = pd.read_csv(path, sep=" ", header=None, quoting=csv.QUOTE_NONE,
                            keep_default_na=False, na_filter=False, index_col=0)
        values = frame.to_numpy(dtype=np.float64)
        table = {str(token): values[i] for i, token in enumerate(frame.index)}
        logger.info("loaded %d static vectors of dim %d from %s", len(table), values.shape[1], path)
        return cls(table, values.shape[1])

    def vectors(self, keys: Sequence[str]) -> np.ndarray:
        zero = self.zeros()
        return np.stack([self._table.get(k, zero) for k in keys]) if keys else np.zeros((0, self.dim))


class LayeredEmbedding(EmbeddingProvider):
    kind = "layered"

    def __init__(self, table: Dict[str, np.ndarray], num_layers: int, dim: int, key: str = "token"):
        super().__init__(dim)
        self._table = table
        self.num_layers = num_layers
        self.key = key

    @classmethod
    def from_file(cls, path: Union[str, Path], key: str = "token") -> "LayeredEmbedding":
        frame = pd.read_csv(path, sep=" ", header=None, quoting=csv.QUOTE_NONE,
                            keep_default_na=False, na_filter=False)
        keys = frame.iloc[:, 0].astype(str).to_numpy()
        layers = frame.iloc[:, 1].astype(int).to_numpy()
        values = frame.iloc[:, 2:].to_numpy(dtype=np.float64)
        num_layers = int(layers.max()) + 1
        dim = values.shape[1]
        table: Dict[str, np.ndarray] = {}
        for k, layer, row in zip(keys, layers, values):
            table.setdefault(k, np.zeros((num_layers, dim)))[layer] = row
        logger.info("loaded %d keys x %d layers (dim %d) from %s", len(table), num_layers, dim, path)
        return cls(table, num_layers, dim, key)

    def vectors(self, keys: Sequence[str]) -> np.ndarray:
        zero = np.zeros((self.num_layers, self.dim))
        return np.stack([self._table.get(k, zero) for k in keys]) if keys else np.zeros((0, self.num_layers, self.dim))


def lookup_keys(provider: EmbeddingProvider, tokens: Sequence[str], pair_id: str = "", offset: int = 0) -> List[str]:
    """Tokens themselves, or `pair_id:position` records for pair-keyed files."""
    if provider.key == "pair_position":
        return [f"{pair_id}:{offset + i}" for i in range(len(tokens))]
    return list(tokens)


def mix_layers(stacked: Tensor, mixing_logits: Optional[Tensor] = None) -> Tensor:
    """
    Softmax-weighted sum over the layer axis (second to last) of a layered
    stack. Without logits every layer gets the same weight.
    """
    if mixing_logits is None:
        mixing_logits = constant(np.zeros(stacked.shape[-2]))
    return weighted_layer_sum(stacked, reduce(ReduceOp.SOFTMAX, mixing_logits, axis=0))


def embed(provider: EmbeddingProvider, tokens: Sequence[str], mixing_logits: Optional[Tensor] = None) -> Tensor:
    """[time x dim] vectors for one token sequence."""
    stacked = constant(provider.vectors(list(tokens)))
    if isinstance(provider, LayeredEmbedding):
        return mix_layers(stacked, mixing_logits)
    return stacked


def embed_batch(
    provider: EmbeddingProvider,
    sentences: Sequence[Sequence[str]],
    pair_ids: Optional[Sequence[str]] = None,
    offsets: Optional[Sequence[int]] = None,
) -> Tuple[Tensor, np.ndarray]:
    """
    Pad a batch of token sequences.

    Layered providers give the unmixed [batch x time x layers x dim] stack;
    the model reading it owns the mixing logits (see `mix_layers`).

    Returns:
        tuple: ([batch x time x dim] tensor, [batch x time] 0/1 mask)
    """
    if not sentences:
        raise ValueError("embed_batch needs at least one sentence")
    steps = max(len(s) for s in sentences)
    mask = np.zeros((len(sentences), steps))
    rows = []
    for i, tokens in enumerate(sentences):
        keys = lookup_keys(provider, tokens,
                           pair_ids[i] if pair_ids is not None else "",
                           offsets[i] if offsets is not None else 0)
        vecs = provider.vectors(keys)
        pad = np.zeros((steps - len(tokens),) + vecs.shape[1:])
        rows.append(np.concatenate([vecs, pad], axis=0))
        mask[i, : len(tokens)] = 1.0
    return constant(np.stack(rows)), mask


def build_provider(block: EmbeddingBlock, seed: int = 0) -> EmbeddingProvider:
    if block.kind == "toy-hash":
        return ToyHashEmbedding(block.dim, seed)
    if block.kind == "static":
        return StaticEmbedding.from_file(block.path)
    return LayeredEmbedding.from_file(block.path, block.key)
