# -*- coding: utf-8 -*-
# models/layers.py
from typing import Dict, Iterator, Mapping, Optional, Tuple

import numpy as np

from models.tensor import Tensor, add_bias, matmul, parameter


def uniform_init(rng: np.random.Generator, shape: Tuple[int, ...], bound: float) -> Tensor:
    return parameter(rng.uniform(-bound, bound, size=shape))


def zeros_init(shape: Tuple[int, ...]) -> Tensor:
    return parameter(np.zeros(shape))


class Module:
    """
    Base for anything that owns trainable tensors.

    Parameters are discovered from instance attributes: Tensor leaves that
    require grad, nested Modules, and dicts / lists / tuples of either.
    Names are dotted paths, stable across runs.
    """

    def _children(self) -> Iterator[Tuple[str, object]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            yield name, value

    @staticmethod
    def _walk(prefix: str, value: object) -> Iterator[Tuple[str, Tensor]]:
        if isinstance(value, Tensor):
            if value.requires_grad:
                yield prefix, value
        elif isinstance(value, Module):
            for name, child in value._children():
                yield from Module._walk(f"{prefix}.{name}" if prefix else name, child)
        elif isinstance(value, dict):
            for key, child in value.items():
                key_name = "_".join(str(k) for k in key) if isinstance(key, tuple) else str(key)
                yield from Module._walk(f"{prefix}.{key_name}", child)
        elif isinstance(value, (list, tuple)):
            for i, child in enumerate(value):
                if isinstance(child, (Tensor, Module, dict, list, tuple)):
                    yield from Module._walk(f"{prefix}.{i}", child)

    def parameters(self) -> Dict[str, Tensor]:
        return dict(self._walk("", self))

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.zero_grad()

    def state_arrays(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.parameters().items()}

    def load_state_arrays(self, arrays: Mapping[str, np.ndarray], strict: bool = True) -> None:
        params = self.parameters()
        missing = sorted(set(params) - set(arrays))
        if strict and missing:
            raise KeyError(f"checkpoint is missing parameters: {missing[:5]}")
        for name, p in params.items():
            if name not in arrays:
                continue
            value = np.asarray(arrays[name], dtype=np.float64)
            if value.shape != p.shape:
                raise ValueError(f"shape mismatch for '{name}': {value.shape} vs {p.shape}")
            p.data = value.copy()


class Linear(Module):
    """x @ W + b with Glorot-uniform weights."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, bias: bool = True):
        bound = float(np.sqrt(6.0 / (in_dim + out_dim)))
        self.weight = uniform_init(rng, (in_dim, out_dim), bound)
        self.bias: Optional[Tensor] = zeros_init((out_dim,)) if bias else None
        self.in_dim = in_dim
        self.out_dim = out_dim

    def __call__(self, x: Tensor) -> Tensor:
        out = matmul(x, self.weight)
        return add_bias(out, self.bias) if self.bias is not None else out
