# -*- coding: utf-8 -*-
# models/cell.py
"""
The ENAS recurrent-cell search space.

A cell is a DAG over `num_nodes` nodes. Node 0 reads the timestep input and
the previous hidden state; node l >= 1 reads exactly one earlier node j
through the matrix W_h[j, l] and applies one activation. The cell output is
the mean over loose ends (nodes no other node reads).

All architectures index into one SharedCellParams store that holds a matrix
for every ordered node pair, so any sampled genotype can run against it.
"""
import itertools
import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Dict, FrozenSet, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from config import CELL_DEFAULTS
from models.layers import Module, uniform_init, zeros_init
from models.tensor import (
    ShapeError,
    Tensor,
    add,
    add_bias,
    concat,
    matmul,
    mul,
    relu,
    scale,
    select,
    sigmoid,
    slice_last,
    sub,
    tanh,
)

logger = logging.getLogger(__name__)


class ArchitectureError(ValueError):
    """Genotype text or structure is invalid."""


class ActivationOp(str, Enum):
    TANH = "Tanh"
    RELU = "Relu"
    SIGMOID = "Sigmoid"
    IDENTITY = "Identity"

    @classmethod
    def parse(cls, name: Union[str, "ActivationOp"]) -> "ActivationOp":
        if isinstance(name, ActivationOp):
            return name
        for op in cls:
            if op.value.lower() == str(name).strip().lower():
                return op
        raise ArchitectureError(f"unknown op name '{name}' (expected Tanh|Relu|Sigmoid|Identity)")

    def apply(self, x: Tensor) -> Tensor:
        if self is ActivationOp.TANH:
            return tanh(x)
        if self is ActivationOp.RELU:
            return relu(x)
        if self is ActivationOp.SIGMOID:
            return sigmoid(x)
        return x


# controller token order
ACTIVATIONS: Tuple[ActivationOp, ...] = (
    ActivationOp.TANH,
    ActivationOp.RELU,
    ActivationOp.SIGMOID,
    ActivationOp.IDENTITY,
)


@dataclass(frozen=True)
class CellArchitecture:
    """
    Genotype: node-0 activation plus (input index, activation) for nodes 1..N-1.

    Node ids are 0-based. The node count is len(links) + 1.
    """
    node0_op: ActivationOp
    links: Tuple[Tuple[int, ActivationOp], ...]

    def __post_init__(self):
        object.__setattr__(self, "node0_op", ActivationOp.parse(self.node0_op))
        normalized = []
        for node, link in enumerate(self.links, start=1):
            if len(link) != 2:
                raise ArchitectureError(f"node {node}: expected (input, op), got {link!r}")
            index, op = link
            index = int(index)
            if not 0 <= index <= node - 1:
                raise ArchitectureError(f"node {node}: input index {index} outside [0, {node - 1}]")
            normalized.append((index, ActivationOp.parse(op)))
        object.__setattr__(self, "links", tuple(normalized))

    @property
    def num_nodes(self) -> int:
        return len(self.links) + 1

    def inputs_of(self, node: int) -> int:
        return self.links[node - 1][0]

    def used_as_input(self) -> FrozenSet[int]:
        return frozenset(index for index, _ in self.links)

    def loose_ends(self) -> Tuple[int, ...]:
        used = self.used_as_input()
        return tuple(node for node in range(self.num_nodes) if node not in used)

    def referenced_pairs(self) -> FrozenSet[Tuple[int, int]]:
        """(j, l) pairs whose W_h / W_c matrices this genotype reads."""
        return frozenset((index, node) for node, (index, _) in enumerate(self.links, start=1))

    def decisions(self) -> Tuple[int, ...]:
        """Controller encoding: op token, then (input, op token) per node."""
        out = [ACTIVATIONS.index(self.node0_op)]
        for index, op in self.links:
            out.extend([index, ACTIVATIONS.index(op)])
        return tuple(out)

    @classmethod
    def from_decisions(cls, decisions: Sequence[int]) -> "CellArchitecture":
        if len(decisions) % 2 != 1:
            raise ArchitectureError(f"decision sequence must have odd length, got {len(decisions)}")
        node0 = ACTIVATIONS[int(decisions[0])]
        links = tuple(
            (int(decisions[i]), ACTIVATIONS[int(decisions[i + 1])])
            for i in range(1, len(decisions), 2)
        )
        return cls(node0, links)


class SharedCellParams(Module):
    """
    The weight-sharing store: input projection, node-0 recurrent matrix, one
    hidden matrix (and optional highway-gate matrix) per ordered pair
    0 <= j < l < num_nodes, and a bias per node.
    """

    def __init__(
        self,
        input_dim: int,
        hidden_dim: int,
        rng: np.random.Generator,
        num_nodes: int = CELL_DEFAULTS.num_nodes,
        highway: bool = CELL_DEFAULTS.highway,
        init_range: float = CELL_DEFAULTS.init_range,
    ):
        if num_nodes < 1:
            raise ArchitectureError(f"num_nodes must be >= 1, got {num_nodes}")
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        self.num_nodes = num_nodes
        self.highway = highway
        self.W_x = uniform_init(rng, (input_dim, hidden_dim), init_range)
        self.W_h0 = uniform_init(rng, (hidden_dim, hidden_dim), init_range)
        pairs = [(j, l) for l in range(1, num_nodes) for j in range(l)]
        self.W_h: Dict[Tuple[int, int], Tensor] = {
            pair: uniform_init(rng, (hidden_dim, hidden_dim), init_range) for pair in pairs
        }
        self.W_c: Dict[Tuple[int, int], Tensor] = {
            pair: uniform_init(rng, (hidden_dim, hidden_dim), init_range) for pair in pairs
        } if highway else {}
        self.b: List[Tensor] = [zeros_init((hidden_dim,)) for _ in range(num_nodes)]

    def check_fits(self, arch: CellArchitecture, highway: bool) -> None:
        if arch.num_nodes != self.num_nodes:
            raise ArchitectureError(
                f"architecture has {arch.num_nodes} nodes, parameter store has {self.num_nodes}"
            )
        if highway and not self.highway:
            raise ArchitectureError("highway requested but the store was built without gate matrices")


def _highway(gate: Tensor, raw: Tensor, prev: Tensor) -> Tensor:
    # c * raw + (1 - c) * prev, written as prev + c * (raw - prev)
    return add(prev, mul(gate, sub(raw, prev)))


def _mean(states: Sequence[Tensor]) -> Tensor:
    total = states[0]
    for s in states[1:]:
        total = add(total, s)
    return total if len(states) == 1 else scale(total, 1.0 / len(states))


def _check_step_dims(params: SharedCellParams, x_t: Tensor, h_prev: Tensor) -> None:
    if x_t.ndim != 2 or h_prev.ndim != 2 or x_t.shape[0] != h_prev.shape[0]:
        raise ShapeError(f"x_t {x_t.shape} and h_prev {h_prev.shape} must be [batch x dim] with equal batch")
    if x_t.shape[1] != params.input_dim or h_prev.shape[1] != params.hidden_dim:
        raise ShapeError(
            f"cell expects input dim {params.input_dim} and hidden dim {params.hidden_dim}, "
            f"got {x_t.shape[1]} and {h_prev.shape[1]}"
        )


def cell_step(
    arch: CellArchitecture,
    params: SharedCellParams,
    x_t: Tensor,
    h_prev: Tensor,
    highway: bool = CELL_DEFAULTS.highway,
) -> Tensor:
    """Interpret one timestep of `arch` node by node."""
    params.check_fits(arch, highway)
    _check_step_dims(params, x_t, h_prev)
    pre = add(matmul(x_t, params.W_x), matmul(h_prev, params.W_h0))
    states: List[Tensor] = [arch.node0_op.apply(add_bias(pre, params.b[0]))]
    for node, (j, op) in enumerate(arch.links, start=1):
        source = states[j]
        raw = op.apply(add_bias(matmul(source, params.W_h[(j, node)]), params.b[node]))
        if highway:
            gate = sigmoid(matmul(source, params.W_c[(j, node)]))
            raw = _highway(gate, raw, source)
        states.append(raw)
    return _mean([states[n] for n in arch.loose_ends()])


# ------------------------------------------------------------ compilation

@dataclass(frozen=True)
class PlanGroup:
    """Every child of one source node, evaluated with a single fused matmul."""
    source: int
    targets: Tuple[int, ...]
    activations: Tuple[Optional[ActivationOp], ...]


@dataclass(frozen=True)
class CompiledCellPlan:
    """
    Straight-line schedule for one genotype.

    Identity activations compile to nothing; children that share a source
    node share one matmul against their column-concatenated matrices.
    """
    arch: CellArchitecture
    highway: bool
    node0_activation: Optional[ActivationOp]
    groups: Tuple[PlanGroup, ...]
    loose_ends: Tuple[int, ...]

    @property
    def arity(self) -> int:
        return len(self.loose_ends)

    def bind(self, params: SharedCellParams) -> "BoundCellPlan":
        params.check_fits(self.arch, self.highway)
        return BoundCellPlan(self, params)


def compile_cell(arch: CellArchitecture, highway: bool = CELL_DEFAULTS.highway) -> CompiledCellPlan:
    children: Dict[int, List[Tuple[int, ActivationOp]]] = {}
    for node, (j, op) in enumerate(arch.links, start=1):
        children.setdefault(j, []).append((node, op))
    groups = tuple(
        PlanGroup(
            source=j,
            targets=tuple(node for node, _ in kids),
            activations=tuple(None if op is ActivationOp.IDENTITY else op for _, op in kids),
        )
        for j, kids in sorted(children.items())
    )
    return CompiledCellPlan(
        arch=arch,
        highway=highway,
        node0_activation=None if arch.node0_op is ActivationOp.IDENTITY else arch.node0_op,
        groups=groups,
        loose_ends=arch.loose_ends(),
    )


class BoundCellPlan:
    """A plan with its fused weight blocks built against one parameter store."""

    def __init__(self, plan: CompiledCellPlan, params: SharedCellParams):
        self.plan = plan
        self.params = params
        self.hidden_dim = params.hidden_dim
        self._blocks: List[Tuple[PlanGroup, Tensor, Optional[Tensor], Tensor]] = []
        for group in plan.groups:
            pairs = [(group.source, t) for t in group.targets]
            weight = self._fuse([params.W_h[p] for p in pairs])
            gate = self._fuse([params.W_c[p] for p in pairs]) if plan.highway else None
            bias = self._fuse_bias([params.b[t] for t in group.targets])
            self._blocks.append((group, weight, gate, bias))

    @staticmethod
    def _fuse(mats: List[Tensor]) -> Tensor:
        return mats[0] if len(mats) == 1 else concat(mats, axis=-1)

    @staticmethod
    def _fuse_bias(vecs: List[Tensor]) -> Tensor:
        return vecs[0] if len(vecs) == 1 else concat(vecs, axis=0)

    def project_inputs(self, inputs: Tensor) -> Tensor:
        """x @ W_x for every timestep at once."""
        return matmul(inputs, self.params.W_x)

    def step(self, x_t: Optional[Tensor], h_prev: Tensor, x_proj: Optional[Tensor] = None) -> Tensor:
        params, plan = self.params, self.plan
        if x_proj is None:
            _check_step_dims(params, x_t, h_prev)
            x_proj = matmul(x_t, params.W_x)
        pre = add_bias(add(x_proj, matmul(h_prev, params.W_h0)), params.b[0])
        states: Dict[int, Tensor] = {0: plan.node0_activation.apply(pre) if plan.node0_activation else pre}
        width = self.hidden_dim
        for group, weight, gate_weight, bias in self._blocks:
            source = states[group.source]
            fused = add_bias(matmul(source, weight), bias)
            gates = sigmoid(matmul(source, gate_weight)) if gate_weight is not None else None
            several = len(group.targets) > 1
            for k, (target, act) in enumerate(zip(group.targets, group.activations)):
                raw = slice_last(fused, k * width, (k + 1) * width) if several else fused
                if act is not None:
                    raw = act.apply(raw)
                if gates is not None:
                    gate = slice_last(gates, k * width, (k + 1) * width) if several else gates
                    raw = _highway(gate, raw, source)
                states[target] = raw
        return _mean([states[n] for n in plan.loose_ends])


class EnasCell:
    """
    Recurrent-driver adapter for a genotype over a shared store.

    `compiled=False` runs the node-by-node interpreter instead of the plan.
    """

    def __init__(
        self,
        arch: CellArchitecture,
        params: SharedCellParams,
        highway: bool = CELL_DEFAULTS.highway,
        compiled: bool = True,
    ):
        params.check_fits(arch, highway)
        self.arch = arch
        self.params = params
        self.highway = highway
        self.compiled = compiled
        self.hidden_dim = params.hidden_dim
        self.input_dim = params.input_dim

    def state_size(self) -> int:
        return 1

    def start(self, inputs: Tensor):
        if not self.compiled:
            return _InterpretedRun(self)
        bound = compile_cell(self.arch, self.highway).bind(self.params)
        return _CompiledRun(bound, bound.project_inputs(inputs))


class _InterpretedRun:
    def __init__(self, cell: EnasCell):
        self.cell = cell

    def step(self, t: int, inputs: Tensor, state: Tuple[Tensor, ...]) -> Tuple[Tensor, ...]:
        cell = self.cell
        return (cell_step(cell.arch, cell.params, select(inputs, 1, t), state[0], cell.highway),)


class _CompiledRun:
    def __init__(self, bound: BoundCellPlan, projected: Tensor):
        self.bound = bound
        self.projected = projected

    def step(self, t: int, inputs: Tensor, state: Tuple[Tensor, ...]) -> Tuple[Tensor, ...]:
        return (self.bound.step(None, state[0], x_proj=select(self.projected, 1, t)),)


# --------------------------------------------------- sampling / enumeration

def sample_uniform(rng: np.random.Generator, num_nodes: int = CELL_DEFAULTS.num_nodes) -> CellArchitecture:
    node0 = ACTIVATIONS[int(rng.integers(len(ACTIVATIONS)))]
    links = []
    for node in range(1, num_nodes):
        index = int(rng.integers(node))
        op = ACTIVATIONS[int(rng.integers(len(ACTIVATIONS)))]
        links.append((index, op))
    return CellArchitecture(node0, tuple(links))


def sample_unique(rng: np.random.Generator, k: int, num_nodes: int = CELL_DEFAULTS.num_nodes,
                  max_attempts: Optional[int] = None) -> List[CellArchitecture]:
    """Uniform genotypes, resampling on collision."""
    max_attempts = max_attempts or 100 * k
    seen: List[CellArchitecture] = []
    for _ in range(max_attempts):
        if len(seen) == k:
            break
        arch = sample_uniform(rng, num_nodes)
        if arch not in seen:
            seen.append(arch)
    return seen


def enumerate_count(num_nodes: int = CELL_DEFAULTS.num_nodes) -> int:
    count = len(ACTIVATIONS)
    for node in range(1, num_nodes):
        count *= len(ACTIVATIONS) * node
    return count


def enumerate_architectures(num_nodes: int) -> Iterator[CellArchitecture]:
    """Every genotype of a (small) space, in lexicographic decision order."""
    per_node = [
        [(index, op) for index in range(node) for op in ACTIVATIONS]
        for node in range(1, num_nodes)
    ]
    for node0 in ACTIVATIONS:
        for links in itertools.product(*per_node):
            yield CellArchitecture(node0, tuple(links))


# ---------------------------------------------------------- serialization

TABLE_COLUMNS: Tuple[str, ...] = ("Node 0 Op",) + tuple(
    col for node in range(1, CELL_DEFAULTS.num_nodes) for col in (f"Node {node} Input", f"Node {node} Op")
)


def serialize(arch: CellArchitecture) -> str:
    return " ".join([arch.node0_op.value] + [f"{index}:{op.value}" for index, op in arch.links])


def parse(text: str, num_nodes: Optional[int] = CELL_DEFAULTS.num_nodes) -> CellArchitecture:
    """
    Parse `node0_op input:op input:op ...`.

    Args:
        text: one architecture record
        num_nodes: expected node count, or None to accept any arity
    """
    fields = text.split()
    if not fields:
        raise ArchitectureError("empty architecture record")
    if num_nodes is not None and len(fields) != num_nodes:
        raise ArchitectureError(f"expected {num_nodes - 1} input:op pairs, got {len(fields) - 1}")
    links = []
    for node, item in enumerate(fields[1:], start=1):
        index_text, sep, op_text = item.partition(":")
        if not sep:
            raise ArchitectureError(f"node {node}: expected input:op, got '{item}'")
        try:
            index = int(index_text)
        except ValueError:
            raise ArchitectureError(f"node {node}: input index '{index_text}' is not an integer")
        links.append((index, ActivationOp.parse(op_text)))
    return CellArchitecture(ActivationOp.parse(fields[0]), tuple(links))


def read_architecture_file(path: Union[str, Path], num_nodes: Optional[int] = CELL_DEFAULTS.num_nodes) -> List[CellArchitecture]:
    archs = []
    for line_no, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        record = line.split("#", 1)[0].strip()
        if not record:
            continue
        try:
            archs.append(parse(record, num_nodes))
        except ArchitectureError as e:
            raise ArchitectureError(f"{path}:{line_no}: {e}") from e
    return archs


def write_architecture_file(path: Union[str, Path], archs: Iterable[CellArchitecture], header: Optional[str] = None) -> None:
    lines = [f"# {header}"] if header else []
    lines.extend(serialize(a) for a in archs)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def architecture_table(archs: Sequence[CellArchitecture]) -> pd.DataFrame:
    """One row per genotype in the node-by-node column layout, numbered from 1."""
    if not archs:
        return pd.DataFrame(columns=list(TABLE_COLUMNS))
    width = archs[0].num_nodes
    columns = ["Node 0 Op"] + [c for n in range(1, width) for c in (f"Node {n} Input", f"Node {n} Op")]
    rows = []
    for arch in archs:
        row = [arch.node0_op.value]
        for index, op in arch.links:
            row.extend([index, op.value])
        rows.append(row)
    return pd.DataFrame(rows, columns=columns, index=pd.RangeIndex(1, len(rows) + 1))


def format_architecture_table(archs: Sequence[CellArchitecture]) -> str:
    return architecture_table(archs).to_string()
