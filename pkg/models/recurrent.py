# -*- coding: utf-8 -*-
# models/recurrent.py
"""
Sequence drivers shared by LSTM and ENAS cells, and the LSTM cell itself.

A cell exposes `hidden_dim`, `state_size()` and `start(inputs)`; the object
returned by `start` has `step(t, inputs, state) -> state`, where `state[0]`
is the hidden vector.
"""
from typing import Optional, Tuple

import numpy as np

from models.cell import CellArchitecture, EnasCell, SharedCellParams
from models.layers import Module, uniform_init
from models.tensor import (
    ShapeError,
    Tensor,
    add,
    add_bias,
    blend,
    concat,
    constant,
    matmul,
    mul,
    parameter,
    select,
    sigmoid,
    slice_last,
    stack,
    tanh,
)


class LstmCellParams(Module):
    """Gate blocks in i, f, g, o order; forget-gate bias starts at 1."""

    def __init__(self, input_dim: int, hidden_dim: int, rng: np.random.Generator):
        bound = 1.0 / float(np.sqrt(hidden_dim))
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        self.W_x = uniform_init(rng, (input_dim, 4 * hidden_dim), bound)
        self.W_h = uniform_init(rng, (hidden_dim, 4 * hidden_dim), bound)
        bias = np.zeros(4 * hidden_dim)
        bias[hidden_dim:2 * hidden_dim] = 1.0
        self.b = parameter(bias)


def _lstm_gates(params: LstmCellParams, x_proj: Tensor, h_prev: Tensor, c_prev: Tensor) -> Tuple[Tensor, Tensor]:
    H = params.hidden_dim
    gates = add_bias(add(x_proj, matmul(h_prev, params.W_h)), params.b)
    i = sigmoid(slice_last(gates, 0, H))
    f = sigmoid(slice_last(gates, H, 2 * H))
    g = tanh(slice_last(gates, 2 * H, 3 * H))
    o = sigmoid(slice_last(gates, 3 * H, 4 * H))
    c_t = add(mul(f, c_prev), mul(i, g))
    h_t = mul(o, tanh(c_t))
    return h_t, c_t


def lstm_step(params: LstmCellParams, x_t: Tensor, h_prev: Tensor, c_prev: Tensor) -> Tuple[Tensor, Tensor]:
    if x_t.ndim != 2 or x_t.shape[1] != params.input_dim:
        raise ShapeError(f"lstm expects [batch x {params.input_dim}] input, got {x_t.shape}")
    if h_prev.shape != (x_t.shape[0], params.hidden_dim) or c_prev.shape != h_prev.shape:
        raise ShapeError(f"lstm state shapes {h_prev.shape}/{c_prev.shape} do not fit batch {x_t.shape[0]}")
    return _lstm_gates(params, matmul(x_t, params.W_x), h_prev, c_prev)


class LstmCell:
    def __init__(self, params: LstmCellParams):
        self.params = params
        self.hidden_dim = params.hidden_dim
        self.input_dim = params.input_dim

    def state_size(self) -> int:
        return 2

    def start(self, inputs: Tensor) -> "_LstmRun":
        return _LstmRun(self.params, matmul(inputs, self.params.W_x))


class _LstmRun:
    def __init__(self, params: LstmCellParams, projected: Tensor):
        self.params = params
        self.projected = projected

    def step(self, t: int, inputs: Tensor, state: Tuple[Tensor, ...]) -> Tuple[Tensor, ...]:
        return _lstm_gates(self.params, select(self.projected, 1, t), state[0], state[1])


def run_sequence(
    cell,
    inputs: Tensor,
    mask: np.ndarray,
    h0: Optional[Tensor] = None,
    reverse: bool = False,
) -> Tensor:
    """
    Run a cell over [batch x time x dim] inputs.

    At masked positions (mask == 0) the whole recurrent state carries over
    unchanged. Outputs keep the input time order even when `reverse` is set.

    Returns:
        Tensor: [batch x time x hidden] hidden states
    """
    if inputs.ndim != 3:
        raise ShapeError(f"run_sequence needs [batch x time x dim] inputs, got {inputs.shape}")
    batch, steps, _ = inputs.shape
    if steps == 0:
        raise ShapeError("run_sequence got an empty sequence")
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != (batch, steps):
        raise ShapeError(f"mask shape {mask.shape} does not match inputs {inputs.shape[:2]}")

    zeros = np.zeros((batch, cell.hidden_dim))
    h = h0 if h0 is not None else constant(zeros)
    if h.shape != (batch, cell.hidden_dim):
        raise ShapeError(f"h0 shape {h.shape} does not match [{batch} x {cell.hidden_dim}]")
    state: Tuple[Tensor, ...] = (h,) + tuple(constant(zeros) for _ in range(cell.state_size() - 1))

    run = cell.start(inputs)
    outputs = [None] * steps
    order = range(steps - 1, -1, -1) if reverse else range(steps)
    for t in order:
        keep = mask[:, t]
        if keep.any():
            new_state = run.step(t, inputs, state)
            if keep.all():
                state = new_state
            else:
                column = keep[:, None]
                state = tuple(blend(column, new, old) for new, old in zip(new_state, state))
        outputs[t] = state[0]
    return stack(outputs, axis=1)


def birnn(cell_fwd, cell_bwd, inputs: Tensor, mask: np.ndarray) -> Tensor:
    """Forward and backward passes concatenated on the last axis."""
    forward = run_sequence(cell_fwd, inputs, mask)
    backward = run_sequence(cell_bwd, inputs, mask, reverse=True)
    return concat([forward, backward], axis=-1)


def enas_birnn(
    arch: CellArchitecture,
    params_fwd: SharedCellParams,
    params_bwd: SharedCellParams,
    inputs: Tensor,
    mask: np.ndarray,
    highway: bool = True,
    compiled: bool = True,
) -> Tensor:
    """One genotype in both directions, each direction with its own store."""
    return birnn(
        EnasCell(arch, params_fwd, highway, compiled),
        EnasCell(arch, params_bwd, highway, compiled),
        inputs,
        mask,
    )
