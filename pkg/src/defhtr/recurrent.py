"""LSTM cells and stacked bidirectional LSTM layers.

Gate blocks are ordered (input, forget, cell, output) in every weight matrix.
Sequences are ``(T, B, n)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import ops
from .tensor import (ContractError, Tensor, add, add_bias, concat, matmul, mul, record, sigmoid, take,
                     tanh, transpose)
from .tensor import _sigmoid


@dataclass
class LSTMCellParams:
    w_ih: Tensor
    w_hh: Tensor
    b_ih: Tensor
    b_hh: Tensor

    @property
    def hidden(self) -> int:
        return self.w_hh.shape[1]

    @property
    def n_in(self) -> int:
        return self.w_ih.shape[1]

    def tensors(self) -> list:
        return [self.w_ih, self.w_hh, self.b_ih, self.b_hh]

    @classmethod
    def init(cls, n: int, h: int, rng: np.random.Generator, dtype=np.float32,
             forget_bias: float = 1.0) -> "LSTMCellParams":
        bound = 1.0 / np.sqrt(h)
        w_ih = rng.uniform(-bound, bound, (4 * h, n)).astype(dtype)
        w_hh = rng.uniform(-bound, bound, (4 * h, h)).astype(dtype)
        b_ih = np.zeros(4 * h, dtype)
        b_ih[h:2 * h] = forget_bias
        b_hh = np.zeros(4 * h, dtype)
        return cls(*(Tensor(a, requires_grad=True) for a in (w_ih, w_hh, b_ih, b_hh)))


def lstm_step(x: Tensor, h_prev: Tensor, c_prev: Tensor, p: LSTMCellParams):
    """One LSTM step built from primitive tape operations.

    ``x`` is ``(B, n)``; ``h_prev`` and ``c_prev`` are ``(B, h)``. Returns ``(h, c)``.
    """
    if x.ndim != 2 or x.shape[1] != p.n_in:
        raise ContractError(f"lstm_step: input {x.shape} does not match n={p.n_in}")
    hs = p.hidden
    if h_prev.shape != (x.shape[0], hs) or c_prev.shape != (x.shape[0], hs):
        raise ContractError(f"lstm_step: state shapes {h_prev.shape}, {c_prev.shape} do not match hidden {hs}")
    a = add(matmul(x, transpose(p.w_ih, (1, 0))), matmul(h_prev, transpose(p.w_hh, (1, 0))))
    a = add_bias(add_bias(a, p.b_ih, 1), p.b_hh, 1)
    i = sigmoid(take(a, np.arange(0, hs), axis=1))
    f = sigmoid(take(a, np.arange(hs, 2 * hs), axis=1))
    g = tanh(take(a, np.arange(2 * hs, 3 * hs), axis=1))
    o = sigmoid(take(a, np.arange(3 * hs, 4 * hs), axis=1))
    c = add(mul(f, c_prev), mul(i, g))
    h = mul(o, tanh(c))
    return h, c


def lstm_sequence(x: Tensor, w_ih: Tensor, w_hh: Tensor, b_ih: Tensor, b_hh: Tensor) -> Tensor:
    """Run an LSTM over ``(T, B, n)`` from zero state; one fused tape node
    with hand-written backpropagation through time. Returns ``(T, B, h)``."""
    if x.ndim != 3 or x.shape[0] < 1:
        raise ContractError(f"lstm_sequence expects a non-empty (T, B, n) sequence, got {x.shape}")
    t_len, b, n = x.shape
    hs = w_hh.shape[1]
    if w_ih.shape != (4 * hs, n) or w_hh.shape != (4 * hs, hs):
        raise ContractError(f"lstm weights {w_ih.shape}, {w_hh.shape} do not fit input width {n}")
    dt = x.dtype
    wih, whh = w_ih.data, w_hh.data
    xg = (x.data.reshape(-1, n) @ wih.T + (b_ih.data + b_hh.data)).reshape(t_len, b, 4 * hs)
    gates = np.empty((t_len, b, 4 * hs), dtype=dt)
    cells = np.empty((t_len, b, hs), dtype=dt)
    tanh_c = np.empty((t_len, b, hs), dtype=dt)
    out = np.empty((t_len, b, hs), dtype=dt)
    h = np.zeros((b, hs), dtype=dt)
    c = np.zeros((b, hs), dtype=dt)
    for t in range(t_len):
        a = xg[t] + h @ whh.T
        act = gates[t]
        act[:, :2 * hs] = _sigmoid(a[:, :2 * hs])
        act[:, 2 * hs:3 * hs] = np.tanh(a[:, 2 * hs:3 * hs])
        act[:, 3 * hs:] = _sigmoid(a[:, 3 * hs:])
        i, f, g, o = act[:, :hs], act[:, hs:2 * hs], act[:, 2 * hs:3 * hs], act[:, 3 * hs:]
        c = f * c + i * g
        cells[t] = c
        tanh_c[t] = np.tanh(c)
        h = o * tanh_c[t]
        out[t] = h

    def grad(gout):
        dxg = np.empty_like(gates)
        dwhh = np.zeros_like(whh)
        dh_next = np.zeros((b, hs), dtype=dt)
        dc_next = np.zeros((b, hs), dtype=dt)
        for t in range(t_len - 1, -1, -1):
            act = gates[t]
            i, f, g, o = act[:, :hs], act[:, hs:2 * hs], act[:, 2 * hs:3 * hs], act[:, 3 * hs:]
            c_prev = cells[t - 1] if t else np.zeros((b, hs), dtype=dt)
            h_prev = out[t - 1] if t else np.zeros((b, hs), dtype=dt)
            dh = gout[t] + dh_next
            tc = tanh_c[t]
            dc = dh * o * (1 - tc * tc) + dc_next
            da = dxg[t]
            da[:, :hs] = dc * g * i * (1 - i)
            da[:, hs:2 * hs] = dc * c_prev * f * (1 - f)
            da[:, 2 * hs:3 * hs] = dc * i * (1 - g * g)
            da[:, 3 * hs:] = dh * tc * o * (1 - o)
            dc_next = dc * f
            dwhh += da.T @ h_prev
            dh_next = da @ whh
        flat = dxg.reshape(-1, 4 * hs)
        dx = (flat @ wih).reshape(x.shape)
        dwih = flat.T @ x.data.reshape(-1, n)
        db = flat.sum(axis=0)
        return dx, dwih, dwhh, db, db.copy()

    return record("lstm_sequence", (x, w_ih, w_hh, b_ih, b_hh), out, grad)


def reverse_valid(x: Tensor, lengths: Optional[Sequence[int]] = None) -> Tensor:
    """Reverse each sequence's valid prefix in time, leaving padding in place.

    The permutation is an involution, so its gradient is the same permutation.
    """
    t_len, b = x.shape[0], x.shape[1]
    lengths = [t_len] * b if lengths is None else list(lengths)
    idx = np.tile(np.arange(t_len)[:, None], (1, b))
    for j, n in enumerate(lengths):
        idx[:n, j] = np.arange(n - 1, -1, -1)
    perm = idx[:, :, None]
    return record("reverse_valid", (x,), np.take_along_axis(x.data, perm, axis=0),
                  lambda g: (np.take_along_axis(g, perm, axis=0),))


@dataclass
class BLSTMLayer:
    forward_cell: LSTMCellParams
    backward_cell: LSTMCellParams

    @property
    def hidden(self) -> int:
        return self.forward_cell.hidden

    def tensors(self) -> list:
        return self.forward_cell.tensors() + self.backward_cell.tensors()

    def __call__(self, seq: Tensor, lengths: Optional[Sequence[int]] = None) -> Tensor:
        fwd = lstm_sequence(seq, *self.forward_cell.tensors())
        rev = reverse_valid(seq, lengths)
        bwd = reverse_valid(lstm_sequence(rev, *self.backward_cell.tensors()), lengths)
        return concat([fwd, bwd], axis=2)


def blstm_stack(seq: Tensor, layers: Sequence[BLSTMLayer], p: float = 0.5, train: bool = False,
                rng: Optional[np.random.Generator] = None, lengths: Optional[Sequence[int]] = None,
                final_dropout: bool = False) -> Tensor:
    """Stacked BLSTMs with dropout between layers (and after the last if asked)."""
    if seq.ndim != 3 or seq.shape[0] < 1:
        raise ContractError(f"blstm_stack needs a non-empty (T, B, n) sequence, got {seq.shape}")
    out = seq
    for k, layer in enumerate(layers):
        if k:
            out = ops.dropout(out, p, train, rng)
        out = layer(out, lengths)
    if final_dropout:
        out = ops.dropout(out, p, train, rng)
    return out
