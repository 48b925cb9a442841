"""Connectionist temporal classification: loss and greedy decoding.

Blank is index 0. Lattices hold per-timestep log-probabilities, ``(T, c)``
for a single sample or ``(T, B, c)`` for a batch.
"""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .tensor import ContractError, Tensor, record

BLANK = 0
LOG_FLOOR = float(np.log(1e-30))


class InfeasibleAlignmentError(ValueError):
    """The label sequence needs more frames than the lattice has."""


def min_frames(labels: Sequence[int]) -> int:
    """Shortest lattice that can emit ``labels``: one frame per label plus a
    separating blank between each pair of equal neighbours."""
    labels = list(labels)
    repeats = sum(1 for a, b in zip(labels, labels[1:]) if a == b)
    return len(labels) + repeats


def augment(labels: Sequence[int]) -> np.ndarray:
    """Blank-interleaved label sequence of length ``2L + 1``."""
    out = np.full(2 * len(labels) + 1, BLANK, dtype=np.int64)
    out[1::2] = labels
    return out


def ctc_loss(log_probs: np.ndarray, labels: Sequence[int]):
    """Negative log-likelihood of ``labels`` under a ``(T, c)`` lattice.

    Returns ``(loss, grad)`` where ``grad`` is the derivative of the loss with
    respect to ``log_probs``; computed by the log-space forward-backward
    recursion.
    """
    lp_in = np.asarray(log_probs)
    if lp_in.ndim != 2 or lp_in.shape[1] < 2 or lp_in.shape[0] < 1:
        raise ContractError(f"lattice must be T x c with T >= 1 and c >= 2, got {lp_in.shape}")
    t_len, c = lp_in.shape
    labels = [int(v) for v in labels]
    if any(v <= BLANK or v >= c for v in labels):
        raise ContractError(f"labels must lie in [1, {c}), got {labels}")
    need = min_frames(labels)
    if t_len < need:
        raise InfeasibleAlignmentError(f"{len(labels)} labels need at least {need} frames, lattice has {t_len}")

    lp = np.maximum(lp_in.astype(np.float64), LOG_FLOOR)
    ext = augment(labels)
    s_len = len(ext)
    emit = lp[:, ext]  # (T, S)
    skip = np.zeros(s_len, dtype=bool)
    skip[2:] = (ext[2:] != BLANK) & (ext[2:] != ext[:-2])

    alpha = np.full((t_len, s_len), -np.inf)
    alpha[0, 0] = emit[0, 0]
    if s_len > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, t_len):
        prev = alpha[t - 1]
        acc = prev.copy()
        acc[1:] = np.logaddexp(acc[1:], prev[:-1])
        acc[2:] = np.where(skip[2:], np.logaddexp(acc[2:], prev[:-2]), acc[2:])
        alpha[t] = acc + emit[t]

    beta = np.full((t_len, s_len), -np.inf)
    beta[-1, -1] = emit[-1, -1]
    if s_len > 1:
        beta[-1, -2] = emit[-1, -2]
    for t in range(t_len - 2, -1, -1):
        nxt = beta[t + 1]
        acc = nxt.copy()
        acc[:-1] = np.logaddexp(acc[:-1], nxt[1:])
        acc[:-2] = np.where(skip[2:], np.logaddexp(acc[:-2], nxt[2:]), acc[:-2])
        beta[t] = acc + emit[t]

    log_p = alpha[-1, -1] if s_len == 1 else np.logaddexp(alpha[-1, -1], alpha[-1, -2])
    occupancy = np.exp(alpha + beta - emit - log_p)  # (T, S)
    grad = np.zeros((t_len, c))
    for s in range(s_len):
        grad[:, ext[s]] -= occupancy[:, s]
    grad *= lp_in > LOG_FLOOR
    return float(-log_p), grad.astype(lp_in.dtype if lp_in.dtype.kind == "f" else np.float64)


def ctc_loss_tensor(log_probs: Tensor, labels: Sequence[Sequence[int]], lengths: Optional[Sequence[int]] = None,
                    per_sample: Optional[list] = None) -> Tensor:
    """Mean CTC loss over a ``(T, B, c)`` batch lattice, as a tape node.

    Only the first ``lengths[b]`` frames of sample ``b`` enter its recursion;
    padded frames receive no gradient. Per-sample losses are appended to
    ``per_sample`` when given.
    """
    if log_probs.ndim != 3:
        raise ContractError(f"batch lattice must be T x B x c, got {log_probs.shape}")
    t_len, b, c = log_probs.shape
    if len(labels) != b:
        raise ContractError(f"{len(labels)} label sequences for a batch of {b}")
    lengths = [t_len] * b if lengths is None else [int(n) for n in lengths]
    grad = np.zeros(log_probs.shape, dtype=np.float64)
    losses = []
    for j in range(b):
        n = lengths[j]
        if not 1 <= n <= t_len:
            raise ContractError(f"valid length {n} outside [1, {t_len}]")
        loss, g = ctc_loss(log_probs.data[:n, j], labels[j])
        losses.append(loss)
        grad[:n, j] = g
    if per_sample is not None:
        per_sample.extend(losses)
    mean = np.array([np.mean(losses)], dtype=log_probs.dtype)
    grad = (grad / b).astype(log_probs.dtype)
    return record("ctc_loss", (log_probs,), mean, lambda g: (grad * g[0],))


def collapse(stream: Sequence[int]) -> list:
    """Merge runs of repeated labels, then drop blanks."""
    out = []
    prev = None
    for v in stream:
        v = int(v)
        if v != prev and v != BLANK:
            out.append(v)
        prev = v
    return out


def best_path(lattice: np.ndarray) -> np.ndarray:
    """Per-timestep argmax (lowest index on ties)."""
    return np.asarray(lattice).argmax(axis=-1)


def greedy_decode(lattice: np.ndarray) -> list:
    return collapse(best_path(lattice))
