"""Central finite-difference checks of analytic gradients in check precision.

Each entry of :data:`SUITE` builds a random small instance of one
differentiable operator and compares tape gradients with central
differences of a random linear functional of the output.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import ctc as ctc_mod
from . import ops, recurrent
from .tensor import CHECK, Tape, Tensor, backward, log_softmax, matmul, softmax_rows, sum_all, mul

STEP = 1e-5


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-8)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def check_gradients(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], rng: np.random.Generator,
                    step: float = STEP, perturb: float = 0.0) -> float:
    """Worst relative error over all ``inputs`` of ``fn``'s gradient.

    ``fn`` maps tensors to a tensor; it is reduced to a scalar by a fixed
    random projection.
    """
    arrays = [np.array(a, dtype=CHECK) for a in inputs]
    with Tape() as tape:
        leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
        out = fn(*leaves)
        proj = rng.standard_normal(out.shape)
        root = sum_all(mul(out, Tensor(proj)))
        grads = backward(root, tape)

    def value(vals) -> float:
        res = fn(*[Tensor(v) for v in vals])
        return float((res.data * proj).sum())

    worst = 0.0
    for i, a in enumerate(arrays):
        numeric = np.zeros_like(a)
        flat = numeric.reshape(-1)
        for j in range(a.size):
            plus = [x.copy() for x in arrays]
            minus = [x.copy() for x in arrays]
            plus[i].reshape(-1)[j] += step
            minus[i].reshape(-1)[j] -= step
            flat[j] = (value(plus) - value(minus)) / (2 * step)
        worst = max(worst, relative_error(grads.of(leaves[i]) * (1 + perturb), numeric))
    return worst


@dataclass
class Case:
    fn: Callable[..., Tensor]
    inputs: list


def _conv_case(rng, deformable: bool) -> Case:
    c_in, c_out = rng.integers(1, 3), rng.integers(1, 3)
    kh, kw = rng.integers(1, 4), rng.integers(1, 4)
    sh, sw = rng.integers(1, 3), rng.integers(1, 3)
    ph, pw = rng.integers(0, kh), rng.integers(0, kw)
    h, w = rng.integers(kh + 1, kh + 4), rng.integers(kw + 1, kw + 4)
    b = rng.integers(1, 3)
    ho = ops.out_extent(h, kh, sh, ph)
    wo = ops.out_extent(w, kw, sw, pw)
    x = rng.standard_normal((b, c_in, h, w))
    wt = rng.standard_normal((c_out, c_in, kh, kw))
    bias = rng.standard_normal(c_out)

    def params(wt_t, b_t):
        return ops.ConvParams(wt_t, b_t, stride=(sh, sw), padding=(ph, pw))

    if not deformable:
        return Case(lambda xt, wtt, bt: ops.std_conv(xt, params(wtt, bt)), [x, wt, bias])
    # offsets kept away from integer sampling positions where bilinear sampling has kinks
    off = rng.uniform(-1.5, 1.5, (b, 2 * kh * kw, ho, wo))
    off = np.round(off) + rng.uniform(0.15, 0.85, off.shape) * np.sign(rng.standard_normal(off.shape))
    return Case(lambda xt, ot, wtt, bt: ops.deform_conv(xt, params(wtt, bt), ot), [x, off, wt, bias])


def _bilinear_case(rng) -> Case:
    c, h, w = rng.integers(1, 4), rng.integers(2, 6), rng.integers(2, 6)
    n = rng.integers(1, 6)
    ys = rng.uniform(-1.5, h + 0.5, n)
    xs = rng.uniform(-1.5, w + 0.5, n)
    ys = np.floor(ys) + rng.uniform(0.1, 0.9, n)
    xs = np.floor(xs) + rng.uniform(0.1, 0.9, n)
    return Case(lambda m, y, x: ops.bilinear_sample(m, y, x), [rng.standard_normal((c, h, w)), ys, xs])


def _bn_case(rng) -> Case:
    b, c = rng.integers(2, 4), rng.integers(1, 4)
    h, w = rng.integers(2, 5), rng.integers(2, 5)
    state = ops.BNState.create(int(c), dtype=CHECK)

    def fn(x, g, bt):
        state.gamma, state.beta = g, bt
        return ops.batch_norm(x, state, train=True)

    return Case(fn, [rng.standard_normal((b, c, h, w)), rng.uniform(0.5, 1.5, c), rng.standard_normal(c)])


def _pool_case(rng) -> Case:
    kh, kw = rng.integers(1, 4), rng.integers(1, 4)
    spec = ops.PoolSpec((kh, kw), (rng.integers(1, 3), rng.integers(1, 3)),
                        (rng.integers(0, kh), rng.integers(0, kw)))
    b, c = rng.integers(1, 3), rng.integers(1, 3)
    h, w = rng.integers(kh + 1, kh + 5), rng.integers(kw + 1, kw + 5)
    # distinct values keep the argmax stable under perturbation
    x = rng.permutation(b * c * h * w).reshape(b, c, h, w) * 0.1
    return Case(lambda xt: ops.max_pool(xt, spec), [x])


def _lstm_case(rng) -> Case:
    t, b, n, h = 5, rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
    return Case(lambda x, wih, whh, bih, bhh: recurrent.lstm_sequence(x, wih, whh, bih, bhh),
                [rng.standard_normal((t, b, n)), rng.standard_normal((4 * h, n)) * 0.5,
                 rng.standard_normal((4 * h, h)) * 0.5, rng.standard_normal(4 * h) * 0.5,
                 rng.standard_normal(4 * h) * 0.5])


def _linear_case(rng) -> Case:
    t, n, c = rng.integers(1, 5), rng.integers(1, 5), rng.integers(1, 5)
    return Case(lambda x, w, b: ops.linear(x, w, b),
                [rng.standard_normal((t, n)), rng.standard_normal((c, n)), rng.standard_normal(c)])


def _matmul_case(rng) -> Case:
    m, k, n = rng.integers(1, 5), rng.integers(1, 5), rng.integers(1, 5)
    return Case(matmul, [rng.standard_normal((m, k)), rng.standard_normal((k, n))])


def _softmax_case(rng) -> Case:
    t, c = rng.integers(1, 5), rng.integers(2, 6)
    return Case(softmax_rows, [rng.standard_normal((t, c)) * 2])


def _ctc_case(rng) -> Case:
    t, c = rng.integers(3, 8), rng.integers(2, 5)
    length = rng.integers(0, 3)
    labels = list(rng.integers(1, c, length))
    while t < ctc_mod.min_frames(labels):
        labels.pop()

    def fn(logits):
        return ctc_mod.ctc_loss_tensor(log_softmax(logits), [labels], [t])

    return Case(fn, [rng.standard_normal((t, 1, c))])


SUITE: dict[str, Callable[[np.random.Generator], Case]] = {
    "matmul": _matmul_case,
    "std_conv": lambda rng: _conv_case(rng, deformable=False),
    "deform_conv": lambda rng: _conv_case(rng, deformable=True),
    "bilinear_sample": _bilinear_case,
    "batch_norm": _bn_case,
    "max_pool": _pool_case,
    "lstm": _lstm_case,
    "linear": _linear_case,
    "softmax": _softmax_case,
    "ctc_loss": _ctc_case,
}


def run_suite(ops_selected: Sequence[str] | None = None, repeats: int = 10, seed: int = 0,
              tolerance: float = 1e-4, perturb: float = 0.0):
    """Run the finite-difference suite; yields ``(op, worst_error, passed, seconds)``.

    ``perturb`` is a debug hook scaling every analytic gradient by
    ``1 + perturb``; it exists as a negative control and must make checks fail.
    """
    names = list(ops_selected or SUITE)
    for name in names:
        if name not in SUITE:
            raise KeyError(f"unknown op {name!r}; choose from {sorted(SUITE)}")
    for name in names:
        rng = np.random.default_rng([seed, list(SUITE).index(name)])
        start = time.perf_counter()
        worst = 0.0
        for _ in range(repeats):
            case = SUITE[name](rng)
            worst = max(worst, check_gradients(case.fn, case.inputs, rng, perturb=perturb))
        yield name, worst, worst < tolerance, time.perf_counter() - start
