import numpy as np
import pytest

from defhtr.gradcheck import check_gradients
from defhtr.recurrent import BLSTMLayer, LSTMCellParams, blstm_stack, lstm_sequence, lstm_step, reverse_valid
from defhtr.tensor import CHECK, ContractError, Tensor, concat, reshape, sum_all, take


def cell(rng, n, h, dtype=CHECK):
    p = LSTMCellParams.init(n, h, rng, dtype=dtype)
    for t in p.tensors():
        t.data = rng.uniform(-0.5, 0.5, t.shape).astype(dtype)
    return p


def zeros(*shape):
    return Tensor(np.zeros(shape), dtype=CHECK)


def test_zero_cell_outputs_zero():
    p = LSTMCellParams(zeros(8, 3), zeros(8, 2), zeros(8), zeros(8))
    h, c = lstm_step(zeros(1, 3), zeros(1, 2), zeros(1, 2), p)
    assert np.array_equal(h.data, np.zeros((1, 2))) and np.array_equal(c.data, np.zeros((1, 2)))


def test_saturated_gates_carry_memory(rng):
    hs = 3
    b = np.zeros(4 * hs)
    b[hs:2 * hs] = 20.0
    b[:hs] = -20.0
    p = LSTMCellParams(zeros(4 * hs, 2), zeros(4 * hs, hs), Tensor(b, dtype=CHECK), zeros(4 * hs))
    c_prev = Tensor(rng.uniform(-1, 1, (1, hs)), dtype=CHECK)
    _, c = lstm_step(zeros(1, 2), zeros(1, hs), c_prev, p)
    assert np.abs(c.data - c_prev.data).max() < 1e-6


def test_step_rejects_extent_mismatch(rng):
    p = cell(rng, 3, 2)
    with pytest.raises(ContractError):
        lstm_step(zeros(1, 4), zeros(1, 2), zeros(1, 2), p)


def unrolled(x, p):
    h = zeros(x.shape[1], p.hidden)
    c = zeros(x.shape[1], p.hidden)
    outs = []
    for t in range(x.shape[0]):
        h, c = lstm_step(_row(x, t), h, c, p)
        outs.append(h)
    return outs


def _row(x, t):
    return reshape(take(x, [t], 0), x.shape[1:])


def test_fused_sequence_matches_unrolled_steps(rng):
    p = cell(rng, 3, 4)
    x = Tensor(rng.standard_normal((5, 2, 3)), dtype=CHECK)
    fused = lstm_sequence(x, *p.tensors()).data
    steps = np.stack([h.data for h in unrolled(x, p)])
    assert np.abs(fused - steps).max() < 1e-12


def test_gradient_through_five_unrolled_steps(rng):
    x = rng.standard_normal((5, 2, 3))
    params = [t.data for t in cell(rng, 3, 4).tensors()]

    def fn(xt, w_ih, w_hh, b_ih, b_hh):
        p = LSTMCellParams(w_ih, w_hh, b_ih, b_hh)
        return sum_all(concat(unrolled(xt, p), axis=0))

    assert check_gradients(fn, [x] + params, rng) < 1e-4


def test_single_step_blstm_is_one_step_each_way(rng):
    fwd, bwd = cell(rng, 3, 2), cell(rng, 3, 2)
    x = Tensor(rng.standard_normal((1, 1, 3)), dtype=CHECK)
    out = BLSTMLayer(fwd, bwd)(x).data[0, 0]
    hf, _ = lstm_step(Tensor(x.data[0], dtype=CHECK), zeros(1, 2), zeros(1, 2), fwd)
    hb, _ = lstm_step(Tensor(x.data[0], dtype=CHECK), zeros(1, 2), zeros(1, 2), bwd)
    assert np.allclose(out, np.concatenate([hf.data[0], hb.data[0]]), atol=1e-14)


def swap_halves(a):
    h = a.shape[-1] // 2
    return np.concatenate([a[..., h:], a[..., :h]], axis=-1)


def test_time_reversal_swaps_directions(rng):
    fwd, bwd = cell(rng, 3, 4), cell(rng, 3, 4)
    x = rng.standard_normal((6, 2, 3))
    out = BLSTMLayer(fwd, bwd)(Tensor(x, dtype=CHECK)).data
    rev = BLSTMLayer(bwd, fwd)(Tensor(x[::-1].copy(), dtype=CHECK)).data
    assert np.array_equal(rev, swap_halves(out[::-1]))
    tied = BLSTMLayer(fwd, fwd)
    assert np.array_equal(tied(Tensor(x[::-1].copy(), dtype=CHECK)).data,
                          swap_halves(tied(Tensor(x, dtype=CHECK)).data[::-1]))


def test_palindrome_with_tied_cells_is_symmetric(rng):
    p = cell(rng, 3, 4)
    half = rng.standard_normal((3, 1, 3))
    x = np.concatenate([half, half[::-1]])
    out = BLSTMLayer(p, p)(Tensor(x, dtype=CHECK)).data
    assert np.array_equal(out, swap_halves(out[::-1]))


def test_valid_lengths_ignore_padding(rng):
    layer = BLSTMLayer(cell(rng, 3, 4), cell(rng, 3, 4))
    x = rng.standard_normal((4, 1, 3))
    padded = np.concatenate([x, rng.standard_normal((3, 1, 3))])
    alone = layer(Tensor(x, dtype=CHECK)).data
    batch = layer(Tensor(padded, dtype=CHECK), [4]).data[:4]
    assert np.abs(alone - batch).max() < 1e-14


def test_reverse_valid_is_an_involution(rng):
    x = Tensor(rng.standard_normal((5, 3, 2)))
    twice = reverse_valid(reverse_valid(x, [5, 2, 4]), [5, 2, 4])
    assert np.array_equal(twice.data, x.data)


def test_crnn_stack_width(rng):
    layers = [BLSTMLayer(LSTMCellParams.init(n, 512, rng), LSTMCellParams.init(n, 512, rng)) for n in (16, 1024)]
    out = blstm_stack(Tensor(rng.standard_normal((3, 1, 16)).astype(np.float32)), layers)
    assert out.shape == (3, 1, 1024)


def test_stack_rejects_empty_sequence(rng):
    with pytest.raises(ContractError):
        blstm_stack(Tensor(np.zeros((0, 1, 3))), [BLSTMLayer(cell(rng, 3, 2), cell(rng, 3, 2))])


def test_forget_bias_initialisation(rng):
    p = LSTMCellParams.init(3, 5, rng)
    assert np.array_equal(p.b_ih.data[5:10], np.ones(5)) and not p.b_ih.data[:5].any()


def test_matches_torch_bidirectional_lstm(rng):
    torch = pytest.importorskip("torch")
    fwd, bwd = cell(rng, 3, 4), cell(rng, 3, 4)
    ref = torch.nn.LSTM(3, 4, bidirectional=True).double()
    with torch.no_grad():
        for suffix, p in (("", fwd), ("_reverse", bwd)):
            for name in ("w_ih", "w_hh", "b_ih", "b_hh"):
                torch_name = {"w_ih": "weight_ih_l0", "w_hh": "weight_hh_l0",
                              "b_ih": "bias_ih_l0", "b_hh": "bias_hh_l0"}[name] + suffix
                getattr(ref, torch_name).copy_(torch.tensor(getattr(p, name).data))
    x = rng.standard_normal((6, 2, 3))
    expected = ref(torch.tensor(x))[0].detach().numpy()
    got = BLSTMLayer(fwd, bwd)(Tensor(x, dtype=CHECK)).data
    assert np.abs(got - expected).max() < 1e-12
