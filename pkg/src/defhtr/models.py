"""CRNN and 1D-LSTM recognisers with standard or deformable convolutions.

Layer lists follow the published architecture tables row by row. In
deformable mode every convolution is a :func:`~defhtr.ops.deformable_layer`
(an offset convolution with ``2*k*k`` filters feeding a deformable
convolution); in standard mode it is one plain convolution of the same
geometry.
"""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import ops
from .recurrent import BLSTMLayer, LSTMCellParams
from .tensor import ContractError, Tensor, leaky_relu, log_softmax, relu, reshape, transpose

CRNN = "crnn"
LSTM1D = "1d-lstm"
STANDARD = "standard"
DEFORMABLE = "deformable"
DEFAULT_HEIGHT = {CRNN: 60, LSTM1D: 128}
# stands in for the -inf padding of max pooling on masked columns
POOL_FILL = -1e30


class GeometryError(ContractError):
    """The input is too small to survive the convolutional stack."""


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    size: Optional[int] = None
    kernel: Optional[tuple] = None
    stride: Optional[tuple] = None
    padding: Optional[tuple] = None
    p: Optional[float] = None


def _conv(size, kernel=(3, 3), stride=(1, 1), padding=(1, 1)):
    return LayerSpec("conv", size, kernel, stride, padding)


def _pool(stride=(2, 2), padding=(0, 0)):
    return LayerSpec("max_pool", None, (2, 2), stride, padding)


BN = LayerSpec("batch_norm")
RELU = LayerSpec("relu")
LEAKY = LayerSpec("leaky_relu")
DROP2 = LayerSpec("dropout", p=0.2)
DROP5 = LayerSpec("dropout", p=0.5)
TO_SEQ = LayerSpec("map_to_sequence")


def crnn_table() -> list:
    return [
        _conv(64), BN, RELU, _pool(), DROP2,
        _conv(128), BN, RELU, _pool(), DROP2,
        _conv(256), BN, RELU,
        _conv(256), RELU, _pool((2, 1), (0, 1)), DROP2,
        _conv(512), BN, RELU, DROP2,
        _conv(512), RELU, _pool((2, 1), (0, 1)), DROP2,
        _conv(512, (2, 2), (1, 1), (0, 0)), BN, RELU,
        TO_SEQ,
        LayerSpec("blstm", 512), DROP5, LayerSpec("blstm", 512),
        LayerSpec("linear"),
    ]


def lstm1d_table() -> list:
    return [
        _conv(16), BN, LEAKY, _pool(),
        _conv(32), BN, LEAKY, _pool(), DROP2,
        _conv(48), BN, LEAKY, _pool(), DROP2,
        _conv(64), BN, LEAKY, DROP2,
        _conv(80), BN, LEAKY,
        TO_SEQ,
        LayerSpec("blstm", 256), DROP5, LayerSpec("blstm", 256), DROP5, LayerSpec("blstm", 256), DROP5,
        LayerSpec("blstm", 256), DROP5, LayerSpec("blstm", 256), DROP5,
        LayerSpec("linear"),
    ]


TABLES = {CRNN: crnn_table, LSTM1D: lstm1d_table}


@dataclass
class ModelConfig:
    variant: str = CRNN
    conv_mode: str = DEFORMABLE
    charset_size: int = 96
    input_height: Optional[int] = None
    width_multiplier: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.variant not in TABLES:
            raise ContractError(f"unknown variant {self.variant!r}; choose {sorted(TABLES)}")
        if self.conv_mode not in (STANDARD, DEFORMABLE):
            raise ContractError(f"conv_mode must be standard or deformable, got {self.conv_mode!r}")
        if self.charset_size < 2:
            raise ContractError(f"charset size c must be >= 2 (blank plus symbols), got {self.charset_size}")
        if not 0 < self.width_multiplier <= 1:
            raise ContractError(f"width multiplier must lie in (0, 1], got {self.width_multiplier}")
        if self.input_height is None:
            self.input_height = DEFAULT_HEIGHT[self.variant]

    def scaled(self, n: int) -> int:
        return max(1, int(round(n * self.width_multiplier)))

    def to_dict(self) -> dict:
        return asdict(self)


# ----------------------------------------------------------------- layers

class Layer:
    kind = "layer"

    def tensors(self) -> "OrderedDict[str, Tensor]":
        return OrderedDict()

    def buffers(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict()

    def out_hw(self, h: int, w: int) -> tuple:
        return h, w


class Conv(Layer):
    def __init__(self, name: str, c_in: int, c_out: int, spec: LayerSpec, deformable: bool,
                 rng: np.random.Generator):
        self.kind = "deformable_layer" if deformable else "std_conv"
        self.name = name
        kh, kw = spec.kernel
        bound = np.sqrt(1.0 / (c_in * kh * kw))
        weight = Tensor(rng.uniform(-bound, bound, (c_out, c_in, kh, kw)).astype(np.float32),
                        requires_grad=True, name=f"{name}.weight")
        bias = Tensor(rng.uniform(-bound, bound, c_out).astype(np.float32), requires_grad=True,
                      name=f"{name}.bias")
        self.params = ops.ConvParams(weight, bias, spec.stride, spec.padding)
        self.offset_params = None
        if deformable:
            # zero offsets: the layer starts out as its standard counterpart
            k2 = 2 * kh * kw
            self.offset_params = ops.ConvParams(
                Tensor(np.zeros((k2, c_in, kh, kw), np.float32), requires_grad=True, name=f"{name}.offset.weight"),
                Tensor(np.zeros(k2, np.float32), requires_grad=True, name=f"{name}.offset.bias"),
                spec.stride, spec.padding)

    def __call__(self, x: Tensor, capture: Optional[dict] = None) -> Tensor:
        if self.offset_params is None:
            return ops.std_conv(x, self.params)
        box = {} if capture is not None else None
        out = ops.deformable_layer(x, self.params, self.offset_params, box)
        if capture is not None:
            capture[self.name] = box["offsets"]
        return out

    def tensors(self):
        out = OrderedDict()
        if self.offset_params is not None:
            out[f"{self.name}.offset.weight"] = self.offset_params.weight
            out[f"{self.name}.offset.bias"] = self.offset_params.bias
        out[f"{self.name}.weight"] = self.params.weight
        out[f"{self.name}.bias"] = self.params.bias
        return out

    def out_hw(self, h, w):
        try:
            return self.params.out_shape(h, w)
        except ContractError as err:
            raise GeometryError(str(err)) from None

    @property
    def kernel(self) -> tuple:
        return self.params.kernel


class BatchNorm(Layer):
    kind = "batch_norm"

    def __init__(self, name: str, c: int):
        self.name = name
        self.state = ops.BNState.create(c, prefix=name)

    def __call__(self, x, train):
        return ops.batch_norm(x, self.state, train)

    def tensors(self):
        return OrderedDict([(f"{self.name}.gamma", self.state.gamma), (f"{self.name}.beta", self.state.beta)])

    def buffers(self):
        return OrderedDict([(f"{self.name}.running_mean", self.state.running_mean),
                            (f"{self.name}.running_var", self.state.running_var)])


class Activation(Layer):
    def __init__(self, kind: str):
        self.kind = kind

    def __call__(self, x):
        return relu(x) if self.kind == "relu" else leaky_relu(x)


class Pool(Layer):
    kind = "max_pool"

    def __init__(self, spec: LayerSpec):
        self.spec = ops.PoolSpec(spec.kernel, spec.stride, spec.padding)

    def __call__(self, x):
        return ops.max_pool(x, self.spec)

    def out_hw(self, h, w):
        try:
            return self.spec.out_shape(h, w)
        except ContractError as err:
            raise GeometryError(str(err)) from None


class Dropout(Layer):
    kind = "dropout"

    def __init__(self, p: float):
        self.p = p

    def __call__(self, x, train, rng):
        return ops.dropout(x, self.p, train, rng)


class MapToSequence(Layer):
    kind = "map_to_sequence"

    def __call__(self, x):
        return map_to_sequence(x)


class BLSTM(Layer):
    kind = "blstm"

    def __init__(self, name: str, n_in: int, hidden: int, rng: np.random.Generator):
        self.name = name
        self.layer = BLSTMLayer(LSTMCellParams.init(n_in, hidden, rng), LSTMCellParams.init(n_in, hidden, rng))

    def __call__(self, x, lengths):
        return self.layer(x, lengths)

    def tensors(self):
        out = OrderedDict()
        for tag, cell in (("fwd", self.layer.forward_cell), ("bwd", self.layer.backward_cell)):
            for key in ("w_ih", "w_hh", "b_ih", "b_hh"):
                out[f"{self.name}.{tag}.{key}"] = getattr(cell, key)
        return out


class Linear(Layer):
    kind = "linear"

    def __init__(self, n_in: int, c: int, rng: np.random.Generator):
        bound = 1.0 / np.sqrt(n_in)
        self.weight = Tensor(rng.uniform(-bound, bound, (c, n_in)).astype(np.float32), requires_grad=True)
        self.bias = Tensor(rng.uniform(-bound, bound, c).astype(np.float32), requires_grad=True)

    def __call__(self, x):
        return ops.linear(x, self.weight, self.bias)

    def tensors(self):
        return OrderedDict([("linear.weight", self.weight), ("linear.bias", self.bias)])


def map_to_sequence(x: Tensor) -> Tensor:
    """``(B, C, H, W)`` feature map to a ``(W, B, H*C)`` sequence.

    The vector for column ``x`` concatenates the C-channel vectors of rows
    0..H-1 in order.
    """
    b, c, h, w = x.shape
    return reshape(transpose(x, (3, 0, 2, 1)), (w, b, h * c))


def sequence_to_map(seq: np.ndarray, h: int, c: int) -> np.ndarray:
    """Inverse of :func:`map_to_sequence` on raw arrays."""
    w, b, _ = seq.shape
    return seq.reshape(w, b, h, c).transpose(1, 3, 2, 0)


# ----------------------------------------------------------------- model graph

@dataclass
class ModelGraph:
    config: ModelConfig
    specs: list
    layers: list
    conv_channels: int = 0
    feature_height: int = 0

    def named_tensors(self) -> "OrderedDict[str, Tensor]":
        out = OrderedDict()
        for layer in self.layers:
            out.update(layer.tensors())
        return out

    def named_buffers(self) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict()
        for layer in self.layers:
            out.update(layer.buffers())
        return out

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict((k, t.data) for k, t in self.named_tensors().items())
        out.update(self.named_buffers())
        return out

    def load_state_dict(self, state: dict) -> None:
        tensors, buffers = self.named_tensors(), self.named_buffers()
        missing = [k for k in list(tensors) + list(buffers) if k not in state]
        if missing:
            raise KeyError(f"checkpoint lacks tensors: {missing[:5]}")
        for k, t in tensors.items():
            if state[k].shape != t.shape:
                raise ContractError(f"{k}: checkpoint shape {state[k].shape} != model shape {t.shape}")
            t.data = np.array(state[k], dtype=t.dtype)
        for k, buf in buffers.items():
            buf[:] = state[k]

    def conv_layers(self) -> list:
        return [l for l in self.layers if isinstance(l, Conv)]

    def trace(self, height: int, width: int) -> list:
        """Closed-form ``(kind, (C, H, W))`` after every convolutional-stack layer."""
        c, h, w = 1, height, width
        out = []
        for layer in self.layers:
            if isinstance(layer, MapToSequence):
                break
            h, w = layer.out_hw(h, w)
            if isinstance(layer, Conv):
                c = layer.params.c_out
            out.append((layer.kind, (c, h, w)))
        return out

    def feature_shape(self, width: int, height: Optional[int] = None) -> tuple:
        """``(H', W', C)`` of the final convolutional feature map."""
        c, h, w = self.trace(height or self.config.input_height, width)[-1][1]
        return h, w, c

    def lattice_length(self, width: int) -> int:
        return self.feature_shape(width)[1]

    def min_width(self) -> int:
        w = 1
        while True:
            try:
                self.trace(self.config.input_height, w)
                return w
            except GeometryError:
                w += 1

    def forward(self, images, widths: Optional[Sequence[int]] = None, train: bool = False,
                rng: Optional[np.random.Generator] = None, capture: Optional[dict] = None):
        """Log-probability lattice ``(T, B, c)`` and per-sample valid lengths.

        ``images`` is ``(B, 1, H, W)``; ``widths`` are the unpadded widths.
        Columns past each sample's own extent are masked before every
        convolution and pool, so a sample's lattice does not depend on what
        it was batched with. ``capture`` receives each deformable layer's
        offsets under its name and the final feature map under ``"features"``.
        """
        x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=np.float32))
        if x.ndim != 4 or x.shape[1] != 1:
            raise ContractError(f"expected a (B, 1, H, W) batch, got {x.shape}")
        if x.shape[2] != self.config.input_height:
            raise ContractError(f"input height {x.shape[2]} != configured {self.config.input_height}")
        widths = [x.shape[3]] * x.shape[0] if widths is None else list(widths)
        self.trace(x.shape[2], x.shape[3])
        lengths = [self.lattice_length(w) for w in widths]
        if train and rng is None:
            raise ContractError("training-mode forward needs a random generator for dropout")
        cols = list(widths)
        for layer in self.layers:
            if isinstance(layer, (Conv, Pool)):
                if min(cols) < x.shape[3]:
                    x = ops.mask_columns(x, cols, 0.0 if isinstance(layer, Conv) else POOL_FILL)
                cols = [layer.out_hw(x.shape[2], w)[1] for w in cols]
            if isinstance(layer, Conv):
                x = layer(x, capture)
            elif isinstance(layer, BatchNorm):
                x = layer(x, train)
            elif isinstance(layer, Dropout):
                x = layer(x, train, rng)
            elif isinstance(layer, BLSTM):
                x = layer(x, lengths)
            else:
                if isinstance(layer, MapToSequence) and capture is not None:
                    capture["features"] = x.data
                x = layer(x)
        return log_softmax(x), lengths


def build_model(config: ModelConfig) -> ModelGraph:
    """Instantiate the layer list of the configured architecture table."""
    rng = np.random.default_rng(config.seed)
    deformable = config.conv_mode == DEFORMABLE
    specs = TABLES[config.variant]()
    layers = []
    c = 1
    n_conv = n_bn = n_blstm = 0
    feat_h = config.input_height
    seq_width = None
    for spec in specs:
        if spec.kind == "conv":
            c_out = config.scaled(spec.size)
            layers.append(Conv(f"conv{n_conv}", c, c_out, spec, deformable, rng))
            n_conv += 1
            c = c_out
        elif spec.kind == "batch_norm":
            layers.append(BatchNorm(f"bn{n_bn}", c))
            n_bn += 1
        elif spec.kind in ("relu", "leaky_relu"):
            layers.append(Activation(spec.kind))
        elif spec.kind == "max_pool":
            layers.append(Pool(spec))
        elif spec.kind == "dropout":
            layers.append(Dropout(spec.p))
        elif spec.kind == "map_to_sequence":
            for layer in layers:
                feat_h, _ = layer.out_hw(feat_h, 10_000)
            layers.append(MapToSequence())
            seq_width = feat_h * c
        elif spec.kind == "blstm":
            hidden = config.scaled(spec.size)
            layers.append(BLSTM(f"blstm{n_blstm}", seq_width, hidden, rng))
            n_blstm += 1
            seq_width = 2 * hidden
        elif spec.kind == "linear":
            layers.append(Linear(seq_width, config.charset_size, rng))
        else:
            raise ContractError(f"unknown layer kind {spec.kind!r}")
    return ModelGraph(config, specs, layers, conv_channels=c, feature_height=feat_h)


# ----------------------------------------------------------------- parameter accounting

def deformable_weight_count(k: int, c_in: int, c_out: int) -> int:
    """Weights of a square-kernel deformable layer, offsets included, biases excluded."""
    return k * k * c_in * (2 * k * k + c_out)


def param_report(model: ModelGraph) -> dict:
    """Per-layer parameter counts from the stored tensors, with closed forms.

    For each deformable layer the enumerated weight count (biases excluded)
    is checked against ``k^2 * c_in * (2k^2 + c_out)``.
    """
    rows = []
    for layer in model.layers:
        tensors = layer.tensors()
        if not tensors:
            continue
        weights = sum(t.size for name, t in tensors.items() if name.endswith("weight") or ".w_" in name)
        biases = sum(t.size for name, t in tensors.items() if name.endswith("bias") or ".b_" in name)
        other = sum(t.size for t in tensors.values()) - weights - biases
        row = {"layer": getattr(layer, "name", layer.kind), "kind": layer.kind,
               "weights": weights, "biases": biases, "other": other, "total": weights + biases + other}
        if isinstance(layer, Conv):
            kh, kw = layer.kernel
            row["c_in"], row["c_out"], row["kernel"] = layer.params.c_in, layer.params.c_out, f"{kh}x{kw}"
            if layer.offset_params is not None:
                closed = deformable_weight_count(kh, layer.params.c_in, layer.params.c_out)
                if kh != kw or closed != weights:
                    raise AssertionError(f"{row['layer']}: enumerated {weights} weights, closed form {closed}")
                row["closed_form"] = closed
                row["offset_weights"] = layer.offset_params.weight.size
                row["offset_biases"] = layer.offset_params.bias.size
        rows.append(row)
    total = sum(r["total"] for r in rows)
    return {"rows": rows, "total": total,
            "total_without_offset_biases": total - sum(r.get("offset_biases", 0) for r in rows)}


def format_param_report(report: dict) -> str:
    head = ["layer", "kind", "kernel", "c_in", "c_out", "weights", "biases", "other", "closed_form", "total"]
    lines = ["\t".join(head)]
    for r in report["rows"]:
        lines.append("\t".join(str(r.get(k, "")) for k in head))
    lines.append(f"total\t\t\t\t\t\t\t\t\t{report['total']}")
    lines.append(f"total_without_offset_biases\t\t\t\t\t\t\t\t\t{report['total_without_offset_biases']}")
    return "\n".join(lines)
