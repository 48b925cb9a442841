"""Adam, the CTC training loop with CER early stopping, checkpoints and fine-tuning.

Every random draw in a run derives from ``(seed, epoch)``, so a run resumed
from an epoch-boundary checkpoint continues exactly as the unbroken run.
"""
from __future__ import annotations

import json
import math
import struct
import time
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, TextIO

import numpy as np

from . import blob
from .ctc import InfeasibleAlignmentError, ctc_loss_tensor, greedy_decode, min_frames
from .data import Charset, Sample, batches, ensure_dir, pad_batch
from .metrics import aggregate, cer, wer
from .models import CRNN, LSTM1D, ModelConfig, ModelGraph, build_model
from .tensor import ContractError, Tape, backward

CKPT_MAGIC = b"HTRCKPT1"
CKPT_VERSION = 1


class NonFiniteError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


class CharsetMismatchError(ContractError):
    pass


# ----------------------------------------------------------------- Adam

@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: "OrderedDict", grads: dict, state: AdamState, lr_scale: Optional[dict] = None) -> None:
    """One bias-corrected Adam update, in place on ``params`` (name -> Tensor).

    ``lr_scale`` optionally multiplies the learning rate per parameter name.
    A non-finite gradient aborts the whole step before anything changes.
    """
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ContractError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {name}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        lr = state.lr * (lr_scale.get(name, 1.0) if lr_scale else 1.0)
        step = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data - step).astype(p.dtype)


# ----------------------------------------------------------------- configuration

def default_hyperparameters(variant: str, phase: str = "train") -> tuple:
    """``(batch_size, lr)`` of the published recipe."""
    if phase == "pretrain":
        return 16, 1e-4
    return {CRNN: (8, 1e-4), LSTM1D: (2, 3e-3)}[variant]


@dataclass
class TrainConfig:
    variant: str = CRNN
    phase: str = "train"
    batch_size: Optional[int] = None
    lr: Optional[float] = None
    patience: int = 20
    max_epochs: int = 200
    seed: int = 0
    width_multiplier: float = 1.0
    conv_mode: str = "deformable"
    eval_batch_size: int = 16
    grad_clip: Optional[float] = None
    weight_decay: float = 0.0
    offset_lr_scale: float = 1.0

    def __post_init__(self):
        bs, lr = default_hyperparameters(self.variant, self.phase)
        if self.batch_size is None:
            self.batch_size = bs
        if self.lr is None:
            self.lr = lr
        if self.patience < 1:
            raise ContractError(f"patience must be >= 1, got {self.patience}")
        if not self.lr >= 0:
            raise ContractError(f"learning rate must be >= 0, got {self.lr}")
        if not self.offset_lr_scale >= 0:
            raise ContractError(f"offset lr scale must be >= 0, got {self.offset_lr_scale}")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ContractError("batch size and max epochs must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


# ----------------------------------------------------------------- checkpoints

@dataclass
class Checkpoint:
    model_config: dict
    charset: list
    epoch: int
    best_cer: float
    step: int
    seed: int
    tensors: dict
    adam: Optional[dict] = None
    state: dict = field(default_factory=dict)

    def header(self) -> dict:
        return {
            "format_version": CKPT_VERSION,
            "model": self.model_config,
            "charset": self.charset,
            "charset_digest": Charset(self.charset).digest(),
            "epoch": self.epoch,
            "best_val_cer": self.best_cer,
            "optimizer_step": self.step,
            "seed": self.seed,
            "state": self.state,
        }

    @property
    def charset_obj(self) -> Charset:
        return Charset(self.charset)

    def build(self) -> ModelGraph:
        model = build_model(ModelConfig(**self.model_config))
        model.load_state_dict(self.tensors)
        return model


def snapshot(model: ModelGraph, charset: Charset, epoch: int, best_cer: float, seed: int,
             adam: Optional[AdamState] = None, state: Optional[dict] = None) -> Checkpoint:
    tensors = OrderedDict((k, np.array(v, dtype=np.float32)) for k, v in model.state_dict().items())
    moments = None
    if adam is not None:
        moments = OrderedDict()
        for k in model.named_tensors():
            if k in adam.m:
                moments[f"m/{k}"] = adam.m[k].copy()
                moments[f"v/{k}"] = adam.v[k].copy()
    return Checkpoint(model.config.to_dict(), list(charset.symbols), epoch, best_cer,
                      adam.t if adam is not None else 0, seed, tensors, moments, dict(state or {}))


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """JSON header (length-prefixed, UTF-8) followed by one tensor blob stream."""
    header = json.dumps(ckpt.header(), indent=1, sort_keys=True).encode("utf-8")
    records = OrderedDict((f"param/{k}", v) for k, v in ckpt.tensors.items())
    for k, v in (ckpt.adam or {}).items():
        records[f"adam/{k}"] = v
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        blob.write_blob(fh, records)


def read_header(path) -> dict:
    with open(path, "rb") as fh:
        return _read_header(fh, path)


def _read_header(fh, path) -> dict:
    magic = fh.read(len(CKPT_MAGIC))
    if magic != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (magic {magic!r})")
    (n,) = struct.unpack("<Q", fh.read(8))
    header = json.loads(fh.read(n).decode("utf-8"))
    if header.get("format_version") != CKPT_VERSION:
        raise CheckpointError(f"{path}: format version {header.get('format_version')} != {CKPT_VERSION}")
    if Charset(header["charset"]).digest() != header.get("charset_digest"):
        raise CheckpointError(f"{path}: charset digest mismatch, file is corrupt or edited")
    return header


def load_checkpoint(path, expect_charset: Optional[Charset] = None) -> Checkpoint:
    with open(path, "rb") as fh:
        header = _read_header(fh, path)
        try:
            records = blob.read_blob(fh)
        except blob.BlobFormatError as err:
            raise CheckpointError(f"{path}: {err}") from None
    if expect_charset is not None and expect_charset.digest() != header["charset_digest"]:
        raise CheckpointError(f"{path}: charset {header['charset_digest']} does not match the data's "
                              f"{expect_charset.digest()}")
    tensors = OrderedDict((k[6:], v) for k, v in records.items() if k.startswith("param/"))
    adam = OrderedDict((k[5:], v) for k, v in records.items() if k.startswith("adam/")) or None
    return Checkpoint(header["model"], header["charset"], header["epoch"], header["best_val_cer"],
                      header["optimizer_step"], header["seed"], tensors, adam, header.get("state", {}))


def restore_adam(ckpt: Checkpoint, lr: float) -> AdamState:
    state = AdamState(lr=lr, t=ckpt.step)
    for k, v in (ckpt.adam or {}).items():
        kind, name = k.split("/", 1)
        (state.m if kind == "m" else state.v)[name] = np.array(v, dtype=np.float32)
    return state


# ----------------------------------------------------------------- evaluation

def transcribe(model: ModelGraph, samples: Sequence[Sample], charset: Charset, batch_size: int = 16) -> list:
    """Greedy transcriptions in sample order; batches are formed by width."""
    order = sorted(range(len(samples)), key=lambda i: samples[i].image.shape[1])
    hyps = [""] * len(samples)
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        batch = pad_batch([samples[i] for i in idx])
        lattice, lengths = model.forward(batch.images, batch.widths, train=False)
        for j, i in enumerate(idx):
            hyps[i] = charset.decode(greedy_decode(lattice.data[:lengths[j], j]))
    return hyps


def evaluate(model: ModelGraph, samples: Sequence[Sample], charset: Charset, batch_size: int = 16) -> dict:
    hyps = transcribe(model, samples, charset, batch_size)
    c = [cer(s.text, h, charset) for s, h in zip(samples, hyps)]
    w = [wer(s.text, h) for s, h in zip(samples, hyps)]
    return {"cer": aggregate(c), "wer": aggregate(w), "hyps": hyps}


# ----------------------------------------------------------------- training loop

@dataclass
class TrainResult:
    best: Checkpoint
    last: Checkpoint
    history: list
    stopped_early: bool


def check_feasible(model: ModelGraph, samples: Sequence[Sample], charset: Charset) -> None:
    for s in samples:
        need = min_frames(charset.encode(s.text))
        have = model.lattice_length(s.image.shape[1])
        if have < need:
            raise InfeasibleAlignmentError(
                f"sample {s.source or s.text!r}: {have} lattice frames cannot emit {need} labels")


def train_epoch(model: ModelGraph, samples: Sequence[Sample], charset: Charset, config: TrainConfig,
                adam: AdamState, epoch: int) -> float:
    """One pass over ``samples``; returns the mean per-sample CTC loss."""
    params = model.named_tensors()
    scales = None
    if config.offset_lr_scale != 1.0:
        scales = {k: config.offset_lr_scale for k in params if ".offset." in k}
    rng = np.random.default_rng([config.seed, epoch, 1])
    losses = []
    for batch in batches(samples, config.batch_size, config.seed, epoch):
        labels = [charset.encode(t) for t in batch.texts]
        per_sample = []
        with Tape() as tape:
            lattice, lengths = model.forward(batch.images, batch.widths, train=True, rng=rng)
            loss = ctc_loss_tensor(lattice, labels, lengths, per_sample)
            grads = backward(loss, tape)
        losses.extend(per_sample)
        named = {k: grads[t] for k, t in params.items() if t in grads}
        if config.weight_decay:
            for k in named:
                named[k] = named[k] + config.weight_decay * params[k].data
        if config.grad_clip:
            norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in named.values()))
            if norm > config.grad_clip:
                named = {k: g * np.float32(config.grad_clip / norm) for k, g in named.items()}
        if not math.isfinite(float(loss.data[0])):
            continue
        adam_step(params, named, adam, scales)
    finite = [l for l in losses if math.isfinite(l)]
    if not finite:
        raise NonFiniteError(f"epoch {epoch}: every training loss was non-finite")
    return float(np.mean(finite))


def _log_record(epoch: int, mean_loss: float, val: dict, seconds: float) -> dict:
    return {"epoch": epoch, "mean_loss": mean_loss, "val_cer": val["cer"], "val_wer": val["wer"],
            "seconds": round(seconds, 3)}


def train(model: ModelGraph, charset: Charset, train_set: Sequence[Sample], val_set: Sequence[Sample],
          config: TrainConfig, out_dir=None, log: Optional[TextIO] = None,
          resume: Optional[tuple] = None, on_epoch: Optional[Callable[[dict], None]] = None) -> TrainResult:
    """Train until validation CER has not strictly improved for ``patience`` epochs.

    With ``out_dir`` the loop writes ``best.ckpt``, ``last.ckpt`` and
    ``log.jsonl`` after every epoch; the file log omits the wall-clock
    ``seconds`` field that the ``log`` stream carries. ``resume`` is a ``(last, best)``
    checkpoint pair from an earlier run with the same configuration.
    """
    if model.config.charset_size != charset.size:
        raise CharsetMismatchError(f"model emits {model.config.charset_size} classes, charset has {charset.size}")
    for s in list(train_set) + list(val_set):
        bad = charset.missing(s.text)
        if bad:
            raise CharsetMismatchError(f"sample {s.source!r}: symbols {bad} are not in the charset")
    check_feasible(model, train_set, charset)
    if not train_set or not val_set:
        raise ContractError("training needs non-empty train and validation sets")

    out = ensure_dir(out_dir) if out_dir is not None else None
    log_path = out / "log.jsonl" if out is not None else None
    adam = AdamState(lr=config.lr)
    history, best, start, wait = [], None, 1, 0
    best_cer = math.inf
    if resume is not None:
        last_ckpt, best = resume
        if last_ckpt.model_config != model.config.to_dict():
            raise ContractError(f"cannot resume: checkpoint model {last_ckpt.model_config} "
                                f"differs from {model.config.to_dict()}")
        model.load_state_dict(last_ckpt.tensors)
        adam = restore_adam(last_ckpt, config.lr)
        start = last_ckpt.epoch + 1
        best_cer = best.best_cer
        wait = int(last_ckpt.state.get("wait", 0))
        history = list(last_ckpt.state.get("history", []))
    elif log_path is not None:
        log_path.write_text("")

    last = best
    stopped = False
    for epoch in range(start, config.max_epochs + 1):
        if wait >= config.patience:
            stopped = True
            break
        t0 = time.perf_counter()
        mean_loss = train_epoch(model, train_set, charset, config, adam, epoch)
        val = evaluate(model, val_set, charset, config.eval_batch_size)
        record = _log_record(epoch, mean_loss, val, time.perf_counter() - t0)
        if val["cer"] < best_cer:
            best_cer, wait = val["cer"], 0
            best = snapshot(model, charset, epoch, best_cer, config.seed, adam,
                            {"train_config": config.to_dict()})
        else:
            wait += 1
        # wall time goes to the live stream only, so the file log is reproducible
        timeless = {k: v for k, v in record.items() if k != "seconds"}
        history.append(timeless)
        last = snapshot(model, charset, epoch, best_cer, config.seed, adam,
                        {"train_config": config.to_dict(), "wait": wait, "history": history})
        if log is not None:
            log.write(json.dumps(record) + "\n")
            log.flush()
        if out is not None:
            with open(log_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(timeless) + "\n")
            save_checkpoint(out / "best.ckpt", best)
            save_checkpoint(out / "last.ckpt", last)
        if on_epoch is not None:
            on_epoch(record)
    else:
        stopped = wait >= config.patience
    return TrainResult(best, last, history, stopped)


def uncovered(charset: Charset, samples: Sequence[Sample]) -> list:
    return sorted({ch for s in samples for ch in charset.missing(s.text)})


def fine_tune(ckpt: Checkpoint, train_set: Sequence[Sample], val_set: Sequence[Sample], config: TrainConfig,
              out_dir=None, log: Optional[TextIO] = None) -> TrainResult:
    """Continue from ``ckpt``'s parameters with fresh optimizer moments."""
    charset = ckpt.charset_obj
    missing = uncovered(charset, list(train_set) + list(val_set))
    if missing:
        raise CharsetMismatchError(f"checkpoint charset does not cover: {''.join(missing)!r}")
    model = ckpt.build()
    return train(model, charset, train_set, val_set, config, out_dir, log)


def resume_from(out_dir) -> tuple:
    out = Path(out_dir)
    return load_checkpoint(out / "last.ckpt"), load_checkpoint(out / "best.ckpt")
