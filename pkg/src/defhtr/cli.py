"""``htr`` command-line entry point.

Results go to files and standard output; progress and notices are JSON lines
on standard error. Exit codes: 0 success, 1 runtime failure, 2 invalid
input or configuration.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path
from typing import Optional

import numpy as np

from . import gradcheck
from .blob import BlobFormatError
from .ctc import InfeasibleAlignmentError
from .data import (Charset, ImageFormatError, ManifestError, Sample, ensure_dir, load_image, load_manifest,
                   prepare, rescale_height, write_manifest)
from .font import MissingGlyphError
from .metrics import score, summary, write_report
from .models import CRNN, DEFORMABLE, LSTM1D, STANDARD, ModelConfig, build_model, format_param_report, param_report
from .synth import HEAVY, MILD, DistortionConfig, SynthSpec, synth_generate
from .tensor import ContractError
from .training import (CheckpointError, NonFiniteError, TrainConfig, fine_tune, load_checkpoint, resume_from,
                       train, transcribe)
from . import viz

EXIT_OK, EXIT_RUNTIME, EXIT_INPUT = 0, 1, 2
INPUT_ERRORS = (ContractError, ManifestError, ImageFormatError, CheckpointError, BlobFormatError,
                MissingGlyphError, InfeasibleAlignmentError, FileNotFoundError, json.JSONDecodeError)
DISTORTIONS = {"none": DistortionConfig(), "mild": MILD, "heavy": HEAVY}


class InputError(Exception):
    pass


def log_event(event: str, **fields) -> None:
    sys.stderr.write(json.dumps({"event": event, **fields}) + "\n")
    sys.stderr.flush()


# ----------------------------------------------------------------- configuration

def resolve(args: argparse.Namespace, keys: dict) -> dict:
    """Merge the JSON config file with flags; a flag that disagrees with the file wins, with a notice.

    ``keys`` maps option names to defaults. ``HTR_SEED`` overrides the file's
    seed; an explicit ``--seed`` overrides both.
    """
    file_cfg = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise InputError(f"config file not found: {path}")
        file_cfg = json.loads(path.read_text(encoding="utf-8"))
        if not isinstance(file_cfg, dict):
            raise InputError("config file must hold a JSON object")
        unknown = sorted(set(file_cfg) - set(keys))
        if unknown:
            raise InputError(f"unknown config keys: {unknown}")
    cfg = dict(keys)
    cfg.update(file_cfg)
    if "seed" in keys and os.environ.get("HTR_SEED"):
        try:
            env_seed = int(os.environ["HTR_SEED"])
        except ValueError:
            raise InputError(f"HTR_SEED must be an integer, got {os.environ['HTR_SEED']!r}") from None
        if cfg.get("seed") != env_seed:
            log_event("notice", message="HTR_SEED overrides config seed", old=cfg.get("seed"), new=env_seed)
        cfg["seed"] = env_seed
    for key in keys:
        flag = getattr(args, key, None)
        if flag is None:
            continue
        if key in file_cfg and file_cfg[key] != flag:
            log_event("notice", message=f"flag --{key.replace('_', '-')} overrides config file", old=file_cfg[key],
                      new=flag)
        cfg[key] = flag
    return cfg


def _require_file(path, what: str) -> Path:
    if path is None:
        raise InputError(f"missing {what}")
    p = Path(path)
    if not p.is_file():
        raise InputError(f"{what} not found: {p}")
    return p


def _charset_for(manifest: Path, explicit) -> Charset:
    if explicit:
        return Charset.load(_require_file(explicit, "charset file"))
    beside = manifest.parent / "charset.txt"
    if beside.is_file():
        return Charset.load(beside)
    texts = [line.split("\t", 1)[1] for line in manifest.read_text(encoding="utf-8").splitlines() if "\t" in line]
    return Charset.from_texts(texts)


def _samples(manifest: Path, charset: Charset, height: int) -> list:
    samples = load_manifest(manifest, charset)
    if not samples:
        raise InputError(f"no samples in {manifest}")
    return prepare(samples, height)


# ----------------------------------------------------------------- commands

TRAIN_KEYS = {
    "train_manifest": None, "val_manifest": None, "charset": None, "out": "runs/train",
    "variant": CRNN, "conv_mode": DEFORMABLE, "width_multiplier": 1.0, "input_height": None,
    "batch_size": None, "lr": None, "patience": 20, "max_epochs": 200, "seed": 0, "phase": "train",
    "grad_clip": None, "weight_decay": 0.0, "offset_lr_scale": 1.0,
}


def _train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(variant=cfg["variant"], phase=cfg["phase"], batch_size=cfg["batch_size"], lr=cfg["lr"],
                       patience=cfg["patience"], max_epochs=cfg["max_epochs"], seed=cfg["seed"],
                       width_multiplier=cfg["width_multiplier"], conv_mode=cfg["conv_mode"],
                       grad_clip=cfg["grad_clip"], weight_decay=cfg["weight_decay"],
                       offset_lr_scale=cfg["offset_lr_scale"])


def _epoch_logger(record: dict) -> None:
    log_event("epoch", **record)


def _finish_run(out: Path, result) -> None:
    viz.plot_training_curves(result.history, out / "curves.png")
    log_event("done", best_epoch=result.best.epoch, best_val_cer=result.best.best_cer,
              epochs=len(result.history), stopped_early=result.stopped_early)
    print(json.dumps({"best_epoch": result.best.epoch, "best_val_cer": result.best.best_cer,
                      "checkpoint": str(out / "best.ckpt")}))


def cmd_train(args) -> int:
    cfg = resolve(args, TRAIN_KEYS)
    train_manifest = _require_file(cfg["train_manifest"], "training manifest")
    val_manifest = _require_file(cfg["val_manifest"], "validation manifest")
    charset = _charset_for(train_manifest, cfg["charset"])
    model_cfg = ModelConfig(cfg["variant"], cfg["conv_mode"], charset.size, cfg["input_height"],
                            cfg["width_multiplier"], cfg["seed"])
    tcfg = _train_config(cfg)
    train_set = _samples(train_manifest, charset, model_cfg.input_height)
    val_set = _samples(val_manifest, charset, model_cfg.input_height)
    out = ensure_dir(cfg["out"])
    resume = resume_from(out) if args.resume else None
    model = build_model(model_cfg)
    log_event("start", command="train", model=model_cfg.to_dict(), train=tcfg.to_dict(),
              train_samples=len(train_set), val_samples=len(val_set))
    result = train(model, charset, train_set, val_set, tcfg, out, resume=resume, on_epoch=_epoch_logger)
    _finish_run(out, result)
    return EXIT_OK


FINETUNE_KEYS = {k: v for k, v in TRAIN_KEYS.items() if k not in ("variant", "conv_mode", "width_multiplier",
                                                                   "input_height", "charset")}
FINETUNE_KEYS["checkpoint"] = None


def cmd_finetune(args) -> int:
    cfg = resolve(args, FINETUNE_KEYS)
    ckpt = load_checkpoint(_require_file(cfg["checkpoint"], "checkpoint"))
    charset = ckpt.charset_obj
    model_cfg = ModelConfig(**ckpt.model_config)
    train_manifest = _require_file(cfg["train_manifest"], "training manifest")
    val_manifest = _require_file(cfg["val_manifest"], "validation manifest")
    train_set = prepare(_checked_manifest(train_manifest, charset), model_cfg.input_height)
    val_set = prepare(_checked_manifest(val_manifest, charset), model_cfg.input_height)
    tcfg = _train_config({**cfg, "variant": model_cfg.variant, "conv_mode": model_cfg.conv_mode,
                          "width_multiplier": model_cfg.width_multiplier})
    out = ensure_dir(cfg["out"])
    log_event("start", command="finetune", checkpoint=str(cfg["checkpoint"]), train=tcfg.to_dict())
    result = fine_tune(ckpt, train_set, val_set, tcfg, out)
    for record in result.history:
        _epoch_logger(record)
    _finish_run(out, result)
    return EXIT_OK


def _checked_manifest(manifest: Path, charset: Charset) -> list:
    """Load a manifest, reporting every symbol the charset lacks at once."""
    lines = [l.split("\t", 1) for l in manifest.read_text(encoding="utf-8").splitlines() if "\t" in l]
    missing = sorted({ch for _, text in lines for ch in charset.missing(text)})
    if missing:
        raise InputError(f"checkpoint charset does not cover symbols {missing} used in {manifest}")
    samples = load_manifest(manifest, charset)
    if not samples:
        raise InputError(f"no samples in {manifest}")
    return samples


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(_require_file(args.checkpoint, "checkpoint"))
    manifest = _require_file(args.manifest, "manifest")
    charset = ckpt.charset_obj
    model = ckpt.build()
    samples = _checked_manifest(manifest, charset)
    samples = prepare(samples, model.config.input_height)
    hyps = transcribe(model, samples, charset)
    rows = score([s.source for s in samples], [s.text for s in samples], hyps, charset)
    out = Path(args.out) if args.out else manifest.with_name(manifest.stem + ".eval.tsv")
    ensure_dir(out.parent)
    write_report(out, rows)
    totals = summary(rows)
    if args.figure:
        _plot_error_histogram(rows, args.figure)
    print(json.dumps({**totals, "report": str(out), "header_val_cer": ckpt.best_cer}))
    return EXIT_OK


def _plot_error_histogram(rows, path) -> None:
    plt = viz._pyplot()
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.hist([100 * r.cer.rate for r in rows], bins=20, color="tab:red")
    ax.set_xlabel("per-line CER (%)")
    ax.set_ylabel("lines")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _line_image(path, height: int) -> np.ndarray:
    image = load_image(_require_file(path, "image"))
    return rescale_height(image, height) if image.shape[0] != height else image


def cmd_transcribe(args) -> int:
    ckpt = load_checkpoint(_require_file(args.checkpoint, "checkpoint"))
    model = ckpt.build()
    image = _line_image(args.image, model.config.input_height)
    text = transcribe(model, [Sample(image, "")], ckpt.charset_obj)[0]
    print(text)
    return EXIT_OK


SYNTH_KEYS = {"out": None, "count": 100, "charset": SynthSpec.charset, "distortion": "mild", "min_len": 3,
              "max_len": 7, "pixel_scale": 1, "margin_y": 8, "margin_x": 2, "corpus": None, "seed": 0,
              "split": None}


def cmd_synth(args) -> int:
    cfg = resolve(args, SYNTH_KEYS)
    if not cfg["out"]:
        raise InputError("missing --out directory")
    if cfg["distortion"] not in DISTORTIONS:
        raise InputError(f"distortion must be one of {sorted(DISTORTIONS)}")
    corpus = None
    if cfg["corpus"]:
        corpus = _require_file(cfg["corpus"], "corpus").read_text(encoding="utf-8").splitlines()
    spec = SynthSpec(count=cfg["count"], charset=cfg["charset"], distortion=DISTORTIONS[cfg["distortion"]],
                     min_len=cfg["min_len"], max_len=cfg["max_len"], pixel_scale=cfg["pixel_scale"],
                     margin_y=cfg["margin_y"], margin_x=cfg["margin_x"], corpus=corpus, seed=cfg["seed"])
    out = synth_generate(cfg["out"], spec)
    if cfg["split"]:
        write_splits(out, [int(n) for n in str(cfg["split"]).split(",")])
    print(json.dumps({"out": str(out), "count": spec.count}))
    return EXIT_OK


def write_splits(out: Path, sizes: list) -> None:
    """Cut ``manifest.tsv`` into consecutive ``train``/``val``/``test`` manifests."""
    rows = [l.split("\t", 1) for l in (out / "manifest.tsv").read_text(encoding="utf-8").splitlines()]
    if sum(sizes) > len(rows):
        raise InputError(f"split sizes {sizes} exceed {len(rows)} generated lines")
    start = 0
    for name, n in zip(("train", "val", "test"), sizes):
        write_manifest(out / f"{name}.tsv", rows[start:start + n])
        start += n


def cmd_viz_offsets(args) -> int:
    ckpt = load_checkpoint(_require_file(args.checkpoint, "checkpoint"))
    model = ckpt.build()
    image = _line_image(args.image, model.config.input_height)
    magnitude = viz.offset_magnitude_map(model, image, args.layer)
    out = ensure_dir(args.out)
    viz.write_offset_map(out / f"offsets_layer{args.layer}.pgm", magnitude)
    viz.plot_offset_map(image, magnitude, out / f"offsets_layer{args.layer}.png", args.layer)
    contrast = viz.edge_contrast(magnitude, image, args.edge_threshold)
    print(json.dumps({"layer": args.layer, "shape": list(magnitude.shape), "mean": float(magnitude.mean()),
                      "edge_mean": contrast.edge_mean, "background_mean": contrast.background_mean,
                      "ratio": contrast.ratio}))
    return EXIT_OK


def cmd_viz_rf(args) -> int:
    ckpt = load_checkpoint(_require_file(args.checkpoint, "checkpoint"))
    model = ckpt.build()
    image = _line_image(args.image, model.config.input_height)
    mask = viz.receptive_field(model, image, args.column)
    rect = viz.rectangle_mask(image.shape, viz.rf_rectangle(model, *image.shape, args.column))
    deformable = model.config.conv_mode == DEFORMABLE
    out = ensure_dir(args.out)
    viz.write_rf_overlay(out / f"rf_col{args.column}.ppm", image, mask, deformable)
    viz.plot_receptive_field(image, mask, out / f"rf_col{args.column}.png", deformable,
                             rect if deformable else None)
    print(json.dumps({"column": args.column, "pixels": int(mask.sum()), "rectangle_pixels": int(rect.sum()),
                      "covers_rectangle": bool(np.all(mask[rect]))}))
    return EXIT_OK


PARAM_KEYS = {"variant": CRNN, "conv_mode": DEFORMABLE, "charset_size": 96, "width_multiplier": 1.0,
              "input_height": None}


def cmd_params(args) -> int:
    cfg = resolve(args, PARAM_KEYS)
    model = build_model(ModelConfig(cfg["variant"], cfg["conv_mode"], cfg["charset_size"], cfg["input_height"],
                                    cfg["width_multiplier"]))
    print(format_param_report(param_report(model)))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    selected = args.op or list(gradcheck.SUITE)
    unknown = [o for o in selected if o not in gradcheck.SUITE]
    if unknown:
        raise InputError(f"unknown ops {unknown}; choose from {list(gradcheck.SUITE)}")
    failed = 0
    print("op\tworst_rel_error\tresult\tseconds")
    for name, worst, passed, seconds in gradcheck.run_suite(selected, args.repeats, args.seed, args.tolerance,
                                                           args.perturb):
        failed += not passed
        print(f"{name}\t{worst:.3e}\t{'pass' if passed else 'FAIL'}\t{seconds:.2f}", flush=True)
    return EXIT_RUNTIME if failed else EXIT_OK


# ----------------------------------------------------------------- parser

def _add_train_flags(p: argparse.ArgumentParser, model_flags: bool = True) -> None:
    p.add_argument("--config", help="JSON file with any of the long options below")
    p.add_argument("--train-manifest", dest="train_manifest")
    p.add_argument("--val-manifest", dest="val_manifest")
    p.add_argument("--out")
    if model_flags:
        p.add_argument("--charset", help="charset file (default: charset.txt beside the training manifest)")
        p.add_argument("--variant", choices=[CRNN, LSTM1D])
        p.add_argument("--conv-mode", dest="conv_mode", choices=[STANDARD, DEFORMABLE])
        p.add_argument("--width-multiplier", dest="width_multiplier", type=float)
        p.add_argument("--input-height", dest="input_height", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--patience", type=int)
    p.add_argument("--max-epochs", dest="max_epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--phase", choices=["train", "pretrain"], help="selects the default batch size and lr")
    p.add_argument("--grad-clip", dest="grad_clip", type=float)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--offset-lr-scale", dest="offset_lr_scale", type=float,
                   help="learning-rate multiplier for the offset convolutions")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="htr", description="Handwritten text recognition with deformable "
                                                             "convolutions")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from manifests")
    _add_train_flags(p)
    p.add_argument("--resume", action="store_true", help="continue from last.ckpt in --out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("finetune", help="fine-tune a checkpoint with fresh optimizer state")
    _add_train_flags(p, model_flags=False)
    p.add_argument("--checkpoint")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="greedy-decode a manifest and write a TSV report")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", help="report path (default: <manifest>.eval.tsv)")
    p.add_argument("--figure", help="also write a per-line CER histogram PNG")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("transcribe", help="transcribe one PGM line image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("image")
    p.set_defaults(func=cmd_transcribe)

    p = sub.add_parser("synth", help="render a synthetic line dataset")
    p.add_argument("--config")
    p.add_argument("--out")
    p.add_argument("--count", type=int)
    p.add_argument("--charset", help="symbols as one string")
    p.add_argument("--distortion", choices=sorted(DISTORTIONS))
    p.add_argument("--min-len", dest="min_len", type=int)
    p.add_argument("--max-len", dest="max_len", type=int)
    p.add_argument("--pixel-scale", dest="pixel_scale", type=int)
    p.add_argument("--margin-y", dest="margin_y", type=int)
    p.add_argument("--margin-x", dest="margin_x", type=int)
    p.add_argument("--corpus", help="text file, one line per sample candidate")
    p.add_argument("--seed", type=int)
    p.add_argument("--split", help="sizes for train,val,test manifests, e.g. 500,100,100")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("viz-offsets", help="offset-magnitude map of one deformable layer")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--layer", type=int, default=0, help="index among the convolutions, from 0")
    p.add_argument("--edge-threshold", dest="edge_threshold", type=float, default=viz.EDGE_THRESHOLD)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_viz_offsets)

    p = sub.add_parser("viz-rf", help="receptive field of one lattice column")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--column", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_viz_rf)

    p = sub.add_parser("params", help="per-layer parameter counts")
    p.add_argument("--config")
    p.add_argument("--variant", choices=[CRNN, LSTM1D])
    p.add_argument("--conv-mode", dest="conv_mode", choices=[STANDARD, DEFORMABLE])
    p.add_argument("--charset-size", dest="charset_size", type=int)
    p.add_argument("--width-multiplier", dest="width_multiplier", type=float)
    p.add_argument("--input-height", dest="input_height", type=int)
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--op", action="append", help="restrict to one op (repeatable)")
    p.add_argument("--repeats", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--perturb", type=float, default=0.0, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: Optional[list] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    t0 = time.perf_counter()
    try:
        code = args.func(args)
    except (InputError, *INPUT_ERRORS) as err:
        log_event("error", kind=type(err).__name__, message=str(err))
        print(f"htr {args.command}: {err}", file=sys.stderr)
        return EXIT_INPUT
    except (NonFiniteError, Exception) as err:  # noqa: B014
        log_event("error", kind=type(err).__name__, message=str(err))
        print(f"htr {args.command}: runtime failure: {err}", file=sys.stderr)
        return EXIT_RUNTIME
    log_event("exit", command=args.command, code=code, seconds=round(time.perf_counter() - t0, 3))
    return code


if __name__ == "__main__":
    sys.exit(main())
