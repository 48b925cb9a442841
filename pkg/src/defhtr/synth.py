"""Synthetic text-line images rendered from the built-in bitmap font.

A dataset directory holds ``images/*.pgm``, ``manifest.tsv``,
``charset.txt`` and ``generator.json``; it is a pure function of the
generator arguments and the seed.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import font
from .data import Charset, ensure_dir, write_manifest, write_pgm
from .tensor import ContractError


@dataclass
class DistortionConfig:
    """Symmetric ranges; a zero range disables that distortion.

    Angles are radians; scales are fractional deviations from 1; brightness
    and noise are fractions of the 8-bit range.
    """

    shear: float = 0.0
    rotation: float = 0.0
    scale_x: float = 0.0
    scale_y: float = 0.0
    brightness: float = 0.0
    noise: float = 0.0
    seed: int = 0

    def is_identity(self) -> bool:
        return not any((self.shear, self.rotation, self.scale_x, self.scale_y, self.brightness, self.noise))


MILD = DistortionConfig(shear=0.15, rotation=0.03, scale_x=0.08, scale_y=0.05, brightness=0.05, noise=0.03)
HEAVY = DistortionConfig(shear=0.45, rotation=0.08, scale_x=0.2, scale_y=0.12, brightness=0.15, noise=0.08)


def render_text(text: str, pixel_scale: int = 1, margin=0) -> np.ndarray:
    """Ink coverage in [0, 1] of ``text`` set in the built-in font.

    ``margin`` is a pixel count for all sides or a ``(vertical, horizontal)`` pair.
    """
    if not text:
        cells = np.zeros((font.GLYPH_HEIGHT, font.ADVANCE), dtype=bool)
    else:
        cells = np.concatenate([font.glyph(ch) for ch in text], axis=1)
    ink = np.kron(cells, np.ones((pixel_scale, pixel_scale), dtype=bool)).astype(np.float32)
    my, mx = (margin, margin) if np.isscalar(margin) else margin
    if my or mx:
        ink = np.pad(ink, ((my, my), (mx, mx)))
    return ink


def ink_to_gray(ink: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(255.0 * (1.0 - ink)), 0, 255).astype(np.uint8)


def affine_warp(ink: np.ndarray, shear: float = 0.0, rotation: float = 0.0, sx: float = 1.0,
                sy: float = 1.0) -> np.ndarray:
    """Apply ``rotation . shear . scale`` about the image centre.

    Shear moves rows above the centre to the right by ``tan(shear)`` columns
    per row of height. The canvas grows to hold the whole transformed image;
    uncovered pixels are paper (zero ink).
    """
    h, w = ink.shape
    c, s = np.cos(rotation), np.sin(rotation)
    rot = np.array([[c, -s], [s, c]])
    shr = np.array([[1.0, -np.tan(shear)], [0.0, 1.0]])
    scl = np.diag([sx, sy])
    a = rot @ shr @ scl  # acts on (x, y) column vectors
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    corners = np.array([[-0.5, -0.5], [w - 0.5, -0.5], [-0.5, h - 0.5], [w - 0.5, h - 0.5]]) - [cx, cy]
    moved = corners @ a.T
    lo = np.floor(moved.min(axis=0) + 0.5)
    hi = np.ceil(moved.max(axis=0) - 0.5)
    out_w, out_h = int(hi[0] - lo[0]) + 1, int(hi[1] - lo[1]) + 1
    xs, ys = np.meshgrid(np.arange(out_w) + lo[0], np.arange(out_h) + lo[1])
    src = np.linalg.solve(a, np.stack([xs.ravel(), ys.ravel()]))
    sxs, sys_ = src[0] + cx, src[1] + cy
    return _bilinear(ink, sys_, sxs).reshape(out_h, out_w).astype(np.float32)


def _bilinear(img: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    h, w = img.shape
    y0, x0 = np.floor(ys).astype(int), np.floor(xs).astype(int)
    fy, fx = ys - y0, xs - x0
    out = np.zeros(ys.shape)
    for dy, wy in ((0, 1 - fy), (1, fy)):
        for dx, wx in ((0, 1 - fx), (1, fx)):
            yy, xx = y0 + dy, x0 + dx
            ok = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
            out[ok] += (wy * wx)[ok] * img[yy[ok], xx[ok]]
    return out


def distort(ink: np.ndarray, cfg: DistortionConfig, rng: np.random.Generator) -> np.ndarray:
    """Sample one set of distortion parameters and return the 8-bit line image."""
    if cfg.is_identity():
        return ink_to_gray(ink)
    u = lambda r: rng.uniform(-r, r) if r else 0.0  # noqa: E731
    shear, rotation = u(cfg.shear), u(cfg.rotation)
    sx, sy = 1.0 + u(cfg.scale_x), 1.0 + u(cfg.scale_y)
    brightness = u(cfg.brightness)
    if shear or rotation or sx != 1.0 or sy != 1.0:
        ink = affine_warp(ink, shear, rotation, sx, sy)
    gray = 255.0 * (1.0 - ink) + 255.0 * brightness
    if cfg.noise:
        gray = gray + rng.normal(0.0, 255.0 * cfg.noise, gray.shape)
    return np.clip(np.rint(gray), 0, 255).astype(np.uint8)


def random_line(symbols: Sequence[str], rng: np.random.Generator, min_len: int, max_len: int) -> str:
    """Random string over the charset; spaces (if present) never lead, trail or repeat."""
    letters = [s for s in symbols if s != " "]
    n = int(rng.integers(min_len, max_len + 1))
    chars = [letters[i] for i in rng.integers(0, len(letters), n)]
    if " " in symbols and n >= 3:
        for pos in range(1, n - 1):
            if chars[pos - 1] != " " and rng.random() < 0.15:
                chars[pos] = " "
    return "".join(chars)


@dataclass
class SynthSpec:
    count: int = 100
    charset: str = "abcdehilmnorstu "
    distortion: DistortionConfig = field(default_factory=DistortionConfig)
    min_len: int = 3
    max_len: int = 7
    pixel_scale: int = 1
    margin_y: int = 8
    margin_x: int = 2
    corpus: Optional[list] = None
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        d = dict(d)
        dist = d.pop("distortion", {}) or {}
        return cls(distortion=DistortionConfig(**dist), **d)


def synth_generate(out_dir, spec: SynthSpec) -> Path:
    """Render ``spec.count`` lines into a dataset directory."""
    symbols = list(spec.charset)
    missing = font.covers(symbols)
    if missing:
        raise font.MissingGlyphError(f"no glyph for symbol {missing[0]!r}")
    charset = Charset(symbols)
    corpus = None
    if spec.corpus:
        corpus = [line for line in spec.corpus if line and not charset.missing(line)]
        if not corpus:
            raise ContractError("no corpus line is covered by the charset")
    out = ensure_dir(out_dir)
    ensure_dir(out / "images")
    rng = np.random.default_rng([spec.seed, spec.distortion.seed])
    rows = []
    width = max(5, len(str(spec.count - 1)))
    for k in range(spec.count):
        if corpus is not None:
            text = corpus[int(rng.integers(0, len(corpus)))]
        else:
            text = random_line(symbols, rng, spec.min_len, spec.max_len)
        ink = render_text(text, spec.pixel_scale, (spec.margin_y, spec.margin_x))
        gray = distort(ink, spec.distortion, rng)
        rel = f"images/{k:0{width}d}.pgm"
        write_pgm(out / rel, gray)
        rows.append((rel, text))
    write_manifest(out / "manifest.tsv", rows)
    charset.save(out / "charset.txt")
    with open(out / "generator.json", "w", encoding="utf-8") as fh:
        json.dump(spec.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return out
