"""Line images, charsets, manifests and batching.

Images are float32 ``(H, W)`` arrays in ``[-1, 1]`` with dark ink (low
values). PGM (P5, 8-bit) is the on-disk codec.
"""
from __future__ import annotations

import hashlib
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from .tensor import ContractError

PAD_VALUE = 1.0


class ImageFormatError(ValueError):
    pass


class ManifestError(ValueError):
    pass


# ----------------------------------------------------------------- PGM / PPM

def _read_token(buf: bytes, pos: int):
    """Next whitespace-separated header token, skipping ``#`` comments."""
    n = len(buf)
    while pos < n:
        if buf[pos:pos + 1] == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif buf[pos:pos + 1].isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise ImageFormatError(f"unexpected end of header at byte {start}")
    return buf[start:pos], pos


def _parse_netpbm(buf: bytes, magic: bytes, channels: int) -> np.ndarray:
    if buf[:2] != magic:
        raise ImageFormatError(f"expected {magic.decode()} magic at byte 0, found {buf[:2]!r}")
    pos = 2
    fields = []
    for label in ("width", "height", "maxval"):
        tok, pos = _read_token(buf, pos)
        if not tok.isdigit():
            raise ImageFormatError(f"bad {label} {tok!r} at byte {pos - len(tok)}")
        fields.append(int(tok))
    width, height, maxval = fields
    if maxval != 255:
        raise ImageFormatError(f"only 8-bit images are supported, maxval {maxval} at byte {pos - 3}")
    if width < 1 or height < 1:
        raise ImageFormatError(f"zero-sized image {width}x{height}")
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise ImageFormatError(f"missing whitespace after header at byte {pos}")
    pos += 1
    need = width * height * channels
    payload = buf[pos:pos + need]
    if len(payload) != need:
        raise ImageFormatError(f"truncated payload: {len(payload)} of {need} bytes after byte {pos}")
    arr = np.frombuffer(payload, dtype=np.uint8)
    return arr.reshape((height, width, channels) if channels > 1 else (height, width)).copy()


def read_pgm(path) -> np.ndarray:
    return _parse_netpbm(Path(path).read_bytes(), b"P5", 1)


def read_ppm(path) -> np.ndarray:
    return _parse_netpbm(Path(path).read_bytes(), b"P6", 3)


def write_pgm(path, pixels: np.ndarray) -> None:
    pixels = np.asarray(pixels)
    if pixels.ndim != 2 or pixels.dtype != np.uint8:
        raise ContractError(f"PGM needs a 2D uint8 array, got {pixels.shape} {pixels.dtype}")
    h, w = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def write_ppm(path, pixels: np.ndarray) -> None:
    pixels = np.asarray(pixels)
    if pixels.ndim != 3 or pixels.shape[2] != 3 or pixels.dtype != np.uint8:
        raise ContractError(f"PPM needs an (H, W, 3) uint8 array, got {pixels.shape} {pixels.dtype}")
    h, w, _ = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def normalize(pixels: np.ndarray) -> np.ndarray:
    """8-bit gray to ``[-1, 1]``."""
    return (2.0 * (pixels.astype(np.float32) / 255.0) - 1.0).astype(np.float32)


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint((np.asarray(image) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def load_image(path) -> np.ndarray:
    return normalize(read_pgm(path))


# ----------------------------------------------------------------- resampling

def round_half_away(x: float) -> int:
    return int(math.floor(abs(x) + 0.5)) * (1 if x >= 0 else -1)


def _axis_weights(n_out: int, n_in: int):
    scale = n_in / n_out
    src = np.clip((np.arange(n_out) + 0.5) * scale - 0.5, 0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = (src - lo).astype(np.float32)
    return lo, hi, frac


def resize(image: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resampling with pixel-centre alignment and edge clamping."""
    h, w = image.shape
    if h == height and w == width:
        return image.copy()
    lo, hi, f = _axis_weights(height, h)
    rows = image[lo] * (1 - f)[:, None] + image[hi] * f[:, None]
    lo, hi, f = _axis_weights(width, w)
    out = rows[:, lo] * (1 - f)[None, :] + rows[:, hi] * f[None, :]
    return out.astype(image.dtype)


def rescale_height(image: np.ndarray, target_h: int) -> np.ndarray:
    """Resize to ``target_h`` rows keeping the aspect ratio.

    The new width is ``old_w * target_h / old_h`` rounded half away from
    zero, at least 1.
    """
    h, w = image.shape
    if h < 1 or w < 1 or target_h < 1:
        raise ContractError(f"cannot rescale a {h}x{w} image to height {target_h}")
    new_w = max(1, round_half_away(w * target_h / h))
    return resize(image, target_h, new_w)


# ----------------------------------------------------------------- charset

class Charset:
    """Ordered symbols; index 0 is the CTC blank, symbols start at 1."""

    def __init__(self, symbols: Sequence[str]):
        symbols = list(symbols)
        if len(set(symbols)) != len(symbols):
            dupes = sorted({s for s in symbols if symbols.count(s) > 1})
            raise ContractError(f"duplicate charset symbols: {dupes}")
        if any(s == "" for s in symbols):
            raise ContractError("empty string is not a valid symbol")
        self.symbols = symbols
        self.index = {s: i + 1 for i, s in enumerate(symbols)}
        self._longest = max((len(s) for s in symbols), default=1)

    def __len__(self) -> int:
        return len(self.symbols)

    def __eq__(self, other) -> bool:
        return isinstance(other, Charset) and other.symbols == self.symbols

    def __repr__(self) -> str:
        return f"Charset({''.join(self.symbols)!r})"

    @property
    def size(self) -> int:
        """Number of classes including blank."""
        return len(self.symbols) + 1

    def digest(self) -> str:
        return hashlib.sha256("\n".join(self.symbols).encode("utf-8")).hexdigest()[:16]

    def tokenize(self, text: str) -> list:
        """Split text into charset symbols by longest match."""
        out, pos = [], 0
        while pos < len(text):
            for n in range(min(self._longest, len(text) - pos), 0, -1):
                piece = text[pos:pos + n]
                if piece in self.index:
                    out.append(piece)
                    pos += n
                    break
            else:
                raise KeyError(text[pos])
        return out

    def encode(self, text: str) -> list:
        return [self.index[s] for s in self.tokenize(text)]

    def decode(self, indices: Sequence[int]) -> str:
        return "".join(self.symbols[i - 1] for i in indices if i > 0)

    def missing(self, text: str) -> list:
        """Characters of ``text`` that no symbol covers."""
        bad = []
        pos = 0
        while pos < len(text):
            for n in range(min(self._longest, len(text) - pos), 0, -1):
                if text[pos:pos + n] in self.index:
                    pos += n
                    break
            else:
                bad.append(text[pos])
                pos += 1
        return bad

    @classmethod
    def from_texts(cls, texts: Sequence[str]) -> "Charset":
        return cls(sorted({ch for t in texts for ch in t}))

    @classmethod
    def load(cls, path) -> "Charset":
        text = Path(path).read_text(encoding="utf-8")
        lines = text.split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls(lines)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for s in self.symbols:
                fh.write(s + "\n")


# ----------------------------------------------------------------- samples and manifests

@dataclass
class Sample:
    image: np.ndarray
    text: str
    source: str = ""


def load_manifest(path, charset: Optional[Charset] = None) -> list:
    """Read a ``path<TAB>text`` manifest; image paths are relative to its directory."""
    path = Path(path)
    root = path.parent
    samples = []
    with open(path, encoding="utf-8", newline="\n") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.rstrip("\n")
            if not line:
                continue
            if "\t" not in line:
                raise ManifestError(f"{path}:{lineno}: expected 'path<TAB>text'")
            rel, text = line.split("\t", 1)
            if charset is not None:
                bad = charset.missing(text)
                if bad:
                    raise ManifestError(f"{path}:{lineno}: symbol {bad[0]!r} is not in the charset")
            img_path = root / rel
            if not img_path.is_file():
                raise ManifestError(f"{path}:{lineno}: missing image {img_path}")
            samples.append(Sample(load_image(img_path), text, rel))
    return samples


def write_manifest(path, rows: Sequence[tuple]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rel, text in rows:
            fh.write(f"{rel}\t{text}\n")


def prepare(samples: Sequence[Sample], height: int) -> list:
    """Rescale every sample to the model's input height."""
    return [Sample(rescale_height(s.image, height) if s.image.shape[0] != height else s.image, s.text, s.source)
            for s in samples]


@dataclass
class Batch:
    images: np.ndarray  # (B, 1, H, W)
    widths: list
    texts: list
    sources: list


def pad_batch(samples: Sequence[Sample]) -> Batch:
    h = samples[0].image.shape[0]
    if any(s.image.shape[0] != h for s in samples):
        raise ContractError("all images in a batch must share one height")
    width = max(s.image.shape[1] for s in samples)
    images = np.full((len(samples), 1, h, width), PAD_VALUE, dtype=np.float32)
    for j, s in enumerate(samples):
        images[j, 0, :, :s.image.shape[1]] = s.image
    return Batch(images, [s.image.shape[1] for s in samples], [s.text for s in samples],
                 [s.source for s in samples])


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch, 0x5EED]).permutation(n)


def batches(samples: Sequence[Sample], batch_size: int, seed: int = 0, epoch: int = 0,
            shuffle: bool = True) -> Iterator[Batch]:
    """Padded batches in an order fixed by ``(seed, epoch)``."""
    order = epoch_order(len(samples), seed, epoch) if shuffle else np.arange(len(samples))
    for start in range(0, len(order), batch_size):
        yield pad_batch([samples[i] for i in order[start:start + batch_size]])


def split(samples: Sequence, fractions: Sequence[float], seed: int = 0) -> list:
    """Deterministic random partition into consecutive fractional parts."""
    order = np.random.default_rng([seed, 0x5917]).permutation(len(samples))
    out, start = [], 0
    for k, frac in enumerate(fractions):
        stop = len(samples) if k == len(fractions) - 1 else start + int(round(frac * len(samples)))
        out.append([samples[i] for i in order[start:stop]])
        start = stop
    return out


def ensure_dir(path) -> Path:
    p = Path(path)
    os.makedirs(p, exist_ok=True)
    return p
