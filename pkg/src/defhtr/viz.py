"""Offset-magnitude maps and receptive-field masks, with PGM/PPM and PNG renders."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .data import to_uint8, write_pgm, write_ppm
from .models import Conv, ModelGraph, Pool
from .tensor import ContractError

EDGE_THRESHOLD = 0.5
STANDARD_RGB = (0, 90, 255)
DEFORMABLE_RGB = (255, 30, 0)


def _forward_capture(model: ModelGraph, image: np.ndarray) -> dict:
    capture = {}
    model.forward(image[None, None].astype(np.float32), [image.shape[1]], train=False, capture=capture)
    return capture


def _deformable_conv(model: ModelGraph, layer: int) -> Conv:
    convs = model.conv_layers()
    if not 0 <= layer < len(convs):
        raise ContractError(f"layer index {layer} outside [0, {len(convs)})")
    conv = convs[layer]
    if conv.offset_params is None:
        raise ContractError(f"convolution {layer} ({conv.name}) is not deformable")
    return conv


# ----------------------------------------------------------------- offset magnitudes

def offset_magnitude(offsets: np.ndarray) -> np.ndarray:
    """Sum over kernel cells of the Euclidean length of each (dy, dx) pair.

    ``offsets`` is ``(2k, H, W)``; the result is ``(H, W)``.
    """
    k2, h, w = offsets.shape
    pairs = offsets.reshape(k2 // 2, 2, h, w).astype(np.float64)
    return np.sqrt((pairs ** 2).sum(axis=1)).sum(axis=0)


def offset_magnitude_map(model: ModelGraph, image: np.ndarray, layer: int = 0) -> np.ndarray:
    """Cumulative offset magnitude of deformable convolution ``layer`` for one normalized line image."""
    conv = _deformable_conv(model, layer)
    return offset_magnitude(_forward_capture(model, image)[conv.name][0])


def render_gray(values: np.ndarray) -> np.ndarray:
    """Min-max scale to 8 bits; a constant map renders black."""
    lo, hi = float(values.min()), float(values.max())
    if hi - lo <= 0:
        return np.zeros(values.shape, dtype=np.uint8)
    return np.rint(255.0 * (values - lo) / (hi - lo)).astype(np.uint8)


def edge_mask(image: np.ndarray, threshold: float = EDGE_THRESHOLD) -> np.ndarray:
    """Pixels whose horizontal or vertical forward difference exceeds ``threshold``."""
    mask = np.zeros(image.shape, dtype=bool)
    dx = np.abs(np.diff(image, axis=1)) > threshold
    dy = np.abs(np.diff(image, axis=0)) > threshold
    mask[:, :-1] |= dx
    mask[:-1, :] |= dy
    return mask


def downsample_mask(mask: np.ndarray, shape: tuple) -> np.ndarray:
    """A cell of the coarse grid is set when any input pixel it spans is set."""
    h, w = mask.shape
    ho, wo = shape
    out = np.zeros(shape, dtype=bool)
    for i in range(ho):
        r0, r1 = int(np.floor(i * h / ho)), int(np.ceil((i + 1) * h / ho))
        for j in range(wo):
            c0, c1 = int(np.floor(j * w / wo)), int(np.ceil((j + 1) * w / wo))
            out[i, j] = mask[r0:r1, c0:c1].any()
    return out


@dataclass
class EdgeContrast:
    edge_mean: float
    background_mean: float
    edge_pixels: int
    background_pixels: int

    @property
    def ratio(self) -> float:
        if self.background_mean == 0:
            return float("inf") if self.edge_mean > 0 else float("nan")
        return self.edge_mean / self.background_mean


def edge_contrast(magnitude: np.ndarray, image: np.ndarray, threshold: float = EDGE_THRESHOLD) -> EdgeContrast:
    edges = edge_mask(image, threshold)
    if edges.shape != magnitude.shape:
        edges = downsample_mask(edges, magnitude.shape)
    return EdgeContrast(float(magnitude[edges].mean()) if edges.any() else float("nan"),
                        float(magnitude[~edges].mean()) if (~edges).any() else float("nan"),
                        int(edges.sum()), int((~edges).sum()))


# ----------------------------------------------------------------- receptive fields

def _stack(model: ModelGraph) -> list:
    return [l for l in model.layers if isinstance(l, (Conv, Pool))]


def _geometry(layer) -> tuple:
    if isinstance(layer, Conv):
        p = layer.params
        return p.kernel, p.stride, p.padding, p.dilation
    s = layer.spec
    return s.kernel, s.stride, s.padding, (1, 1)


def rf_rectangle(model: ModelGraph, height: int, width: int, column: int) -> tuple:
    """Closed-form receptive field ``(row0, row1, col0, col1)`` (inclusive) of a lattice column.

    Interval arithmetic back through every convolution and pool, clipped to
    the image at the end.
    """
    h_out, w_out, _ = model.feature_shape(width, height)
    if not 0 <= column < w_out:
        raise ContractError(f"column {column} outside the lattice [0, {w_out})")
    r0, r1, c0, c1 = 0, h_out - 1, column, column
    for layer in reversed(_stack(model)):
        (kh, kw), (sh, sw), (ph, pw), (dh, dw) = _geometry(layer)
        r0, r1 = r0 * sh - ph, r1 * sh - ph + (kh - 1) * dh
        c0, c1 = c0 * sw - pw, c1 * sw - pw + (kw - 1) * dw
    return max(r0, 0), min(r1, height - 1), max(c0, 0), min(c1, width - 1)


def _dense_back(mask: np.ndarray, in_shape: tuple, geometry: tuple) -> np.ndarray:
    (kh, kw), (sh, sw), (ph, pw), (dh, dw) = geometry
    h, w = in_shape
    out = np.zeros(in_shape, dtype=bool)
    rows, cols = np.nonzero(mask)
    for i in range(kh):
        for j in range(kw):
            y = rows * sh - ph + i * dh
            x = cols * sw - pw + j * dw
            ok = (y >= 0) & (y < h) & (x >= 0) & (x < w)
            out[y[ok], x[ok]] = True
    return out


def _deformable_back(mask: np.ndarray, in_shape: tuple, geometry: tuple, offsets: np.ndarray) -> np.ndarray:
    """Mark every lattice point with positive bilinear weight for an active output pixel."""
    (kh, kw), (sh, sw), (ph, pw), (dh, dw) = geometry
    h, w = in_shape
    out = np.zeros(in_shape, dtype=bool)
    rows, cols = np.nonzero(mask)
    for i in range(kh):
        for j in range(kw):
            cell = i * kw + j
            y = rows * sh - ph + i * dh + offsets[2 * cell, rows, cols].astype(np.float64)
            x = cols * sw - pw + j * dw + offsets[2 * cell + 1, rows, cols].astype(np.float64)
            y0, x0 = np.floor(y).astype(int), np.floor(x).astype(int)
            fy, fx = y - y0, x - x0
            for ddy, wy in ((0, 1 - fy), (1, fy)):
                for ddx, wx in ((0, 1 - fx), (1, fx)):
                    yy, xx = y0 + ddy, x0 + ddx
                    ok = (wy * wx > 0) & (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
                    out[yy[ok], xx[ok]] = True
    return out


def receptive_field(model: ModelGraph, image: np.ndarray, column: int) -> np.ndarray:
    """Input pixels that one lattice column samples, backtracked through the stack.

    Deformable layers contribute the bilinear neighbourhoods of their actual
    (offset) sampling positions for this image, so the mask may be irregular
    and non-connected.
    """
    height, width = image.shape
    trace = model.trace(height, width)
    stack = _stack(model)
    shapes = [(height, width)]
    for kind, (c, h, w) in trace:
        if kind in ("std_conv", "deformable_layer", "max_pool"):
            shapes.append((h, w))
    h_out, w_out = shapes[-1]
    if not 0 <= column < w_out:
        raise ContractError(f"column {column} outside the lattice [0, {w_out})")
    capture = _forward_capture(model, image) if any(
        isinstance(l, Conv) and l.offset_params is not None for l in stack) else {}
    mask = np.zeros((h_out, w_out), dtype=bool)
    mask[:, column] = True
    for idx in range(len(stack) - 1, -1, -1):
        layer = stack[idx]
        in_shape = shapes[idx]
        if isinstance(layer, Conv) and layer.offset_params is not None:
            mask = _deformable_back(mask, in_shape, _geometry(layer), capture[layer.name][0])
        else:
            mask = _dense_back(mask, in_shape, _geometry(layer))
    return mask


def rectangle_mask(shape: tuple, rect: tuple) -> np.ndarray:
    r0, r1, c0, c1 = rect
    mask = np.zeros(shape, dtype=bool)
    mask[r0:r1 + 1, c0:c1 + 1] = True
    return mask


def overlay(image: np.ndarray, masks: Sequence[tuple], alpha: float = 0.45) -> np.ndarray:
    """Blend ``(mask, rgb)`` layers over a normalized gray image; returns ``(H, W, 3)`` uint8."""
    gray = to_uint8(image).astype(np.float64)
    rgb = np.repeat(gray[..., None], 3, axis=2)
    for mask, color in masks:
        rgb[mask] = (1 - alpha) * rgb[mask] + alpha * np.asarray(color, dtype=np.float64)
    return np.clip(np.rint(rgb), 0, 255).astype(np.uint8)


def write_offset_map(path, magnitude: np.ndarray) -> None:
    write_pgm(path, render_gray(magnitude))


def write_rf_overlay(path, image: np.ndarray, mask: np.ndarray, deformable: bool) -> None:
    write_ppm(path, overlay(image, [(mask, DEFORMABLE_RGB if deformable else STANDARD_RGB)]))


# ----------------------------------------------------------------- matplotlib figures

def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_training_curves(records: Sequence[dict], path, title: Optional[str] = None) -> None:
    plt = _pyplot()
    epochs = [r["epoch"] for r in records]
    fig, (ax_loss, ax_cer) = plt.subplots(1, 2, figsize=(9, 3.2))
    ax_loss.plot(epochs, [r["mean_loss"] for r in records], color="black")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("mean CTC loss")
    ax_cer.plot(epochs, [100 * r["val_cer"] for r in records], label="CER", color="tab:red")
    ax_cer.plot(epochs, [100 * r["val_wer"] for r in records], label="WER", color="tab:blue")
    ax_cer.set_xlabel("epoch")
    ax_cer.set_ylabel("validation error (%)")
    ax_cer.legend(frameon=False)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_offset_map(image: np.ndarray, magnitude: np.ndarray, path, layer: int = 0) -> None:
    plt = _pyplot()
    fig, (ax_img, ax_mag) = plt.subplots(2, 1, figsize=(8, 4))
    ax_img.imshow(image, cmap="gray", vmin=-1, vmax=1)
    ax_img.set_title("input")
    shown = ax_mag.imshow(magnitude, cmap="magma")
    ax_mag.set_title(f"cumulative offset magnitude, deformable layer {layer}")
    fig.colorbar(shown, ax=ax_mag, fraction=0.025)
    for ax in (ax_img, ax_mag):
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_receptive_field(image: np.ndarray, mask: np.ndarray, path, deformable: bool,
                         rectangle: Optional[np.ndarray] = None) -> None:
    plt = _pyplot()
    layers = []
    if rectangle is not None:
        layers.append((rectangle, STANDARD_RGB))
    layers.append((mask, DEFORMABLE_RGB if deformable else STANDARD_RGB))
    fig, ax = plt.subplots(figsize=(8, 2.5))
    ax.imshow(overlay(image, layers))
    ax.set_title(f"receptive field ({'deformable' if deformable else 'standard'}), {int(mask.sum())} pixels")
    ax.set_xticks([])
    ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
