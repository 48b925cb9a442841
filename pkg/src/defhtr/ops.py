"""Differentiable spatial operators.

Feature maps are batched ``(B, C, H, W)`` arrays; unbatched ``(C, H, W)``
inputs are accepted by the convolution entry points and returned unbatched.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .tensor import ContractError, Tensor, record, reshape


def _pair(v) -> tuple:
    if isinstance(v, (tuple, list)):
        return (int(v[0]), int(v[1]))
    return (int(v), int(v))


def out_extent(size: int, k: int, stride: int, pad: int, dil: int = 1) -> int:
    return (size + 2 * pad - dil * (k - 1) - 1) // stride + 1


@dataclass
class ConvParams:
    weight: Tensor
    bias: Optional[Tensor] = None
    stride: tuple = (1, 1)
    padding: tuple = (0, 0)
    dilation: tuple = (1, 1)

    def __post_init__(self):
        self.stride = _pair(self.stride)
        self.padding = _pair(self.padding)
        self.dilation = _pair(self.dilation)
        if self.weight.ndim != 4:
            raise ContractError(f"conv weight must be c_out x c_in x k_h x k_w, got {self.weight.shape}")
        if min(self.stride) < 1 or min(self.dilation) < 1 or min(self.padding) < 0:
            raise ContractError(f"bad conv geometry stride={self.stride} dilation={self.dilation} padding={self.padding}")
        if self.bias is not None and self.bias.shape != (self.c_out,):
            raise ContractError(f"bias shape {self.bias.shape} does not match {self.c_out} filters")

    @property
    def c_out(self) -> int:
        return self.weight.shape[0]

    @property
    def c_in(self) -> int:
        return self.weight.shape[1]

    @property
    def kernel(self) -> tuple:
        return self.weight.shape[2], self.weight.shape[3]

    def out_shape(self, h: int, w: int) -> tuple:
        (kh, kw), (sh, sw), (ph, pw), (dh, dw) = self.kernel, self.stride, self.padding, self.dilation
        ho, wo = out_extent(h, kh, sh, ph, dh), out_extent(w, kw, sw, pw, dw)
        if ho < 1 or wo < 1:
            raise ContractError(
                f"degenerate conv output {ho}x{wo} for input {h}x{w}, kernel {kh}x{kw}, "
                f"stride {self.stride}, padding {self.padding}, dilation {self.dilation}")
        return ho, wo

    def tensors(self) -> list:
        return [self.weight] + ([self.bias] if self.bias is not None else [])


def _batched(x: Tensor):
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim != 4:
        raise ContractError(f"expected c x H x W or b x c x H x W input, got {x.shape}")
    return x, False


def _unbatch(out: Tensor) -> Tensor:
    return record("squeeze", (out,), out.data[0], lambda g: (g[None],))


# ----------------------------------------------------------------- im2col core

def _im2col(x: np.ndarray, p: ConvParams, ho: int, wo: int) -> np.ndarray:
    b, c, h, w = x.shape
    (kh, kw), (sh, sw), (ph, pw), (dh, dw) = p.kernel, p.stride, p.padding, p.dilation
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x
    cols = np.empty((b, c, kh * kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            y0, x0 = i * dh, j * dw
            cols[:, :, i * kw + j] = xp[:, :, y0:y0 + sh * (ho - 1) + 1:sh, x0:x0 + sw * (wo - 1) + 1:sw]
    return cols.reshape(b, c * kh * kw, ho * wo)


def _col2im(dcols: np.ndarray, shape: tuple, p: ConvParams, ho: int, wo: int) -> np.ndarray:
    b, c, h, w = shape
    (kh, kw), (sh, sw), (ph, pw), (dh, dw) = p.kernel, p.stride, p.padding, p.dilation
    dcols = dcols.reshape(b, c, kh * kw, ho, wo)
    dxp = np.zeros((b, c, h + 2 * ph, w + 2 * pw), dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            y0, x0 = i * dh, j * dw
            dxp[:, :, y0:y0 + sh * (ho - 1) + 1:sh, x0:x0 + sw * (wo - 1) + 1:sw] += dcols[:, :, i * kw + j]
    return dxp[:, :, ph:ph + h, pw:pw + w]


def _apply_kernel(cols: np.ndarray, p: ConvParams, ho: int, wo: int) -> np.ndarray:
    wmat = p.weight.data.reshape(p.c_out, -1)
    out = np.matmul(wmat, cols)
    if p.bias is not None:
        out += p.bias.data[None, :, None]
    return out.reshape(cols.shape[0], p.c_out, ho, wo)


def _kernel_grads(g: np.ndarray, cols: np.ndarray, p: ConvParams):
    """Gradients of the weighted sum w.r.t. (cols, weight, bias)."""
    b = g.shape[0]
    g2 = g.reshape(b, p.c_out, -1)
    wmat = p.weight.data.reshape(p.c_out, -1)
    dw = np.einsum("bon,bkn->ok", g2, cols, optimize=True).reshape(p.weight.shape)
    dcols = np.matmul(wmat.T, g2)
    db = g2.sum(axis=(0, 2)) if p.bias is not None else None
    return dcols, dw, db


def std_conv(x: Tensor, p: ConvParams) -> Tensor:
    """Standard 2D convolution (cross-correlation) with zero padding."""
    xb, squeeze = _batched(x)
    if xb.shape[1] != p.c_in:
        raise ContractError(f"std_conv: input has {xb.shape[1]} channels, kernel expects {p.c_in}")
    ho, wo = p.out_shape(xb.shape[2], xb.shape[3])
    cols = _im2col(xb.data, p, ho, wo)
    out = _apply_kernel(cols, p, ho, wo)
    shape = xb.shape

    def grad(g):
        dcols, dw, db = _kernel_grads(g, cols, p)
        dx = _col2im(dcols, shape, p, ho, wo) if xb.requires_grad else None
        return (dx, dw, db) if p.bias is not None else (dx, dw)

    res = record("std_conv", (xb, *p.tensors()), out, grad)
    return _unbatch(res) if squeeze else res


# ----------------------------------------------------------------- bilinear sampling

def _csr(data, indices, indptr, shape):
    m = sp.csr_matrix(shape, dtype=data.dtype)
    m.data, m.indices, m.indptr = data, indices, indptr
    return m


class _Sampler:
    """Sparse bilinear gather of fractional positions from a ``(B, C, H, W)`` map.

    Each of the R sampled points touches at most four lattice points; lattice
    points outside the map contribute zero. The interpolation cell of a point
    is ``[floor(y), floor(y) + 1) x [floor(x), floor(x) + 1)``, so coordinate
    derivatives at integer positions use the right-continuous branch.
    """

    def __init__(self, ys: np.ndarray, xs: np.ndarray, h: int, w: int):
        # ys, xs: (B, R)
        b, r = ys.shape
        fy, y0 = np.modf(ys)
        fx, x0 = np.modf(xs)
        # modf truncates toward zero; shift negative fractions to floor semantics
        neg = fy < 0
        fy[neg] += 1
        y0[neg] -= 1
        neg = fx < 0
        fx[neg] += 1
        x0[neg] -= 1
        y0 = y0.astype(np.int32)
        x0 = x0.astype(np.int32)
        one = ys.dtype.type(1)
        vy = ((y0 >= 0) & (y0 < h), (y0 >= -1) & (y0 < h - 1))
        vx = ((x0 >= 0) & (x0 < w), (x0 >= -1) & (x0 < w - 1))
        wy = ((one - fy) * vy[0], fy * vy[1])
        wx = ((one - fx) * vx[0], fx * vx[1])
        ry = (np.clip(y0, 0, h - 1) * w, np.clip(y0 + 1, 0, h - 1) * w)
        rx = (np.clip(x0, 0, w - 1), np.clip(x0 + 1, 0, w - 1))
        base = (np.arange(b, dtype=np.int32) * (h * w))[:, None]
        corners = ((0, 0), (0, 1), (1, 0), (1, 1))
        idx = np.stack([base + ry[dy] + rx[dx] for dy, dx in corners], axis=-1)
        wts = np.stack([wy[dy] * wx[dx] for dy, dx in corners], axis=-1)
        gy = np.stack([(wx[dx] if dy else -wx[dx]) * vy[dy] for dy, dx in corners], axis=-1)
        gx = np.stack([(wy[dy] if dx else -wy[dy]) * vx[dx] for dy, dx in corners], axis=-1)
        rows = b * r
        indptr = np.arange(0, 4 * rows + 1, 4, dtype=np.int32)
        shape = (rows, b * h * w)
        flat = idx.reshape(-1)
        self.weights = wts
        self.idx = idx
        self.interp = _csr(wts.reshape(-1), flat, indptr, shape)
        self.dy = _csr(gy.reshape(-1), flat, indptr, shape)
        self.dx = _csr(gx.reshape(-1), flat, indptr, shape)
        self.b, self.r = b, r

    @staticmethod
    def rows(x: np.ndarray) -> np.ndarray:
        b, c, h, w = x.shape
        return np.ascontiguousarray(x.transpose(0, 2, 3, 1)).reshape(b * h * w, c)

    def gather(self, xrows: np.ndarray) -> np.ndarray:
        return self.interp @ xrows  # (B*R, C)

    def scatter(self, grows: np.ndarray, shape: tuple) -> np.ndarray:
        b, c, h, w = shape
        d = self.interp.T @ grows
        return np.ascontiguousarray(d.reshape(b, h, w, c).transpose(0, 3, 1, 2))

    def coord_grads(self, xrows: np.ndarray, grows: np.ndarray):
        gy = np.einsum("rc,rc->r", self.dy @ xrows, grows)
        gx = np.einsum("rc,rc->r", self.dx @ xrows, grows)
        return gy.reshape(self.b, self.r), gx.reshape(self.b, self.r)


def bilinear_weights(y: float, x: float):
    """The four (row, col, weight) lattice contributions of a fractional point."""
    y0, x0 = int(np.floor(y)), int(np.floor(x))
    fy, fx = y - y0, x - x0
    return [(y0, x0, (1 - fy) * (1 - fx)), (y0, x0 + 1, (1 - fy) * fx),
            (y0 + 1, x0, fy * (1 - fx)), (y0 + 1, x0 + 1, fy * fx)]


def bilinear_sample(x: Tensor, y, xc) -> Tensor:
    """Sample a ``(C, H, W)`` map at fractional coordinates.

    ``y`` and ``xc`` are tensors (or numbers) of equal shape ``S``; the result
    has shape ``S + (C,)``. Differentiable in the map and both coordinates.
    """
    if x.ndim != 3:
        raise ContractError(f"bilinear_sample expects c x H x W, got {x.shape}")
    yt = y if isinstance(y, Tensor) else Tensor(np.asarray(y, dtype=x.dtype))
    xt = xc if isinstance(xc, Tensor) else Tensor(np.asarray(xc, dtype=x.dtype))
    if yt.shape != xt.shape:
        raise ContractError(f"coordinate shapes differ: {yt.shape} vs {xt.shape}")
    c, h, w = x.shape
    s = _Sampler(yt.data.reshape(1, -1), xt.data.reshape(1, -1), h, w)
    xrows = _Sampler.rows(x.data[None])
    out = s.gather(xrows).reshape(yt.shape + (c,))

    def grad(g):
        grows = g.reshape(-1, c)
        dmap = s.scatter(grows, (1, c, h, w))[0]
        gy, gx = s.coord_grads(xrows, grows)
        return dmap, gy.reshape(yt.shape), gx.reshape(xt.shape)

    return record("bilinear_sample", (x, yt, xt), out.astype(x.dtype), grad)


# ----------------------------------------------------------------- deformable convolution

def _sampling_positions(p: ConvParams, ho: int, wo: int, offsets: np.ndarray):
    """Absolute sampling coordinates ``(B, K, ho*wo)`` of each kernel cell."""
    (kh, kw), (sh, sw), (ph, pw), (dh, dw) = p.kernel, p.stride, p.padding, p.dilation
    k = kh * kw
    b = offsets.shape[0]
    off = offsets.reshape(b, k, 2, ho * wo)
    oy = (np.arange(ho) * sh - ph).astype(offsets.dtype)
    ox = (np.arange(wo) * sw - pw).astype(offsets.dtype)
    ky = (np.repeat(np.arange(kh), kw) * dh).astype(offsets.dtype)
    kx = (np.tile(np.arange(kw), kh) * dw).astype(offsets.dtype)
    base_y = (ky[:, None, None] + oy[None, :, None]) + np.zeros((1, 1, wo), dtype=offsets.dtype)
    base_x = (kx[:, None, None] + ox[None, None, :]) + np.zeros((1, ho, 1), dtype=offsets.dtype)
    ys = base_y.reshape(k, -1)[None] + off[:, :, 0]
    xs = base_x.reshape(k, -1)[None] + off[:, :, 1]
    return ys, xs


def deform_conv(x: Tensor, p: ConvParams, offsets: Tensor) -> Tensor:
    """Deformable convolution: every kernel cell samples at its grid position
    plus a per-output-pixel offset, via bilinear interpolation.

    ``offsets`` has ``2*k_h*k_w`` channels; channels ``2j, 2j+1`` hold the
    (dy, dx) displacement of kernel cell ``j`` (row-major over the grid).
    """
    xb, squeeze = _batched(x)
    ob, _ = _batched(offsets)
    if xb.shape[1] != p.c_in:
        raise ContractError(f"deform_conv: input has {xb.shape[1]} channels, kernel expects {p.c_in}")
    b, c, h, w = xb.shape
    ho, wo = p.out_shape(h, w)
    k = p.kernel[0] * p.kernel[1]
    if ob.shape != (b, 2 * k, ho, wo):
        raise ContractError(f"offset field shape {ob.shape} does not match expected {(b, 2 * k, ho, wo)}")
    ys, xs = _sampling_positions(p, ho, wo, ob.data)
    sampler = _Sampler(ys.reshape(b, -1), xs.reshape(b, -1), h, w)
    xrows = _Sampler.rows(xb.data)
    sampled = sampler.gather(xrows).astype(xb.dtype)  # (B*K*N, C)
    n = ho * wo
    cols = np.ascontiguousarray(sampled.reshape(b, k, n, c).transpose(0, 3, 1, 2)).reshape(b, c * k, n)
    out = _apply_kernel(cols, p, ho, wo)

    def grad(g):
        dcols, dw, db = _kernel_grads(g, cols, p)
        grows = np.ascontiguousarray(dcols.reshape(b, c, k, n).transpose(0, 2, 3, 1)).reshape(-1, c)
        dx = sampler.scatter(grows, xb.shape).astype(xb.dtype) if xb.requires_grad else None
        gy, gx = sampler.coord_grads(xrows, grows)
        doff = np.stack([gy.reshape(b, k, n), gx.reshape(b, k, n)], axis=2).reshape(ob.shape).astype(ob.dtype)
        rest = (dw, db) if p.bias is not None else (dw,)
        return (dx, doff) + rest

    res = record("deform_conv", (xb, ob, *p.tensors()), out, grad)
    return _unbatch(res) if squeeze else res


def deformable_layer(x: Tensor, weight_params: ConvParams, offset_params: ConvParams,
                     capture: Optional[dict] = None) -> Tensor:
    """Offsets from a standard convolution, then the deformable convolution.

    When ``capture`` is given, the computed offset field is stored under
    ``"offsets"`` for inspection.
    """
    k = weight_params.kernel[0] * weight_params.kernel[1]
    if (offset_params.c_out != 2 * k or offset_params.kernel != weight_params.kernel
            or offset_params.stride != weight_params.stride
            or offset_params.padding != weight_params.padding
            or offset_params.dilation != weight_params.dilation
            or offset_params.c_in != weight_params.c_in):
        raise ContractError(
            f"offset conv (c_out={offset_params.c_out}, kernel={offset_params.kernel}, stride={offset_params.stride}, "
            f"padding={offset_params.padding}) must match deformable conv geometry with c_out={2 * k}")
    offsets = std_conv(x, offset_params)
    if capture is not None:
        capture["offsets"] = offsets.data
    return deform_conv(x, weight_params, offsets)


# ----------------------------------------------------------------- normalization, pooling, misc

@dataclass
class BNState:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1

    @classmethod
    def create(cls, c: int, dtype=np.float32, prefix: str = "bn") -> "BNState":
        return cls(Tensor(np.ones(c, dtype), requires_grad=True, name=f"{prefix}.gamma"),
                   Tensor(np.zeros(c, dtype), requires_grad=True, name=f"{prefix}.beta"),
                   np.zeros(c, dtype), np.ones(c, dtype))


def batch_norm(x: Tensor, state: BNState, train: bool) -> Tensor:
    """Per-channel normalization over (batch, H, W) of a ``(B, C, H, W)`` map."""
    if x.ndim != 4:
        raise ContractError(f"batch_norm expects b x c x H x W, got {x.shape}")
    b, c, h, w = x.shape
    if b == 0:
        raise ContractError("batch_norm on an empty batch")
    if c != state.gamma.shape[0]:
        raise ContractError(f"batch_norm: {c} channels, state has {state.gamma.shape[0]}")
    gamma = state.gamma.data[None, :, None, None]
    beta = state.beta.data[None, :, None, None]
    dt = x.dtype
    if train:
        m = b * h * w
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        mom = state.momentum
        state.running_mean[:] = (1 - mom) * state.running_mean + mom * mean
        unbiased = var * (m / max(m - 1, 1))
        state.running_var[:] = (1 - mom) * state.running_var + mom * unbiased
        invstd = (1.0 / np.sqrt(var + state.eps)).astype(dt)
        xhat = (x.data - mean[None, :, None, None]) * invstd[None, :, None, None]
        out = xhat * gamma + beta

        def grad(g):
            dgamma = (g * xhat).sum(axis=(0, 2, 3))
            dbeta = g.sum(axis=(0, 2, 3))
            dxhat = g * gamma
            dx = (invstd[None, :, None, None] / m) * (
                m * dxhat - dxhat.sum(axis=(0, 2, 3), keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True))
            return dx.astype(dt), dgamma, dbeta
    else:
        invstd = (1.0 / np.sqrt(state.running_var + state.eps)).astype(dt)
        xhat = (x.data - state.running_mean.astype(dt)[None, :, None, None]) * invstd[None, :, None, None]
        out = xhat * gamma + beta

        def grad(g):
            return (g * gamma * invstd[None, :, None, None], (g * xhat).sum(axis=(0, 2, 3)),
                    g.sum(axis=(0, 2, 3)))

    return record("batch_norm", (x, state.gamma, state.beta), out.astype(dt), grad)


@dataclass(frozen=True)
class PoolSpec:
    kernel: tuple = (2, 2)
    stride: tuple = (2, 2)
    padding: tuple = (0, 0)

    def __post_init__(self):
        object.__setattr__(self, "kernel", _pair(self.kernel))
        object.__setattr__(self, "stride", _pair(self.stride))
        object.__setattr__(self, "padding", _pair(self.padding))
        if any(p >= k for p, k in zip(self.padding, self.kernel)):
            raise ContractError(f"pool padding {self.padding} must be smaller than kernel {self.kernel}")

    def out_shape(self, h: int, w: int) -> tuple:
        ho = out_extent(h, self.kernel[0], self.stride[0], self.padding[0])
        wo = out_extent(w, self.kernel[1], self.stride[1], self.padding[1])
        if ho < 1 or wo < 1:
            raise ContractError(f"degenerate pool output {ho}x{wo} for input {h}x{w} with {self}")
        return ho, wo


def max_pool(x: Tensor, spec: PoolSpec) -> Tensor:
    """Max pooling; padding cells hold -inf, ties go to the first cell in row-major order."""
    xb, squeeze = _batched(x)
    b, c, h, w = xb.shape
    ho, wo = spec.out_shape(h, w)
    (kh, kw), (sh, sw), (ph, pw) = spec.kernel, spec.stride, spec.padding
    xp = np.pad(xb.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)), constant_values=-np.inf) if ph or pw else xb.data
    windows = np.empty((kh * kw, b, c, ho, wo), dtype=xb.dtype)
    for i in range(kh):
        for j in range(kw):
            windows[i * kw + j] = xp[:, :, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw]
    arg = windows.argmax(axis=0)
    out = np.take_along_axis(windows, arg[None], axis=0)[0]

    def grad(g):
        dxp = np.zeros(xp.shape, dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw] += g * (arg == i * kw + j)
        return (dxp[:, :, ph:ph + h, pw:pw + w],)

    res = record("max_pool", (xb,), out, grad)
    return _unbatch(res) if squeeze else res


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map over the last axis; ``weight`` is ``(out, in)``."""
    if x.shape[-1] != weight.shape[1]:
        raise ContractError(f"linear: input width {x.shape[-1]} does not match weight {weight.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ weight.data.T
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ContractError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
        out = out + bias.data
    wt = weight.data

    def grad(g):
        g2 = g.reshape(-1, wt.shape[0])
        res = ((g2 @ wt).reshape(x.shape), g2.T @ x2)
        return res + ((g2.sum(axis=0),) if bias is not None else ())

    inputs = (x, weight) + ((bias,) if bias is not None else ())
    return record("linear", inputs, out.reshape(lead + (wt.shape[0],)), grad)


def dropout(x: Tensor, p: float, train: bool, rng: Optional[np.random.Generator]) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-p); identity outside training."""
    if not 0 <= p < 1:
        raise ContractError(f"dropout probability must be in [0, 1), got {p}")
    if not train or p == 0:
        return x
    keep = rng.random(x.shape) >= p
    mask = keep.astype(x.dtype) * x.dtype.type(1.0 / (1.0 - p))
    return record("dropout", (x,), x.data * mask, lambda g: (g * mask,))


def mask_columns(x: Tensor, widths: Sequence[int], fill: float = 0.0) -> Tensor:
    """Overwrite columns ``>= widths[b]`` of sample ``b`` in a ``(B, C, H, W)`` map.

    Used on right-padded batches so every sample sees exactly what it would
    see unpadded: ``fill=0`` mimics convolution zero padding, a very negative
    fill mimics max-pool padding.
    """
    keep = (np.arange(x.shape[3])[None, :] < np.asarray(widths)[:, None])[:, None, None, :]
    out = np.where(keep, x.data, x.dtype.type(fill))
    return record("mask_columns", (x,), out, lambda g: (g * keep,))
