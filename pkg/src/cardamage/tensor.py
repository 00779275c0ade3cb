"""Dense float64 kernels and the project-wide PRNG.

Tensors are plain ``numpy.ndarray`` values of dtype float64 in row-major
order. Images and activations use ``H x W x C`` layout, optionally with any
number of leading batch dimensions (``N x H x W x C``). Convolution kernels
are ``K x K x C x F``.
"""

from __future__ import annotations

import hashlib

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "ShapeError",
    "Prng",
    "as_tensor",
    "matmul",
    "conv2d",
    "conv2d_naive",
    "conv2d_backward",
    "same_padding",
    "maxpool2d",
    "maxpool2d_backward",
    "bilinear_resize",
]

_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


class ShapeError(ValueError):
    """Raised when tensor shapes are incompatible for an operation."""


def as_tensor(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=np.float64)


# ---------------------------------------------------------------------------
# PRNG
# ---------------------------------------------------------------------------


def _splitmix_scalar(z: int) -> int:
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK64
    return z ^ (z >> 31)


def _splitmix_vec(z: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
    return z ^ (z >> np.uint64(31))


class Prng:
    """SplitMix64 generator.

    The state is a 64-bit counter advanced by the golden-ratio increment; each
    output is the SplitMix64 finalizer of the counter. Because outputs depend
    only on (seed, position), draws are vectorized without changing the
    stream, and the stream is identical on every platform.

    Floats in [0, 1) take the top 53 bits of each output. Normals use the
    Box-Muller transform on consecutive pairs of uniforms.
    """

    def __init__(self, seed: int):
        self.state = int(seed) & _MASK64

    @classmethod
    def derive(cls, seed: int, key: str) -> "Prng":
        """Independent stream for ``key`` under a master ``seed``."""
        digest = hashlib.blake2b(key.encode("utf-8"), digest_size=8).digest()
        h = int.from_bytes(digest, "little")
        return cls(_splitmix_scalar((int(seed) ^ h) & _MASK64))

    def next_u64(self, n: int | None = None):
        if n is None:
            self.state = (self.state + _GAMMA) & _MASK64
            return _splitmix_scalar(self.state)
        n = int(n)
        if n == 0:
            return np.zeros(0, dtype=np.uint64)
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + steps * np.uint64(_GAMMA)
        self.state = (self.state + n * _GAMMA) & _MASK64
        return _splitmix_vec(z)

    def random(self, shape=None):
        if shape is None:
            return (self.next_u64() >> 11) * 2.0**-53
        shape = (shape,) if np.isscalar(shape) else tuple(shape)
        n = int(np.prod(shape, dtype=np.int64))
        bits = self.next_u64(n) >> np.uint64(11)
        return (bits.astype(np.float64) * 2.0**-53).reshape(shape)

    def uniform(self, low: float = 0.0, high: float = 1.0, shape=None):
        return low + (high - low) * self.random(shape)

    def integers(self, high: int, shape=None):
        """Integers in ``[0, high)``."""
        if high <= 0:
            raise ValueError("high must be positive")
        if shape is None:
            return int(self.random() * high)
        return np.floor(self.random(shape) * high).astype(np.int64)

    def normal(self, shape=None, loc: float = 0.0, scale: float = 1.0):
        if shape is None:
            return float(self.normal((1,), loc, scale)[0])
        shape = (shape,) if np.isscalar(shape) else tuple(shape)
        n = int(np.prod(shape, dtype=np.int64))
        m = (n + 1) // 2
        u = self.random((2, m))
        r = np.sqrt(-2.0 * np.log1p(-u[0]))
        theta = 2.0 * np.pi * u[1]
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        return loc + scale * z.reshape(shape)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of ``range(n)``."""
        idx = np.arange(n)
        if n < 2:
            return idx
        draws = self.random(n - 1)
        for k, i in enumerate(range(n - 1, 0, -1)):
            j = int(draws[k] * (i + 1))
            idx[i], idx[j] = idx[j], idx[i]
        return idx


# ---------------------------------------------------------------------------
# Kernels
# ---------------------------------------------------------------------------


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return a @ b


def same_padding(size: int, kernel: int, stride: int) -> tuple[int, int]:
    """(before, after) zero padding for 'same' output ``ceil(size / stride)``.

    Odd kernels at stride 1 pad symmetrically; any odd remainder goes after.
    """
    out = -(-size // stride)
    total = max((out - 1) * stride + kernel - size, 0)
    return total // 2, total - total // 2


def _pad_amounts(h: int, w: int, k: int, stride: int, padding: str):
    if padding == "same":
        return same_padding(h, k, stride), same_padding(w, k, stride)
    if padding == "valid":
        return (0, 0), (0, 0)
    raise ValueError(f"unknown padding {padding!r}")


def _check_conv(x: np.ndarray, kernels: np.ndarray, stride: int, padding: str):
    if x.ndim < 3:
        raise ShapeError(f"conv2d: input must be HxWxC, got {x.shape}")
    if kernels.ndim != 4 or kernels.shape[0] != kernels.shape[1]:
        raise ShapeError(f"conv2d: kernels must be KxKxCxF, got {kernels.shape}")
    if stride < 1:
        raise ValueError("stride must be a positive int")
    k, _, c, _ = kernels.shape
    if x.shape[-1] != c:
        raise ShapeError(
            f"conv2d: input has {x.shape[-1]} channels but kernels {kernels.shape} expect {c}"
        )
    h, w = x.shape[-3], x.shape[-2]
    (pt, pb), (pl, pr) = _pad_amounts(h, w, k, stride, padding)
    if k > h + pt + pb or k > w + pl + pr:
        raise ShapeError(f"conv2d: kernel {k}x{k} larger than padded input {x.shape}")
    return (pt, pb), (pl, pr)


def _im2col(xp: np.ndarray, k: int, stride: int) -> tuple[np.ndarray, int, int]:
    # xp: N x Hp x Wp x C  ->  (N*Ho*Wo) x (K*K*C), column order (ky, kx, c)
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    n, ho, wo, c = win.shape[:4]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, k * k * c)
    return cols, ho, wo


def conv2d(
    x: np.ndarray,
    kernels: np.ndarray,
    bias: np.ndarray | None = None,
    stride: int = 1,
    padding: str = "same",
    return_cols: bool = False,
):
    """Cross-correlation of ``x`` (``..., H, W, C``) with ``K x K x C x F`` kernels.

    Lowered to a single matrix product over im2col patches. With
    ``return_cols`` the patch matrix is returned too, for reuse in backward.
    """
    x = np.asarray(x, dtype=np.float64)
    kernels = np.asarray(kernels, dtype=np.float64)
    (pt, pb), (pl, pr) = _check_conv(x, kernels, stride, padding)
    k, _, c, f = kernels.shape
    lead = x.shape[:-3]
    xb = x.reshape((-1,) + x.shape[-3:])
    xp = np.pad(xb, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    cols, ho, wo = _im2col(xp, k, stride)
    out = cols @ kernels.reshape(k * k * c, f)
    if bias is not None:
        out += np.asarray(bias, dtype=np.float64)
    out = out.reshape(lead + (ho, wo, f))
    return (out, cols) if return_cols else out


def conv2d_backward(
    dout: np.ndarray,
    x: np.ndarray,
    kernels: np.ndarray,
    stride: int = 1,
    padding: str = "same",
    cols: np.ndarray | None = None,
    need_dx: bool = True,
) -> tuple[np.ndarray | None, np.ndarray, np.ndarray]:
    """Gradients (dx, dkernels, dbias) of conv2d for a batched input ``N x H x W x C``.

    At stride 1 the input gradient is the correlation of the padded output
    gradient with the spatially flipped, channel-transposed kernels.
    ``need_dx=False`` skips the input gradient and returns None in its place.
    """
    k, _, c, f = kernels.shape
    n, h, w, _ = x.shape
    (pt, pb), (pl, pr) = _pad_amounts(h, w, k, stride, padding)
    if cols is None:
        xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
        cols, ho, wo = _im2col(xp, k, stride)
    else:
        ho, wo = dout.shape[1], dout.shape[2]
    dflat = dout.reshape(n * ho * wo, f)
    dk = (cols.T @ dflat).reshape(k, k, c, f)
    db = dflat.sum(axis=0)
    if not need_dx:
        return None, dk, db
    if stride == 1:
        dp = np.pad(dout, ((0, 0), (k - 1 - pt, k - 1 - pb), (k - 1 - pl, k - 1 - pr), (0, 0)))
        flipped = kernels[::-1, ::-1].transpose(0, 1, 3, 2)
        dcols, _, _ = _im2col(dp, k, 1)
        dx = (dcols @ flipped.reshape(k * k * f, c)).reshape(n, h, w, c)
        return dx, dk, db
    dcols = (dflat @ kernels.reshape(k * k * c, f).T).reshape(n, ho, wo, k, k, c)
    dxp = np.zeros((n, h + pt + pb, w + pl + pr, c))
    for ky in range(k):
        for kx in range(k):
            dxp[:, ky : ky + ho * stride : stride, kx : kx + wo * stride : stride, :] += dcols[
                :, :, :, ky, kx, :
            ]
    dx = dxp[:, pt : pt + h, pl : pl + w, :]
    return dx, dk, db


def conv2d_naive(x, kernels, bias=None, stride: int = 1, padding: str = "same") -> np.ndarray:
    """Reference convolution by direct summation (single image, slow)."""
    x = np.asarray(x, dtype=np.float64)
    kernels = np.asarray(kernels, dtype=np.float64)
    (pt, pb), (pl, pr) = _check_conv(x, kernels, stride, padding)
    k, _, c, f = kernels.shape
    h, w = x.shape[0], x.shape[1]
    ho = (h + pt + pb - k) // stride + 1
    wo = (w + pl + pr - k) // stride + 1
    out = np.zeros((ho, wo, f))
    for oy in range(ho):
        for ox in range(wo):
            for fi in range(f):
                acc = 0.0 if bias is None else float(bias[fi])
                for ky in range(k):
                    iy = oy * stride + ky - pt
                    if iy < 0 or iy >= h:
                        continue
                    for kx in range(k):
                        ix = ox * stride + kx - pl
                        if ix < 0 or ix >= w:
                            continue
                        for ci in range(c):
                            acc += x[iy, ix, ci] * kernels[ky, kx, ci, fi]
                out[oy, ox, fi] = acc
    return out


def maxpool2d(x: np.ndarray, window: int = 2, stride: int = 2):
    """Max pooling over ``..., H, W, C``.

    Returns ``(out, (rows, cols))`` where ``rows``/``cols`` hold the input
    coordinates of each selected maximum (first in row-major window order on ties).
    """
    x = np.asarray(x, dtype=np.float64)
    h, w = x.shape[-3], x.shape[-2]
    if window < 1 or stride < 1:
        raise ValueError("window and stride must be positive")
    if window > h or window > w:
        raise ShapeError(f"maxpool2d: window {window} exceeds input extent {x.shape}")
    lead = x.shape[:-3]
    xb = x.reshape((-1,) + x.shape[-3:])
    if stride == window:
        n, c = xb.shape[0], xb.shape[3]
        ho, wo = h // window, w // window
        flat = (
            xb[:, : ho * window, : wo * window]
            .reshape(n, ho, window, wo, window, c)
            .transpose(0, 1, 3, 5, 2, 4)
            .reshape(n, ho, wo, c, window * window)
        )
    else:
        win = sliding_window_view(xb, (window, window), axis=(1, 2))[:, ::stride, ::stride]
        n, ho, wo, c = win.shape[:4]
        flat = win.reshape(n, ho, wo, c, window * window)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    rows = np.arange(ho)[None, :, None, None] * stride + arg // window
    cols = np.arange(wo)[None, None, :, None] * stride + arg % window
    shape = lead + (ho, wo, c)
    return out.reshape(shape), (rows.reshape(shape), cols.reshape(shape))


def maxpool2d_backward(dout: np.ndarray, argmax, input_shape, window: int = 2, stride: int = 2):
    """Route ``dout`` (``N x Ho x Wo x C``) back to the argmax positions."""
    rows, cols = argmax
    n, ho, wo, c = dout.shape
    dx = np.zeros(input_shape)
    oy = np.arange(ho)[None, :, None, None] * stride
    ox = np.arange(wo)[None, None, :, None] * stride
    offset = (rows - oy) * window + (cols - ox)
    for ky in range(window):
        for kx in range(window):
            sel = np.where(offset == ky * window + kx, dout, 0.0)
            dx[:, ky : ky + ho * stride : stride, kx : kx + wo * stride : stride, :] += sel
    return dx


def _axis_coords(n_in: int, n_out: int):
    # corner-aligned: output 0 -> input 0, output n_out-1 -> input n_in-1
    if n_out == 1:
        pos = np.array([(n_in - 1) / 2.0])
    else:
        pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    lo = np.floor(pos).astype(np.int64)
    lo = np.clip(lo, 0, n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    return lo, hi, frac


def bilinear_resize(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of ``..., H, W, C`` with corner-aligned sampling.

    Output pixel ``i`` samples input coordinate ``i * (H - 1) / (out_h - 1)``,
    so corner pixels map exactly onto corner pixels. A single output row or
    column samples the input center.
    """
    x = np.asarray(x, dtype=np.float64)
    if out_h < 1 or out_w < 1:
        raise ValueError(f"bilinear_resize: target {out_h}x{out_w} has a zero dimension")
    if x.ndim < 3 or x.shape[-3] < 1 or x.shape[-2] < 1:
        raise ShapeError(f"bilinear_resize: bad input shape {x.shape}")
    h, w = x.shape[-3], x.shape[-2]
    if (h, w) == (out_h, out_w):
        return x.copy()
    y0, y1, fy = _axis_coords(h, out_h)
    x0, x1, fx = _axis_coords(w, out_w)
    fy = fy[:, None, None]
    fx = fx[None, :, None]
    top = x[..., y0, :, :]
    bot = x[..., y1, :, :]
    rows = top + (bot - top) * fy
    left = rows[..., :, x0, :]
    right = rows[..., :, x1, :]
    return left + (right - left) * fx
