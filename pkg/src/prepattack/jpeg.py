"""Pixel-space JPEG round trip with a differentiable surrogate.

The codec is per channel: no colour transform, no chroma subsampling and no
entropy coding. Each 8x8 block goes through an orthonormal type-II DCT, is
quantized with the IJG-scaled standard luminance table and is decoded back
to pixels. Sizes that are not multiples of 8 are reflect-padded and cropped
back afterwards.

The surrogate replaces ``round(z)`` by ``round(z) + (z - round(z))**3`` in the
coefficient quantization. It is only used for derivatives; ``roundtrip`` always
uses hard rounding.
"""

from functools import lru_cache

import numpy as np

from .imagecore import clamp

BLOCK = 8

STD_LUMINANCE_TABLE = np.array(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=np.float64,
)


def round_half_up(z):
    return np.floor(z + 0.5)


def round_smooth(z):
    r = round_half_up(z)
    return r + (z - r) ** 3


def round_smooth_grad(z):
    return 3.0 * (z - round_half_up(z)) ** 2


def check_quality(quality):
    if isinstance(quality, bool) or int(quality) != quality or not 1 <= quality <= 100:
        raise ValueError(f"JPEG quality must be an integer in 1..100, got {quality!r}")
    return int(quality)


@lru_cache(maxsize=128)
def quant_table(quality):
    """IJG quality scaling of the standard luminance table, clamped to 1..255."""
    quality = check_quality(quality)
    scale = 5000.0 / quality if quality < 50 else 200.0 - 2.0 * quality
    table = np.floor((STD_LUMINANCE_TABLE * scale + 50.0) / 100.0)
    table = np.clip(table, 1.0, 255.0)
    table.setflags(write=False)
    return table


@lru_cache(maxsize=1)
def dct_matrix():
    n = BLOCK
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    d = np.sqrt(2.0 / n) * np.cos(np.pi * (2 * i + 1) * k / (2 * n))
    d[0, :] = np.sqrt(1.0 / n)
    d.setflags(write=False)
    return d


def _dct2(blocks):
    # contiguous operands keep numpy on one matmul path, so every block is
    # rounded identically whatever the batch shape
    d = dct_matrix()
    return d @ np.ascontiguousarray(blocks) @ d.T


def _idct2(coefs):
    d = dct_matrix()
    return d.T @ np.ascontiguousarray(coefs) @ d


def _reflect_index(n, padded):
    """Indices mapping a reflect-padded axis of length ``padded`` onto ``n``."""
    idx = np.arange(padded)
    if n == 1:
        return np.zeros(padded, dtype=int)
    period = 2 * (n - 1)
    idx = idx % period
    return np.where(idx < n, idx, period - idx)


def _padded_size(n):
    return -(-n // BLOCK) * BLOCK


def _to_blocks(p):
    # (..., H, W) -> (..., H/8, W/8, 8, 8)
    h, w = p.shape[-2:]
    lead = p.shape[:-2]
    p = p.reshape(lead + (h // BLOCK, BLOCK, w // BLOCK, BLOCK))
    return np.swapaxes(p, -3, -2)


def _from_blocks(b):
    lead = b.shape[:-4]
    nh, nw = b.shape[-4:-2]
    b = np.swapaxes(b, -3, -2)
    return b.reshape(lead + (nh * BLOCK, nw * BLOCK))


class _Layout:
    """Padding bookkeeping for one image shape (channels moved to the front)."""

    def __init__(self, height, width):
        self.height = height
        self.width = width
        self.rows = _reflect_index(height, _padded_size(height))
        self.cols = _reflect_index(width, _padded_size(width))

    def pad(self, x):
        # x: (..., C, H, W)
        return x[..., self.rows, :][..., self.cols]

    def pad_adjoint(self, g):
        out = np.zeros(g.shape[:-2] + (self.height, self.width))
        tmp = np.zeros(g.shape[:-2] + (self.height, g.shape[-1]))
        np.add.at(tmp, (..., self.rows, slice(None)), g)
        np.add.at(out, (..., slice(None), self.cols), tmp)
        return out

    def crop(self, y):
        return y[..., : self.height, : self.width]

    def crop_adjoint(self, g):
        out = np.zeros(g.shape[:-2] + (len(self.rows), len(self.cols)))
        out[..., : self.height, : self.width] = g
        return out


def _coefficients(x, layout):
    """Scaled DCT coefficients divided by the table, shape (..., C, bh, bw, 8, 8)."""
    p = layout.pad(np.moveaxis(x, -1, -3)) * 255.0 - 128.0
    return _dct2(_to_blocks(p))


def _decode(q_coef, layout):
    rec = _from_blocks(_idct2(q_coef))
    y = (rec + 128.0) / 255.0
    return np.moveaxis(layout.crop(y), -3, -1)


def quantized_coefficients(x, quality):
    """Integer quantization indices; two images with equal indices decode identically."""
    x = np.asarray(x, dtype=np.float64)
    layout = _Layout(*x.shape[-3:-1])
    return round_half_up(_coefficients(x, layout) / quant_table(quality))


def roundtrip(x, quality):
    """Compress and decompress ``x`` (``(..., H, W, C)``) at the given quality."""
    quality = check_quality(quality)
    x = np.asarray(x, dtype=np.float64)
    layout = _Layout(*x.shape[-3:-1])
    table = quant_table(quality)
    q = round_half_up(_coefficients(x, layout) / table) * table
    return clamp(_decode(q, layout))


def _surrogate_parts(x, quality):
    x = np.asarray(x, dtype=np.float64)
    layout = _Layout(*x.shape[-3:-1])
    table = quant_table(quality)
    z = _coefficients(x, layout) / table
    pre_clip = _decode(round_smooth(z) * table, layout)
    inside = (pre_clip > 0.0) & (pre_clip < 1.0)
    return layout, table, z, pre_clip, inside


def roundtrip_smooth(x, quality):
    """Surrogate forward pass used for gradients and finite-difference checks."""
    quality = check_quality(quality)
    _, _, _, pre_clip, _ = _surrogate_parts(x, quality)
    return clamp(pre_clip)


def roundtrip_jvp(x, v, quality):
    quality = check_quality(quality)
    layout, table, z, _, inside = _surrogate_parts(x, quality)
    dp = layout.pad(np.moveaxis(np.asarray(v, dtype=np.float64), -1, -3)) * 255.0
    dz = _dct2(_to_blocks(dp)) / table
    dq = round_smooth_grad(z) * dz * table
    dy = _decode(dq, layout) - 128.0 / 255.0
    return np.where(inside, dy, 0.0)


def roundtrip_vjp(x, w, quality):
    quality = check_quality(quality)
    layout, table, z, _, inside = _surrogate_parts(x, quality)
    g = np.where(inside, np.asarray(w, dtype=np.float64), 0.0) / 255.0
    g = layout.crop_adjoint(np.moveaxis(g, -1, -3))
    # adjoint of decode is the forward DCT and vice versa (orthonormal basis)
    gz = _dct2(_to_blocks(g)) * round_smooth_grad(z)
    gp = _from_blocks(_idct2(gz)) * 255.0
    return np.moveaxis(layout.pad_adjoint(gp), -3, -1)
