"""Image containers, flattening conventions, distances and seeded randomness.

Images are plain ``numpy`` arrays of shape ``(height, width, channels)`` with
``float64`` values in ``[0, 1]``. Batches add a leading axis. Every stochastic
routine in the package takes an explicit :class:`numpy.random.Generator`
built by :func:`make_rng`, which wraps the counter-based Philox bit generator
so that a seed reproduces the same stream on every platform.
"""

import io
import json

import numpy as np
from PIL import Image as PILImage

__all__ = [
    "check_image",
    "check_same_shape",
    "make_rng",
    "flatten",
    "unflatten",
    "clamp",
    "l2_distance",
    "l0_diff",
    "linf_diff",
    "unit_sphere_sample",
    "quantize8",
    "to_png",
    "from_png",
    "to_json",
    "from_json",
]


def check_image(x, name="x", allow_out_of_range=False):
    """Validate an image and return it as a float64 ``(H, W, C)`` array.

    2-D input is promoted to a single channel. Raises ``ValueError`` on bad
    rank, empty axes, more than 3 channels or values outside ``[0, 1]``.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[:, :, None]
    if x.ndim != 3:
        raise ValueError(f"{name} must have shape (H, W, C), got {x.shape}")
    if min(x.shape) < 1:
        raise ValueError(f"{name} has an empty axis: {x.shape}")
    if x.shape[2] not in (1, 3):
        raise ValueError(f"{name} must have 1 or 3 channels, got {x.shape[2]}")
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains non-finite values")
    if not allow_out_of_range and (x.min() < 0.0 or x.max() > 1.0):
        raise ValueError(f"{name} has values outside [0, 1]")
    return x


def check_same_shape(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def make_rng(seed):
    """Return a Philox-backed generator for a 64-bit integer seed."""
    return np.random.Generator(np.random.Philox(int(seed) & 0xFFFFFFFFFFFFFFFF))


def flatten(x):
    """Flatten ``(..., H, W, C)`` to ``(..., C*H*W)``, channel-major then row-major."""
    x = np.asarray(x)
    lead = x.shape[:-3]
    return np.moveaxis(x, -1, -3).reshape(lead + (-1,))


def unflatten(v, height, width, channels):
    v = np.asarray(v)
    lead = v.shape[:-1]
    if v.shape[-1] != height * width * channels:
        raise ValueError(
            f"cannot unflatten length {v.shape[-1]} to {height}x{width}x{channels}"
        )
    return np.moveaxis(v.reshape(lead + (channels, height, width)), -3, -1)


def clamp(x):
    """Project values into ``[0, 1]``. The only place range is enforced."""
    return np.clip(x, 0.0, 1.0)


def l2_distance(a, b):
    a, b = check_same_shape(a, b)
    return float(np.linalg.norm((a - b).ravel()))


def l0_diff(a, b):
    """Number of coordinates (over all channels) where ``a`` and ``b`` differ."""
    a, b = check_same_shape(a, b)
    return int(np.count_nonzero(a != b))


def linf_diff(a, b):
    a, b = check_same_shape(a, b)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - b)))


def unit_sphere_sample(rng, dim, batch):
    """Draw ``batch`` vectors uniformly from the unit sphere in ``R^dim``.

    Gaussian draws normalized to unit length; returns shape ``(batch, dim)``.
    """
    if dim < 1:
        raise ValueError("dim must be >= 1")
    if batch < 1:
        raise ValueError("batch must be >= 1")
    u = rng.standard_normal((batch, dim))
    norms = np.linalg.norm(u, axis=1, keepdims=True)
    # a zero Gaussian vector has probability 0; redraw defensively
    while np.any(norms == 0):
        bad = norms[:, 0] == 0
        u[bad] = rng.standard_normal((int(bad.sum()), dim))
        norms = np.linalg.norm(u, axis=1, keepdims=True)
    return u / norms


def quantize8(x):
    """Snap to the 8-bit grid exactly as the PNG wire format does."""
    return np.floor(clamp(x) * 255.0 + 0.5) / 255.0


def _to_uint8(x):
    return np.floor(clamp(np.asarray(x, dtype=np.float64)) * 255.0 + 0.5).astype(np.uint8)


def to_png(x):
    """Encode an image as 8-bit PNG bytes (lossy for off-grid values)."""
    x = check_image(x, allow_out_of_range=True)
    arr = _to_uint8(x)
    if arr.shape[2] == 1:
        img = PILImage.fromarray(arr[:, :, 0], mode="L")
    else:
        img = PILImage.fromarray(arr, mode="RGB")
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


def from_png(data):
    """Decode PNG bytes to a float image on the 8-bit grid.

    Grayscale stays single-channel, anything else is converted to RGB.
    Raises ``ValueError`` when the bytes are not a decodable image.
    """
    try:
        img = PILImage.open(io.BytesIO(data))
        img.load()
    except Exception as exc:  # PIL raises a zoo of exception types
        raise ValueError(f"undecodable image: {exc}") from exc
    if img.mode in ("L", "1", "I;16", "I", "F"):
        arr = np.asarray(img.convert("L"), dtype=np.float64)[:, :, None]
    else:
        arr = np.asarray(img.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def to_json(x):
    """Nested ``[row][col][channel]`` list, for debugging dumps."""
    return json.dumps(check_image(x, allow_out_of_range=True).tolist())


def from_json(text):
    return check_image(np.array(json.loads(text), dtype=np.float64))
