"""Preprocessors, pipelines and their differentiable surrogates.

Every preprocessor is a stateless scikit-learn transformer: ``fit`` is a
no-op and ``transform`` accepts one image ``(H, W, C)`` or a batch
``(N, H, W, C)``. Besides the hard forward pass each class provides

``smooth``
    the surrogate forward pass (hard rounding replaced by
    ``round(z) + (z - round(z))**3``), identical to ``transform`` for crop and
    resize;
``jvp`` / ``vjp``
    Jacobian-vector and vector-Jacobian products of ``smooth`` at ``x``.

Specs round-trip through plain dicts with the keys ``kind``, ``target``,
``interp``, ``bits``, ``quality`` and ``stages``; see :func:`from_config`.
"""

import json

import numpy as np
import yaml
from sklearn.base import BaseEstimator, TransformerMixin

from . import jpeg as _jpeg
from .imagecore import check_image
from .linear import axis_taps, build_linear, check_interp, resize_linear

__all__ = [
    "Preprocessor",
    "CenterCrop",
    "Resize",
    "Quantize",
    "Jpeg",
    "PreprocessingPipeline",
    "identity",
    "apply",
    "jvp",
    "vjp",
    "jpeg_roundtrip",
    "from_config",
    "load_config",
    "dump_config",
]


def _as_batch(x):
    """Return ``(batch, single)``; 2-D and 3-D inputs count as one image."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim in (2, 3):
        return check_image(x, allow_out_of_range=True)[None], True
    if x.ndim == 4:
        return x, False
    raise ValueError(f"expected an image or a batch of images, got shape {x.shape}")


def _unbatch(y, single):
    return y[0] if single else y


def _positive_int(value, name):
    if isinstance(value, bool) or int(value) != value or int(value) < 1:
        raise ValueError(f"{name} must be a positive integer, got {value!r}")
    return int(value)


class Preprocessor(TransformerMixin, BaseEstimator):
    """Base class. Subclasses set ``kind`` and implement ``_forward``."""

    kind = None
    bypassable = False

    def fit(self, X=None, y=None):
        return self

    def transform(self, X):
        xb, single = _as_batch(X)
        return _unbatch(self._forward(xb), single)

    def smooth(self, X):
        xb, single = _as_batch(X)
        return _unbatch(self._smooth(xb), single)

    def _smooth(self, xb):
        return self._forward(xb)

    def output_shape(self, shape):
        return tuple(shape)

    def jvp(self, x, v):
        raise NotImplementedError

    def vjp(self, x, w):
        raise NotImplementedError

    def to_config(self):
        raise NotImplementedError

    def describe(self):
        """Compact one-line label, used in CSV reports."""
        raise NotImplementedError

    def stages_list(self):
        return [self]

    def canonical_key(self):
        return json.dumps([s.to_config() for s in self.stages_list()], sort_keys=True)

    def __eq__(self, other):
        if not isinstance(other, Preprocessor):
            return NotImplemented
        return self.canonical_key() == other.canonical_key()

    def __hash__(self):
        return hash(self.canonical_key())


class CenterCrop(Preprocessor):
    """Keep the central ``target`` x ``target`` block; offset ``(H - target) // 2``."""

    kind = "center_crop"
    bypassable = True

    def __init__(self, target=16):
        self.target = target

    def _offsets(self, shape):
        s = _positive_int(self.target, "target")
        h, w = shape[-3], shape[-2]
        if h < s or w < s:
            raise ValueError(f"input {h}x{w} is smaller than crop target {s}")
        return (h - s) // 2, (w - s) // 2, s

    def _forward(self, xb):
        top, left, s = self._offsets(xb.shape)
        return xb[:, top : top + s, left : left + s, :].copy()

    def output_shape(self, shape):
        _, _, s = self._offsets(shape)
        return (s, s, shape[-1])

    def jvp(self, x, v):
        return self.transform(v)

    def vjp(self, x, w):
        x = np.asarray(x, dtype=np.float64)
        top, left, s = self._offsets(x.shape)
        out = np.zeros(x.shape)
        out[..., top : top + s, left : left + s, :] = w
        return out

    def to_config(self):
        return {"kind": self.kind, "target": int(self.target)}

    def describe(self):
        return f"crop({int(self.target)})"


class Resize(Preprocessor):
    """Square resize to ``target`` with half-pixel sampling and no antialiasing.

    Bicubic uses the Catmull-Rom kernel and is not clamped, so outputs can
    overshoot ``[0, 1]`` slightly near sharp edges. That keeps the operator
    exactly linear.
    """

    kind = "resize"
    bypassable = True

    def __init__(self, target=16, interp="bilinear"):
        self.target = target
        self.interp = interp

    def _size(self, shape):
        h, w = shape[-3], shape[-2]
        if h != w:
            raise ValueError(f"resize requires a square input, got {h}x{w}")
        return h, _positive_int(self.target, "target")

    def _forward(self, xb):
        s_in, s_out = self._size(xb.shape)
        interp = check_interp(self.interp)
        idx, w = axis_taps(s_in, s_out, interp)
        # rows then columns; clamped duplicate taps simply add up
        rows = np.einsum("nrtwc,rt->nrwc", xb[:, idx, :, :], w)
        return np.einsum("nhrtc,rt->nhrc", rows[:, :, idx, :], w)

    def output_shape(self, shape):
        _, s = self._size(shape)
        return (s, s, shape[-1])

    def _linear(self, x):
        s_in, s_out = self._size(np.shape(x))
        return resize_linear(s_in, s_out, check_interp(self.interp))

    def jvp(self, x, v):
        return self._linear(x).apply(v)

    def vjp(self, x, w):
        return self._linear(x).apply_transpose(w)

    def to_config(self):
        return {"kind": self.kind, "target": int(self.target), "interp": check_interp(self.interp)}

    def describe(self):
        return f"resize({int(self.target)},{check_interp(self.interp)})"


class Quantize(Preprocessor):
    """Round to ``2**bits`` evenly spaced levels, half-up: ``floor(z*L + 0.5) / L``."""

    kind = "quantize"

    def __init__(self, bits=8):
        self.bits = bits

    @property
    def levels(self):
        bits = _positive_int(self.bits, "bits")
        if bits > 8:
            raise ValueError(f"bits must be in 1..8, got {bits}")
        return float(2**bits - 1)

    def _forward(self, xb):
        lv = self.levels
        return _jpeg.round_half_up(xb * lv) / lv

    def _smooth(self, xb):
        lv = self.levels
        return _jpeg.round_smooth(xb * lv) / lv

    def jvp(self, x, v):
        return _jpeg.round_smooth_grad(np.asarray(x, dtype=np.float64) * self.levels) * v

    def vjp(self, x, w):
        return self.jvp(x, w)

    def to_config(self):
        return {"kind": self.kind, "bits": int(self.bits)}

    def describe(self):
        return f"quantize({int(self.bits)})"


class Jpeg(Preprocessor):
    """Blockwise DCT round trip at an IJG quality level; see :mod:`prepattack.jpeg`."""

    kind = "jpeg"

    def __init__(self, quality=75):
        self.quality = quality

    def _forward(self, xb):
        return _jpeg.roundtrip(xb, self.quality)

    def _smooth(self, xb):
        return _jpeg.roundtrip_smooth(xb, self.quality)

    def jvp(self, x, v):
        return _jpeg.roundtrip_jvp(x, v, self.quality)

    def vjp(self, x, w):
        return _jpeg.roundtrip_vjp(x, w, self.quality)

    def to_config(self):
        return {"kind": self.kind, "quality": _jpeg.check_quality(self.quality)}

    def describe(self):
        return f"jpeg({int(self.quality)})"


class PreprocessingPipeline(Preprocessor):
    """Stages applied left to right. An empty pipeline is the identity."""

    kind = "pipeline"

    def __init__(self, stages=()):
        self.stages = stages

    @property
    def bypassable(self):
        return all(s.bypassable for s in self.stages_list())

    def stages_list(self):
        out = []
        for stage in self.stages:
            out.extend(stage.stages_list())
        return out

    def _forward(self, xb):
        for stage in self.stages:
            xb = stage._forward(xb)
        return xb

    def _smooth(self, xb):
        for stage in self.stages:
            xb = stage._smooth(xb)
        return xb

    def output_shape(self, shape):
        for stage in self.stages:
            shape = stage.output_shape(shape)
        return tuple(shape)

    def _inputs(self, x):
        xs = [np.asarray(x, dtype=np.float64)]
        for stage in self.stages[:-1]:
            xs.append(stage.smooth(xs[-1]))
        return xs

    def jvp(self, x, v):
        v = np.asarray(v, dtype=np.float64)
        for stage, xi in zip(self.stages, self._inputs(x)):
            v = stage.jvp(xi, v)
        return v

    def vjp(self, x, w):
        w = np.asarray(w, dtype=np.float64)
        for stage, xi in reversed(list(zip(self.stages, self._inputs(x)))):
            w = stage.vjp(xi, w)
        return w

    def to_config(self):
        return {"kind": self.kind, "stages": [s.to_config() for s in self.stages]}

    def describe(self):
        parts = [s.describe() for s in self.stages_list()]
        return "+".join(parts) if parts else "identity"


def identity():
    return PreprocessingPipeline([])


def as_pipeline(spec):
    """Wrap a single stage; pipelines pass through unchanged."""
    if isinstance(spec, PreprocessingPipeline):
        return spec
    return PreprocessingPipeline([spec])


_KINDS = {
    "center_crop": CenterCrop,
    "crop": CenterCrop,
    "resize": Resize,
    "quantize": Quantize,
    "jpeg": Jpeg,
    "pipeline": PreprocessingPipeline,
    "identity": PreprocessingPipeline,
}


def from_config(cfg):
    """Build a spec from a dict with a ``kind`` key (nested for pipelines)."""
    if isinstance(cfg, Preprocessor):
        return cfg
    if not isinstance(cfg, dict) or "kind" not in cfg:
        raise ValueError(f"preprocessor config must be a mapping with 'kind', got {cfg!r}")
    kind = str(cfg["kind"]).lower()
    if kind not in _KINDS:
        raise ValueError(f"unknown preprocessor kind {cfg['kind']!r}")
    if kind in ("pipeline", "identity"):
        return PreprocessingPipeline([from_config(s) for s in cfg.get("stages", [])])
    if kind in ("center_crop", "crop"):
        return CenterCrop(_positive_int(cfg["target"], "target"))
    if kind == "resize":
        return Resize(_positive_int(cfg["target"], "target"), check_interp(cfg.get("interp", "bilinear")))
    if kind == "quantize":
        spec = Quantize(_positive_int(cfg["bits"], "bits"))
        spec.levels  # validates the range
        return spec
    return Jpeg(_jpeg.check_quality(cfg["quality"]))


def load_config(path_or_text):
    """Parse a YAML/JSON document (path or literal text) into a spec."""
    text = str(path_or_text)
    if "\n" not in text and not text.lstrip().startswith("{"):
        with open(text, encoding="utf-8") as fh:
            text = fh.read()
    return from_config(yaml.safe_load(text))


def dump_config(spec):
    return yaml.safe_dump(spec.to_config(), sort_keys=False)


def apply(spec, x):
    return spec.transform(x)


def jvp(spec, x, v):
    return spec.jvp(x, v)


def vjp(spec, x, w):
    return spec.vjp(x, w)


def jpeg_roundtrip(x, quality):
    return _jpeg.roundtrip(x, quality)


def linear_map(spec, s_o):
    """Matrix of a bypassable spec; raises for quantize/JPEG stages."""
    return build_linear(spec, s_o)
