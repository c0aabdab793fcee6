"""Sparse matrix form of the linear preprocessors and its pseudo-inverse.

Crop and resize act on each channel with the same spatial matrix ``M`` of
shape ``(s_m**2, s_o**2)`` so that ``flatten(t(x))[c] = M @ flatten(x)[c]``.
Resize matrices are the Kronecker product of two 1-D interpolation matrices.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.linalg
import scipy.sparse as sp

INTERPOLATIONS = ("nearest", "bilinear", "bicubic")
CUBIC_A = -0.5
RANK_TOL = 1e-10


def check_interp(interp):
    name = str(interp).lower()
    if name not in INTERPOLATIONS:
        raise ValueError(f"unknown interpolation {interp!r}; expected one of {INTERPOLATIONS}")
    return name


def cubic_kernel(s, a=CUBIC_A):
    s = np.abs(s)
    out = np.zeros_like(s, dtype=np.float64)
    near = s <= 1.0
    far = (s > 1.0) & (s < 2.0)
    out[near] = ((a + 2.0) * s[near] - (a + 3.0)) * s[near] ** 2 + 1.0
    sf = s[far]
    out[far] = ((a * sf - 5.0 * a) * sf + 8.0 * a) * sf - 4.0 * a
    return out


def axis_taps(s_in, s_out, interp):
    """Source indices and weights for every output position along one axis.

    Returns ``(idx, w)`` of shape ``(s_out, taps)``. Uses the half-pixel
    (``align_corners=False``) mapping ``src = (dst + 0.5) * s_in / s_out - 0.5``
    with border indices clamped. No antialiasing is applied on downscale.
    """
    interp = check_interp(interp)
    dst = np.arange(s_out)
    if interp == "nearest":
        idx = np.minimum(((2 * dst + 1) * s_in) // (2 * s_out), s_in - 1)
        return idx[:, None], np.ones((s_out, 1))
    # src expressed as the exact rational num / den
    num = (2 * dst + 1) * s_in - s_out
    den = 2 * s_out
    if interp == "bilinear":
        num = np.maximum(num, 0)
        i0 = num // den
        frac = (num - i0 * den) / den
        i1 = np.minimum(i0 + 1, s_in - 1)
        return np.stack([i0, i1], axis=1), np.stack([1.0 - frac, frac], axis=1)
    i0 = num // den
    frac = (num - i0 * den) / den
    offsets = np.arange(-1, 3)
    idx = np.clip(i0[:, None] + offsets[None, :], 0, s_in - 1)
    w = cubic_kernel(frac[:, None] - offsets[None, :])
    return idx, w


def axis_matrix(s_in, s_out, interp):
    """Dense-free 1-D resampling matrix of shape ``(s_out, s_in)``."""
    idx, w = axis_taps(s_in, s_out, interp)
    rows = np.repeat(np.arange(s_out), idx.shape[1])
    mat = sp.csr_matrix((w.ravel(), (rows, idx.ravel())), shape=(s_out, s_in))
    mat.sum_duplicates()
    mat.eliminate_zeros()
    return mat


@dataclass(frozen=True, eq=False)
class LinearTransform:
    """Sparse per-channel map between square ``s_in`` and ``s_out`` images."""

    matrix: sp.csr_matrix
    s_in: int
    s_out: int

    @property
    def in_dim(self):
        return self.s_in * self.s_in

    @property
    def out_dim(self):
        return self.s_out * self.s_out

    @property
    def entries(self):
        """``(row, col, weight)`` triplets in row-major order."""
        coo = self.matrix.tocoo()
        order = np.lexsort((coo.col, coo.row))
        return list(zip(coo.row[order].tolist(), coo.col[order].tolist(), coo.data[order].tolist()))

    def row_nnz(self):
        return np.diff(self.matrix.indptr)

    def toarray(self):
        return self.matrix.toarray()

    def _map(self, mat, x, s_from, s_to):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-3:-1] != (s_from, s_from):
            raise ValueError(f"expected spatial size {s_from}x{s_from}, got {x.shape[-3:-1]}")
        lead = x.shape[:-3]
        c = x.shape[-1]
        planes = np.moveaxis(x, -1, -3).reshape(-1, s_from * s_from)
        out = np.asarray(mat @ planes.T).T
        return np.moveaxis(out.reshape(lead + (c, s_to, s_to)), -3, -1)

    def apply(self, x):
        """``M`` applied channel-wise to ``(..., s_in, s_in, C)``."""
        return self._map(self.matrix, x, self.s_in, self.s_out)

    def apply_transpose(self, y):
        """``M.T`` applied channel-wise to ``(..., s_out, s_out, C)``."""
        return self._map(self.matrix.T.tocsr(), y, self.s_out, self.s_in)

    def compose(self, other):
        """``other @ self``: apply ``self`` first, then ``other``."""
        if other.s_in != self.s_out:
            raise ValueError("size mismatch while composing linear transforms")
        return LinearTransform((other.matrix @ self.matrix).tocsr(), self.s_in, other.s_out)


def identity_linear(size):
    return LinearTransform(sp.identity(size * size, format="csr"), size, size)


def crop_linear(s_in, s_out):
    if s_out > s_in:
        raise ValueError(f"crop target {s_out} larger than input {s_in}")
    off = (s_in - s_out) // 2
    rr, cc = np.meshgrid(np.arange(s_out) + off, np.arange(s_out) + off, indexing="ij")
    cols = (rr * s_in + cc).ravel()
    n = s_out * s_out
    mat = sp.csr_matrix((np.ones(n), (np.arange(n), cols)), shape=(n, s_in * s_in))
    return LinearTransform(mat, s_in, s_out)


def resize_linear(s_in, s_out, interp):
    r = axis_matrix(s_in, s_out, interp)
    mat = sp.kron(r, r, format="csr")
    mat.eliminate_zeros()
    return LinearTransform(mat, s_in, s_out)


def build_linear(spec, s_o):
    """Analytic matrix of a crop, resize or pipeline of those for input size ``s_o``."""
    s_o = int(s_o)
    kind = spec.kind
    if kind == "pipeline":
        lin = identity_linear(s_o)
        for stage in spec.stages:
            lin = lin.compose(build_linear(stage, lin.s_out))
        return lin
    if kind not in ("center_crop", "resize"):
        raise ValueError(f"{kind} is not a linear preprocessor")
    if s_o < spec.target:
        raise ValueError(f"input size {s_o} smaller than target {spec.target}")
    if kind == "center_crop":
        return crop_linear(s_o, spec.target)
    return resize_linear(s_o, spec.target, spec.interp)


def probe_linear(spec, s_o, channels=1):
    """Recover the matrix of ``spec`` by pushing one-hot images through it."""
    s_o = int(s_o)
    n = s_o * s_o
    basis = np.eye(n).reshape(n, s_o, s_o, 1)
    if channels > 1:
        basis = np.repeat(basis, channels, axis=-1)
    out = spec.transform(basis)
    s_m = out.shape[1]
    cols = out[..., 0].reshape(n, s_m * s_m).T
    mat = sp.csr_matrix(cols)
    mat.eliminate_zeros()
    return LinearTransform(mat, s_o, s_m)


class PseudoInverse:
    """Min-norm right inverse ``M^T (M M^T)^{-1}`` via a Cholesky factor of the Gram matrix."""

    def __init__(self, lin):
        self.lin = lin
        gram = (lin.matrix @ lin.matrix.T).toarray()
        try:
            factor = scipy.linalg.cho_factor(gram, lower=True)
        except np.linalg.LinAlgError as exc:
            raise np.linalg.LinAlgError("M M^T is singular; degenerate kernel") from exc
        diag = np.abs(np.diag(factor[0]))
        if diag.min() ** 2 < RANK_TOL * diag.max() ** 2:
            raise np.linalg.LinAlgError("M M^T is rank deficient beyond tolerance 1e-10")
        self._factor = factor

    def solve_flat(self, y):
        """``M^+ y`` for ``y`` of shape ``(out_dim,)`` or ``(out_dim, k)``."""
        z = scipy.linalg.cho_solve(self._factor, np.asarray(y, dtype=np.float64))
        return self.lin.matrix.T @ z

    def apply(self, y):
        """Channel-wise ``M^+`` on an image ``(s_out, s_out, C)``."""
        y = np.asarray(y, dtype=np.float64)
        z = scipy.linalg.cho_solve(
            self._factor, np.moveaxis(y, -1, 0).reshape(y.shape[-1], -1).T
        )
        return self.lin.apply_transpose(np.moveaxis(z.T.reshape(y.shape[-1], self.lin.s_out, self.lin.s_out), 0, -1))

    def toarray(self):
        return np.asarray(self.solve_flat(np.eye(self.lin.out_dim)))


def pseudo_inverse(lin):
    return PseudoInverse(lin)


@lru_cache(maxsize=64)
def cached_pseudo_inverse(spec, s_o):
    """Pseudo-inverse keyed by ``(spec, s_o)``; specs hash by their parameters."""
    return PseudoInverse(build_linear(spec, s_o))
