"""Map a model-space adversarial point back to a close original-space input.

Crop and resize have closed forms (border padding and the minimum-norm
pseudo-inverse). Everything else goes through :func:`recover_general`, a
penalty method with a bisection on the penalty weight that spends one
hard-label query per round.
"""

from dataclasses import dataclass

import numpy as np

from .imagecore import check_same_shape, l2_distance
from .linear import LinearTransform, PseudoInverse, cached_pseudo_inverse
from .preprocessing import CenterCrop, PreprocessingPipeline, Resize, as_pipeline

__all__ = [
    "RecoveryResult",
    "recover_crop",
    "recover_resize",
    "recover_general",
    "recover_pipeline",
    "recover_pipeline_in_box",
    "pseudo_inverse",
]

LAMBDA_BRACKET = (1e-2, 1e4)


@dataclass
class RecoveryResult:
    x_o_adv: np.ndarray
    residual: float
    lam: float = None
    verified_adversarial: bool = None
    queries: int = 0


def pseudo_inverse(lin):
    """Factor ``M^+`` for a :class:`~prepattack.linear.LinearTransform`."""
    return PseudoInverse(lin)


def recover_crop(x_o, x_m_adv, spec):
    """Paste ``x_m_adv`` into the centre of ``x_o``; the border is kept as is."""
    x_o = np.asarray(x_o, dtype=np.float64)
    x_m_adv = np.asarray(x_m_adv, dtype=np.float64)
    expected = spec.output_shape(x_o.shape)
    if x_m_adv.shape != expected:
        raise ValueError(f"x_m_adv has shape {x_m_adv.shape}, expected {expected}")
    top, left, s = spec._offsets(x_o.shape)
    out = x_o.copy()
    out[top : top + s, left : left + s, :] = x_m_adv
    return RecoveryResult(out, l2_distance(spec.transform(out), x_m_adv))


def recover_resize(x_o, x_m_adv, M):
    """``x_o + M^+ (x_m_adv - M x_o)``.

    ``M`` may be a :class:`Resize` spec (pseudo-inverse cached per input size),
    a :class:`LinearTransform` or an already built :class:`PseudoInverse`.
    """
    x_o = np.asarray(x_o, dtype=np.float64)
    x_m_adv = np.asarray(x_m_adv, dtype=np.float64)
    if isinstance(M, PseudoInverse):
        pinv = M
    elif isinstance(M, LinearTransform):
        pinv = PseudoInverse(M)
    else:
        pinv = cached_pseudo_inverse(M, x_o.shape[0])
    lin = pinv.lin
    if x_o.shape[:2] != (lin.s_in, lin.s_in):
        raise ValueError(f"x_o has shape {x_o.shape}, expected {lin.s_in}x{lin.s_in}")
    if x_m_adv.shape != (lin.s_out, lin.s_out, x_o.shape[2]):
        raise ValueError(f"x_m_adv has shape {x_m_adv.shape}, expected {lin.s_out}x{lin.s_out}")
    out = x_o + pinv.apply(x_m_adv - lin.apply(x_o))
    return RecoveryResult(out, l2_distance(lin.apply(out), x_m_adv))


def _recover_stage(stage, x_in, y):
    if isinstance(stage, CenterCrop):
        return recover_crop(x_in, y, stage).x_o_adv
    if isinstance(stage, Resize):
        return recover_resize(x_in, y, stage).x_o_adv
    raise TypeError(f"{stage.describe()} has no exact recovery")


class _Adam:
    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = self.v = None
        self.t = 0

    def step(self, w, g):
        if self.m is None:
            self.m = np.zeros_like(w)
            self.v = np.zeros_like(w)
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * g
        self.v = self.b2 * self.v + (1 - self.b2) * g * g
        mhat = self.m / (1 - self.b1**self.t)
        vhat = self.v / (1 - self.b2**self.t)
        return w - self.lr * mhat / (np.sqrt(vhat) + self.eps)


def _to_w(z):
    return np.arctanh(np.clip(2.0 * z - 1.0, -1 + 1e-6, 1 - 1e-6))


def _to_z(w):
    return (np.tanh(w) + 1.0) / 2.0


def _minimize_penalty(spec, x_o, x_m_adv, lam, w0, inner_steps, lr, tol):
    opt = _Adam(lr)
    w = w0.copy()
    prev = np.inf
    for _ in range(inner_steps):
        z = _to_z(w)
        r = spec.smooth(z) - x_m_adv
        loss = float(np.sum((z - x_o) ** 2) + lam * np.sum(r * r))
        if abs(prev - loss) < tol:
            break
        prev = loss
        gz = 2.0 * (z - x_o) + 2.0 * lam * spec.vjp(z, r)
        w = opt.step(w, gz * (1.0 - np.tanh(w) ** 2) / 2.0)
    return _to_z(w)


def recover_general(
    spec,
    x_o,
    x_m_adv,
    is_adversarial,
    steps=10,
    inner_steps=200,
    lr=1e-2,
    tol=1e-8,
    bracket=LAMBDA_BRACKET,
    init=None,
):
    """Penalty-method recovery with a bisection on the penalty weight.

    Minimises ``||z - x_o||^2 + lam * ||t_s(z) - x_m_adv||^2`` over
    ``z = (tanh(w) + 1) / 2`` with Adam, where ``t_s`` is the surrogate of
    ``spec``. Each of the ``steps`` rounds queries ``is_adversarial`` once and
    moves ``lam`` to the geometric midpoint of the remaining bracket: down
    after a success, up after a failure.

    Parameters
    ----------
    is_adversarial : callable
        ``x -> bool``; one hard-label query per call.
    init : ndarray, optional
        Starting point for every round. Defaults to ``x_m_adv`` when it has
        the same shape as ``x_o`` and to ``x_o`` otherwise.

    Returns
    -------
    RecoveryResult
        The closest verified adversarial iterate, or the last iterate with
        ``verified_adversarial=False`` when no round succeeded.
    """
    x_o = np.asarray(x_o, dtype=np.float64)
    x_m_adv = np.asarray(x_m_adv, dtype=np.float64)
    if init is None:
        init = x_m_adv if x_m_adv.shape == x_o.shape else x_o
    check_same_shape(init, x_o)
    w0 = _to_w(np.asarray(init, dtype=np.float64))
    lo, hi = bracket
    best = best_lam = None
    best_dist = np.inf
    last = None
    for _ in range(steps):
        lam = float(np.sqrt(lo * hi))
        z = _minimize_penalty(spec, x_o, x_m_adv, lam, w0, inner_steps, lr, tol)
        last = z
        if is_adversarial(z):
            d = l2_distance(z, x_o)
            if d < best_dist:
                best, best_dist, best_lam = z, d, lam
            hi = lam
        else:
            lo = lam
    ok = best is not None
    out = best if ok else last
    t_out = spec.transform(out)
    residual = l2_distance(t_out, x_m_adv) if t_out.shape == x_m_adv.shape else np.inf
    return RecoveryResult(out, residual, best_lam if ok else lam, ok, steps)


def recover_pipeline(specs, x_o, x_m_adv, is_adversarial=None, **kwargs):
    """Exact right-to-left recovery when every stage is a crop or resize.

    Any other stage sends the whole composite to :func:`recover_general`,
    which then needs ``is_adversarial``.
    """
    if isinstance(specs, (list, tuple)):
        pipe = PreprocessingPipeline(list(specs))
    else:
        pipe = as_pipeline(specs)
    stages = pipe.stages_list()
    x_o = np.asarray(x_o, dtype=np.float64)
    if all(isinstance(s, (CenterCrop, Resize)) for s in stages):
        inputs = [x_o]
        for stage in stages[:-1]:
            inputs.append(stage.transform(inputs[-1]))
        y = np.asarray(x_m_adv, dtype=np.float64)
        for stage, x_in in zip(reversed(stages), reversed(inputs)):
            y = _recover_stage(stage, x_in, y)
        return RecoveryResult(y, l2_distance(pipe.transform(y), x_m_adv))
    if is_adversarial is None:
        raise ValueError("a non-bypassable stage needs is_adversarial for optimisation-based recovery")
    return recover_general(pipe, x_o, x_m_adv, is_adversarial, **kwargs)


def recover_pipeline_in_box(specs, x_o, x_m_adv, max_iter=500, tol=1e-9):
    """Crop/resize recovery restricted to valid images in ``[0, 1]``.

    The unconstrained minimum-norm solution of :func:`recover_pipeline` can
    leave the pixel range for interpolating resizes. Dykstra's alternating
    projections between the constraint set (through the exact recovery) and
    the box converge to a point in both. Stops once the constraint residual
    (max abs) is at most ``tol``; ``residual`` reports the l2 residual of the
    returned, clamped point.
    """
    pipe = as_pipeline(PreprocessingPipeline(list(specs)) if isinstance(specs, (list, tuple)) else specs)
    stages = pipe.stages_list()
    x_m_adv = np.asarray(x_m_adv, dtype=np.float64)
    x = np.asarray(x_o, dtype=np.float64)
    corr = np.zeros_like(x)
    for _ in range(max_iter):
        y = recover_pipeline(stages, x, x_m_adv).x_o_adv
        x = np.clip(y + corr, 0.0, 1.0)
        corr = y + corr - x
        if np.max(np.abs(pipe.transform(x) - x_m_adv)) <= tol:
            break
    return RecoveryResult(x, l2_distance(pipe.transform(x), x_m_adv))
