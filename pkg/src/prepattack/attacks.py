"""Hard-label attacks: an HSJA-style base attack and two preprocessor-aware wrappers.

``base_attack``
    Boundary search driven by sign-only finite-difference gradient estimates,
    run directly in whatever space the oracle accepts. Run against the full
    victim it is the preprocessor-unaware baseline.
``bypass_attack``
    For crop/resize pipelines: run the base attack in model space by
    submitting inputs on which the pipeline is the identity, then map the
    result back with the exact minimum-norm recovery.
``biased_gradient_attack``
    For any pipeline with a surrogate: probe in the original space, but build
    the gradient estimate from the probe displacements that survive the
    preprocessor, pull it back through ``vjp`` and finish with the
    penalty-method recovery.

All three share one loop so the schedules are directly comparable. Query
accounting is exact: ``AttackResult.queries_used`` is the oracle counter
delta, including the final re-verification of the emitted image.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from .imagecore import check_image, clamp, l2_distance, make_rng, unit_sphere_sample
from .preprocessing import PreprocessingPipeline, Resize, as_pipeline, from_config
from .recovery import recover_general, recover_pipeline_in_box

__all__ = [
    "AttackConfig",
    "AttackResult",
    "Criterion",
    "approx_grad",
    "boundary_bisect",
    "base_attack",
    "bypass_attack",
    "biased_gradient_attack",
    "biased_grad_estimate",
    "UnawareAttack",
    "BypassAttack",
    "BiasedGradientAttack",
    "NotBypassableError",
]

MAX_STEP_HALVINGS = 20


class NotBypassableError(ValueError):
    """The pipeline has a stage that the bypass attack cannot route around."""


class _OutOfBudget(Exception):
    pass


@dataclass
class AttackConfig:
    """Attack hyperparameters.

    ``alpha`` scales the probe radius ``alpha * dist / sqrt(d)`` and ``gamma``
    the first step size ``gamma * dist / sqrt(d * t)`` of round ``t``.
    """

    budget: int = 5000
    B: int = 100
    alpha: float = 1.0
    gamma: float = 10.0
    targeted: bool = False
    target_label: int = None
    init: np.ndarray = None
    seed: int = 0
    bisect_tol: float = 1e-3
    init_queries: int = 200
    recovery_steps: int = 10

    def __post_init__(self):
        if self.B < 2:
            raise ValueError("B must be at least 2")
        if self.budget < self.B + 10:
            raise ValueError(f"budget must be at least B + 10 = {self.B + 10}")
        if not (self.alpha > 0 and self.gamma > 0):
            raise ValueError("alpha and gamma must be positive")
        if self.targeted and (self.target_label is None or self.init is None):
            raise ValueError("a targeted attack needs target_label and init")


@dataclass
class AttackResult:
    x_adv: np.ndarray
    distance: float
    queries_used: int
    success: bool
    trace: list = field(default_factory=list)
    info: dict = field(default_factory=dict)


@dataclass(frozen=True)
class Criterion:
    """Success test on a hard label."""

    label: int
    targeted: bool = False
    target_label: int = None

    def __call__(self, label):
        if self.targeted:
            return int(label) == int(self.target_label)
        return int(label) != int(self.label)

    @classmethod
    def from_config(cls, y, config):
        return cls(int(y), bool(config.targeted), config.target_label)


class _Queries:
    """Budget-checked view of an oracle that turns labels into success flags."""

    def __init__(self, oracle, criterion, limit, embed=None):
        self.oracle = oracle
        self.criterion = criterion
        self.limit = limit
        self.embed = embed
        self.start = oracle.counter.total

    @property
    def used(self):
        return self.oracle.counter.total - self.start

    def adversarial(self, xs):
        xs = list(xs)
        if self.used + len(xs) > self.limit:
            raise _OutOfBudget
        if self.embed is not None:
            xs = [self.embed(x) for x in xs]
        labels = self.oracle.predict_batch(xs)
        return np.array([self.criterion(lb) for lb in labels], dtype=bool)

    def one(self, x):
        return bool(self.adversarial([x])[0])


# --- primitives ---------------------------------------------------------------------


def _centered_estimate(phi, dirs):
    """Mean of ``(phi - mean(phi)) * dir``; degenerate sign vectors give ``mean(phi) * mean(dir)``."""
    phi = np.asarray(phi, dtype=np.float64)
    if np.all(phi == phi[0]):
        return phi[0] * dirs.mean(axis=0)
    return np.tensordot(phi - phi.mean(), dirs, axes=1) / len(phi)


def _probe(x, delta, B, rng):
    u = unit_sphere_sample(rng, x.size, B).reshape((B,) + x.shape)
    probes = clamp(x[None] + delta * u)
    return probes, (probes - x[None]) / delta


def approx_grad(oracle, x, y, B, alpha, rng, criterion=None):
    """Sign-only finite-difference direction at ``x`` from ``B`` sphere probes.

    Probes ``clip(x + alpha * u_b)`` are labelled +1 when adversarial and -1
    otherwise; the directions are the clipped displacements divided by
    ``alpha``. Consumes exactly ``B`` queries.

    Parameters
    ----------
    oracle : object with ``predict_batch`` or a ``_Queries`` view
    y : int
        True label; ignored when ``criterion`` is given.
    """
    if B < 2:
        raise ValueError("B must be at least 2")
    x = np.asarray(x, dtype=np.float64)
    probes, dirs = _probe(x, alpha, B, rng)
    if isinstance(oracle, _Queries):
        adv = oracle.adversarial(probes)
    else:
        crit = criterion or Criterion(int(y))
        adv = np.array([crit(lb) for lb in oracle.predict_batch(list(probes))])
    return _centered_estimate(np.where(adv, 1.0, -1.0), dirs)


def boundary_bisect(oracle, x_in, x_ref, tol=1e-3, criterion=None, y=None, check_endpoints=False):
    """Bisect the segment from clean ``x_ref`` to adversarial ``x_in``.

    Returns the adversarial-side point once the two brackets are within
    ``tol`` in the infinity norm, using ``ceil(log2(||x_in - x_ref||_inf / tol))``
    queries. Endpoint labels are trusted unless ``check_endpoints`` is set,
    which costs two more queries and raises ``ValueError`` when both
    endpoints fall on the same side.
    """
    x_in = np.asarray(x_in, dtype=np.float64)
    x_ref = np.asarray(x_ref, dtype=np.float64)
    q = oracle if isinstance(oracle, _Queries) else _Queries(
        oracle, criterion or Criterion(int(y)), np.inf
    )
    if check_endpoints and (not q.one(x_in) or q.one(x_ref)):
        raise ValueError("boundary_bisect endpoints are on the same side")
    span = float(np.max(np.abs(x_in - x_ref))) if x_in.size else 0.0
    if span <= tol:
        return x_in.copy()
    n = math.ceil(math.log2(span / tol))
    lo, hi = 0.0, 1.0
    for _ in range(n):
        mid = (lo + hi) / 2.0
        if q.one((1.0 - mid) * x_ref + mid * x_in):
            hi = mid
        else:
            lo = mid
    return (1.0 - hi) * x_ref + hi * x_in


# --- shared loop ------------------------------------------------------------------------


def _find_start(q, x, config, rng):
    """Adversarial starting point: the given init, or uniform noise (capped)."""
    if config.init is not None:
        init = np.asarray(config.init, dtype=np.float64)
        if init.shape != x.shape:
            raise ValueError(f"init has shape {init.shape}, expected {x.shape}")
        return init if q.one(init) else None
    for _ in range(config.init_queries):
        cand = rng.random(x.shape)
        if q.one(cand):
            return cand
    return None


def _run_loop(q, x, config, rng, grad_fn, measure, reserve):
    """HSJA-style iterations; returns ``(best_point, best_measure, trace)``.

    ``best_point`` is ``None`` when no adversarial start was found. Every
    point that can become ``best_point`` has been verified adversarial.
    """
    q.limit = config.budget - reserve
    d = x.size
    best = None
    best_m = np.inf
    trace = []

    def consider(p):
        nonlocal best, best_m
        m = measure(p)
        if m < best_m:
            best, best_m = p, m
        trace.append((q.used, best_m))

    try:
        start = _find_start(q, x, config, rng)
        if start is None:
            return None, np.inf, trace
        best = start
        best_m = measure(start)
        cur = boundary_bisect(q, start, x, config.bisect_tol)
        consider(cur)
        t = 0
        while True:
            t += 1
            dist = l2_distance(cur, x)
            if dist == 0.0:
                break
            delta = config.alpha * dist / math.sqrt(d)
            g = grad_fn(q, cur, delta, rng)
            norm = np.linalg.norm(g)
            if norm == 0.0 or not np.isfinite(norm):
                continue
            g = g / norm
            eps = config.gamma * dist / math.sqrt(d * t)
            nxt = None
            for _ in range(MAX_STEP_HALVINGS):
                cand = clamp(cur + eps * g)
                if q.one(cand):
                    nxt = cand
                    break
                eps /= 2.0
            if nxt is None:
                continue
            cur = boundary_bisect(q, nxt, x, config.bisect_tol)
            consider(cur)
    except _OutOfBudget:
        pass
    return best, best_m, trace


def _finish(q, x_adv, x_o, trace, info=None):
    """Re-verify the emitted image with the reserved query and package the result."""
    q.limit = np.inf
    success = q.one(x_adv)
    return AttackResult(
        x_adv=x_adv,
        distance=l2_distance(x_adv, x_o),
        queries_used=q.used,
        success=bool(success),
        trace=trace,
        info=info or {},
    )


def _failure(q, x_o, trace, reason):
    return AttackResult(x_o.copy(), np.inf, q.used, False, trace, {"reason": reason})


def _sign_grad(q, cur, delta, rng, B):
    return approx_grad(q, cur, None, B, delta, rng)


# --- attacks ------------------------------------------------------------------------------


def base_attack(oracle, x, y, config):
    """Run the boundary attack directly in the oracle's input space.

    Against the full victim (pipeline included) this is the
    preprocessor-unaware baseline.
    """
    x = check_image(x)
    crit = Criterion.from_config(y, config)
    rng = make_rng(config.seed)
    q = _Queries(oracle, crit, config.budget)
    best, _, trace = _run_loop(
        q, x, config, rng, lambda qq, c, dl, r: _sign_grad(qq, c, dl, r, config.B),
        lambda p: l2_distance(p, x), reserve=1,
    )
    if best is None:
        return _failure(q, x, trace, "no adversarial starting point")
    return _finish(q, best, x, trace)


def _bypass_embedding(stages, x_o):
    """Map a model-space point to an original-space query the pipeline leaves intact.

    Crops are undone by pasting into the border of the corresponding
    intermediate image. A leading resize is skipped by submitting at its
    target size; a later resize is undone with its pseudo-inverse.
    """
    inputs = [x_o]
    for stage in stages[:-1]:
        inputs.append(stage.transform(inputs[-1]))

    def embed(z):
        y = z
        for i in range(len(stages) - 1, -1, -1):
            stage = stages[i]
            if isinstance(stage, Resize) and i == 0:
                break
            y = recover_pipeline_in_box([stage], inputs[i], y).x_o_adv
        return clamp(y)

    return embed


def bypass_attack(pipeline, oracle, x_o, y, config):
    """Attack in model space through inputs on which ``pipeline`` is the identity.

    Only crop and resize stages are allowed. The model-space result is mapped
    back with the right-to-left recovery, kept inside ``[0, 1]``, and the
    distance is measured in the original space.
    """
    pipe = as_pipeline(from_config(pipeline))
    stages = pipe.stages_list()
    if not pipe.bypassable:
        bad = [s.describe() for s in stages if not s.bypassable]
        raise NotBypassableError(
            f"stages {bad} are not bypassable; use biased_gradient_attack instead"
        )
    x_o = check_image(x_o)
    crit = Criterion.from_config(y, config)
    rng = make_rng(config.seed)
    x_m = pipe.transform(x_o)
    if config.init is not None:
        init = np.asarray(config.init, dtype=np.float64)
        if init.shape == x_o.shape and init.shape != x_m.shape:
            config = _replace(config, init=pipe.transform(init))
    embed = _bypass_embedding(stages, x_o) if stages else None
    q = _Queries(oracle, crit, config.budget, embed=embed)

    def recover(z):
        return recover_pipeline_in_box(stages, x_o, z).x_o_adv if stages else z

    def measure(z):
        return l2_distance(recover(z), x_o)

    best, _, trace = _run_loop(
        q, x_m, config, rng, lambda qq, c, dl, r: _sign_grad(qq, c, dl, r, config.B),
        measure, reserve=1,
    )
    if best is None:
        return _failure(q, x_o, trace, "no adversarial starting point")
    x_adv = recover(best)
    q.embed = None
    return _finish(q, x_adv, x_o, trace, {"x_m_adv": best})


def _replace(config, **changes):
    params = dict(config.__dict__)
    params.update(changes)
    return AttackConfig(**params)


def biased_grad_estimate(q, spec, x, delta, B, rng):
    """Gradient estimate built from probe displacements that survive ``spec``.

    Probes ``z_b = clip(x + delta * u_b)`` are queried as they are, so the
    classifier sees ``t(z_b)``. With ``t_b = t(z_b) - t(x)`` the model-space
    directions are ``t_b / ||t_b||``; probes with ``t_b = 0`` are dropped from
    the average but their queries still count. The model-space estimate is
    pulled back to the original space with ``vjp`` at ``x``.

    Returns
    -------
    grad : ndarray
        Original-space direction (not normalised).
    info : dict
        ``model_grad`` (model-space estimate or ``None``), ``kept`` and ``B``.
    """
    probes, dirs = _probe(x, delta, B, rng)
    adv = q.adversarial(probes)
    phi = np.where(adv, 1.0, -1.0)
    tx = spec.transform(x)
    moved = spec.transform(probes) - tx[None]
    norms = np.sqrt(np.sum(moved.reshape(B, -1) ** 2, axis=1))
    keep = norms > 0
    info = {"kept": int(keep.sum()), "B": B, "model_grad": None}
    if not keep.any():
        return _centered_estimate(phi, dirs), info
    u_m = moved[keep] / norms[keep].reshape((-1,) + (1,) * tx.ndim)
    g_m = _centered_estimate(phi[keep], u_m)
    info["model_grad"] = g_m
    return spec.vjp(x, g_m), info


def biased_gradient_attack(spec, oracle, x_o, y, config):
    """Boundary attack in the original space with the preprocessor-aware estimator.

    The last ``config.recovery_steps`` queries are spent on the
    penalty-method recovery of ``t(x')`` started from ``x'``; the closer of
    the recovered point and ``x'`` itself is emitted.
    """
    pipe = as_pipeline(from_config(spec))
    x_o = check_image(x_o)
    crit = Criterion.from_config(y, config)
    rng = make_rng(config.seed)
    q = _Queries(oracle, crit, config.budget)
    stats = {"kept": 0, "probes": 0}

    def grad_fn(qq, cur, delta, r):
        g, info = biased_grad_estimate(qq, pipe, cur, delta, config.B, r)
        stats["kept"] += info["kept"]
        stats["probes"] += info["B"]
        return g

    best, best_m, trace = _run_loop(
        q, x_o, config, rng, grad_fn, lambda p: l2_distance(p, x_o),
        reserve=1 + config.recovery_steps,
    )
    if best is None:
        return _failure(q, x_o, trace, "no adversarial starting point")
    q.limit = config.budget - 1
    x_adv = best
    rec = None
    if config.recovery_steps > 0:
        try:
            rec = recover_general(
                pipe, x_o, pipe.transform(best), q.one,
                steps=config.recovery_steps, init=best,
            )
        except _OutOfBudget:
            rec = None
        if rec is not None and rec.verified_adversarial and l2_distance(rec.x_o_adv, x_o) < best_m:
            x_adv = rec.x_o_adv
            trace.append((q.used, l2_distance(x_adv, x_o)))
    info = {
        "kept_fraction": stats["kept"] / max(stats["probes"], 1),
        "recovered": x_adv is not best,
        "pre_recovery_distance": best_m,
    }
    return _finish(q, x_adv, x_o, trace, info)


# --- estimator-style wrappers --------------------------------------------------------------


class _AttackEstimator(BaseEstimator):
    def __init__(self, budget=5000, B=100, alpha=1.0, gamma=10.0, targeted=False,
                 target_label=None, seed=0, bisect_tol=1e-3):
        self.budget = budget
        self.B = B
        self.alpha = alpha
        self.gamma = gamma
        self.targeted = targeted
        self.target_label = target_label
        self.seed = seed
        self.bisect_tol = bisect_tol

    def _config(self, init):
        return AttackConfig(
            budget=self.budget, B=self.B, alpha=self.alpha, gamma=self.gamma,
            targeted=self.targeted, target_label=self.target_label, init=init,
            seed=self.seed, bisect_tol=self.bisect_tol,
        )


class UnawareAttack(_AttackEstimator):
    """Base attack against the full victim, ignoring its preprocessing."""

    method = "unaware"

    def generate(self, oracle, x, y, init=None):
        return base_attack(oracle, x, y, self._config(init))


class BypassAttack(_AttackEstimator):
    method = "bypass"

    def __init__(self, pipeline=None, budget=5000, B=100, alpha=1.0, gamma=10.0,
                 targeted=False, target_label=None, seed=0, bisect_tol=1e-3):
        super().__init__(budget, B, alpha, gamma, targeted, target_label, seed, bisect_tol)
        self.pipeline = pipeline

    def generate(self, oracle, x, y, init=None):
        pipe = self.pipeline if self.pipeline is not None else PreprocessingPipeline([])
        return bypass_attack(pipe, oracle, x, y, self._config(init))


class BiasedGradientAttack(_AttackEstimator):
    method = "biased-grad"

    def __init__(self, pipeline=None, budget=5000, B=100, alpha=1.0, gamma=10.0,
                 targeted=False, target_label=None, seed=0, bisect_tol=1e-3):
        super().__init__(budget, B, alpha, gamma, targeted, target_label, seed, bisect_tol)
        self.pipeline = pipeline

    def generate(self, oracle, x, y, init=None):
        pipe = self.pipeline if self.pipeline is not None else PreprocessingPipeline([])
        return biased_gradient_attack(pipe, oracle, x, y, self._config(init))
