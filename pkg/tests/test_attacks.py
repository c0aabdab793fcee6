import math

import numpy as np
import pytest
from sklearn.base import clone

from prepattack.attacks import (
    AttackConfig,
    BiasedGradientAttack,
    BypassAttack,
    Criterion,
    NotBypassableError,
    UnawareAttack,
    approx_grad,
    base_attack,
    biased_grad_estimate,
    biased_gradient_attack,
    boundary_bisect,
    bypass_attack,
    _Queries,
)
from prepattack.imagecore import flatten, l2_distance, make_rng, unflatten
from prepattack.oracle import LocalOracle, QueryCounter, make_model
from prepattack.preprocessing import CenterCrop, Jpeg, PreprocessingPipeline, Quantize, Resize, identity


class HalfSpace:
    """Hard-label oracle ``1[w . flatten(x) > b]`` with an exact query counter."""

    def __init__(self, w, b=0.0):
        self.w = np.asarray(w, dtype=np.float64)
        self.b = b
        self.counter = QueryCounter()

    def predict_batch(self, xs):
        xs = list(xs)
        self.counter.add("default", len(xs))
        return np.array([int(self.w @ flatten(x) > self.b) for x in xs])

    def predict(self, x):
        return int(self.predict_batch([x])[0])


def exact_distance(model, x, y):
    """Smallest l2 move inside [0,1]^d that flips a linear model away from ``y``.

    For each rival class the cheapest box-feasible move along the margin
    direction is ``clip(lam * a, -x, 1 - x)``; ``lam`` is found by bisection
    on the monotone margin gain.
    """
    xf = flatten(x)
    W, b = model.coef_, model.intercept_
    lo, hi = -xf, 1.0 - xf
    best = np.inf
    for c in range(W.shape[0]):
        if c == y:
            continue
        a = W[c] - W[y]
        need = -(a @ xf + b[c] - b[y])

        def gain(lam):
            return a @ np.clip(lam * a, lo, hi)

        if gain(1e9) < need:
            continue
        left, right = 0.0, 1.0
        while gain(right) < need:
            right *= 2
        for _ in range(100):
            mid = (left + right) / 2
            left, right = (left, mid) if gain(mid) >= need else (mid, right)
        best = min(best, float(np.linalg.norm(np.clip(right * a, lo, hi))))
    return best


# --- config -----------------------------------------------------------------------


@pytest.mark.parametrize("kw", [dict(B=1), dict(budget=50, B=100), dict(alpha=0), dict(gamma=-1),
                                dict(targeted=True)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        AttackConfig(**kw)


def test_criterion():
    assert Criterion(3)(4) and not Criterion(3)(3)
    assert Criterion(3, targeted=True, target_label=5)(5)
    assert not Criterion(3, targeted=True, target_label=5)(4)


# --- approx_grad ----------------------------------------------------------------------


def test_approx_grad_degenerate_is_mean_direction():
    # every probe lands on the clean side, so phi = -1 throughout
    orc = HalfSpace(np.ones(16), b=100.0)
    x = np.full((4, 4, 1), 0.5)
    g = approx_grad(orc, x, 0, 50, 0.1, make_rng(0))
    u = make_rng(0).standard_normal((50, 16))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    np.testing.assert_allclose(flatten(g), -u.mean(axis=0), atol=1e-12)
    assert orc.counter.total == 50


def test_approx_grad_aligns_with_halfspace_normal():
    rng = make_rng(7)
    w = rng.standard_normal(64)
    x = np.clip(rng.random(64) * 0.6 + 0.2, 0, 1)
    x -= w * (w @ x) / (w @ w)  # put x on the boundary
    assert np.all((x > 0.05) & (x < 0.95))
    orc = HalfSpace(w)
    g = flatten(approx_grad(orc, unflatten(x, 8, 8, 1), 0, 10_000, 1e-2, make_rng(1)))
    cos = g @ w / (np.linalg.norm(g) * np.linalg.norm(w))
    assert cos >= 0.8
    assert orc.counter.total == 10_000


def test_approx_grad_deterministic():
    orc = HalfSpace(np.arange(16) - 7.5)
    x = np.full((4, 4, 1), 0.5)
    a = approx_grad(orc, x, 0, 64, 0.1, make_rng(3))
    b = approx_grad(orc, x, 0, 64, 0.1, make_rng(3))
    assert np.array_equal(a, b)


# --- boundary_bisect ---------------------------------------------------------------------


def _segment_oracle():
    # boundary at the mean pixel value 0.5
    return HalfSpace(np.ones(16) / 16, b=0.5)


def test_bisect_converges_to_analytic_crossing():
    orc = _segment_oracle()
    x_ref, x_in = np.zeros((4, 4, 1)), np.ones((4, 4, 1))
    out = boundary_bisect(orc, x_in, x_ref, tol=1e-3, y=0)
    assert orc.predict(out) == 1
    assert np.max(np.abs(out - 0.5)) <= 1e-3
    assert orc.counter.total == math.ceil(math.log2(1 / 1e-3)) + 1


@pytest.mark.parametrize("gap", [1.0, 0.37, 0.01])
def test_bisect_query_count_and_halving(gap):
    x_ref = np.full((4, 4, 1), 0.5 - gap / 2)
    x_in = np.full((4, 4, 1), 0.5 + gap / 2)
    counts = []
    for tol in (1e-3, 5e-4):
        orc = _segment_oracle()
        boundary_bisect(orc, x_in, x_ref, tol=tol, y=0)
        counts.append(orc.counter.total)
    assert counts[0] == math.ceil(math.log2(gap / 1e-3))
    assert counts[1] == counts[0] + 1


def test_bisect_within_tol_returns_immediately():
    orc = _segment_oracle()
    x_in = np.full((4, 4, 1), 0.5004)
    out = boundary_bisect(orc, x_in, np.full((4, 4, 1), 0.4998), tol=1e-3, y=0)
    assert np.array_equal(out, x_in) and orc.counter.total == 0


def test_bisect_rejects_same_side_endpoints():
    with pytest.raises(ValueError):
        boundary_bisect(_segment_oracle(), np.zeros((4, 4, 1)), np.full((4, 4, 1), 0.1),
                        y=0, check_endpoints=True)


# --- base attack ----------------------------------------------------------------------------


def _linear_case(seed, size=16):
    model = make_model("linear", seed=seed, input_size=size)
    x = make_rng(1000 + seed).random((size, size, 1))
    orc = LocalOracle(identity(), model)
    return model, x, orc, orc.predict(x)


def test_base_attack_near_exact_distance():
    ratios = []
    for seed in range(20):
        model, x, orc, y = _linear_case(seed)
        res = base_attack(orc, x, y, AttackConfig(budget=5000, gamma=30.0, seed=seed))
        assert res.success
        ratios.append(res.distance / exact_distance(model, x, y))
    assert min(ratios) >= 1.0 - 1e-6
    assert np.mean(ratios) <= 1.5


def test_base_attack_accounting_and_trace():
    model, x, orc, y = _linear_case(3)
    before = orc.queries
    res = base_attack(orc, x, y, AttackConfig(budget=1500, seed=3))
    assert res.queries_used == orc.queries - before <= 1500
    dists = [d for _, d in res.trace]
    assert all(b <= a for a, b in zip(dists, dists[1:]))
    assert [q for q, _ in res.trace] == sorted(q for q, _ in res.trace)
    assert res.distance == pytest.approx(l2_distance(res.x_adv, x), abs=0)
    assert res.distance == dists[-1]
    assert orc.predict(res.x_adv) != y


def test_base_attack_budget_exhausted_after_init_returns_bisected_init():
    model, x, orc, y = _linear_case(4)
    init = make_rng(9).random(x.shape)
    while orc.predict(init) == y:
        init = make_rng(int(orc.queries)).random(x.shape)
    cfg = AttackConfig(budget=110, B=100, init=init, seed=4)
    res = base_attack(orc, x, y, cfg)
    ref = LocalOracle(identity(), model)
    want = boundary_bisect(ref, init, x, cfg.bisect_tol, y=y)
    assert np.array_equal(res.x_adv, want)


def test_doubling_budget_never_hurts():
    for seed in range(5):
        _, x, orc, y = _linear_case(seed)
        a = base_attack(orc, x, y, AttackConfig(budget=1000, seed=seed))
        b = base_attack(orc, x, y, AttackConfig(budget=2000, seed=seed))
        assert b.distance <= a.distance


def test_base_attack_reports_failure_without_start():
    class Constant(HalfSpace):
        def predict_batch(self, xs):
            return np.zeros(len(super().predict_batch(xs)), int)

    orc = Constant(np.zeros(16))
    res = base_attack(orc, np.zeros((4, 4, 1)), 0, AttackConfig(budget=500, init_queries=20))
    assert not res.success and res.distance == np.inf and res.queries_used == 20


def test_targeted_attack_hits_target():
    model, x, orc, y = _linear_case(5)
    target = (y + 1) % 10
    init = None
    for k in range(500):
        cand = make_rng(k).random(x.shape)
        if orc.predict(cand) == target:
            init = cand
            break
    assert init is not None
    res = base_attack(orc, x, y, AttackConfig(budget=1000, targeted=True, target_label=target, init=init))
    assert res.success and orc.predict(res.x_adv) == target


# --- bypass ------------------------------------------------------------------------------------


def test_bypass_identity_equals_base():
    _, x, orc, y = _linear_case(6)
    cfg = AttackConfig(budget=1000, seed=6)
    a = base_attack(orc, x, y, cfg)
    b = bypass_attack(PreprocessingPipeline([]), orc, x, y, cfg)
    assert np.array_equal(a.x_adv, b.x_adv) and a.queries_used == b.queries_used


def test_bypass_crop_keeps_border():
    model = make_model("linear", seed=1, input_size=16)
    orc = LocalOracle(CenterCrop(16), model)
    x = make_rng(2).random((20, 20, 1))
    res = bypass_attack(CenterCrop(16), orc, x, orc.predict(x), AttackConfig(budget=1000, seed=1))
    assert res.success
    border = np.ones(x.shape, bool)
    border[2:18, 2:18] = False
    assert np.array_equal(res.x_adv[border], x[border])


@pytest.mark.parametrize("pipe,size", [
    (Resize(16, "nearest"), 64),
    (Resize(16, "bilinear"), 32),
    (PreprocessingPipeline([Resize(24, "bilinear"), CenterCrop(16)]), 48),
])
def test_bypass_output_maps_to_model_space_point(pipe, size):
    model = make_model("linear", seed=2, input_size=16)
    orc = LocalOracle(pipe, model)
    x = make_rng(3).random((size, size, 1))
    y = orc.predict(x)
    before = orc.queries
    res = bypass_attack(pipe, orc, x, y, AttackConfig(budget=1000, seed=2))
    assert res.queries_used == orc.queries - before
    assert np.max(np.abs(pipe.transform(res.x_adv) - res.info["x_m_adv"])) <= 1e-6
    assert np.all((res.x_adv >= 0) & (res.x_adv <= 1))
    assert res.success and orc.predict(res.x_adv) != y
    assert res.distance == l2_distance(res.x_adv, x)


@pytest.mark.parametrize("pipe", [Quantize(4), Jpeg(75), PreprocessingPipeline([Resize(16), Quantize(8)])])
def test_bypass_rejects_non_bypassable(pipe):
    orc = LocalOracle(pipe, make_model("linear"))
    with pytest.raises(NotBypassableError, match="biased_gradient_attack"):
        bypass_attack(pipe, orc, np.zeros((16, 16, 1)), 0, AttackConfig())


# --- biased gradient --------------------------------------------------------------------------


def test_biased_estimate_with_identity_is_approx_grad():
    _, x, orc, y = _linear_case(7)
    x = 0.2 + 0.6 * x  # keep probes away from the clip so alpha'_b = alpha
    q = _Queries(orc, Criterion(y), np.inf)
    a, info = biased_grad_estimate(q, identity(), x, 0.05, 64, make_rng(2))
    b = approx_grad(orc, x, y, 64, 0.05, make_rng(2))
    np.testing.assert_allclose(a, b, atol=1e-12)
    assert info["kept"] == 64


def test_quantize_annihilates_most_small_probes():
    _, x, orc, y = _linear_case(8)
    before = orc.queries
    q = _Queries(orc, Criterion(y), np.inf)
    # probe radius 1e-3 is far below the 4-bit step 1/15
    _, info = biased_grad_estimate(q, Quantize(4), x, 1e-3, 200, make_rng(0))
    assert info["kept"] / info["B"] < 0.5
    assert orc.queries - before == 200  # dropped probes still cost a query


def test_biased_estimate_beats_naive_on_quantize4():
    pipe = Quantize(4)
    wins = 0
    for trial in range(100):
        model = make_model("linear", seed=trial, input_size=16)
        orc = LocalOracle(pipe, model)
        x = make_rng(5000 + trial).random((16, 16, 1))
        y = orc.predict(x)
        start = None
        for k in range(200):
            cand = make_rng(10_000 + 200 * trial + k).random(x.shape)
            if orc.predict(cand) != y:
                start = cand
                break
        xb = boundary_bisect(orc, start, x, 1e-6, y=y)
        other = orc.predict(xb)
        truth = flatten(model.margin_gradient(None, y, other))
        q = _Queries(orc, Criterion(y), np.inf)
        g_b, _ = biased_grad_estimate(q, pipe, xb, 0.1, 256, make_rng(trial))
        g_n = approx_grad(orc, xb, y, 256, 0.1, make_rng(trial))

        def cos(g):
            g = flatten(g)
            return g @ truth / (np.linalg.norm(g) * np.linalg.norm(truth))

        wins += cos(g_b) > cos(g_n)
    assert wins >= 80


def test_biased_attack_accounting():
    model = make_model("linear", seed=0, input_size=16)
    orc = LocalOracle(Quantize(4), model)
    x = make_rng(1).random((16, 16, 1))
    y = orc.predict(x)
    before = orc.queries
    res = biased_gradient_attack(Quantize(4), orc, x, y, AttackConfig(budget=1200, alpha=100, B=200))
    assert res.queries_used == orc.queries - before <= 1200
    assert res.success and orc.predict(res.x_adv) != y
    assert 0 < res.info["kept_fraction"] <= 1
    assert res.distance == l2_distance(res.x_adv, x)


# --- estimator wrappers -------------------------------------------------------------------------


def test_estimators_match_functions():
    _, x, orc, y = _linear_case(9)
    est = UnawareAttack(budget=800, seed=9)
    assert clone(est).get_params() == est.get_params()
    a = est.generate(orc, x, y)
    b = base_attack(orc, x, y, AttackConfig(budget=800, seed=9))
    assert np.array_equal(a.x_adv, b.x_adv)
    bp = BypassAttack(pipeline=Resize(16, "nearest"), budget=800).set_params(seed=1)
    assert bp.get_params()["seed"] == 1
    big = make_rng(0).random((32, 32, 1))
    orc32 = LocalOracle(Resize(16, "nearest"), make_model("linear", seed=9))
    assert bp.generate(orc32, big, orc32.predict(big)).success
    bg = BiasedGradientAttack(pipeline=Quantize(4), budget=800, alpha=100, B=200)
    orcq = LocalOracle(Quantize(4), make_model("linear", seed=9))
    assert bg.generate(orcq, x, orcq.predict(x)).success
