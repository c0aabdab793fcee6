"""Identify a victim's preprocessing from hard labels alone.

The procedure has three parts.

1. An unstable pair: two 8-bit images one grey level apart in a single pixel
   that the victim labels differently.
2. Pre-images: for a guessed preprocessor ``g``, random single-level moves
   applied to *both* pair members, kept only when ``g`` maps each member to
   exactly the same output as before.
3. A test: if ``g`` is the true preprocessor the victim cannot see the moves,
   so both labels survive every trial. If ``g`` is wrong the moves reach the
   model and the fragile pair tends to collapse to one label.

The number of trials comes from an estimate ``p_hat`` of how often random
perturbations of the same scale collapse the pair.
"""

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import binomtest
from sklearn.base import BaseEstimator

from .imagecore import check_image, l0_diff, linf_diff, make_rng
from .linear import build_linear
from .preprocessing import (
    CenterCrop,
    Jpeg,
    PreprocessingPipeline,
    Quantize,
    Resize,
    as_pipeline,
    from_config,
)

__all__ = [
    "UnstablePair",
    "HypothesisSpace",
    "ExtractionReport",
    "PreimageResult",
    "random_initial_pair",
    "gen_unstable_pair",
    "gen_preimage",
    "estimate_p",
    "equivalent",
    "num_trials",
    "p_interval",
    "test_hypothesis",
    "crop_space",
    "resize_space",
    "quantize_space",
    "jpeg_space",
    "extract_crop_size",
    "extract_resize",
    "extract_quantize",
    "extract_jpeg_quality",
    "extract",
    "extract_pipeline",
    "PreprocessorExtractor",
]

LEVEL = 1.0 / 255.0
ACCEPT, REJECT, UNTESTABLE = "accept", "reject", "untestable"


class PairConstructionError(RuntimeError):
    pass


@dataclass
class UnstablePair:
    u0: np.ndarray
    u1: np.ndarray
    label0: int
    label1: int
    queries: int = 0
    mix_steps: int = 0

    def check(self):
        return (
            self.label0 != self.label1
            and l0_diff(self.u0, self.u1) == 1
            and abs(linf_diff(self.u0, self.u1) - LEVEL) <= 1e-12
        )


@dataclass
class HypothesisSpace:
    """Ordered candidate list plus the search strategy that walks it."""

    candidates: list
    strategy: str = "exhaustive"
    pair_tile: int = None

    def __post_init__(self):
        if not self.candidates:
            raise ValueError("hypothesis space is empty")
        if self.strategy not in ("exhaustive", "binary_crop", "typical_resize"):
            raise ValueError(f"unknown strategy {self.strategy!r}")


@dataclass
class ExtractionReport:
    identified: object = None
    queries_pair: int = 0
    queries_p: int = 0
    queries_test: int = 0
    trials: int = 0
    p_hat: float = float("nan")
    p_ci: tuple = (float("nan"), float("nan"))
    alpha: float = 0.01
    true_spec: object = None
    flags: list = field(default_factory=list)
    tested: list = field(default_factory=list)
    input_shape: tuple = None

    @property
    def queries_used(self):
        return self.queries_pair + self.queries_p + self.queries_test

    @property
    def correct(self):
        if self.true_spec is None or self.identified is None:
            return None if self.true_spec is None else False
        if as_pipeline(self.identified) == as_pipeline(self.true_spec):
            return True
        # a differently written pipeline still counts when it computes the same map
        return self.input_shape is not None and equivalent(self.identified, self.true_spec, self.input_shape)

    @staticmethod
    def _describe(spec):
        return "" if spec is None else as_pipeline(spec).describe()

    def row(self):
        return {
            "true_spec": self._describe(self.true_spec),
            "identified_spec": self._describe(self.identified),
            "queries_pair": self.queries_pair,
            "queries_p": self.queries_p,
            "queries_test": self.queries_test,
            "trials": self.trials,
            "p_hat": round(float(self.p_hat), 6),
            "p_ci_low": round(float(self.p_ci[0]), 6),
            "p_ci_high": round(float(self.p_ci[1]), 6),
            "correct": "" if self.correct is None else int(self.correct),
            "flags": ";".join(self.flags),
        }

    CSV_COLUMNS = (
        "true_spec", "identified_spec", "queries_pair", "queries_p",
        "queries_test", "trials", "p_hat", "p_ci_low", "p_ci_high", "correct", "flags",
    )

    def to_csv_row(self):
        buf = io.StringIO()
        csv.DictWriter(buf, fieldnames=self.CSV_COLUMNS, lineterminator="\n").writerow(self.row())
        return buf.getvalue()

    def to_json(self):
        d = asdict(self)
        d["identified"] = None if self.identified is None else self.identified.to_config()
        d["true_spec"] = None if self.true_spec is None else self.true_spec.to_config()
        d["tested"] = [(self._describe(s), v) for s, v in self.tested]
        d["queries_used"] = self.queries_used
        d["correct"] = self.correct
        return json.dumps(d, sort_keys=True)


def equivalent(a, b, shape, trials=100, seed=0):
    """True when ``a`` and ``b`` agree on ``trials`` random 8-bit images of ``shape``."""
    a, b = as_pipeline(a), as_pipeline(b)
    try:
        if a.output_shape(tuple(shape)) != b.output_shape(tuple(shape)):
            return False
    except ValueError:
        return False
    xs = make_rng(seed).integers(0, 256, size=(trials,) + tuple(shape)) / 255.0
    return bool(np.allclose(a.transform(xs), b.transform(xs), rtol=0.0, atol=1e-12))


def _grid(x):
    return np.floor(np.asarray(x, dtype=np.float64) * 255.0 + 0.5) / 255.0


def _labels(oracle, xs):
    return [int(v) for v in oracle.predict_batch(list(xs))]


# --- unstable pairs -------------------------------------------------------------------


def _random_image(shape, rng, block=None):
    """Gray level plus noise at a random amplitude and block size.

    Plain uniform noise averages out under heavy downscaling, so every draw
    lands in the same class; low-frequency content keeps the labels varied.
    """
    h, w = shape[0], shape[1]
    block = int(rng.choice([1, 2, 4, 8])) if block is None else int(block)
    coarse = rng.random((-(-h // block), -(-w // block)) + tuple(shape[2:]))
    noise = np.repeat(np.repeat(coarse, block, axis=0), block, axis=1)[:h, :w]
    level = rng.random(tuple(shape[2:]) or None)
    amp = 2.0 * rng.random()
    return _grid(np.clip(level + amp * (noise - 0.5), 0.0, 1.0))


def _tile_mask(shape, rng, tile):
    h, w = shape[0], shape[1]
    coarse = rng.random((-(-h // tile), -(-w // tile))) < 0.5
    mask = np.repeat(np.repeat(coarse, tile, axis=0), tile, axis=1)[:h, :w]
    return mask.reshape((h, w) + (1,) * (len(shape) - 2))


def random_initial_pair(oracle, shape, rng, max_tries=1000, tile=None):
    """Two random 8-bit images with different labels, by rejection sampling.

    With ``tile`` both images are constant on aligned ``tile x tile`` blocks
    and the second keeps a random half of the first one's blocks. Blocks the
    two share stay flat through pair construction, which is what gives
    near-lossless JPEG guesses any pre-image moves at all.
    """
    first = _random_image(shape, rng, tile)
    l_first = oracle.predict(first)
    for _ in range(max_tries):
        cand = _random_image(shape, rng, tile)
        if tile is not None:
            cand = np.where(_tile_mask(shape, rng, tile), first, cand)
        if oracle.predict(cand) != l_first:
            return first, cand
    raise PairConstructionError("could not find two differently labelled random images")


def gen_unstable_pair(oracle, x0, x1, rng, stall_limit=50, max_restarts=5):
    """Shrink a differently labelled pair to a single-pixel, single-level difference.

    Phase 1 replaces one endpoint with a random mix of the two, taking a
    random proper subset of the differing coordinates from the other
    endpoint, until one coordinate remains. Phase 2 bisects that coordinate
    on the 8-bit grid. A third label simply replaces the second endpoint.
    Costs two verification queries plus one per mixing or bisection step.
    """
    a = _grid(check_image(x0))
    b = _grid(check_image(x1))
    if a.shape != b.shape:
        raise ValueError("pair endpoints must have the same shape")
    start = oracle.counter.total
    la, lb = _labels(oracle, [a, b])
    if la == lb:
        raise ValueError("initial images have the same label")
    orig = (a, b, la, lb)
    restarts = 0
    stalled = 0
    mix_steps = 0
    flat_a, flat_b = a.reshape(-1), b.reshape(-1)
    best_len = flat_a.size + 1
    while True:
        diff = np.flatnonzero(flat_a != flat_b)
        if len(diff) <= 1:
            break
        if len(diff) < best_len:
            best_len, stalled = len(diff), 0
        else:
            stalled += 1
        if stalled >= stall_limit:
            restarts += 1
            if restarts > max_restarts:
                raise PairConstructionError("phase 1 made no progress")
            flat_a, flat_b = orig[0].reshape(-1), orig[1].reshape(-1)
            la, lb = orig[2], orig[3]
            best_len, stalled, mix_steps = flat_a.size + 1, 0, 0
            continue
        mix_steps += 1
        take = rng.random(len(diff)) < 0.5
        while take.all() or not take.any():
            take = rng.random(len(diff)) < 0.5
        mix = flat_a.copy()
        mix[diff[take]] = flat_b[diff[take]]
        (lm,) = _labels(oracle, [mix.reshape(a.shape)])
        if lm == la:
            flat_a = mix
        elif lm == lb:
            flat_b = mix
        else:
            flat_b, lb = mix, lm
    (k,) = np.flatnonzero(flat_a != flat_b)
    va = int(round(flat_a[k] * 255))
    vb = int(round(flat_b[k] * 255))
    while abs(va - vb) > 1:
        mid = (va + vb) // 2
        mix = flat_a.copy()
        mix[k] = mid / 255.0
        (lm,) = _labels(oracle, [mix.reshape(a.shape)])
        if lm == la:
            flat_a, va = mix, mid
        elif lm == lb:
            flat_b, vb = mix, mid
        else:
            flat_b, vb, lb = mix, mid, lm
    return UnstablePair(
        flat_a.reshape(a.shape).copy(), flat_b.reshape(a.shape).copy(), la, lb,
        oracle.counter.total - start, mix_steps,
    )


# --- pre-images ----------------------------------------------------------------------------


@dataclass
class PreimageResult:
    images: list
    accepted: int
    proposals: int

    @property
    def no_preimage(self):
        return self.accepted == 0


def gen_preimage(t_guess, u, K=64, rng=None, J=32, joint=None):
    """Random walk of single-level moves invisible to ``t_guess``.

    Each of ``K`` steps draws ``J`` proposals (coordinate, +-1/255) and keeps
    those for which ``t_guess`` still maps every image to exactly its
    starting output. All kept proposals are applied together when the
    combination is still invisible; otherwise the set is halved until it is,
    down to the single first hit. With ``joint`` the same moves are applied
    to ``u`` and to each image in ``joint``, which is how pair members are
    moved together.

    Returns
    -------
    PreimageResult
        ``images`` holds the moved copies of ``u`` followed by ``joint``;
        ``accepted`` counts applied single-level moves and ``no_preimage`` is
        set when none was ever applied.
    """
    rng = rng if rng is not None else make_rng(0)
    spec = as_pipeline(from_config(t_guess))
    imgs = [_grid(check_image(u))] + [_grid(check_image(v)) for v in (joint or [])]
    shape = imgs[0].shape
    stack = np.stack(imgs).reshape(len(imgs), -1)
    target = spec.transform(stack.reshape((-1,) + shape))
    n_img, size = stack.shape

    def invisible(flat, inside=None):
        # flat: (m, n_img, size) -> bool (m,)
        m = flat.shape[0]
        if inside is None:
            inside = np.all((flat >= 0.0) & (flat <= 1.0), axis=(1, 2))
        out = spec.transform(flat.reshape((m * n_img,) + shape)).reshape((m,) + target.shape)
        return inside & np.all(out == target[None], axis=tuple(range(1, out.ndim)))

    accepted = proposals = 0
    # a coordinate keeps the direction of its first applied move, so repeated
    # moves add up instead of cancelling
    direction = np.zeros(size)
    for _ in range(K):
        coords = rng.integers(0, size, size=J)
        fresh = np.where(rng.random(J) < 0.5, -LEVEL, LEVEL)
        steps = np.where(direction[coords] != 0.0, direction[coords], fresh)
        cand = np.repeat(stack[None], J, axis=0)
        # only the moved coordinate can leave the grid
        vals = _grid(stack[:, coords].T + steps[:, None])
        cand[np.arange(J), :, coords] = vals
        hits = np.flatnonzero(invisible(cand, np.all((vals >= 0.0) & (vals <= 1.0), axis=1)))
        proposals += J
        if not len(hits):
            continue
        while True:
            moved = stack.copy()
            np.add.at(moved, (slice(None), coords[hits]), steps[hits])
            moved = _grid(moved)
            if len(hits) == 1 or invisible(moved[None])[0]:
                break
            hits = hits[: len(hits) // 2]
        stack = moved
        direction[coords[hits]] = steps[hits]
        accepted += len(hits)
    return PreimageResult([stack[i].reshape(shape).copy() for i in range(n_img)], accepted, proposals)


def _flip_perturbation(shape, rng, fraction=0.25):
    z = np.zeros(int(np.prod(shape)))
    picked = rng.random(z.size) < fraction
    z[picked] = np.where(rng.random(int(picked.sum())) < 0.5, -LEVEL, LEVEL)
    return z.reshape(shape)


def estimate_p(oracle, pair, trials=20, rng=None, fraction=0.25, scale=1.0):
    """Frequency with which one random perturbation gives both members the same label.

    The perturbation flips a random ``fraction`` of coordinates by
    ``+-scale/255`` and is shared by both members. Costs ``2 * trials``
    queries.
    """
    if trials < 10:
        raise ValueError("estimate_p needs at least 10 trials")
    rng = rng if rng is not None else make_rng(0)
    hits = 0
    for _ in range(trials):
        z = _flip_perturbation(pair.u0.shape, rng, fraction) * scale
        a, b = _labels(oracle, [_clip_grid(pair.u0 + z), _clip_grid(pair.u1 + z)])
        hits += a == b
    return hits / trials


def p_interval(p_hat, trials, confidence=0.95):
    """Wilson interval for an instability estimate from ``trials`` draws."""
    ci = binomtest(int(round(p_hat * trials)), int(trials)).proportion_ci(confidence, method="wilson")
    return (float(ci.low), float(ci.high))


def _clip_grid(x):
    return _grid(np.clip(x, 0.0, 1.0))


def num_trials(p_hat, alpha=0.01, floor=10, cap=20):
    """``ceil(log(alpha) / log(1 - p_hat))`` clamped to ``[floor, cap]``."""
    if p_hat >= 1.0:
        return floor
    if p_hat <= 0.0:
        return cap
    n = math.ceil(math.log(alpha) / math.log(1.0 - p_hat))
    return int(min(max(n, floor), cap))


def test_hypothesis(oracle, pair, t_guess, num_trials, alpha=0.01, rng=None, K=64, J=32, stats=None):
    """Accept ``t_guess`` iff every trial's pre-image pair keeps both labels.

    Returns ``"accept"``, ``"reject"`` or ``"untestable"`` (a walk found no
    pre-image move; when that happens on the first trial no query is spent).
    Each trial queries its pre-image pair before the next walk starts and
    the test stops at the first collapsed trial, so an accepted guess costs
    ``2 * num_trials`` queries and a rejected one at most that. A ``stats``
    dict receives the mean number of accepted pre-image moves per trial
    under ``"moves"``.
    """
    if num_trials < 1:
        raise ValueError("num_trials must be at least 1")
    rng = rng if rng is not None else make_rng(0)
    moves = []
    for _ in range(num_trials):
        res = gen_preimage(t_guess, pair.u0, K=K, rng=rng, J=J, joint=[pair.u1])
        moves.append(res.accepted)
        if stats is not None:
            stats["moves"] = float(np.mean(moves))
        if res.no_preimage:
            return UNTESTABLE
        a, b = _labels(oracle, res.images)
        if a != pair.label0 or b != pair.label1:
            return REJECT
    return ACCEPT


# --- hypothesis spaces --------------------------------------------------------------------------


def crop_space(sizes):
    return HypothesisSpace([CenterCrop(int(s)) for s in sorted(sizes)], "binary_crop")


def influence_count(spec, s_o):
    """Number of input pixels that reach the output of a linear spec."""
    lin = build_linear(spec, s_o)
    return int(np.count_nonzero(np.asarray(abs(lin.matrix).sum(axis=0)).ravel()))


def resize_space(s_o, sizes, interps=("nearest", "bilinear", "bicubic")):
    """Resize guesses ordered by how many input pixels they read, fewest first.

    A guess that reads a superset of the true pixels cannot be told apart
    from the truth, so smaller footprints have to be tested first.
    """
    cands = [Resize(int(s), i) for s in sizes for i in interps]
    cands.sort(key=lambda c: (influence_count(c, s_o), c.target, c.interp))
    return HypothesisSpace(cands, "typical_resize")


def quantize_space(bits=range(1, 9)):
    return HypothesisSpace([Quantize(int(b)) for b in sorted(bits)], "exhaustive")


def jpeg_space(qualities=range(50, 101)):
    return HypothesisSpace([Jpeg(int(q)) for q in sorted(qualities)], "exhaustive", pair_tile=8)


# --- search -------------------------------------------------------------------------------------------


class _Session:
    """Shared state for one extraction run: pair, trial count and query books."""

    def __init__(self, oracle, pair, report, rng, alpha, K, J, prefix=()):
        self.oracle = oracle
        self.pair = pair
        self.report = report
        self.rng = rng
        self.alpha = alpha
        self.K = K
        self.J = J
        self.prefix = list(prefix)

    def guess(self, cand):
        if not self.prefix:
            return cand
        return PreprocessingPipeline(self.prefix + [cand])

    def test(self, cand):
        start = self.oracle.counter.total
        stats = {}
        with self.oracle.phase("testing"):
            verdict = test_hypothesis(
                self.oracle, self.pair, self.guess(cand), self.report.trials,
                self.alpha, self.rng, self.K, self.J, stats=stats,
            )
        self.report.queries_test += self.oracle.counter.total - start
        self.report.tested.append((cand, verdict))
        if verdict == ACCEPT and stats.get("moves", np.inf) < self.K:
            # under one accepted move per walk step: pre-images barely differ from the pair
            self.report.flags.append("low_power")
        return verdict


def _binary_crop(session, cands):
    lo, hi = 0, len(cands) - 1
    verdicts = {}
    while lo < hi:
        mid = (lo + hi) // 2
        verdicts[mid] = session.test(cands[mid])
        if verdicts[mid] == ACCEPT:
            hi = mid
        else:
            lo = mid + 1
    if lo not in verdicts:
        verdicts[lo] = session.test(cands[lo])
    if verdicts[lo] != ACCEPT:
        # truth lies beyond the largest candidate; report the boundary
        session.report.flags.append("range_mismatch")
    return cands[lo]


def _first_accepted(session, cands):
    untestable = []
    for cand in cands:
        verdict = session.test(cand)
        if verdict == ACCEPT:
            return cand
        if verdict == UNTESTABLE:
            untestable.append(cand)
    if len(untestable) == 1:
        # everything testable was rejected; the one guess without pre-images remains
        session.report.flags.append("identified_by_elimination")
        return untestable[0]
    session.report.flags.append("all_rejected" if not untestable else "ambiguous_untestable")
    return None


def _search(session, space):
    if space.strategy == "binary_crop":
        return _binary_crop(session, space.candidates)
    return _first_accepted(session, space.candidates)


def _prepare(oracle, shape, rng, alpha, p_trials, pair=None, report=None, tile=None):
    report = report if report is not None else ExtractionReport(alpha=alpha)
    if pair is None:
        start = oracle.counter.total
        with oracle.phase("pair"):
            x0, x1 = random_initial_pair(oracle, shape, rng, tile=tile)
            pair = gen_unstable_pair(oracle, x0, x1, rng)
        report.queries_pair += oracle.counter.total - start
    start = oracle.counter.total
    with oracle.phase("p_estimation"):
        report.p_hat = estimate_p(oracle, pair, p_trials, rng)
    report.p_ci = p_interval(report.p_hat, p_trials)
    report.queries_p += oracle.counter.total - start
    report.trials = num_trials(report.p_hat, alpha)
    return pair, report


def extract(oracle, space, shape, seed=0, alpha=0.01, K=64, J=32, p_trials=20, pair=None,
            true_spec=None):
    """Identify a single-stage preprocessor from ``space``.

    ``shape`` is the input shape used for all queries. Returns an
    :class:`ExtractionReport` whose ``identified`` is ``None`` on failure.
    """
    rng = make_rng(seed)
    pair, report = _prepare(oracle, shape, rng, alpha, p_trials, pair, tile=space.pair_tile)
    report.true_spec = true_spec
    report.input_shape = tuple(shape)
    session = _Session(oracle, pair, report, rng, alpha, K, J)
    report.identified = _search(session, space)
    return report


def extract_crop_size(oracle, pair, sizes, **kw):
    return _extract_with_pair(oracle, pair, crop_space(sizes), **kw)


def extract_resize(oracle, pair, space, **kw):
    return _extract_with_pair(oracle, pair, space, **kw)


def extract_quantize(oracle, pair, bits=range(1, 9), **kw):
    return _extract_with_pair(oracle, pair, quantize_space(bits), **kw)


def extract_jpeg_quality(oracle, pair, qualities=range(50, 101), **kw):
    return _extract_with_pair(oracle, pair, jpeg_space(qualities), **kw)


def _extract_with_pair(oracle, pair, space, seed=0, **kw):
    return extract(oracle, space, pair.u0.shape, seed=seed, pair=pair, **kw)


def extract_pipeline(oracle, stage_spaces, shape, seed=0, alpha=0.01, K=64, J=32,
                     p_trials=20, true_spec=None):
    """Extract stages front to back, then confirm the full composite.

    Stage ``i`` is tested with guesses ``Pipeline(revealed + [candidate])``;
    the later stages stay inside the black box. A failed stage stops the
    search and leaves ``identified`` as the partial pipeline plus the
    ``partial`` flag.
    """
    rng = make_rng(seed)
    tiles = [sp.pair_tile for sp in stage_spaces if sp.pair_tile is not None]
    pair, report = _prepare(oracle, shape, rng, alpha, p_trials, tile=max(tiles, default=None))
    report.true_spec = true_spec
    report.input_shape = tuple(shape)
    revealed = []
    for space in stage_spaces:
        session = _Session(oracle, pair, report, rng, alpha, K, J, prefix=revealed)
        found = _search(session, space)
        if found is None:
            report.flags.append("partial")
            report.identified = PreprocessingPipeline(list(revealed)) if revealed else None
            return report
        revealed.append(found)
    final = PreprocessingPipeline(list(revealed))
    session = _Session(oracle, pair, report, rng, alpha, K, J)
    verdict = session.test(final)
    if verdict == REJECT:
        report.flags.append("composite_rejected")
    report.identified = final
    return report


class PreprocessorExtractor(BaseEstimator):
    """Estimator wrapper: ``fit(oracle, shape)`` sets ``identified_`` and ``report_``.

    Parameters
    ----------
    spaces : list of HypothesisSpace
        One space per pipeline stage, front to back.
    """

    def __init__(self, spaces=None, alpha=0.01, K=64, J=32, p_trials=20, seed=0):
        self.spaces = spaces
        self.alpha = alpha
        self.K = K
        self.J = J
        self.p_trials = p_trials
        self.seed = seed

    def fit(self, oracle, shape, true_spec=None):
        if not self.spaces:
            raise ValueError("at least one hypothesis space is required")
        kw = dict(seed=self.seed, alpha=self.alpha, K=self.K, J=self.J,
                  p_trials=self.p_trials, true_spec=true_spec)
        if len(self.spaces) == 1:
            self.report_ = extract(oracle, self.spaces[0], shape, **kw)
        else:
            self.report_ = extract_pipeline(oracle, self.spaces, shape, **kw)
        self.identified_ = self.report_.identified
        return self
