"""Seeded attack and extraction runs shared by the command line and the tests.

A scenario is a plain config document. Attack scenarios look like::

    scenario: nearest64
    victim:
      pipeline: {kind: resize, target: 16, interp: nearest}
      model: {kind: linear}
      input_size: 64
    attack:
      methods: {unaware: {gamma: 30}, bypass: {}}
      budget: 5000
      checkpoints: [500, 1000, 5000]
      seeds: 20

and extraction scenarios replace ``attack`` with ``extract``::

    extract:
      stages: [{family: crop, range: [8, 24]}]
      truths: [{kind: center_crop, target: 12}]   # optional
      victims: 20

Seed ``s`` fixes the model weights (``model.seed = s``), the clean image
(``make_rng(IMAGE_SEED_OFFSET + s)``) and the attack or extraction RNG.
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .attacks import AttackConfig, NotBypassableError, base_attack, biased_gradient_attack, bypass_attack
from .extraction import (
    ExtractionReport,
    crop_space,
    extract,
    extract_pipeline,
    jpeg_space,
    quantize_space,
    resize_space,
)
from .imagecore import make_rng
from .oracle import BudgetExhausted, HttpOracle, LocalOracle, make_model
from .preprocessing import PreprocessingPipeline, Quantize, as_pipeline, from_config

__all__ = [
    "METHODS",
    "AttackScenario",
    "ExtractionScenario",
    "clean_image",
    "run_attack",
    "summarize",
    "trace_rows",
    "run_extraction",
    "extraction_summary",
    "build_space",
]

METHODS = ("unaware", "bypass", "biased-grad", "no-preproc")
IMAGE_SEED_OFFSET = 1000
HPARAMS = ("B", "alpha", "gamma", "bisect_tol", "init_queries", "recovery_steps")


def _seed_list(spec, base=0):
    if spec is None:
        return [base]
    if isinstance(spec, int):
        if spec < 1:
            raise ValueError("seeds must be a positive count or a list")
        return list(range(base, base + spec))
    return [int(s) for s in spec]


def _model_cfg(doc, seed, input_size, channels):
    cfg = {"kind": "linear", **dict(doc or {})}
    cfg.update(seed=int(seed), input_size=int(input_size), channels=int(channels))
    return cfg


def clean_image(seed, size, channels=1, sample=0):
    """Deterministic clean input for ``seed``; ``sample`` picks further images."""
    rng = make_rng(IMAGE_SEED_OFFSET + seed + 7919 * sample)
    return rng.random((size, size, channels))


# --- attacks -------------------------------------------------------------------------


@dataclass
class AttackScenario:
    name: str
    pipeline: object
    model: dict
    input_size: int
    channels: int = 1
    methods: dict = field(default_factory=lambda: {"unaware": {}})
    budget: int = 5000
    checkpoints: list = None
    seeds: list = field(default_factory=lambda: [0])
    samples: int = 1
    hparams: dict = field(default_factory=dict)
    wire_quantize: bool = False

    @classmethod
    def from_dict(cls, doc, seed=None, budget=None):
        victim = doc.get("victim") or {}
        attack = doc.get("attack") or {}
        if "pipeline" not in victim or "input_size" not in victim:
            raise ValueError("attack scenario needs victim.pipeline and victim.input_size")
        methods = attack.get("methods", ["unaware"])
        if isinstance(methods, (list, tuple)):
            methods = {m: {} for m in methods}
        methods = {str(k): dict(v or {}) for k, v in methods.items()}
        for m, hp in methods.items():
            if m not in METHODS:
                raise ValueError(f"unknown method {m!r}; expected one of {METHODS}")
            bad = set(hp) - set(HPARAMS)
            if bad:
                raise ValueError(f"unknown hyperparameters for {m}: {sorted(bad)}")
        if not methods:
            raise ValueError("no attack methods given")
        base = int(seed) if seed is not None else int(attack.get("seed", 0))
        hparams = {k: attack[k] for k in HPARAMS if k in attack}
        scn = cls(
            name=str(doc.get("scenario", "attack")),
            pipeline=as_pipeline(from_config(victim["pipeline"])),
            model=dict(victim.get("model") or {}),
            input_size=int(victim["input_size"]),
            channels=int(victim.get("channels", 1)),
            methods=methods,
            budget=int(budget if budget is not None else attack.get("budget", 5000)),
            checkpoints=attack.get("checkpoints"),
            seeds=_seed_list(attack.get("seeds", 1), base),
            samples=int(attack.get("samples", 1)),
            hparams=hparams,
            wire_quantize=bool(victim.get("wire_quantize", False)),
        )
        scn.check()
        return scn

    def check(self):
        out = self.pipeline.output_shape((self.input_size, self.input_size, self.channels))
        if out[0] != out[1]:
            raise ValueError(f"pipeline output {out} is not square")
        if "bypass" in self.methods and not self.pipeline.bypassable:
            raise NotBypassableError(f"{self.pipeline.describe()} cannot be bypassed")
        AttackConfig(budget=self.budget, **self.config_kwargs(next(iter(self.methods))))

    @property
    def model_size(self):
        return self.pipeline.output_shape((self.input_size, self.input_size, self.channels))[0]

    @property
    def checkpoint_list(self):
        pts = self.checkpoints or [self.budget]
        return sorted({int(p) for p in pts if int(p) <= self.budget} | {self.budget})

    def config_kwargs(self, method):
        kw = dict(self.hparams)
        kw.update(self.methods.get(method, {}))
        return kw

    def victim_pipeline(self):
        """Pipeline the oracle runs; the PNG wire is modelled by a leading 8-bit quantize."""
        if self.wire_quantize:
            return PreprocessingPipeline([Quantize(8)] + self.pipeline.stages_list())
        return self.pipeline

    def model_for(self, seed):
        return make_model(**_model_cfg(self.model, seed, self.model_size, self.channels))


def _make_oracle(scn, seed, endpoint, budget):
    if endpoint:
        return HttpOracle(endpoint, budget=budget)
    return LocalOracle(scn.victim_pipeline(), scn.model_for(seed), budget=budget)


def run_attack(scn, method, seed, sample=0, endpoint=None):
    """One seeded attack run; returns ``(row, result)``.

    The clean label is read from the victim in a separate ``label`` phase
    and does not count towards the attack budget.
    """
    x_o = clean_image(seed, scn.input_size, scn.channels, sample)
    config = AttackConfig(budget=scn.budget, seed=seed, **scn.config_kwargs(method))
    oracle = _make_oracle(scn, seed, endpoint, None)
    with oracle.phase("label"):
        y = oracle.predict(x_o)
    with oracle.phase(method):
        if method == "unaware":
            res = base_attack(oracle, x_o, y, config)
        elif method == "bypass":
            res = bypass_attack(scn.pipeline, oracle, x_o, y, config)
        elif method == "biased-grad":
            res = biased_gradient_attack(scn.pipeline, oracle, x_o, y, config)
        elif method == "no-preproc":
            # same classifier without preprocessing, attacked at t(x_o); always in process
            ref = LocalOracle(PreprocessingPipeline([]), scn.model_for(seed))
            res = base_attack(ref, scn.pipeline.transform(x_o), y, config)
        else:
            raise ValueError(f"unknown method {method!r}")
    row = {
        "scenario": scn.name,
        "seed": int(seed),
        "sample": int(sample),
        "preprocessor": scn.pipeline.describe(),
        "method": method,
        "budget": scn.budget,
        "distance": float(res.distance),
        "queries": int(res.queries_used),
        "success": int(bool(res.success)),
    }
    return row, res


def trace_rows(row, trace, checkpoints):
    """Best distance reached within each query checkpoint (``inf`` before the first hit)."""
    out = []
    for cp in checkpoints:
        best = math.inf
        for used, dist in trace:
            if used <= cp:
                best = min(best, dist)
        out.append({
            "scenario": row["scenario"], "method": row["method"], "seed": row["seed"],
            "sample": row["sample"], "queries": int(cp), "best_distance": float(best),
        })
    return out


def summarize(rows, strict=False):
    """Per-method mean and std of ``distance``, plus the ratio to ``unaware``.

    Failed runs are excluded unless ``strict``, in which case they enter as
    ``inf``. Aggregates are computed from the rows exactly as given.
    """
    by_method = {}
    for r in rows:
        by_method.setdefault((r["scenario"], r["method"]), []).append(r)
    out = []
    means = {}
    for (scenario, method), group in sorted(by_method.items()):
        ok = [float(r["distance"]) for r in group if int(r["success"]) or strict]
        vals = [v if np.isfinite(v) else math.inf for v in ok]
        mean = float(np.mean(vals)) if vals else math.nan
        std = float(np.std(vals)) if vals and all(np.isfinite(vals)) else math.nan
        means[(scenario, method)] = mean
        out.append({
            "scenario": scenario, "method": method, "runs": len(group),
            "failed": sum(1 for r in group if not int(r["success"])),
            "mean_distance": mean, "std_distance": std,
            "mean_queries": float(np.mean([int(r["queries"]) for r in group])),
        })
    for rec in out:
        ref = means.get((rec["scenario"], "unaware"))
        rec["ratio_to_unaware"] = rec["mean_distance"] / ref if ref else math.nan
    return out


# --- extraction ----------------------------------------------------------------------------

_TYPICAL_TRUTHS = {
    "crop": None,
    "resize": None,
    "quantize": [4, 6, 8],
    "jpeg": list(range(50, 101, 10)),
}


def build_space(doc, input_size):
    """Hypothesis space from ``{family: ..., ...}``."""
    doc = dict(doc)
    family = doc.pop("family", None)
    if family == "crop":
        if "sizes" in doc:
            return crop_space(doc["sizes"])
        lo, hi = doc.get("range", [8, 24])
        return crop_space(range(int(lo), int(hi) + 1))
    if family == "resize":
        return resize_space(input_size, doc.get("sizes", [8, 12, 16]),
                            doc.get("interps", ("nearest", "bilinear", "bicubic")))
    if family == "quantize":
        return quantize_space(doc.get("bits", range(1, 9)))
    if family == "jpeg":
        if "qualities" in doc:
            return jpeg_space(doc["qualities"])
        lo, hi = doc.get("range", [50, 100])
        return jpeg_space(range(int(lo), int(hi) + 1))
    raise ValueError(f"unknown hypothesis family {family!r}")


def _default_truths(doc, space):
    family = doc.get("family")
    values = _TYPICAL_TRUTHS.get(family)
    if values is None:
        return list(space.candidates)
    if family == "quantize":
        return [c for c in space.candidates if c.bits in values]
    return [c for c in space.candidates if c.quality in values]


@dataclass
class ExtractionScenario:
    name: str
    spaces: list
    truth_pool: list
    model: dict
    input_size: int
    channels: int = 1
    seeds: list = field(default_factory=lambda: [0])
    alpha: float = 0.01
    K: int = 64
    J: int = 32
    p_trials: int = 20
    fixed_truth: bool = False

    @classmethod
    def from_dict(cls, doc, seed=None):
        ext = doc.get("extract") or {}
        victim = doc.get("victim") or {}
        stages = ext.get("stages")
        if not stages:
            raise ValueError("extraction scenario needs extract.stages")
        size = int(victim.get("input_size", ext.get("input_size", 32)))
        spaces = [build_space(s, size) for s in stages]
        if "truths" in ext:
            pool = [as_pipeline(from_config(t)) for t in ext["truths"]]
            fixed = True
        elif "pipeline" in victim:
            pool = [as_pipeline(from_config(victim["pipeline"]))]
            fixed = True
        elif len(stages) == 1:
            pool = _default_truths(stages[0], spaces[0])
            fixed = False
        else:
            raise ValueError("multi-stage extraction needs explicit truths")
        base = int(seed) if seed is not None else int(ext.get("seed", 0))
        return cls(
            name=str(doc.get("scenario", "extract")),
            spaces=spaces,
            truth_pool=pool,
            model=dict(victim.get("model") or {}),
            input_size=size,
            channels=int(victim.get("channels", 1)),
            seeds=_seed_list(ext.get("victims", 1), base),
            alpha=float(ext.get("alpha", 0.01)),
            K=int(ext.get("K", 64)),
            J=int(ext.get("J", 32)),
            p_trials=int(ext.get("p_trials", 20)),
            fixed_truth=fixed,
        )

    def truth_for(self, seed):
        if len(self.truth_pool) == 1:
            return self.truth_pool[0]
        rng = make_rng(seed)
        return self.truth_pool[int(rng.integers(len(self.truth_pool)))]

    def shape(self):
        return (self.input_size, self.input_size, self.channels)

    def victim(self, seed):
        """``(truth, model)`` of seeded victim ``seed``."""
        truth = self.truth_for(seed)
        size = as_pipeline(truth).output_shape(self.shape())[0]
        return truth, make_model(**_model_cfg(self.model, seed, size, self.channels))


def run_extraction(scn, seed, endpoint=None, budget=None):
    """One seeded victim; returns ``(report, partial)``.

    ``partial`` is set when the budget ran out or a stage could not be
    identified. Against an endpoint the truth is only known when the
    scenario names it.
    """
    if endpoint:
        truth = scn.truth_for(seed)
        oracle = HttpOracle(endpoint, budget=budget)
        true_spec = truth if scn.fixed_truth else None
    else:
        truth, model = scn.victim(seed)
        oracle = LocalOracle(truth, model, budget=budget)
        true_spec = truth
    kw = dict(seed=seed, alpha=scn.alpha, K=scn.K, J=scn.J, p_trials=scn.p_trials, true_spec=true_spec)
    try:
        if len(scn.spaces) == 1:
            report = extract(oracle, scn.spaces[0], scn.shape(), **kw)
        else:
            report = extract_pipeline(oracle, scn.spaces, scn.shape(), **kw)
    except BudgetExhausted:
        _, phases = oracle.counter.snapshot()
        report = ExtractionReport(
            alpha=scn.alpha, true_spec=true_spec, flags=["budget_exhausted"],
            queries_pair=phases.get("pair", 0), queries_p=phases.get("p_estimation", 0),
            queries_test=phases.get("testing", 0),
        )
    partial = report.identified is None or bool({"partial", "budget_exhausted"} & set(report.flags))
    return report, partial


def extraction_summary(rows):
    """Accuracy and mean +- std of total queries, from CSV-style rows."""
    queries = [int(r["queries_pair"]) + int(r["queries_p"]) + int(r["queries_test"]) for r in rows]
    scored = [int(r["correct"]) for r in rows if str(r["correct"]) != ""]
    return {
        "victims": len(rows),
        "accuracy": float(np.mean(scored)) if scored else math.nan,
        "mean_queries": float(np.mean(queries)) if queries else math.nan,
        "std_queries": float(np.std(queries)) if queries else math.nan,
    }


def with_budget(scn, budget):
    return replace(scn, budget=int(budget))
