"""Hard-label query boundary: toy classifiers, query accounting and oracles.

An oracle answers ``predict(x) -> label`` for original-space images and
counts every answer in a :class:`QueryCounter`. :class:`LocalOracle` runs the
pipeline and model in process; :class:`HttpOracle` talks to the bundled
victim service over PNG, so it only ever sees the 8-bit projection of ``x``.
"""

import contextlib
import threading
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import requests
from sklearn.base import BaseEstimator, ClassifierMixin

from .imagecore import check_image, flatten, make_rng, to_png
from .preprocessing import as_pipeline, from_config

__all__ = [
    "LinearToyModel",
    "MlpToyModel",
    "make_model",
    "model_from_config",
    "QueryCounter",
    "BudgetExhausted",
    "OracleError",
    "LocalOracle",
    "HttpOracle",
]


class BudgetExhausted(RuntimeError):
    """Raised when a query would exceed the oracle's budget."""


class OracleError(RuntimeError):
    """Remote oracle failure: network errors after retries or a bad response."""


# --- toy models -----------------------------------------------------------------


class _ToyModel(ClassifierMixin, BaseEstimator):
    """Seeded, untrained classifier on ``input_size x input_size x channels`` images.

    ``fit`` ignores its arguments and draws the weights from ``seed``; every
    prediction entry point fits lazily, so a fresh instance is usable as is.
    """

    kind = None

    def _fan_in_uniform(self, rng, shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    @property
    def input_shape(self):
        return (int(self.input_size), int(self.input_size), int(self.channels))

    @property
    def dim(self):
        return int(np.prod(self.input_shape))

    def _ensure_fitted(self):
        if not hasattr(self, "classes_"):
            self.fit()

    def _features(self, X):
        X = np.asarray(X, dtype=np.float64)
        single = X.shape == self.input_shape
        if single:
            X = X[None]
        if X.shape[1:] != self.input_shape:
            raise ValueError(f"model expects {self.input_shape}, got {X.shape[1:]}")
        return flatten(X), single

    def decision_function(self, X):
        """Logits for one image or a batch."""
        self._ensure_fitted()
        feats, single = self._features(X)
        out = self._logits(feats)
        return out[0] if single else out

    def predict(self, X):
        # np.argmax returns the first maximum, i.e. ties go to the lowest class
        logits = self.decision_function(X)
        return np.argmax(logits, axis=-1)

    def margin_gradient(self, x, label, other):
        """Gradient of ``logit[other] - logit[label]`` at model-space ``x``."""
        raise NotImplementedError

    def to_config(self):
        cfg = {"kind": self.kind}
        cfg.update(self.get_params())
        return cfg


class LinearToyModel(_ToyModel):
    kind = "linear"

    def __init__(self, input_size=16, channels=1, n_classes=10, seed=0):
        self.input_size = input_size
        self.channels = channels
        self.n_classes = n_classes
        self.seed = seed

    def fit(self, X=None, y=None):
        rng = make_rng(self.seed)
        d = self.dim
        self.coef_ = self._fan_in_uniform(rng, (self.n_classes, d), d)
        self.intercept_ = self._fan_in_uniform(rng, (self.n_classes,), d)
        self.classes_ = np.arange(self.n_classes)
        return self

    def _logits(self, feats):
        return feats @ self.coef_.T + self.intercept_

    def margin_gradient(self, x, label, other):
        self._ensure_fitted()
        g = self.coef_[other] - self.coef_[label]
        c, h, w = self.input_shape[2], self.input_shape[0], self.input_shape[1]
        return np.moveaxis(g.reshape(c, h, w), 0, -1)


class MlpToyModel(_ToyModel):
    kind = "mlp"

    def __init__(self, input_size=16, channels=1, n_classes=10, seed=0, hidden=32):
        self.input_size = input_size
        self.channels = channels
        self.n_classes = n_classes
        self.seed = seed
        self.hidden = hidden

    def fit(self, X=None, y=None):
        rng = make_rng(self.seed)
        d = self.dim
        self.w1_ = self._fan_in_uniform(rng, (self.hidden, d), d)
        self.b1_ = self._fan_in_uniform(rng, (self.hidden,), d)
        self.w2_ = self._fan_in_uniform(rng, (self.n_classes, self.hidden), self.hidden)
        self.b2_ = self._fan_in_uniform(rng, (self.n_classes,), self.hidden)
        self.classes_ = np.arange(self.n_classes)
        return self

    def _logits(self, feats):
        h = np.maximum(feats @ self.w1_.T + self.b1_, 0.0)
        return h @ self.w2_.T + self.b2_

    def margin_gradient(self, x, label, other):
        self._ensure_fitted()
        feats, _ = self._features(x)
        active = (feats[0] @ self.w1_.T + self.b1_) > 0
        g = (self.w2_[other] - self.w2_[label]) * active
        g = g @ self.w1_
        c, h, w = self.input_shape[2], self.input_shape[0], self.input_shape[1]
        return np.moveaxis(g.reshape(c, h, w), 0, -1)


_MODELS = {"linear": LinearToyModel, "mlp": MlpToyModel}


def make_model(kind="linear", **params):
    if kind not in _MODELS:
        raise ValueError(f"unknown model kind {kind!r}; expected one of {sorted(_MODELS)}")
    return _MODELS[kind](**params).fit()


def model_from_config(cfg):
    cfg = dict(cfg)
    return make_model(cfg.pop("kind", "linear"), **cfg)


# --- accounting -------------------------------------------------------------------


class QueryCounter:
    """Thread-safe total plus per-phase query counts."""

    def __init__(self):
        self._lock = threading.Lock()
        self.total = 0
        self.per_phase = {}

    def add(self, phase, n=1):
        with self._lock:
            self.total += n
            self.per_phase[phase] = self.per_phase.get(phase, 0) + n

    def snapshot(self):
        with self._lock:
            return self.total, dict(self.per_phase)

    def __repr__(self):
        total, phases = self.snapshot()
        return f"QueryCounter(total={total}, per_phase={phases})"


class _OracleBase:
    def __init__(self, budget=None, counter=None):
        self.budget = budget
        self.counter = counter if counter is not None else QueryCounter()
        self._phase = "default"

    @property
    def queries(self):
        return self.counter.total

    @property
    def remaining(self):
        if self.budget is None:
            return None
        return self.budget - self.counter.total

    @contextlib.contextmanager
    def phase(self, name):
        """Book queries issued inside the block under ``name``."""
        old, self._phase = self._phase, name
        try:
            yield self
        finally:
            self._phase = old

    def _check_budget(self, n):
        if self.budget is not None and self.counter.total + n > self.budget:
            raise BudgetExhausted(f"query budget {self.budget} exhausted")

    def predict(self, x):
        return int(self.predict_batch([x])[0])

    def __call__(self, x):
        return self.predict(x)


class LocalOracle(_OracleBase):
    """In-process ``model(pipeline(x))``.

    Parameters
    ----------
    pipeline : Preprocessor or dict
        Victim preprocessing; dicts go through :func:`from_config`.
    model : fitted toy model
    budget : int, optional
        Hard cap on total queries; exceeding it raises :class:`BudgetExhausted`.
    """

    def __init__(self, pipeline, model, budget=None, counter=None):
        super().__init__(budget, counter)
        self.pipeline = as_pipeline(from_config(pipeline))
        self.model = model

    def model_space(self, x):
        """Preprocess without querying; raises on a size mismatch."""
        x_m = self.pipeline.transform(x)
        if x_m.shape != self.model.input_shape:
            raise ValueError(
                f"preprocessed shape {x_m.shape} does not match model input {self.model.input_shape}"
            )
        return x_m

    def predict_batch(self, xs):
        xs = [check_image(x) for x in xs]
        # preprocess everything first so a bad element fails before counting
        feats = [self.model_space(x) for x in xs]
        if not feats:
            return np.zeros(0, dtype=int)
        self._check_budget(len(feats))
        self.counter.add(self._phase, len(feats))
        return np.array([int(self.model.predict(f)) for f in feats], dtype=int)


class HttpOracle(_OracleBase):
    """Client for the victim service's ``POST /predict`` route.

    Transient failures (connection errors, 5xx) are retried ``retries`` times
    with exponential backoff; only successful predictions are counted.
    ``predict_batch`` keeps up to ``max_workers`` requests in flight and
    returns labels in input order.
    """

    def __init__(self, endpoint, budget=None, counter=None, retries=3, backoff=0.05,
                 timeout=10.0, max_workers=8):
        super().__init__(budget, counter)
        self.endpoint = endpoint.rstrip("/")
        self.retries = retries
        self.backoff = backoff
        self.timeout = timeout
        self.max_workers = max_workers
        self._local = threading.local()

    def _session(self):
        if not hasattr(self._local, "session"):
            self._local.session = requests.Session()
        return self._local.session

    def _post(self, body):
        url = f"{self.endpoint}/predict"
        last = None
        for attempt in range(self.retries + 1):
            try:
                resp = self._session().post(
                    url, data=body, headers={"Content-Type": "image/png"}, timeout=self.timeout
                )
            except requests.RequestException as exc:
                last = exc
            else:
                if resp.status_code < 500:
                    return resp
                last = OracleError(f"server error {resp.status_code}")
            if attempt < self.retries:
                time.sleep(self.backoff * 2**attempt)
        raise OracleError(f"request to {url} failed after {self.retries} retries: {last}")

    def _predict_one(self, body, phase):
        resp = self._post(body)
        if resp.status_code != 200:
            raise OracleError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            label = resp.json()["label"]
        except (ValueError, KeyError, TypeError) as exc:
            raise OracleError(f"malformed response: {resp.text[:200]!r}") from exc
        if isinstance(label, bool) or not isinstance(label, int):
            raise OracleError(f"malformed label {label!r}")
        self.counter.add(phase, 1)
        return label

    def predict_batch(self, xs):
        bodies = [to_png(check_image(x)) for x in xs]
        if not bodies:
            return np.zeros(0, dtype=int)
        self._check_budget(len(bodies))
        phase = self._phase
        if len(bodies) == 1 or self.max_workers <= 1:
            return np.array([self._predict_one(b, phase) for b in bodies], dtype=int)
        with ThreadPoolExecutor(max_workers=self.max_workers) as pool:
            labels = list(pool.map(lambda b: self._predict_one(b, phase), bodies))
        return np.array(labels, dtype=int)

    def healthy(self):
        try:
            return self._session().get(f"{self.endpoint}/healthz", timeout=self.timeout).status_code == 200
        except requests.RequestException:
            return False
