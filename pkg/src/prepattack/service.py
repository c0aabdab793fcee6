"""Hard-label victim service: PNG in, ``{"label": int}`` out.

The service wraps a preprocessing pipeline and a toy model behind
``POST /predict`` and ``GET /healthz``. Responses carry no configuration
details and no ``Date`` header, so identical request bytes always produce
identical response bytes.
"""

import contextlib
import json
import logging
import os
import threading
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import yaml

from .imagecore import from_png
from .oracle import model_from_config
from .preprocessing import CenterCrop, PreprocessingPipeline, Resize, as_pipeline, from_config

__all__ = ["ServiceConfig", "VictimService", "load_service_config", "make_server", "running", "serve"]

log = logging.getLogger(__name__)

MAX_BODY_BYTES = 8 * 1024 * 1024
ENV_BIND = "PREPATTACK_BIND"
ENV_SEED = "PREPATTACK_SEED"


class NoRouteError(ValueError):
    """The input size cannot be mapped onto the model input."""


def _parse_bind(bind):
    host, _, port = str(bind).rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"bind address must look like host:port, got {bind!r}")
    return host, int(port)


@dataclass
class ServiceConfig:
    """Everything the service needs.

    Parameters
    ----------
    pipeline : Preprocessor
    model : fitted toy model
    expected_input : int, optional
        Square input size the pipeline was built for. A pipeline that starts
        with a crop gets a bilinear resize to this size prepended for inputs
        of any other size.
    host, port : str, int
        Bind address; port 0 picks a free port.
    max_body_bytes : int
    query_cap : int, optional
        Answer 429 once this many predictions have been served.
    """

    pipeline: object
    model: object
    expected_input: int = None
    host: str = "127.0.0.1"
    port: int = 8000
    max_body_bytes: int = MAX_BODY_BYTES
    query_cap: int = None

    @classmethod
    def from_dict(cls, cfg, environ=None):
        """Build from a config document; ``PREPATTACK_BIND``/``PREPATTACK_SEED`` override."""
        environ = os.environ if environ is None else environ
        cfg = dict(cfg)
        if "pipeline" not in cfg or "model" not in cfg:
            raise ValueError("service config needs 'pipeline' and 'model' sections")
        model_cfg = dict(cfg["model"])
        if environ.get(ENV_SEED):
            model_cfg["seed"] = int(environ[ENV_SEED])
        host, port = _parse_bind(environ.get(ENV_BIND) or cfg.get("bind", "127.0.0.1:8000"))
        expected = cfg.get("expected_input")
        cap = cfg.get("query_cap")
        return cls(
            pipeline=as_pipeline(from_config(cfg["pipeline"])),
            model=model_from_config(model_cfg),
            expected_input=None if expected is None else int(expected),
            host=host,
            port=port,
            max_body_bytes=int(cfg.get("max_body_bytes", MAX_BODY_BYTES)),
            query_cap=None if cap is None else int(cap),
        )


def load_service_config(path, environ=None):
    with open(path, encoding="utf-8") as fh:
        doc = yaml.safe_load(fh)
    if not isinstance(doc, dict):
        raise ValueError(f"{path}: expected a mapping")
    return ServiceConfig.from_dict(doc.get("service", doc), environ)


class VictimService:
    """Routing and prediction, independent of the HTTP layer."""

    def __init__(self, config):
        self.config = config
        self.pipeline = as_pipeline(config.pipeline)
        self._lock = threading.Lock()
        self.served = 0

    def route(self, shape):
        """Pipeline to run for an input of ``shape``; raises :class:`NoRouteError`."""
        stages = self.pipeline.stages_list()
        pipe = self.pipeline
        h, w = shape[0], shape[1]
        expected = self.config.expected_input
        if stages and isinstance(stages[0], CenterCrop) and expected is not None and (h, w) != (expected, expected):
            if h != w:
                raise NoRouteError(f"non-square input {h}x{w}")
            pipe = PreprocessingPipeline([Resize(expected, "bilinear")] + stages)
        try:
            out = pipe.output_shape(tuple(shape))
        except ValueError as exc:
            raise NoRouteError(str(exc)) from exc
        if out != self.config.model.input_shape:
            raise NoRouteError(f"input {h}x{w}x{shape[2]} does not reach the model input")
        return pipe

    def predict(self, x):
        x_m = self.route(x.shape).transform(x)
        return int(self.config.model.predict(x_m))

    def take_slot(self):
        """Count one prediction; False once the query cap is reached."""
        with self._lock:
            cap = self.config.query_cap
            if cap is not None and self.served >= cap:
                return False
            self.served += 1
            return True


def _json(obj):
    return json.dumps(obj, separators=(",", ":"), sort_keys=True).encode()


class _Handler(BaseHTTPRequestHandler):
    server_version = "victim"
    sys_version = ""
    protocol_version = "HTTP/1.1"
    # headers and body go out as separate writes; without TCP_NODELAY each
    # keep-alive reply waits for the client's delayed ACK
    disable_nagle_algorithm = True

    def log_message(self, fmt, *args):
        log.debug("%s %s", self.address_string(), fmt % args)

    def _reply(self, code, payload):
        body = _json(payload)
        # no Date header, so responses are byte-for-byte reproducible
        self.send_response_only(code)
        self.send_header("Server", self.server_version)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)
        self.log_request(code)

    def do_GET(self):
        if self.path == "/healthz":
            self._reply(200, {"status": "ok"})
        else:
            self._reply(404, {"error": "not found"})

    def do_POST(self):
        service = self.server.service
        if self.path != "/predict":
            self.close_connection = True
            self._reply(404, {"error": "not found"})
            return
        try:
            length = int(self.headers.get("Content-Length", ""))
        except ValueError:
            self.close_connection = True
            self._reply(411, {"error": "content length required"})
            return
        if length > service.config.max_body_bytes:
            self.close_connection = True
            self._reply(413, {"error": "body too large"})
            return
        data = self.rfile.read(length)
        try:
            x = from_png(data)
        except ValueError:
            self._reply(400, {"error": "undecodable image"})
            return
        try:
            pipe = service.route(x.shape)
        except NoRouteError:
            self._reply(422, {"error": "unsupported input size"})
            return
        if not service.take_slot():
            self._reply(429, {"error": "query cap reached"})
            return
        label = int(service.config.model.predict(pipe.transform(x)))
        self._reply(200, {"label": label})


def make_server(config):
    """Bound but not yet serving ``ThreadingHTTPServer``."""
    server = ThreadingHTTPServer((config.host, config.port), _Handler)
    server.daemon_threads = True
    server.service = VictimService(config)
    return server


def _url(server):
    host, port = server.server_address[:2]
    return f"http://{host}:{port}"


@contextlib.contextmanager
def running(config):
    """Serve on a background thread; yields the base URL."""
    server = make_server(config)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    try:
        yield _url(server)
    finally:
        server.shutdown()
        server.server_close()
        thread.join()


def serve(config, ready=None):
    """Serve until interrupted. ``ready(url)`` is called once bound."""
    server = make_server(config)
    url = _url(server)
    log.info("victim service listening on %s", url)
    if ready is not None:
        ready(url)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return url

