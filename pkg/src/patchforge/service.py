"""Loopback HTTP server implementing the embedding wire protocol.

``POST /v1/embed`` with ``{"image_png_b64": ..., "model": ...}`` answers
``{"embedding": [...], "model": ..., "dim": n}``; bad requests get a 4xx
``{"error": ...}`` body. The wrapped oracle meters every served query.
"""

from __future__ import annotations

import base64
import binascii
import json
import logging
import threading
from contextlib import contextmanager
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Optional

from .errors import PatchforgeError
from .imaging import decode_png
from .oracle import Oracle

log = logging.getLogger(__name__)

FAULTS = (None, "wrong_dim", "not_json", "nan", "missing_field", "server_error")


class _Handler(BaseHTTPRequestHandler):
    server: "EmbeddingServer"

    def log_message(self, fmt, *args):
        log.info("%s %s", self.address_string(), fmt % args)

    def _send(self, status: int, body, raw: Optional[bytes] = None) -> None:
        data = raw if raw is not None else json.dumps(body).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json; charset=utf-8")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def _error(self, status: int, message: str) -> None:
        self._send(status, {"error": message})

    def do_GET(self):
        self._error(404, f"unknown path {self.path}")

    def do_POST(self):
        if self.path != "/v1/embed":
            return self._error(404, f"unknown path {self.path}")
        length = int(self.headers.get("Content-Length") or 0)
        try:
            body = json.loads(self.rfile.read(length).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError):
            return self._error(400, "request body is not UTF-8 JSON")
        if not isinstance(body, dict):
            return self._error(400, "request body must be a JSON object")
        b64, model = body.get("image_png_b64"), body.get("model")
        if not isinstance(b64, str) or not isinstance(model, str):
            return self._error(400, "fields 'image_png_b64' and 'model' must be strings")
        oracle = self.server.oracle
        if model != oracle.model_id:
            return self._error(400, f"unknown model {model!r}")
        try:
            image = decode_png(base64.b64decode(b64, validate=True))
        except (binascii.Error, ValueError, OSError):
            return self._error(400, "image_png_b64 is not a base64-encoded PNG")
        try:
            emb = oracle.embed(image, purpose="served")
        except PatchforgeError as exc:
            return self._error(422, str(exc))
        self._respond(emb.vector.tolist(), oracle.model_id)

    def _respond(self, vec: list, model: str) -> None:
        fault = self.server.fault
        payload = {"embedding": vec, "model": model, "dim": len(vec)}
        if fault == "wrong_dim":
            payload["dim"] = len(vec) + 1
        elif fault == "missing_field":
            del payload["embedding"]
        elif fault == "nan":
            raw = json.dumps(payload).replace(repr(vec[0]), "NaN", 1).encode()
            return self._send(200, None, raw)
        elif fault == "not_json":
            return self._send(200, None, b"<html>oops</html>")
        elif fault == "server_error":
            return self._error(503, "temporarily unavailable")
        self._send(200, payload)


class EmbeddingServer(ThreadingHTTPServer):
    daemon_threads = True

    def __init__(self, oracle: Oracle, host: str = "127.0.0.1", port: int = 0, fault: Optional[str] = None):
        if fault not in FAULTS:
            raise ValueError(f"unknown fault mode {fault!r}")
        self.oracle = oracle
        self.fault = fault
        super().__init__((host, port), _Handler)

    @property
    def url(self) -> str:
        host, port = self.server_address[:2]
        return f"http://{host}:{port}"


@contextmanager
def running_server(oracle: Oracle, host: str = "127.0.0.1", port: int = 0, fault: Optional[str] = None):
    """Serve ``oracle`` on a background thread for the duration of the block."""
    server = EmbeddingServer(oracle, host, port, fault)
    thread = threading.Thread(target=server.serve_forever, kwargs={"poll_interval": 0.05}, daemon=True)
    thread.start()
    try:
        yield server
    finally:
        server.shutdown()
        server.server_close()
        thread.join()
