"""Versioned JSON request/response plumbing between services.

Every service exposes named operations taking and returning JSON objects.
Two networks carry them: ``LoopbackNetwork`` runs a real HTTP server per
service on 127.0.0.1, ``InProcessNetwork`` skips the sockets but still
round-trips every message through JSON so both paths see identical bytes.
"""

from __future__ import annotations

import http.client
import itertools
import json
import logging
import socket
import threading
import urllib.error
import urllib.request
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Any, Callable

from .errors import EdgeAttestError, Unreachable, from_code

logger = logging.getLogger(__name__)

PROTOCOL_VERSION = 1

Handler = Callable[[dict], dict]


class Service:
    """Base class: subclasses fill ``self.operations`` with op-name -> handler."""

    name = "service"

    def __init__(self):
        self.operations: dict[str, Handler] = {}

    def handle_message(self, raw: bytes) -> bytes:
        try:
            request = json.loads(raw)
            if request.get("version") != PROTOCOL_VERSION:
                raise EdgeAttestError(f"unsupported protocol version {request.get('version')!r}")
            op = request["op"]
            handler = self.operations.get(op)
            if handler is None:
                raise EdgeAttestError(f"{self.name}: unknown operation {op!r}")
            result = handler(request.get("body") or {})
            response = {"version": PROTOCOL_VERSION, "ok": True, "result": result}
        except EdgeAttestError as e:
            response = {"version": PROTOCOL_VERSION, "ok": False, "error": e.code, "message": str(e)}
        except (KeyError, ValueError, TypeError) as e:
            response = {"version": PROTOCOL_VERSION, "ok": False, "error": "error", "message": f"bad request: {e!r}"}
        return json.dumps(response).encode()


def _encode_request(op: str, body: dict) -> bytes:
    return json.dumps({"version": PROTOCOL_VERSION, "op": op, "body": body}).encode()


def _decode_response(raw: bytes) -> dict:
    response = json.loads(raw)
    if not response.get("ok"):
        raise from_code(response.get("error", "error"), response.get("message", ""))
    return response["result"]


class InProcessChannel:
    def __init__(self, network: "InProcessNetwork", address: str):
        self._network = network
        self.address = address

    def call(self, op: str, body: dict | None = None) -> dict:
        service = self._network._lookup(self.address)
        return _decode_response(service.handle_message(_encode_request(op, body or {})))


class HttpChannel:
    def __init__(self, address: str, timeout: float = 10.0):
        self.address = address
        host, _, port = address.rpartition(":")
        self._host, self._port = host, int(port)
        self.timeout = timeout

    def call(self, op: str, body: dict | None = None) -> dict:
        conn = http.client.HTTPConnection(self._host, self._port, timeout=self.timeout)
        try:
            conn.request(
                "POST", f"/v{PROTOCOL_VERSION}/{op}", _encode_request(op, body or {}), {"Content-Type": "application/json"}
            )
            raw = conn.getresponse().read()
        except (OSError, http.client.HTTPException) as e:
            raise Unreachable(f"{self.address}: {e}") from e
        finally:
            conn.close()
        return _decode_response(raw)


class _RequestHandler(BaseHTTPRequestHandler):
    service: Service

    def do_POST(self):
        length = int(self.headers.get("Content-Length", 0))
        payload = self.service.handle_message(self.rfile.read(length))
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)

    def log_message(self, format, *args):
        logger.debug("%s: " + format, self.service.name, *args)


class _Server(ThreadingHTTPServer):
    daemon_threads = True
    allow_reuse_address = True


class LoopbackNetwork:
    """One HTTP server per service, bound to an ephemeral loopback port."""

    def __init__(self, timeout: float = 10.0):
        self.timeout = timeout
        self._servers: dict[str, _Server] = {}
        self._lock = threading.Lock()

    def serve(self, service: Service, name: str | None = None) -> str:
        handler = type("Handler", (_RequestHandler,), {"service": service})
        server = _Server(("127.0.0.1", 0), handler)
        address = f"127.0.0.1:{server.server_address[1]}"
        # short poll so shutdown() returns promptly
        threading.Thread(
            target=server.serve_forever, kwargs={"poll_interval": 0.02}, name=f"http-{service.name}", daemon=True
        ).start()
        with self._lock:
            self._servers[address] = server
        return address

    def stop(self, address: str) -> None:
        with self._lock:
            server = self._servers.pop(address, None)
        if server is not None:
            server.shutdown()
            server.server_close()

    def connect(self, address: str) -> HttpChannel:
        return HttpChannel(address, self.timeout)

    def close(self) -> None:
        for address in list(self._servers):
            self.stop(address)


class InProcessNetwork:
    """Direct dispatch; addresses look like host:port but never touch a socket."""

    _ports = itertools.count(1)

    def __init__(self):
        self._services: dict[str, Service] = {}
        self._lock = threading.Lock()

    def serve(self, service: Service, name: str | None = None) -> str:
        address = f"{name or service.name}.inproc:{next(self._ports)}"
        with self._lock:
            self._services[address] = service
        return address

    def stop(self, address: str) -> None:
        with self._lock:
            self._services.pop(address, None)

    def _lookup(self, address: str) -> Service:
        with self._lock:
            service = self._services.get(address)
        if service is None:
            raise Unreachable(f"{address}: no service listening")
        return service

    def connect(self, address: str) -> InProcessChannel:
        return InProcessChannel(self, address)

    def close(self) -> None:
        with self._lock:
            self._services.clear()


def post_json(url: str, payload: Any, timeout: float = 5.0) -> int:
    """POST a JSON document; returns the HTTP status or raises Unreachable."""
    req = urllib.request.Request(
        url, data=json.dumps(payload).encode(), headers={"Content-Type": "application/json"}, method="POST"
    )
    try:
        with urllib.request.urlopen(req, timeout=timeout) as resp:
            return resp.status
    except urllib.error.HTTPError as e:
        raise Unreachable(f"{url}: HTTP {e.code}") from e
    except (urllib.error.URLError, socket.timeout, OSError) as e:
        raise Unreachable(f"{url}: {e}") from e
