"""Environment-as-a-service over TCP.

Frames are a 4-byte big-endian length followed by a UTF-8 JSON document.
Requests carry ``v`` (protocol version), ``type`` (HELLO, EVAL or SHUTDOWN)
and ``id``; responses echo ``type`` and ``id``.
"""
from __future__ import annotations

import itertools
import json
import logging
import math
import socket
import struct
import threading
import time
from dataclasses import asdict, dataclass

from .env import Environment, RewardOutcome
from .linearize import BitBudget, EncodingPlan, PlanError

log = logging.getLogger(__name__)

PROTOCOL_VERSION = 1
MAX_FRAME = 16 << 20


class ProtocolError(RuntimeError):
    pass


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionError("connection closed")
        buf += chunk
    return bytes(buf)


def send_frame(sock: socket.socket, doc: dict) -> None:
    payload = json.dumps(doc).encode("utf-8")
    sock.sendall(struct.pack(">I", len(payload)) + payload)


def recv_frame(sock: socket.socket) -> dict:
    (length,) = struct.unpack(">I", _recv_exact(sock, 4))
    if length > MAX_FRAME:
        raise ProtocolError(f"frame of {length} bytes exceeds limit")
    try:
        doc = json.loads(_recv_exact(sock, length).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError(f"malformed frame: {exc}") from None
    if not isinstance(doc, dict):
        raise ProtocolError("frame is not a JSON object")
    return doc


@dataclass
class EvalRequest:
    id: int
    plan: str
    tensor_id: str = ""
    config: dict | None = None
    v: int = PROTOCOL_VERSION
    type: str = "EVAL"


@dataclass
class EvalResponse:
    id: int
    candidate_seconds: float
    baseline_seconds: float
    speedup: float
    status: str = "ok"
    message: str = ""
    cached: bool = False
    v: int = PROTOCOL_VERSION
    type: str = "EVAL"


def _json_float(x: float):
    # JSON has no infinities; timed-out evaluations report null seconds
    return x if math.isfinite(x) else None


class EnvironmentServer:
    """Serves one environment to one client at a time; evaluations are serialized."""

    def __init__(self, env: Environment, host: str = "127.0.0.1", port: int = 0,
                 tensor_id: str = "tensor", dims: tuple[int, ...] | None = None):
        self.env = env
        self.tensor_id = tensor_id
        self.dims = dims or getattr(getattr(env, "tensor", None), "dims", None)
        self._sock = socket.create_server((host, port))
        self._sock.settimeout(0.2)
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None
        self.evaluations = 0

    @property
    def address(self) -> tuple[str, int]:
        return self._sock.getsockname()[:2]

    def hello(self) -> dict:
        return {
            "dims": list(self.dims) if self.dims else None,
            "budget": list(self.env.budget.per_mode),
            "total_bits": self.env.budget.total,
            "baseline_seconds": _json_float(self.env.baseline_seconds),
            "alto_plan": self.env.alto_plan.to_string(),
            "tensor_id": self.tensor_id,
        }

    def evaluate(self, req: dict) -> EvalResponse:
        rid = req.get("id")
        base = self.env.baseline_seconds
        if req.get("tensor_id") not in (None, "", self.tensor_id):
            return EvalResponse(rid, math.nan, base, math.nan, "error",
                                f"server holds tensor {self.tensor_id!r}")
        if req.get("config"):
            return EvalResponse(rid, math.nan, base, math.nan, "error",
                                "per-request bench config overrides are not supported")
        try:
            plan = EncodingPlan.from_string(str(req.get("plan", "")))
            plan.validate(self.env.budget)
        except PlanError as exc:
            return EvalResponse(rid, math.nan, base, math.nan, "error", str(exc))
        out: RewardOutcome = self.env.terminal_reward(plan)
        self.evaluations += 0 if out.cached else 1
        status = "timeout" if out.timed_out else "ok"
        return EvalResponse(rid, out.seconds, base, out.speedup, status, "", out.cached)

    def handle(self, req: dict) -> dict | None:
        if req.get("v") != PROTOCOL_VERSION:
            return {"v": PROTOCOL_VERSION, "type": "ERROR", "id": req.get("id"),
                    "status": "error", "message": f"unsupported protocol version {req.get('v')!r}"}
        kind = req.get("type")
        if kind == "HELLO":
            return {"v": PROTOCOL_VERSION, "type": "HELLO", "id": req.get("id"),
                    "status": "ok", **self.hello()}
        if kind == "EVAL":
            resp = asdict(self.evaluate(req))
            for k in ("candidate_seconds", "baseline_seconds", "speedup"):
                resp[k] = _json_float(resp[k])
            return resp
        if kind == "SHUTDOWN":
            self._stop.set()
            return {"v": PROTOCOL_VERSION, "type": "SHUTDOWN", "id": req.get("id"), "status": "ok"}
        return {"v": PROTOCOL_VERSION, "type": "ERROR", "id": req.get("id"),
                "status": "error", "message": f"unknown request type {kind!r}"}

    def _serve_connection(self, conn: socket.socket) -> None:
        with conn:
            while not self._stop.is_set():
                try:
                    req = recv_frame(conn)
                except ConnectionError:
                    return
                except ProtocolError as exc:
                    log.warning("closing connection: %s", exc)
                    return
                send_frame(conn, self.handle(req))

    def serve_forever(self) -> None:
        try:
            while not self._stop.is_set():
                try:
                    conn, _ = self._sock.accept()
                except socket.timeout:
                    continue
                conn.settimeout(None)
                self._serve_connection(conn)
        finally:
            self._sock.close()

    def start(self) -> "EnvironmentServer":
        self._thread = threading.Thread(target=self.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=5)


def serve(env: Environment, host: str, port: int, tensor_id: str = "tensor") -> None:
    server = EnvironmentServer(env, host, port, tensor_id)
    log.info("serving on %s:%d", *server.address)
    server.serve_forever()


class EnvironmentClient:
    """Blocking client; reconnects and repeats the handshake after a dropped connection."""

    def __init__(self, host: str, port: int, timeout: float | None = None, retries: int = 20,
                 retry_delay: float = 0.1):
        self.host, self.port = host, port
        self.timeout = timeout
        self.retries = retries
        self.retry_delay = retry_delay
        self._ids = itertools.count(1)
        self._sock: socket.socket | None = None
        self.info: dict = {}
        self.handshakes = 0

    def connect(self) -> dict:
        self.close()
        last = None
        for _ in range(self.retries):
            try:
                self._sock = socket.create_connection((self.host, self.port), timeout=self.timeout)
                break
            except OSError as exc:
                last = exc
                time.sleep(self.retry_delay)
        else:
            raise ConnectionError(f"cannot reach {self.host}:{self.port}: {last}")
        self.info = self._call({"type": "HELLO"})
        self.handshakes += 1
        return self.info

    def close(self) -> None:
        if self._sock is not None:
            self._sock.close()
            self._sock = None

    def _call(self, doc: dict) -> dict:
        rid = next(self._ids)
        send_frame(self._sock, {"v": PROTOCOL_VERSION, "id": rid, **doc})
        resp = recv_frame(self._sock)
        if resp.get("id") != rid:
            raise ProtocolError(f"response id {resp.get('id')!r} does not match request {rid}")
        return resp

    def request(self, doc: dict) -> dict:
        if self._sock is None:
            self.connect()
        try:
            return self._call(doc)
        except (ConnectionError, OSError):
            self.connect()
            return self._call(doc)

    def evaluate(self, plan: EncodingPlan | str, tensor_id: str = "") -> EvalResponse:
        text = plan if isinstance(plan, str) else plan.to_string()
        resp = self.request({"type": "EVAL", "plan": text, "tensor_id": tensor_id})
        fields = {k: resp.get(k) for k in EvalResponse.__dataclass_fields__ if k in resp}
        for k in ("candidate_seconds", "baseline_seconds", "speedup"):
            if fields.get(k) is None:
                fields[k] = math.inf if k == "candidate_seconds" else math.nan
        return EvalResponse(**fields)

    def shutdown(self) -> None:
        try:
            self.request({"type": "SHUTDOWN"})
        finally:
            self.close()


def evaluate_remote(client: EnvironmentClient, plan: EncodingPlan) -> EvalResponse:
    return client.evaluate(plan)


class RemoteEnvironment(Environment):
    """Agent-side view of a served environment; keeps a local reward cache too."""

    def __init__(self, client: EnvironmentClient):
        info = client.info or client.connect()
        budget = BitBudget(tuple(info["budget"]))
        super().__init__(budget, EncodingPlan.from_string(info["alto_plan"]))
        self.client = client
        self._baseline = info["baseline_seconds"]

    @property
    def baseline_seconds(self) -> float:
        return self._baseline

    def terminal_reward(self, plan: EncodingPlan) -> RewardOutcome:
        plan.validate(self.budget)
        hit = self.lookup(plan)
        if hit is not None:
            return hit
        resp = self.client.evaluate(plan)
        if resp.status == "error":
            raise ProtocolError(resp.message)
        self.interactions += 1
        if resp.status == "timeout":
            out = RewardOutcome(self.floor, math.inf, timed_out=True)
        else:
            out = RewardOutcome(resp.speedup, resp.candidate_seconds)
            self.floor = min(self.floor, resp.speedup)
        self.cache.put(plan.to_string(), out)
        return RewardOutcome(out.speedup, out.seconds, resp.cached, out.timed_out)
