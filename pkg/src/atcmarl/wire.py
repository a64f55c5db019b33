"""Simulator-as-a-service over a byte stream.

Frames are a 4-byte big-endian length followed by a UTF-8 JSON object
``{"kind", "seq", "payload"}``. The exchange is lockstep:

    client Hello(0)          -> server Hello(0, version "1")
    client ResetReq(k)       -> server StateBatch(k+1)
    client ActionBatch(s)    -> server StateBatch(s+1) or EpisodeEnd(s+1)

where ``s`` echoes the StateBatch being answered. After EpisodeEnd the client
may reset again, send StepAck(seq of EpisodeEnd) to say goodbye, or just
close. Any violation is answered with Error and the connection is closed.
"""

from __future__ import annotations

import json
import logging
import socket
import socketserver
import struct
import threading
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

from .errors import ProtocolViolation, WireTimeout
from .scenario import Scenario, scenario_from_dict, scenario_to_dict
from .sim import AtcEnv, StepResult

log = logging.getLogger(__name__)

PROTOCOL_VERSION = "1"
KINDS = ("Hello", "ResetReq", "StateBatch", "ActionBatch", "StepAck", "EpisodeEnd", "Error")
MAX_FRAME = 64 * 1024 * 1024
DEFAULT_TIMEOUT = 30.0
_HEADER = struct.Struct(">I")


@dataclass
class WireMessage:
    kind: str
    seq: int
    payload: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ProtocolViolation(f"unknown kind {self.kind!r}")


def encode(msg: WireMessage) -> bytes:
    body = json.dumps({"kind": msg.kind, "seq": msg.seq, "payload": msg.payload},
                      separators=(",", ":"), allow_nan=False).encode("utf-8")
    if len(body) > MAX_FRAME:
        raise ProtocolViolation("frame too large")
    return _HEADER.pack(len(body)) + body


def decode_body(body: bytes) -> WireMessage:
    try:
        doc = json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolViolation(f"malformed frame: {exc}") from exc
    if not isinstance(doc, dict) or set(doc) != {"kind", "seq", "payload"}:
        raise ProtocolViolation("malformed frame: expected kind, seq and payload")
    kind, seq, payload = doc["kind"], doc["seq"], doc["payload"]
    if not isinstance(kind, str) or not isinstance(payload, dict):
        raise ProtocolViolation("malformed frame: bad field types")
    if not isinstance(seq, int) or isinstance(seq, bool) or seq < 0:
        raise ProtocolViolation("malformed frame: seq must be a non-negative integer")
    return WireMessage(kind, seq, payload)


def decode(frame: bytes) -> WireMessage:
    if len(frame) < _HEADER.size:
        raise ProtocolViolation("truncated frame header")
    (n,) = _HEADER.unpack_from(frame)
    if len(frame) != _HEADER.size + n:
        raise ProtocolViolation("frame length does not match header")
    return decode_body(frame[_HEADER.size:])


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks, got = [], 0
    while got < n:
        try:
            chunk = sock.recv(min(n - got, 1 << 20))
        except socket.timeout as exc:
            raise WireTimeout("timed out waiting for peer") from exc
        if not chunk:
            raise ConnectionError("peer closed the connection")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


def read_message(sock: socket.socket) -> WireMessage:
    (n,) = _HEADER.unpack(_recv_exact(sock, _HEADER.size))
    if n > MAX_FRAME:
        raise ProtocolViolation("frame too large")
    return decode_body(_recv_exact(sock, n))


def send_message(sock: socket.socket, msg: WireMessage) -> None:
    sock.sendall(encode(msg))


def parse_endpoint(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit() or int(port) > 65535:
        raise ValueError(f"endpoint must be host:port, got {text!r}")
    return host or "127.0.0.1", int(port)


# -- payloads ----------------------------------------------------------------------

def state_payload(result: StepResult) -> dict:
    """Every agent that acted last step (with its reward) plus newly joined ones.

    Agents flagged done need no action; the rest must all be answered.
    """
    steps = dict(result.agents)
    steps.update(result.joined)
    agents = []
    for fid in sorted(steps):
        st = steps[fid]
        agents.append({
            "flight_id": fid,
            "compact": st.observation.compact.tolist(),
            "extended": st.observation.extended.tolist(),
            "reward": st.reward,
            "done": bool(st.done),
        })
    return {"step": result.step, "agents": agents, "active_count": result.active_count}


def _final_payload(result: StepResult, totals: dict) -> dict:
    return {
        "step": result.step,
        "agents": [{"flight_id": fid, "reward": st.reward, "done": bool(st.done)}
                   for fid, st in sorted(result.agents.items())],
        "metrics": totals,
    }


# -- server --------------------------------------------------------------------------

class _Session:
    """Protocol state machine for one connection and one environment."""

    def __init__(self, env: AtcEnv, scenarios: Sequence[Scenario]):
        self.env = env
        self.scenarios = list(scenarios)
        self.state = "hello"
        self.last_in = -1
        self.pending: StepResult | None = None
        self.pending_seq = -1
        self.end_seq = -1
        self.totals: dict = {}

    def handle(self, msg: WireMessage) -> WireMessage | None:
        """Return the reply, or None when the client said goodbye."""
        if msg.seq <= self.last_in and not (msg.kind == "Hello" and self.state == "hello"):
            raise ProtocolViolation(f"seq {msg.seq} does not increase")
        self.last_in = msg.seq
        if self.state == "hello":
            if msg.kind != "Hello":
                raise ProtocolViolation("expected Hello")
            version = msg.payload.get("version", PROTOCOL_VERSION)
            if str(version) != PROTOCOL_VERSION:
                raise ProtocolViolation(f"unsupported protocol version {version!r}")
            self.state = "ready"
            return WireMessage("Hello", msg.seq, {"version": PROTOCOL_VERSION})
        if msg.kind == "ResetReq" and self.state in ("ready", "ended"):
            return self._reset(msg)
        if msg.kind == "ActionBatch" and self.state == "stepping":
            return self._step(msg)
        if msg.kind == "StepAck" and self.state == "ended":
            if msg.seq != self.end_seq:
                raise ProtocolViolation("StepAck must echo the EpisodeEnd seq")
            return None
        raise ProtocolViolation(f"unexpected {msg.kind} in state {self.state}")

    def _reset(self, msg: WireMessage) -> WireMessage:
        body = msg.payload
        if "scenario" in body:
            try:
                scenario = scenario_from_dict(body["scenario"])
            except Exception as exc:  # any schema problem is the client's fault
                raise ProtocolViolation(f"bad scenario: {exc}") from exc
        else:
            idx = body.get("index", 0)
            if not isinstance(idx, int) or not 0 <= idx < len(self.scenarios):
                raise ProtocolViolation(f"scenario index {idx!r} out of range")
            scenario = self.scenarios[idx]
        self.pending = self.env.reset(scenario)
        self.totals = {"steps": 0, "reward": 0.0, "agents": 0, "conflicts": 0, "congestion_events": 0,
                       "delay_km": 0.0, "fuel_penalty": 0.0}
        self._seen: set[str] = set(self.pending.joined)
        return self._emit(self.pending, msg.seq + 1)

    def _emit(self, result: StepResult, seq: int) -> WireMessage:
        if result.episode_done:
            self.state = "ended"
            self.end_seq = seq
            t = self.totals
            t["agents"] = len(self._seen)
            t["mean_reward"] = t["reward"] / t["agents"] if t["agents"] else 0.0
            return WireMessage("EpisodeEnd", seq, _final_payload(result, dict(t)))
        self.state = "stepping"
        self.pending_seq = seq
        return WireMessage("StateBatch", seq, state_payload(result))

    def _step(self, msg: WireMessage) -> WireMessage:
        if msg.seq != self.pending_seq:
            raise ProtocolViolation(f"ActionBatch seq {msg.seq} does not match StateBatch seq {self.pending_seq}")
        actions = msg.payload.get("actions")
        if not isinstance(actions, dict):
            raise ProtocolViolation("ActionBatch needs an actions object")
        needed = set(self.pending.acting())
        missing = sorted(needed - set(actions))
        if missing:
            raise ProtocolViolation(f"missing agent {missing[0]}")
        extra = sorted(set(actions) - needed)
        if extra:
            raise ProtocolViolation(f"unknown agent {extra[0]}")
        joint = {}
        for fid, a in actions.items():
            if not isinstance(a, int) or isinstance(a, bool) or a not in (0, 1, 2):
                raise ProtocolViolation(f"bad action {a!r} for {fid}")
            joint[fid] = a
        result = self.env.step(joint)
        t = self.totals
        t["steps"] += 1
        t["conflicts"] += result.conflict_pairs
        for fid, st in result.agents.items():
            t["reward"] += st.reward
            t["congestion_events"] += int(st.terms[1])
            t["delay_km"] += st.terms[2]
            t["fuel_penalty"] += self.env.weights.delta * st.terms[3]
        self._seen.update(result.agents)
        self._seen.update(result.joined)
        self.pending = result
        return self._emit(result, msg.seq + 1)


def _serve_connection(sock: socket.socket, env: AtcEnv, scenarios: Sequence[Scenario],
                      idle_timeout: float | None) -> None:
    sock.settimeout(idle_timeout)
    session = _Session(env, scenarios)
    out_seq = 0
    try:
        while True:
            try:
                msg = read_message(sock)
                reply = session.handle(msg)
            except ProtocolViolation as exc:
                send_message(sock, WireMessage("Error", max(out_seq, session.last_in + 1), {"message": str(exc)}))
                return
            if reply is None:
                return
            out_seq = reply.seq + 1
            send_message(sock, reply)
    except (ConnectionError, WireTimeout, OSError) as exc:
        log.debug("connection ended: %s", exc)


class WireServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = False

    def __init__(self, endpoint: tuple[str, int], env_factory: Callable[[], AtcEnv],
                 scenarios: Sequence[Scenario], idle_timeout: float | None = 300.0):
        self.env_factory = env_factory
        self.scenarios = list(scenarios)
        self.idle_timeout = idle_timeout
        super().__init__(endpoint, _Handler)

    @property
    def endpoint(self) -> str:
        host, port = self.server_address[:2]
        return f"{host}:{port}"


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        srv: WireServer = self.server  # type: ignore[assignment]
        _serve_connection(self.request, srv.env_factory(), srv.scenarios, srv.idle_timeout)


def make_server(env_factory: Callable[[], AtcEnv], endpoint: str | tuple[str, int],
                scenarios: Sequence[Scenario], idle_timeout: float | None = 300.0) -> WireServer:
    if isinstance(endpoint, str):
        endpoint = parse_endpoint(endpoint)
    return WireServer(endpoint, env_factory, scenarios, idle_timeout)


def serve(env_factory: Callable[[], AtcEnv], endpoint: str | tuple[str, int],
          scenarios: Sequence[Scenario], ready: Callable[[WireServer], None] | None = None) -> None:
    """Serve until interrupted; each connection drives its own environment."""
    with make_server(env_factory, endpoint, scenarios) as server:
        if ready is not None:
            ready(server)
        server.serve_forever()


def serve_in_thread(env_factory, endpoint, scenarios) -> tuple[WireServer, threading.Thread]:
    server = make_server(env_factory, endpoint, scenarios)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    return server, thread


# -- client --------------------------------------------------------------------------

class WireClient:
    """Lockstep client; every call returns the server's next message."""

    def __init__(self, endpoint: str | tuple[str, int], timeout: float = DEFAULT_TIMEOUT):
        if isinstance(endpoint, str):
            endpoint = parse_endpoint(endpoint)
        self.sock = socket.create_connection(endpoint, timeout=timeout)
        self.sock.settimeout(timeout)
        self.seq = 0
        self.last: WireMessage | None = None

    def _exchange(self, msg: WireMessage) -> WireMessage:
        send_message(self.sock, msg)
        reply = read_message(self.sock)
        if reply.kind == "Error":
            self.close()
            raise ProtocolViolation(reply.payload.get("message", "server error"))
        self.last = reply
        return reply

    def hello(self) -> WireMessage:
        reply = self._exchange(WireMessage("Hello", 0, {"version": PROTOCOL_VERSION}))
        if reply.kind != "Hello" or reply.payload.get("version") != PROTOCOL_VERSION:
            raise ProtocolViolation("handshake failed")
        self.seq = 1
        return reply

    def reset(self, index: int = 0, scenario: Scenario | None = None) -> WireMessage:
        body = {"scenario": scenario_to_dict(scenario)} if scenario is not None else {"index": index}
        seq = max(self.seq, self.last.seq + 1 if self.last else 1)
        reply = self._exchange(WireMessage("ResetReq", seq, body))
        self.seq = reply.seq
        return reply

    def step(self, actions: Mapping[str, int]) -> WireMessage:
        if self.last is None or self.last.kind != "StateBatch":
            raise ProtocolViolation("no StateBatch awaiting an answer")
        msg = WireMessage("ActionBatch", self.last.seq, {"actions": {f: int(a) for f, a in actions.items()}})
        reply = self._exchange(msg)
        if reply.seq != msg.seq + 1:
            raise ProtocolViolation(f"reply seq {reply.seq} != {msg.seq + 1}")
        return reply

    def goodbye(self) -> None:
        if self.last is not None and self.last.kind == "EpisodeEnd":
            send_message(self.sock, WireMessage("StepAck", self.last.seq, {}))
        self.close()

    def close(self) -> None:
        try:
            self.sock.close()
        except OSError:
            pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def client_step(conn: WireClient, actions: Mapping[str, int]) -> WireMessage:
    """Send one ActionBatch and return the next StateBatch or EpisodeEnd."""
    return conn.step(actions)


def acting_ids(msg: WireMessage) -> list[str]:
    return [a["flight_id"] for a in msg.payload.get("agents", []) if not a["done"]]
