"""Virtual network: a latest-wins evidence board with an append-only log.

Integrity never comes from the board; every payload that matters is signed
by the publishing RPE.  Two transports share one interface:

* ``Board`` itself, used in-process;
* ``BoardServer`` hosting a Board over TCP, with ``TcpBoardClient`` per party.

TCP framing is documented in docs/wire-formats.md.
"""

from __future__ import annotations

import enum
import logging
import socket
import socketserver
import struct
import threading
import time
from dataclasses import dataclass, replace
from typing import Callable, Protocol

from .crypto import digest
from .errors import BoardTimeout, Missing, TransportFailure

logger = logging.getLogger(__name__)


class RecordKind(str, enum.Enum):
    ANNOUNCEMENT = "Announcement"
    RPE_EVIDENCE = "RpeEvidence"
    PE_EVIDENCE = "PeEvidence"
    CONSENSUS_RESULT = "ConsensusResult"


@dataclass(frozen=True)
class BoardRecord:
    entity: str
    kind: RecordKind
    payload: bytes
    sequence: int = 0


@dataclass(frozen=True)
class LogEntry:
    timestamp: float
    direction: str  # "publish" | "fetch" | "await" | "tamper" | "delete"
    summary: str


def _summary(rec: BoardRecord) -> str:
    return f"{rec.kind.value}/{rec.entity}#{rec.sequence} {len(rec.payload)}B {digest(rec.payload).hex()[:12]}"


class BoardClient(Protocol):
    def publish(self, entity: str, kind: RecordKind, payload: bytes) -> int: ...
    def fetch(self, entity: str, kind: RecordKind) -> BoardRecord: ...
    def fetch_all(self, kind: RecordKind) -> list[BoardRecord]: ...
    def wait_for(self, entity: str, kind: RecordKind, timeout: float, newer_than: int = 0) -> BoardRecord: ...


Mutator = Callable[[bytes], bytes]


class Board:
    """In-memory board.  Safe for concurrent use from any number of threads."""

    def __init__(self):
        self._lock = threading.RLock()
        self._changed = threading.Condition(self._lock)
        self._records: dict[tuple[str, RecordKind], list[BoardRecord]] = {}
        self._seq = 0
        self._rules: list[tuple[str, RecordKind, Mutator]] = []
        self.log: list[LogEntry] = []

    def _log(self, direction: str, summary: str) -> None:
        self.log.append(LogEntry(time.time(), direction, summary))

    def publish(self, entity: str, kind: RecordKind, payload: bytes) -> int:
        kind = RecordKind(kind)
        with self._changed:
            self._seq += 1
            rec = BoardRecord(entity, kind, bytes(payload), self._seq)
            self._records.setdefault((entity, kind), []).append(rec)
            self._log("publish", _summary(rec))
            for r_entity, r_kind, mutator in self._rules:
                if (r_entity, r_kind) == (entity, kind):
                    self.tamper(entity, kind, mutator)
            self._changed.notify_all()
            return rec.sequence

    def _latest(self, entity: str, kind: RecordKind) -> BoardRecord | None:
        history = self._records.get((entity, RecordKind(kind)))
        return history[-1] if history else None

    def fetch(self, entity: str, kind: RecordKind) -> BoardRecord:
        with self._lock:
            rec = self._latest(entity, kind)
            if rec is None:
                self._log("fetch", f"{RecordKind(kind).value}/{entity} missing")
                raise Missing(f"{RecordKind(kind).value}/{entity}")
            self._log("fetch", _summary(rec))
            return rec

    def fetch_all(self, kind: RecordKind) -> list[BoardRecord]:
        kind = RecordKind(kind)
        with self._lock:
            out = sorted(
                (h[-1] for (e, k), h in self._records.items() if k is kind and h),
                key=lambda r: r.sequence,
            )
            for rec in out:
                self._log("fetch", _summary(rec))
            return out

    def wait_for(self, entity: str, kind: RecordKind, timeout: float, newer_than: int = 0) -> BoardRecord:
        """Block until a record with sequence > ``newer_than`` exists."""
        deadline = time.monotonic() + timeout
        with self._changed:
            while True:
                rec = self._latest(entity, kind)
                if rec is not None and rec.sequence > newer_than:
                    self._log("await", _summary(rec))
                    return rec
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    self._log("await", f"{RecordKind(kind).value}/{entity} timeout")
                    raise BoardTimeout(f"{RecordKind(kind).value}/{entity} after {timeout:.3f}s")
                self._changed.wait(remaining)

    # -- adversary surface (tests and attack scenarios only) -----------------

    def tamper(self, entity: str, kind: RecordKind, mutator: Mutator) -> None:
        """Replace the stored payload of the latest record; sequence unchanged."""
        kind = RecordKind(kind)
        with self._changed:
            history = self._records.get((entity, kind))
            if not history:
                raise Missing(f"{kind.value}/{entity}")
            history[-1] = replace(history[-1], payload=bytes(mutator(history[-1].payload)))
            self._log("tamper", _summary(history[-1]))
            self._changed.notify_all()

    def tamper_on_publish(self, entity: str, kind: RecordKind, mutator: Mutator) -> None:
        """Apply ``mutator`` to every future publish of (entity, kind) before anyone can read it."""
        with self._lock:
            self._rules.append((entity, RecordKind(kind), mutator))

    def delete(self, entity: str, kind: RecordKind) -> None:
        kind = RecordKind(kind)
        with self._lock:
            if not self._records.pop((entity, kind), None):
                raise Missing(f"{kind.value}/{entity}")
            self._log("delete", f"{kind.value}/{entity}")

    # -- inspection -----------------------------------------------------------

    def contents(self) -> dict[tuple[str, str], list[bytes]]:
        """Full per-key payload history, independent of interleaving."""
        with self._lock:
            return {(e, k.value): [r.payload for r in h] for (e, k), h in self._records.items()}

    def log_lines(self) -> list[str]:
        with self._lock:
            return [f"{e.timestamp:.6f} {e.direction} {e.summary}" for e in self.log]


# -- TCP transport ----------------------------------------------------------

VERB_PUBLISH, VERB_FETCH, VERB_AWAIT, VERB_RESPONSE = 1, 2, 3, 4
STATUS_OK, STATUS_MISSING, STATUS_TIMEOUT, STATUS_ERROR = "ok", "missing", "timeout", "error"
MAX_FRAME = 16 * 1024 * 1024


@dataclass(frozen=True)
class Frame:
    verb: int
    entity: str
    kind: str
    payload: bytes

    def encode(self) -> bytes:
        entity, kind = self.entity.encode("utf-8"), self.kind.encode("utf-8")
        body = (
            bytes([self.verb])
            + struct.pack(">H", len(entity)) + entity
            + bytes([len(kind)]) + kind
            + struct.pack(">I", len(self.payload)) + self.payload
        )
        return struct.pack(">I", len(body)) + body

    @classmethod
    def decode(cls, body: bytes) -> Frame:
        try:
            verb = body[0]
            pos = 1
            (n,) = struct.unpack_from(">H", body, pos)
            entity = body[pos + 2 : pos + 2 + n].decode("utf-8")
            pos += 2 + n
            k = body[pos]
            kind = body[pos + 1 : pos + 1 + k].decode("utf-8")
            pos += 1 + k
            (m,) = struct.unpack_from(">I", body, pos)
            payload = body[pos + 4 : pos + 4 + m]
            if pos + 4 + m != len(body) or len(payload) != m:
                raise ValueError("length mismatch")
        except (IndexError, struct.error, UnicodeDecodeError, ValueError) as exc:
            raise TransportFailure(f"malformed frame: {exc}") from None
        return cls(verb, entity, kind, payload)


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise TransportFailure("connection closed")
        buf += chunk
    return bytes(buf)


def read_frame(sock: socket.socket) -> Frame:
    (length,) = struct.unpack(">I", _recv_exact(sock, 4))
    if length > MAX_FRAME:
        raise TransportFailure(f"frame too large: {length}")
    return Frame.decode(_recv_exact(sock, length))


def _encode_records(records: list[BoardRecord]) -> bytes:
    out = [struct.pack(">I", len(records))]
    for rec in records:
        entity = rec.entity.encode("utf-8")
        out.append(struct.pack(">H", len(entity)) + entity)
        out.append(struct.pack(">QI", rec.sequence, len(rec.payload)) + rec.payload)
    return b"".join(out)


def _decode_records(kind: RecordKind, data: bytes) -> list[BoardRecord]:
    (count,) = struct.unpack_from(">I", data, 0)
    pos, out = 4, []
    for _ in range(count):
        (n,) = struct.unpack_from(">H", data, pos)
        entity = data[pos + 2 : pos + 2 + n].decode("utf-8")
        pos += 2 + n
        seq, m = struct.unpack_from(">QI", data, pos)
        pos += 12
        out.append(BoardRecord(entity, kind, data[pos : pos + m], seq))
        pos += m
    return out


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        board: Board = self.server.board  # type: ignore[attr-defined]
        sock: socket.socket = self.request
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        while True:
            try:
                req = read_frame(sock)
            except TransportFailure:
                return
            sock.sendall(self._dispatch(board, req).encode())

    @staticmethod
    def _dispatch(board: Board, req: Frame) -> Frame:
        def respond(status: str, records: list[BoardRecord]) -> Frame:
            return Frame(VERB_RESPONSE, status, req.kind, _encode_records(records))

        try:
            kind = RecordKind(req.kind)
            if req.verb == VERB_PUBLISH:
                seq = board.publish(req.entity, kind, req.payload)
                return respond(STATUS_OK, [BoardRecord(req.entity, kind, b"", seq)])
            if req.verb == VERB_FETCH:
                if req.entity == "":
                    return respond(STATUS_OK, board.fetch_all(kind))
                return respond(STATUS_OK, [board.fetch(req.entity, kind)])
            if req.verb == VERB_AWAIT:
                timeout_ms, newer_than = struct.unpack(">IQ", req.payload)
                return respond(STATUS_OK, [board.wait_for(req.entity, kind, timeout_ms / 1000, newer_than)])
            return respond(STATUS_ERROR, [])
        except Missing:
            return respond(STATUS_MISSING, [])
        except BoardTimeout:
            return respond(STATUS_TIMEOUT, [])
        except (ValueError, struct.error) as exc:
            logger.warning("bad board request: %s", exc)
            return respond(STATUS_ERROR, [])


class BoardServer(socketserver.ThreadingTCPServer):
    """Coordinator hosting one Board for all TCP clients."""

    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address: tuple[str, int] = ("127.0.0.1", 0), board: Board | None = None):
        self.board = board or Board()
        super().__init__(address, _Handler)
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> tuple[str, int]:
        return self.server_address[:2]

    def start(self) -> BoardServer:
        self._thread = threading.Thread(target=self.serve_forever, args=(0.02,), name="board-server", daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self.shutdown()
        self.server_close()


class TcpBoardClient:
    """Board client speaking the length-prefixed frame protocol."""

    def __init__(self, address: tuple[str, int], connect_timeout: float = 5.0):
        try:
            self._sock = socket.create_connection(address, timeout=connect_timeout)
        except OSError as exc:
            raise TransportFailure(f"cannot reach coordinator {address}: {exc}") from None
        self._sock.settimeout(None)
        self._sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._lock = threading.Lock()

    def close(self) -> None:
        self._sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _call(self, req: Frame) -> list[BoardRecord]:
        with self._lock:
            try:
                self._sock.sendall(req.encode())
                resp = read_frame(self._sock)
            except OSError as exc:
                raise TransportFailure(str(exc)) from None
        kind = RecordKind(req.kind)
        if resp.entity == STATUS_MISSING:
            raise Missing(f"{kind.value}/{req.entity}")
        if resp.entity == STATUS_TIMEOUT:
            raise BoardTimeout(f"{kind.value}/{req.entity}")
        if resp.entity != STATUS_OK:
            raise TransportFailure(f"coordinator error for {req.verb}")
        return _decode_records(kind, resp.payload)

    def publish(self, entity: str, kind: RecordKind, payload: bytes) -> int:
        return self._call(Frame(VERB_PUBLISH, entity, RecordKind(kind).value, bytes(payload)))[0].sequence

    def fetch(self, entity: str, kind: RecordKind) -> BoardRecord:
        if not entity:
            raise ValueError("entity required")
        return self._call(Frame(VERB_FETCH, entity, RecordKind(kind).value, b""))[0]

    def fetch_all(self, kind: RecordKind) -> list[BoardRecord]:
        return self._call(Frame(VERB_FETCH, "", RecordKind(kind).value, b""))

    def wait_for(self, entity: str, kind: RecordKind, timeout: float, newer_than: int = 0) -> BoardRecord:
        payload = struct.pack(">IQ", max(0, int(timeout * 1000)), newer_than)
        return self._call(Frame(VERB_AWAIT, entity, RecordKind(kind).value, payload))[0]


def parse_address(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"expected host:port, got {text!r}")
    return host, int(port)
