"""Privacy Enclave runtime and the certificate-authenticated secure channel.

The handshake follows the TLS 1.3 message flow with mutual authentication,
but every certificate is judged by the receiving side's local RPE rather
than by a CA chain:

    client                                   server
    ClientHello        ------------------>
                       <------------------   ServerHello
                       <------------------   {EncryptedExtensions}
                       <------------------   {Certificate}
    (RPE checks server certificate)
                       <------------------   {CertificateVerify}
    {Certificate}      ------------------>
                                             (RPE checks client certificate)
    {CertificateVerify}------------------>
    {Finished}         ------------------>
                       <------------------   {Finished}

``{}`` marks frames sealed under handshake traffic keys.  Frame layout and
key schedule are in docs/wire-formats.md.
"""

from __future__ import annotations

import enum
import queue
import socket
import struct
import threading
from dataclasses import dataclass, field

from . import canonical
from .crypto import (
    SUITE_ID,
    SigningKeyPair,
    digest,
    generate_ephemeral,
    generate_keypair,
    hkdf_expand,
    hkdf_extract,
    mac,
    mac_equal,
    open_sealed,
    seal,
    verify,
)
from .errors import CounterReplay, DecryptFailure, HandshakeError, LocalVerificationFailed, TransportFailure
from .evidence import MalformedRecord, PeCertificate, PeEvidence
from .rpe import RelyingPartyEnclave
from .tee import EnclaveIdentity, Platform, Quote
from .vnet import _recv_exact

DEFAULT_TIMEOUT = 10.0


class MessageKind(enum.IntEnum):
    CLIENT_HELLO = 1
    SERVER_HELLO = 2
    ENCRYPTED_EXTENSIONS = 3
    CERTIFICATE = 4
    CERTIFICATE_VERIFY = 5
    FINISHED = 6
    ALERT = 7
    APPLICATION_DATA = 8


# -- frame transports -------------------------------------------------------


class QueuePipe:
    """One end of an in-memory duplex frame pipe."""

    def __init__(self, inbox: queue.Queue, outbox: queue.Queue):
        self._inbox, self._outbox = inbox, outbox

    def send(self, kind: int, body: bytes) -> None:
        self._outbox.put((int(kind), bytes(body)))

    def recv(self, timeout: float) -> tuple[int, bytes]:
        try:
            return self._inbox.get(timeout=timeout)
        except queue.Empty:
            raise HandshakeError("Timeout", "no frame from peer") from None

    def close(self) -> None:
        pass


def pipe_pair() -> tuple[QueuePipe, QueuePipe]:
    a, b = queue.Queue(), queue.Queue()
    return QueuePipe(a, b), QueuePipe(b, a)


class SocketPipe:
    """Frames over a stream socket: u32 length, kind byte, body."""

    def __init__(self, sock: socket.socket):
        self._sock = sock
        # handshake flights are many small frames; don't let Nagle batch them
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)

    def send(self, kind: int, body: bytes) -> None:
        frame = bytes([int(kind)]) + bytes(body)
        self._sock.sendall(struct.pack(">I", len(frame)) + frame)

    def recv(self, timeout: float) -> tuple[int, bytes]:
        self._sock.settimeout(timeout)
        try:
            (length,) = struct.unpack(">I", _recv_exact(self._sock, 4))
            frame = _recv_exact(self._sock, length)
        except socket.timeout:
            raise HandshakeError("Timeout", "no frame from peer") from None
        except (TransportFailure, OSError) as exc:
            raise HandshakeError("Transport", str(exc)) from None
        if not frame:
            raise HandshakeError("Transport", "empty frame")
        return frame[0], frame[1:]

    def close(self) -> None:
        self._sock.close()


def tcp_pipe_pair(host: str = "127.0.0.1") -> tuple[SocketPipe, SocketPipe]:
    """Loopback TCP connection; returns (client end, server end)."""
    with socket.create_server((host, 0)) as listener:
        client = socket.create_connection(listener.getsockname()[:2])
        server, _ = listener.accept()
    return SocketPipe(client), SocketPipe(server)


# -- PE runtime -------------------------------------------------------------


class PeRuntime:
    def __init__(
        self,
        entity: str,
        job_id: str,
        identity: EnclaveIdentity,
        platform: Platform,
        rpe: RelyingPartyEnclave,
        *,
        key_seed: bytes | None = None,
    ):
        self.entity = entity
        self.job_id = job_id
        self.identity = identity
        self.platform = platform
        self.rpe = rpe
        self._keypair: SigningKeyPair = generate_keypair(key_seed)
        self.certificate: PeCertificate | None = None
        self.evidence: PeEvidence | None = None

    @property
    def public_key(self) -> bytes:
        return self._keypair.public

    def generate_evidence(self) -> Quote:
        return self.platform.quote(self.identity, digest(self.public_key) + bytes(32))

    def sign(self, msg: bytes) -> bytes:
        return self._keypair.sign(msg)

    def install_certificate(self, cert: PeCertificate) -> None:
        if cert.pe_public_key != self.public_key:
            raise LocalVerificationFailed("KeyBindingMismatch", "certificate is for another key")
        self.certificate = cert
        self.rpe.certificate_delivered(self.job_id)

    def __reduce__(self):
        raise TypeError("PeRuntime holds private keys and is not serializable")


def pe_bootstrap(rt: PeRuntime, *, public_key: bytes | None = None) -> PeEvidence:
    """Quote the PE key and submit it to the local RPE for verification.

    ``public_key`` overrides the key presented alongside the quote; only
    attack scenarios use it.
    """
    quote = rt.generate_evidence()
    ev = rt.rpe.verify_local_pe(quote, rt.public_key if public_key is None else public_key, rt.job_id)
    rt.evidence = ev
    if not ev.result.passed:
        raise LocalVerificationFailed(ev.result.reason)
    return ev


# -- key schedule -----------------------------------------------------------


def _fields(*parts: bytes) -> bytes:
    return b"".join(struct.pack(">H", len(p)) + p for p in parts)


def _unfields(body: bytes, count: int) -> list[bytes]:
    out, pos = [], 0
    try:
        for _ in range(count):
            (n,) = struct.unpack_from(">H", body, pos)
            out.append(body[pos + 2 : pos + 2 + n])
            if len(out[-1]) != n:
                raise ValueError("truncated")
            pos += 2 + n
    except (struct.error, ValueError):
        raise HandshakeError("Malformed", "bad field encoding") from None
    if pos != len(body):
        raise HandshakeError("Malformed", "trailing bytes")
    return out


class _Transcript:
    def __init__(self):
        self._parts: list[bytes] = []

    def add(self, kind: int, body: bytes) -> None:
        self._parts.append(bytes([int(kind)]) + struct.pack(">I", len(body)) + body)

    def hash(self) -> bytes:
        return digest(b"".join(self._parts))


@dataclass
class _TrafficKeys:
    key: bytes
    iv: bytes
    counter: int = 0

    @classmethod
    def from_secret(cls, secret: bytes) -> _TrafficKeys:
        return cls(hkdf_expand(secret, "key", b"", 32), hkdf_expand(secret, "iv", b"", 12))

    def nonce(self, counter: int) -> bytes:
        return bytes(a ^ b for a, b in zip(self.iv, bytes(4) + struct.pack(">Q", counter)))


class _Sealer:
    def __init__(self, secret: bytes):
        self.keys = _TrafficKeys.from_secret(secret)

    def seal(self, kind: int, plaintext: bytes) -> bytes:
        out = seal(self.keys.key, self.keys.nonce(self.keys.counter), plaintext, bytes([int(kind)]))
        self.keys.counter += 1
        return out

    def open(self, kind: int, ciphertext: bytes) -> bytes:
        try:
            out = open_sealed(self.keys.key, self.keys.nonce(self.keys.counter), ciphertext, bytes([int(kind)]))
        except DecryptFailure:
            raise HandshakeError("DecryptFailure", f"handshake frame {MessageKind(kind).name}") from None
        self.keys.counter += 1
        return out


CLIENT_CV_CONTEXT = b"SRAS client CertificateVerify\x00"
SERVER_CV_CONTEXT = b"SRAS server CertificateVerify\x00"


@dataclass
class SecureChannel:
    role: str
    local_job: str
    peer_job: str
    peer_certificate: PeCertificate
    transcript_hash: bytes
    _send: _TrafficKeys = field(repr=False)
    _recv: _TrafficKeys = field(repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    @property
    def send_key(self) -> bytes:
        return self._send.key

    @property
    def receive_key(self) -> bytes:
        return self._recv.key

    def seal(self, plaintext: bytes) -> bytes:
        with self._lock:
            counter = self._send.counter
            self._send.counter += 1
        header = struct.pack(">Q", counter)
        return header + seal(self._send.key, self._send.nonce(counter), bytes(plaintext), header)

    def open(self, frame: bytes) -> bytes:
        if len(frame) < 8 + 16:
            raise DecryptFailure("frame too short")
        header = bytes(frame[:8])
        (counter,) = struct.unpack(">Q", header)
        with self._lock:
            expected = self._recv.counter
            if counter < expected:
                raise CounterReplay(f"counter {counter} already consumed (next {expected})")
            if counter > expected:
                raise DecryptFailure(f"counter {counter} out of order (next {expected})")
            plaintext = open_sealed(self._recv.key, self._recv.nonce(counter), bytes(frame[8:]), header)
            self._recv.counter += 1
        return plaintext

    def send_over(self, pipe, plaintext: bytes) -> None:
        pipe.send(MessageKind.APPLICATION_DATA, self.seal(plaintext))

    def receive_over(self, pipe, timeout: float = DEFAULT_TIMEOUT) -> bytes:
        kind, body = pipe.recv(timeout)
        if kind != MessageKind.APPLICATION_DATA:
            raise DecryptFailure(f"unexpected frame kind {kind}")
        return self.open(body)


def exchange_data(sender: SecureChannel, receiver: SecureChannel, plaintext: bytes) -> bytes:
    """Seal on one endpoint and open on its peer."""
    return receiver.open(sender.seal(plaintext))


def _app_channel(role: str, local_job: str, peer_job: str, cert: PeCertificate,
                 hs_secret: bytes, transcript_hash: bytes) -> SecureChannel:
    master = hkdf_extract(hkdf_expand(hs_secret, "derived", b""), bytes(32))
    c_ap = _TrafficKeys.from_secret(hkdf_expand(master, "c ap traffic", transcript_hash))
    s_ap = _TrafficKeys.from_secret(hkdf_expand(master, "s ap traffic", transcript_hash))
    send, recv = (c_ap, s_ap) if role == "client" else (s_ap, c_ap)
    return SecureChannel(role, local_job, peer_job, cert, transcript_hash, send, recv)


# -- handshake --------------------------------------------------------------


class _Endpoint:
    def __init__(self, pipe, timeout: float):
        self.pipe = pipe
        self.timeout = timeout
        self.transcript = _Transcript()

    def send(self, kind: MessageKind, body: bytes, sealer: _Sealer | None = None) -> None:
        self.transcript.add(kind, body)
        self.pipe.send(kind, sealer.seal(kind, body) if sealer else body)

    def expect(self, kind: MessageKind, sealer: _Sealer | None = None) -> bytes:
        got, body = self.pipe.recv(self.timeout)
        if got == MessageKind.ALERT:
            raise HandshakeError("PeerAlert", body.decode("utf-8", "replace"))
        if got != kind:
            raise HandshakeError("UnexpectedMessage", f"expected {kind.name}, got {got}")
        if sealer:
            body = sealer.open(kind, body)
        self.transcript.add(kind, body)
        return body

    def abort(self, reason: str, detail: str = "") -> HandshakeError:
        try:
            self.pipe.send(MessageKind.ALERT, reason.encode())
        except Exception:  # peer may already be gone
            pass
        return HandshakeError(reason, detail)


def _connection_allows(rt: PeRuntime, server_job: str, client_job: str) -> bool:
    return any(c.server == server_job and client_job in c.clients for c in rt.rpe.policy.connections)


def _read_certificate(body: bytes) -> PeCertificate | None:
    try:
        return PeCertificate.from_bytes(body)
    except MalformedRecord:
        return None


def client_handshake(rt: PeRuntime, pipe, server_job: str, timeout: float = DEFAULT_TIMEOUT) -> SecureChannel:
    if rt.certificate is None:
        raise HandshakeError("NoCertificate", rt.entity)
    ep = _Endpoint(pipe, timeout)
    if not _connection_allows(rt, server_job, rt.job_id):
        raise HandshakeError("RoleMismatch", f"no connection {server_job} <- {rt.job_id}")
    eph = generate_ephemeral()
    ep.send(MessageKind.CLIENT_HELLO, _fields(SUITE_ID.encode(), eph.public, rt.job_id.encode()))

    suite, server_share, peer_job = _unfields(ep.expect(MessageKind.SERVER_HELLO), 3)
    if suite.decode("utf-8", "replace") != SUITE_ID:
        raise ep.abort("SuiteMismatch", suite.decode("utf-8", "replace"))
    if peer_job.decode() != server_job:
        raise ep.abort("RoleMismatch", f"server answered as {peer_job.decode()}")
    try:
        hs_secret = hkdf_extract(bytes(32), eph.exchange(server_share))
    except DecryptFailure as exc:
        raise ep.abort("Malformed", str(exc)) from None
    th = ep.transcript.hash()
    c_hs = _Sealer(hkdf_expand(hs_secret, "c hs traffic", th))
    s_hs = _Sealer(hkdf_expand(hs_secret, "s hs traffic", th))

    ep.expect(MessageKind.ENCRYPTED_EXTENSIONS, s_hs)
    cert = _read_certificate(ep.expect(MessageKind.CERTIFICATE, s_hs))
    if cert is None:
        raise ep.abort("CertificateRejected", "undecodable certificate")
    verdict = rt.rpe.verify_pe_certificate(cert, server_job)
    if not verdict:
        raise ep.abort("CertificateRejected", str(verdict))
    signed = SERVER_CV_CONTEXT + ep.transcript.hash()
    if not verify(cert.pe_public_key, signed, ep.expect(MessageKind.CERTIFICATE_VERIFY, s_hs)):
        raise ep.abort("BadCertificateVerify")

    ep.send(MessageKind.CERTIFICATE, rt.certificate.to_bytes(), c_hs)
    ep.send(MessageKind.CERTIFICATE_VERIFY, rt.sign(CLIENT_CV_CONTEXT + ep.transcript.hash()), c_hs)
    c_fin_key = hkdf_expand(hs_secret, "c finished", b"")
    ep.send(MessageKind.FINISHED, mac(c_fin_key, ep.transcript.hash()), c_hs)
    app_th = ep.transcript.hash()

    s_fin_key = hkdf_expand(hs_secret, "s finished", b"")
    expected = mac(s_fin_key, ep.transcript.hash())
    if not mac_equal(ep.expect(MessageKind.FINISHED, s_hs), expected):
        raise ep.abort("BadFinished")
    return _app_channel("client", rt.job_id, server_job, cert, hs_secret, app_th)


def server_handshake(rt: PeRuntime, pipe, timeout: float = DEFAULT_TIMEOUT) -> SecureChannel:
    if rt.certificate is None:
        raise HandshakeError("NoCertificate", rt.entity)
    ep = _Endpoint(pipe, timeout)
    suite, client_share, client_job = _unfields(ep.expect(MessageKind.CLIENT_HELLO), 3)
    if suite.decode("utf-8", "replace") != SUITE_ID:
        raise ep.abort("SuiteMismatch", suite.decode("utf-8", "replace"))
    client_job = client_job.decode("utf-8", "replace")
    if not _connection_allows(rt, rt.job_id, client_job):
        raise ep.abort("RoleMismatch", f"no connection {rt.job_id} <- {client_job}")
    eph = generate_ephemeral()
    ep.send(MessageKind.SERVER_HELLO, _fields(SUITE_ID.encode(), eph.public, rt.job_id.encode()))
    try:
        hs_secret = hkdf_extract(bytes(32), eph.exchange(client_share))
    except DecryptFailure as exc:
        raise ep.abort("Malformed", str(exc)) from None
    th = ep.transcript.hash()
    c_hs = _Sealer(hkdf_expand(hs_secret, "c hs traffic", th))
    s_hs = _Sealer(hkdf_expand(hs_secret, "s hs traffic", th))

    ep.send(MessageKind.ENCRYPTED_EXTENSIONS, canonical.dumps({"client_job": client_job, "server_job": rt.job_id}), s_hs)
    ep.send(MessageKind.CERTIFICATE, rt.certificate.to_bytes(), s_hs)
    ep.send(MessageKind.CERTIFICATE_VERIFY, rt.sign(SERVER_CV_CONTEXT + ep.transcript.hash()), s_hs)

    cert = _read_certificate(ep.expect(MessageKind.CERTIFICATE, c_hs))
    if cert is None:
        raise ep.abort("CertificateRejected", "undecodable certificate")
    verdict = rt.rpe.verify_pe_certificate(cert, client_job)
    if not verdict:
        raise ep.abort("CertificateRejected", str(verdict))
    signed = CLIENT_CV_CONTEXT + ep.transcript.hash()
    if not verify(cert.pe_public_key, signed, ep.expect(MessageKind.CERTIFICATE_VERIFY, c_hs)):
        raise ep.abort("BadCertificateVerify")
    c_fin_key = hkdf_expand(hs_secret, "c finished", b"")
    expected = mac(c_fin_key, ep.transcript.hash())
    if not mac_equal(ep.expect(MessageKind.FINISHED, c_hs), expected):
        raise ep.abort("BadFinished")
    app_th = ep.transcript.hash()

    s_fin_key = hkdf_expand(hs_secret, "s finished", b"")
    ep.send(MessageKind.FINISHED, mac(s_fin_key, ep.transcript.hash()), s_hs)
    return _app_channel("server", rt.job_id, client_job, cert, hs_secret, app_th)


@dataclass
class HandshakeOutcome:
    client: SecureChannel | None
    server: SecureChannel | None
    client_error: HandshakeError | None
    server_error: HandshakeError | None

    @property
    def established(self) -> bool:
        return self.client is not None and self.server is not None

    @property
    def reason(self) -> str | None:
        """The detecting side's reason, not the echo of its alert."""
        for err in (self.client_error, self.server_error):
            if err is not None and err.reason != "PeerAlert":
                return err.reason
        for err in (self.client_error, self.server_error):
            if err is not None:
                return err.reason
        return None


def run_handshake(client: PeRuntime, server: PeRuntime, *, transport: str = "inmem",
                  timeout: float = DEFAULT_TIMEOUT) -> HandshakeOutcome:
    """Run both sides concurrently and collect what each side concluded."""
    c_pipe, s_pipe = pipe_pair() if transport == "inmem" else tcp_pipe_pair()
    results: dict[str, object] = {}

    def side(name, fn, *args):
        try:
            results[name] = fn(*args)
        except HandshakeError as exc:
            results[name] = exc

    t = threading.Thread(target=side, args=("server", server_handshake, server, s_pipe, timeout), daemon=True)
    t.start()
    side("client", client_handshake, client, c_pipe, server.job_id, timeout)
    t.join(timeout + 1)
    c_pipe.close()
    s_pipe.close()
    c, s = results.get("client"), results.get("server", HandshakeError("Timeout", "server did not finish"))
    return HandshakeOutcome(
        client=c if isinstance(c, SecureChannel) else None,
        server=s if isinstance(s, SecureChannel) else None,
        client_error=c if isinstance(c, HandshakeError) else None,
        server_error=s if isinstance(s, HandshakeError) else None,
    )


def handshake(client: PeRuntime, server: PeRuntime, *, transport: str = "inmem",
              timeout: float = DEFAULT_TIMEOUT) -> tuple[SecureChannel, SecureChannel]:
    out = run_handshake(client, server, transport=transport, timeout=timeout)
    if not out.established:
        err = HandshakeError(out.reason or "Unknown")
        err.outcome = out
        raise err
    return out.client, out.server
