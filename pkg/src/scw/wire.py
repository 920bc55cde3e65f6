"""Framed wire protocol, authenticated channel and a small RPC layer.

Frame: ``u32 BE length | u8 type | body`` where ``length`` covers the type
byte and body. Bodies are UTF-8 JSON except blob data frames (0x10), which
carry raw bytes after a blob header frame (0x11) announcing
``{blob_id, total_len, digest}``.

Every connection starts with a pre-shared-key handshake::

    client -> HELLO        {identity, nonce}
    server -> SERVER_HELLO {nonce, mac}     mac = HMAC(psk, "server" | ...)
    client -> FINISH       {mac}            mac = HMAC(psk, "client" | ...)

after which each frame travels inside an AES-GCM record
``u32 BE length | ciphertext`` with a per-direction key from HKDF and a
counter nonce. A connection whose first frame is anything but HELLO is
closed; there is no plaintext mode.
"""

from __future__ import annotations

import base64
import hashlib
import hmac
import json
import logging
import os
import socket
import socketserver
import struct
import threading
import uuid
from enum import IntEnum
from typing import Callable

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from . import errors
from .errors import AuthError, FormatError, IntegrityError, ScwError

log = logging.getLogger(__name__)

MAX_FRAME = 32 << 20
BLOB_PIECE = 1 << 20
_LEN = struct.Struct(">I")


class Msg(IntEnum):
    HELLO = 0x01
    SERVER_HELLO = 0x02
    FINISH = 0x03
    BLOB_DATA = 0x10
    BLOB_HEADER = 0x11
    # key service
    KEY_ISSUE = 0x20
    KEY_GET_PUB = 0x21
    NODE_REGISTER = 0x22
    JOB_AUTHORIZE = 0x23
    KEY_UNWRAP = 0x24
    AUDIT_QUERY = 0x25
    TOKEN_VERIFY = 0x26
    JOB_REVOKE = 0x27
    PRINCIPAL_ADD = 0x28
    KEY_OWNER_UNWRAP = 0x29
    LEASE_REVOKE = 0x2A
    # scheduler
    SUBMIT = 0x40
    STATUS = 0x41
    FETCH = 0x42
    NODE_JOIN = 0x43
    HEARTBEAT = 0x44
    ACK = 0x45
    COMPLETE = 0x46
    FAIL = 0x47
    GET_BLOB = 0x48
    ALLGATHER = 0x49
    LIST_JOBS = 0x4A
    UPLOAD = 0x4B
    # replies
    REPLY = 0x7E
    ERROR = 0x7F


# ---------------------------------------------------------------------------
# framing

def encode_frame(msg_type: int, payload: bytes) -> bytes:
    return _LEN.pack(len(payload) + 1) + bytes([msg_type]) + payload


def decode_frame(data: bytes) -> tuple[int, bytes]:
    if len(data) < 1:
        raise FormatError("empty frame")
    return data[0], data[1:]


def json_payload(body: dict) -> bytes:
    return json.dumps(body, separators=(",", ":"), sort_keys=True).encode("utf-8")


def parse_json(payload: bytes) -> dict:
    try:
        body = json.loads(payload.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise FormatError("frame body is not UTF-8 JSON") from None
    if not isinstance(body, dict):
        raise FormatError("frame body must be a JSON object")
    return body


def _read_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        piece = sock.recv(min(n - len(buf), 1 << 20))
        if not piece:
            raise ConnectionError("connection closed")
        buf += piece
    return bytes(buf)


def read_raw_frame(sock: socket.socket) -> tuple[int, bytes]:
    (n,) = _LEN.unpack(_read_exact(sock, 4))
    if n < 1 or n > MAX_FRAME:
        raise FormatError(f"frame length {n} out of bounds")
    return decode_frame(_read_exact(sock, n))


def b64(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


def unb64(text: str) -> bytes:
    try:
        return base64.b64decode(text, validate=True)
    except (ValueError, TypeError):
        raise FormatError("invalid base64 field") from None


# ---------------------------------------------------------------------------
# secure channel

def _mac(psk: bytes, label: bytes, cn: bytes, sn: bytes, ident: str) -> bytes:
    return hmac.new(psk, label + b"|" + cn + sn + ident.encode(), hashlib.sha256).digest()


def _session_keys(psk: bytes, cn: bytes, sn: bytes) -> tuple[bytes, bytes]:
    okm = HKDF(hashes.SHA256(), 64, salt=cn + sn, info=b"scw-channel-v1").derive(psk)
    return okm[:32], okm[32:]


class Channel:
    """Established, encrypted, mutually authenticated connection."""

    def __init__(self, sock: socket.socket, send_key: bytes, recv_key: bytes, peer: str) -> None:
        self.sock = sock
        self.peer = peer
        self._send = AESGCM(send_key)
        self._recv = AESGCM(recv_key)
        self._send_ctr = 0
        self._recv_ctr = 0
        self._send_lock = threading.Lock()

    @staticmethod
    def _nonce(ctr: int) -> bytes:
        return b"\0\0\0\0" + ctr.to_bytes(8, "big")

    def send_frame(self, msg_type: int, payload: bytes) -> None:
        plain = bytes([msg_type]) + payload
        with self._send_lock:
            ct = self._send.encrypt(self._nonce(self._send_ctr), plain, None)
            self._send_ctr += 1
            self.sock.sendall(_LEN.pack(len(ct)) + ct)

    def recv_frame(self) -> tuple[int, bytes]:
        (n,) = _LEN.unpack(_read_exact(self.sock, 4))
        if n < 17 or n > MAX_FRAME + 17:
            raise FormatError(f"record length {n} out of bounds")
        ct = _read_exact(self.sock, n)
        try:
            plain = self._recv.decrypt(self._nonce(self._recv_ctr), ct, None)
        except InvalidTag:
            raise IntegrityError("channel record failed authentication") from None
        self._recv_ctr += 1
        return decode_frame(plain)

    # -- messages with optional attached blob ------------------------------

    def send_message(self, msg_type: int, body: dict, blob: bytes | None = None) -> None:
        if blob is not None:
            body = {**body, "_blob": True}
        self.send_frame(msg_type, json_payload(body))
        if blob is not None:
            view = memoryview(blob)
            header = {"blob_id": uuid.uuid4().hex, "total_len": len(view),
                      "digest": hashlib.sha256(view).hexdigest()}
            self.send_frame(Msg.BLOB_HEADER, json_payload(header))
            for off in range(0, len(view), BLOB_PIECE):
                self.send_frame(Msg.BLOB_DATA, bytes(view[off:off + BLOB_PIECE]))

    def recv_message(self) -> tuple[int, dict, bytes | None]:
        msg_type, payload = self.recv_frame()
        if msg_type in (Msg.BLOB_DATA, Msg.BLOB_HEADER):
            raise FormatError("unexpected blob frame")
        body = parse_json(payload)
        blob = None
        if body.pop("_blob", False):
            blob = self._recv_blob()
        return msg_type, body, blob

    def _recv_blob(self) -> bytes:
        t, payload = self.recv_frame()
        if t != Msg.BLOB_HEADER:
            raise FormatError("expected blob header frame")
        header = parse_json(payload)
        total = header.get("total_len")
        if not isinstance(total, int) or total < 0:
            raise FormatError("bad blob header")
        buf = bytearray()
        while len(buf) < total:
            t, piece = self.recv_frame()
            if t != Msg.BLOB_DATA or len(buf) + len(piece) > total:
                raise FormatError("malformed blob transfer")
            buf += piece
        if hashlib.sha256(buf).hexdigest() != header.get("digest"):
            raise IntegrityError("blob digest mismatch in transit", blob_id=header.get("blob_id"))
        return bytes(buf)

    def close(self) -> None:
        try:
            self.sock.close()
        except OSError:
            pass


def client_handshake(sock: socket.socket, ident: str, psk: bytes) -> Channel:
    cn = os.urandom(16)
    sock.sendall(encode_frame(Msg.HELLO, json_payload({"identity": ident, "nonce": b64(cn)})))
    t, payload = read_raw_frame(sock)
    if t == Msg.ERROR:
        raise errors.from_dict(parse_json(payload))
    if t != Msg.SERVER_HELLO:
        raise AuthError("unexpected handshake message")
    body = parse_json(payload)
    sn = unb64(body.get("nonce", ""))
    if not hmac.compare_digest(unb64(body.get("mac", "")), _mac(psk, b"server", cn, sn, ident)):
        raise AuthError("server failed to authenticate")
    sock.sendall(encode_frame(Msg.FINISH, json_payload({"mac": b64(_mac(psk, b"client", cn, sn, ident))})))
    c2s, s2c = _session_keys(psk, cn, sn)
    return Channel(sock, c2s, s2c, "server")


def server_handshake(sock: socket.socket, credential_for: Callable[[str], bytes | None]) -> Channel:
    t, payload = read_raw_frame(sock)
    if t != Msg.HELLO:
        raise AuthError("connection did not start with a handshake")
    body = parse_json(payload)
    ident = body.get("identity")
    cn = unb64(body.get("nonce", ""))
    psk = credential_for(ident) if isinstance(ident, str) else None
    if psk is None or len(cn) != 16:
        err = AuthError("unknown identity")
        sock.sendall(encode_frame(Msg.ERROR, json_payload(err.to_dict())))
        raise err
    sn = os.urandom(16)
    sock.sendall(encode_frame(Msg.SERVER_HELLO, json_payload(
        {"nonce": b64(sn), "mac": b64(_mac(psk, b"server", cn, sn, ident))})))
    t, payload = read_raw_frame(sock)
    mac = unb64(parse_json(payload).get("mac", "")) if t == Msg.FINISH else b""
    if not hmac.compare_digest(mac, _mac(psk, b"client", cn, sn, ident)):
        raise AuthError("client failed to authenticate")
    c2s, s2c = _session_keys(psk, cn, sn)
    return Channel(sock, s2c, c2s, ident)


# ---------------------------------------------------------------------------
# RPC

Handler = Callable[[str, int, dict, "bytes | None"], "tuple[dict, bytes | None]"]


class _ConnHandler(socketserver.BaseRequestHandler):
    def handle(self) -> None:
        srv: RpcServer = self.server.rpc  # type: ignore[attr-defined]
        sock: socket.socket = self.request
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        try:
            chan = server_handshake(sock, srv.credential_for)
        except (ScwError, ConnectionError, OSError) as exc:
            log.info("handshake rejected: %s", exc)
            return
        while True:
            try:
                msg_type, body, blob = chan.recv_message()
            except (ConnectionError, OSError):
                return
            except ScwError as exc:
                log.warning("dropping connection from %s: %s", chan.peer, exc)
                return
            try:
                reply, out_blob = srv.handler(chan.peer, msg_type, body, blob)
                chan.send_message(Msg.REPLY, reply, out_blob)
            except ScwError as exc:
                chan.send_message(Msg.ERROR, exc.to_dict())
            except (ConnectionError, OSError):
                return
            except Exception as exc:  # noqa: BLE001
                log.exception("handler failure")
                chan.send_message(Msg.ERROR, {"code": "internal", "message": str(exc), "details": {}})


class _TCPServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True
    request_queue_size = 256


class RpcServer:
    """Threaded TCP server: one thread per authenticated connection."""

    def __init__(self, handler: Handler, credential_for: Callable[[str], bytes | None],
                 host: str = "127.0.0.1", port: int = 0) -> None:
        self.handler = handler
        self.credential_for = credential_for
        self._srv = _TCPServer((host, port), _ConnHandler)
        self._srv.rpc = self  # type: ignore[attr-defined]
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> tuple[str, int]:
        return self._srv.server_address[:2]

    @property
    def endpoint(self) -> str:
        host, port = self.address
        return f"{host}:{port}"

    def start(self) -> "RpcServer":
        self._thread = threading.Thread(target=self._srv.serve_forever, daemon=True,
                                        name=f"rpc-{self.address[1]}")
        self._thread.start()
        return self

    def serve_forever(self) -> None:
        self._srv.serve_forever()

    def stop(self) -> None:
        self._srv.shutdown()
        self._srv.server_close()


def parse_endpoint(endpoint: str) -> tuple[str, int]:
    host, sep, port = endpoint.rpartition(":")
    if not sep or not host or not port.isdigit():
        raise errors.ValidationError(f"endpoint must be host:port, got {endpoint!r}")
    return host, int(port)


class RpcClient:
    """Pooled client; each call borrows an authenticated channel."""

    def __init__(self, endpoint: str, ident: str, credential: bytes, timeout: float = 30.0) -> None:
        self.host, self.port = parse_endpoint(endpoint)
        self.identity = ident
        self._psk = credential
        self.timeout = timeout
        self._idle: list[Channel] = []
        self._lock = threading.Lock()

    def _connect(self) -> Channel:
        sock = socket.create_connection((self.host, self.port), timeout=self.timeout)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        try:
            return client_handshake(sock, self.identity, self._psk)
        except BaseException:
            sock.close()
            raise

    def call(self, msg_type: int, body: dict | None = None, blob: bytes | None = None,
             timeout: float | None = None) -> tuple[dict, bytes | None]:
        body = body or {}
        with self._lock:
            chan = self._idle.pop() if self._idle else None
        fresh = chan is None
        if chan is None:
            chan = self._connect()
        try:
            chan.sock.settimeout(timeout or self.timeout)
            try:
                chan.send_message(msg_type, body, blob)
            except (ConnectionError, OSError):
                if fresh:
                    raise
                # stale pooled connection: retry once on a fresh one
                chan.close()
                chan = self._connect()
                chan.sock.settimeout(timeout or self.timeout)
                chan.send_message(msg_type, body, blob)
            rtype, reply, out_blob = chan.recv_message()
        except BaseException:
            chan.close()
            raise
        with self._lock:
            self._idle.append(chan)
        if rtype == Msg.ERROR:
            raise errors.from_dict(reply)
        if rtype != Msg.REPLY:
            raise FormatError(f"unexpected reply type {rtype:#x}")
        return reply, out_blob

    def close(self) -> None:
        with self._lock:
            for c in self._idle:
                c.close()
            self._idle.clear()
