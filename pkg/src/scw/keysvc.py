"""Key service: principals, key pairs, node attestation, leases and audit.

Private keys never leave this service. Nodes obtain a bundle or image DEK
through :meth:`KeyService.request_unwrap`, which succeeds only when

* the caller is the node named in a valid, unexpired attestation token,
* the scheduler authorized that (job, node, key) triple, and
* for sev-level jobs, the token carries the sev capability.

Every operation appends exactly one audit entry, success or denial, under a
single writer lock so the sequence numbers are gapless.

Persistent state lives in ``<state_dir>/records.jsonl`` (one JSON record
per mutation, fsynced) plus ``<state_dir>/snapshot.json`` written by
:meth:`KeyService.compact`. Private keys are stored sealed under a master
key derived from the deployment secret; DEKs are never written.
"""

from __future__ import annotations

import hashlib
import hmac
import json
import logging
import os
import threading
import time
import uuid
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Callable

from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from . import crypto, recorder
from .crypto import DEK, KeyPair, Purpose, WrappedKey
from .errors import (
    AuthError,
    ConflictError,
    FormatError,
    NotFound,
    PolicyError,
    ScwError,
    ValidationError,
)
from .identity import (
    KEYSVC,
    SCHEDULER_IDENTITY,
    Credential,
    Principal,
    Role,
    check_name,
    derive_credential,
    issue_credential,
    service_secret,
)
from .wire import Msg, RpcClient, b64, unb64

log = logging.getLogger(__name__)

TOKEN_TTL = 24 * 3600.0
LEASE_TTL = 3600.0
_SERVICE = Principal("scheduler", Role.SCHEDULER, "control")
_PURPOSES = (Purpose.BUNDLE.value, Purpose.IMAGE.value)


@dataclass(frozen=True)
class AttestationToken:
    node_id: str
    capabilities: dict
    issued_at: float
    mac: bytes

    def signed_bytes(self) -> bytes:
        return token_body(self.node_id, self.capabilities, self.issued_at)

    def to_dict(self) -> dict:
        return {"node_id": self.node_id, "capabilities": dict(self.capabilities),
                "issued_at": self.issued_at, "mac": b64(self.mac)}

    @classmethod
    def from_dict(cls, obj: dict) -> "AttestationToken":
        try:
            return cls(obj["node_id"], dict(obj["capabilities"]), float(obj["issued_at"]), unb64(obj["mac"]))
        except (KeyError, TypeError, ValueError, FormatError) as exc:
            raise AuthError(f"malformed attestation token: {exc}") from None


def token_body(node_id: str, capabilities: dict, issued_at: float) -> bytes:
    return json.dumps({"node_id": node_id, "capabilities": capabilities, "issued_at": issued_at},
                      sort_keys=True, separators=(",", ":")).encode()


@dataclass
class Lease:
    lease_id: str
    key_id: str
    node_id: str
    job_id: str
    expires_at: float
    state: str = "active"

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class AuditEntry:
    seq: int
    timestamp: float
    actor: str
    action: str
    object: str
    outcome: str

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class KeyRecord:
    key_id: str
    owner: str
    public_pem: str
    sealed_private: str
    created_at: float


def check_capabilities(caps: Any) -> dict:
    if not isinstance(caps, dict) or set(caps) != {"sev", "domain"} or not isinstance(caps["sev"], bool):
        raise ValidationError("capabilities must be {sev: bool, domain: name}")
    check_name(caps["domain"], "domain")
    return {"sev": caps["sev"], "domain": caps["domain"]}


class KeyService:
    """In-process key service; :class:`KeyServiceServer` exposes it over the wire.

    Args:
        control_secret: deployment secret; channel credentials and the
            private-key sealing key derive from it.
        state_dir: where records and snapshots live; ``None`` keeps state in memory.
        clock: time source (seconds), injectable for expiry tests.
        keypair_factory: key pair generator, injectable to reuse test keys.
    """

    def __init__(
        self,
        control_secret: bytes,
        state_dir: str | os.PathLike | None = None,
        *,
        clock: Callable[[], float] = time.time,
        token_ttl: float = TOKEN_TTL,
        lease_ttl: float = LEASE_TTL,
        keypair_factory: Callable[[], KeyPair] = crypto.generate_keypair,
    ) -> None:
        if len(control_secret) < 16:
            raise ValidationError("control secret must be at least 16 bytes")
        self._control = bytes(control_secret)
        self._root = service_secret(self._control, KEYSVC)
        master = HKDF(hashes.SHA256(), 32, salt=None, info=b"scw-keysvc-master").derive(self._control)
        self._sealer = AESGCM(master)
        self._token_key = hmac.new(self._control, b"scw-attestation", hashlib.sha256).digest()
        self.clock = clock
        self.token_ttl = token_ttl
        self.lease_ttl = lease_ttl
        self._keypair_factory = keypair_factory
        self._lock = threading.RLock()
        self.principals: dict[str, Principal] = {}
        self.keys: dict[str, KeyRecord] = {}
        self.nodes: dict[str, dict] = {}
        self.authz: dict[str, dict] = {}
        self.leases: dict[str, Lease] = {}
        self._audit: list[AuditEntry] = []
        self._private_cache: dict[str, Any] = {}
        self.state_dir = Path(state_dir) if state_dir is not None else None
        if self.state_dir is not None:
            self.state_dir.mkdir(parents=True, exist_ok=True)
            self._load()

    # -- persistence -------------------------------------------------------

    @property
    def _records_path(self) -> Path:
        return self.state_dir / "records.jsonl"

    @property
    def _snapshot_path(self) -> Path:
        return self.state_dir / "snapshot.json"

    def _persist(self, record: dict) -> None:
        self._apply(record)
        if self.state_dir is not None:
            line = json.dumps(record, sort_keys=True, separators=(",", ":")).encode() + b"\n"
            recorder.append(self._records_path, line)

    def _apply(self, r: dict) -> None:
        t = r["t"]
        if t == "principal":
            p = Principal.from_dict(r["principal"])
            self.principals[p.name] = p
        elif t == "key":
            self.keys[r["key_id"]] = KeyRecord(r["key_id"], r["owner"], r["public_pem"],
                                               r["sealed_private"], r["created_at"])
        elif t == "node":
            self.nodes[r["node_id"]] = {"capabilities": r["capabilities"], "registered_at": r["registered_at"]}
        elif t == "authz":
            self.authz[r["job_id"]] = {"node_ids": r["node_ids"], "key_ids": r["key_ids"],
                                       "security_level": r["security_level"], "revoked": False}
        elif t == "job_revoked":
            if r["job_id"] in self.authz:
                self.authz[r["job_id"]]["revoked"] = True
        elif t == "lease":
            self.leases[r["lease"]["lease_id"]] = Lease(**r["lease"])
        elif t == "lease_state":
            self.leases[r["lease_id"]].state = r["state"]
        elif t == "audit":
            e = AuditEntry(**r["entry"])
            if e.seq == len(self._audit) + 1:
                self._audit.append(e)
        else:
            raise FormatError(f"unknown key service record {t!r}")

    def _load(self) -> None:
        if self._snapshot_path.exists():
            snap = json.loads(self._snapshot_path.read_bytes())
            for r in snap["records"]:
                self._apply(r)
        if self._records_path.exists():
            for line in self._records_path.read_bytes().splitlines():
                if line.strip():
                    self._apply(json.loads(line))

    def _state_records(self) -> list[dict]:
        out: list[dict] = [{"t": "principal", "principal": p.to_dict()} for p in self.principals.values()]
        out += [{"t": "key", **asdict(k)} for k in self.keys.values()]
        out += [{"t": "node", "node_id": n, **v} for n, v in self.nodes.items()]
        for job_id, a in self.authz.items():
            out.append({"t": "authz", "job_id": job_id, "node_ids": a["node_ids"],
                        "key_ids": a["key_ids"], "security_level": a["security_level"]})
            if a["revoked"]:
                out.append({"t": "job_revoked", "job_id": job_id})
        out += [{"t": "lease", "lease": l.to_dict()} for l in self.leases.values()]
        out += [{"t": "audit", "entry": e.to_dict()} for e in self._audit]
        return out

    def compact(self) -> None:
        """Write a snapshot and truncate the record file (replay is idempotent)."""
        if self.state_dir is None:
            return
        with self._lock:
            body = json.dumps({"format": 1, "records": self._state_records()}, sort_keys=True).encode()
            recorder.write_atomic(self._snapshot_path, body)
            recorder.write_atomic(self._records_path, b"")

    # -- audit and access helpers --------------------------------------------

    def _append_audit(self, actor: str, action: str, obj: str, outcome: str) -> None:
        entry = AuditEntry(len(self._audit) + 1, self.clock(), actor, action, obj, outcome)
        self._persist({"t": "audit", "entry": entry.to_dict()})

    def _run(self, actor: str, action: str, obj: str, fn: Callable[[], Any]) -> Any:
        with self._lock:
            try:
                result = fn()
            except ScwError as exc:
                kind = "denied" if isinstance(exc, AuthError) else "error"
                self._append_audit(actor, action, obj, f"{kind}:{exc.code}")
                raise
            self._append_audit(actor, action, obj, "ok")
            return result

    def _principal(self, actor: str) -> Principal:
        if actor == SCHEDULER_IDENTITY:
            return _SERVICE
        role, _, name = actor.partition(":")
        p = self.principals.get(name)
        if p is None or p.role.value != role:
            raise AuthError(f"unknown principal {actor}")
        return p

    def _require(self, actor: str, *roles: Role) -> Principal:
        p = self._principal(actor)
        if p.role not in roles:
            raise AuthError(f"role {p.role.value} may not perform this operation", actor=actor)
        return p

    def credential_for(self, ident: str) -> bytes | None:
        """Channel credential lookup for the RPC server (known identities only)."""
        with self._lock:
            try:
                self._principal(ident)
            except AuthError:
                return None
        return derive_credential(self._root, ident)

    def scheduler_credential(self) -> bytes:
        return derive_credential(self._root, SCHEDULER_IDENTITY)

    # -- principals --------------------------------------------------------

    def bootstrap_operator(self, name: str, organisation: str) -> Credential:
        """Create the first operator; refused once any operator exists."""
        p = Principal(name, Role.OPERATOR, organisation)

        def go():
            if any(x.role is Role.OPERATOR for x in self.principals.values()):
                raise ConflictError("an operator already exists")
            self._persist({"t": "principal", "principal": p.to_dict()})
            return issue_credential(self._control, p)

        return self._run(p.identity, "bootstrap", p.identity, go)

    def add_principal(self, actor: str, name: str, role: Role | str, organisation: str) -> Credential:
        def go():
            self._require(actor, Role.OPERATOR)
            p = Principal(name, Role(role), organisation)
            if p.role not in (Role.USER, Role.OPERATOR):
                raise ValidationError("nodes are added with register_node")
            if name in self.principals:
                raise ConflictError(f"principal {name} exists")
            self._persist({"t": "principal", "principal": p.to_dict()})
            return issue_credential(self._control, p)

        return self._run(actor, "principal_add", f"{role}:{name}", go)

    def principal(self, name: str) -> Principal:
        try:
            return self.principals[name]
        except KeyError:
            raise NotFound(f"no principal {name}") from None

    # -- key pairs -----------------------------------------------------------

    def _seal_private(self, key_id: str, der: bytes) -> str:
        nonce = os.urandom(12)
        return b64(nonce + self._sealer.encrypt(nonce, der, key_id.encode()))

    def _private(self, key_id: str):
        cached = self._private_cache.get(key_id)
        if cached is None:
            rec = self.keys.get(key_id)
            if rec is None:
                raise NotFound(f"no key {key_id}")
            raw = unb64(rec.sealed_private)
            der = self._sealer.decrypt(raw[:12], raw[12:], key_id.encode())
            cached = self._private_cache[key_id] = crypto.load_private_key(der)
        return cached

    def issue_keypair(self, actor: str) -> tuple[str, bytes]:
        def go():
            p = self._require(actor, Role.USER)
            kp = self._keypair_factory()
            if kp.key_id in self.keys:
                raise ConflictError("key id collision")
            self._persist({
                "t": "key", "key_id": kp.key_id, "owner": p.name,
                "public_pem": kp.public_pem().decode(),
                "sealed_private": self._seal_private(kp.key_id, crypto.serialize_private_key(kp.private_key)),
                "created_at": self.clock(),
            })
            self._private_cache[kp.key_id] = kp.private_key
            return kp.key_id, kp.public_pem()

        return self._run(actor, "key_issue", "-", go)

    def get_pubkey(self, actor: str, key_id: str) -> bytes:
        def go():
            self._principal(actor)
            rec = self.keys.get(key_id)
            if rec is None:
                raise NotFound(f"no key {key_id}")
            return rec.public_pem.encode()

        return self._run(actor, "key_get_pub", key_id, go)

    # -- nodes and attestation -------------------------------------------------

    def _mac(self, node_id: str, caps: dict, issued_at: float) -> bytes:
        return hmac.new(self._token_key, token_body(node_id, caps, issued_at), hashlib.sha256).digest()

    def register_node(self, actor: str, node_id: str, capabilities: dict) -> tuple[AttestationToken, Credential]:
        def go():
            self._require(actor, Role.OPERATOR)
            caps = check_capabilities(capabilities)
            p = Principal(node_id, Role.NODE, caps["domain"])
            if node_id in self.principals:
                raise ConflictError(f"node {node_id} already registered")
            now = float(self.clock())
            self._persist({"t": "principal", "principal": p.to_dict()})
            self._persist({"t": "node", "node_id": node_id, "capabilities": caps, "registered_at": now})
            token = AttestationToken(node_id, caps, now, self._mac(node_id, caps, now))
            return token, issue_credential(self._control, p)

        return self._run(actor, "node_register", node_id, go)

    def _check_token(self, token: AttestationToken) -> dict:
        expected = self._mac(token.node_id, token.capabilities, token.issued_at)
        if not hmac.compare_digest(expected, token.mac):
            raise AuthError("attestation token failed verification", node_id=token.node_id)
        if self.clock() - token.issued_at > self.token_ttl:
            raise AuthError("attestation token expired", node_id=token.node_id)
        node = self.nodes.get(token.node_id)
        if node is None or node["capabilities"] != token.capabilities:
            raise AuthError("attestation token does not match a registered node")
        return dict(token.capabilities)

    def verify_token(self, actor: str, token: AttestationToken) -> dict:
        def go():
            self._require(actor, Role.SCHEDULER, Role.OPERATOR)
            return self._check_token(token)

        return self._run(actor, "token_verify", token.node_id, go)

    # -- jobs and leases -----------------------------------------------------

    def authorize_job(self, actor: str, job_id: str, node_ids: list[str], key_ids: list[str],
                      security_level: str, owner: str) -> None:
        """Grant ``node_ids`` leases on ``key_ids`` for one job.

        Every key must belong to ``owner`` (the submitting user's name), so a
        job cannot borrow another user's wrapped keys.
        """

        def go():
            self._require(actor, Role.SCHEDULER)
            if security_level not in ("standard", "sev"):
                raise ValidationError("unknown security level")
            if job_id in self.authz:
                raise ConflictError(f"job {job_id} already authorized")
            for k in key_ids:
                if k not in self.keys:
                    raise NotFound(f"no key {k}")
                if self.keys[k].owner != owner:
                    raise AuthError(f"key {k} does not belong to {owner}")
            for n in node_ids:
                if n not in self.nodes:
                    raise NotFound(f"no node {n}")
            self._persist({"t": "authz", "job_id": job_id, "node_ids": sorted(node_ids),
                           "key_ids": sorted(set(key_ids)), "security_level": security_level})

        self._run(actor, "job_authorize", job_id, go)

    def revoke_job(self, actor: str, job_id: str) -> int:
        def go():
            self._require(actor, Role.SCHEDULER, Role.OPERATOR)
            if job_id not in self.authz:
                raise NotFound(f"job {job_id} not authorized")
            self._persist({"t": "job_revoked", "job_id": job_id})
            n = 0
            for lease in self.leases.values():
                if lease.job_id == job_id and lease.state == "active":
                    self._persist({"t": "lease_state", "lease_id": lease.lease_id, "state": "revoked"})
                    n += 1
            return n

        return self._run(actor, "job_revoke", job_id, go)

    def revoke_lease(self, actor: str, lease_id: str) -> None:
        def go():
            self._require(actor, Role.OPERATOR)
            if lease_id not in self.leases:
                raise NotFound(f"no lease {lease_id}")
            self._persist({"t": "lease_state", "lease_id": lease_id, "state": "revoked"})

        self._run(actor, "lease_revoke", lease_id, go)

    def _unwrap(self, wrapped: WrappedKey, context: dict) -> DEK:
        purpose = context.get("purpose")
        if purpose not in _PURPOSES:
            raise ValidationError("unwrap context needs purpose bundle or image")
        level = context.get("security_level") if purpose == Purpose.BUNDLE.value else None
        label = crypto.wrap_context(purpose, level)
        return crypto.unwrap_dek(wrapped, self._private(wrapped.key_id), purpose, label)

    def request_unwrap(self, actor: str, token: AttestationToken, wrapped: WrappedKey, job_id: str,
                       context: dict) -> tuple[DEK, Lease]:
        """Release a DEK to an attested, authorized node under a lease."""

        def go():
            p = self._require(actor, Role.NODE)
            caps = self._check_token(token)
            if token.node_id != p.name:
                raise AuthError("attestation token belongs to another node")
            a = self.authz.get(job_id)
            if a is None or a["revoked"] or p.name not in a["node_ids"] or wrapped.key_id not in a["key_ids"]:
                raise AuthError("node is not authorized for this job and key",
                                node_id=p.name, job_id=job_id)
            level = a["security_level"]
            if context.get("purpose") == Purpose.BUNDLE.value and context.get("security_level") != level:
                raise AuthError("bundle security level differs from the job authorization")
            if level == "sev" and not caps["sev"]:
                raise PolicyError("sev-level job requires a sev-capable node", node_id=p.name)
            lease = next((l for l in self.leases.values()
                          if (l.node_id, l.job_id, l.key_id) == (p.name, job_id, wrapped.key_id)), None)
            now = self.clock()
            if lease is not None:
                if lease.state == "active" and now >= lease.expires_at:
                    self._persist({"t": "lease_state", "lease_id": lease.lease_id, "state": "expired"})
                if lease.state != "active":
                    raise AuthError(f"lease {lease.state}", lease_id=lease.lease_id)
            dek = self._unwrap(wrapped, context)
            if lease is None:
                lease = Lease(str(uuid.uuid4()), wrapped.key_id, p.name, job_id, now + self.lease_ttl)
                self._persist({"t": "lease", "lease": lease.to_dict()})
            return dek, Lease(**lease.to_dict())

        return self._run(actor, "key_unwrap", f"{job_id}/{wrapped.key_id}", go)

    def owner_unwrap(self, actor: str, wrapped: WrappedKey, context: dict) -> DEK:
        """Unwrap for the key's owner (results, images, local checks)."""

        def go():
            p = self._require(actor, Role.USER)
            rec = self.keys.get(wrapped.key_id)
            if rec is None:
                raise NotFound(f"no key {wrapped.key_id}")
            if rec.owner != p.name:
                raise AuthError("only the key owner may unwrap directly")
            return self._unwrap(wrapped, context)

        return self._run(actor, "key_owner_unwrap", wrapped.key_id, go)

    def audit(self, actor: str, since: int = 0) -> list[AuditEntry]:
        with self._lock:
            self._require(actor, Role.OPERATOR)
            return list(self._audit[since:])

    def audit_entries(self) -> list[AuditEntry]:
        with self._lock:
            return list(self._audit)


# ---------------------------------------------------------------------------
# wire binding

def _dek_reply(dek: DEK) -> str:
    try:
        return b64(bytes(dek.material))
    finally:
        dek.destroy()


def _dek_from(text: str, purpose: str) -> DEK:
    raw = bytearray(unb64(text))
    try:
        return DEK(raw, purpose)
    finally:
        raw[:] = bytes(len(raw))


class KeyServiceServer:
    """Maps framed messages onto a :class:`KeyService`."""

    def __init__(self, service: KeyService) -> None:
        self.service = service

    def dispatch(self, ident: str, mtype: int, body: dict, blob: bytes | None) -> tuple[dict, None]:
        s = self.service
        try:
            if mtype == Msg.KEY_ISSUE:
                key_id, pem = s.issue_keypair(ident)
                return {"key_id": key_id, "public_pem": pem.decode()}, None
            if mtype == Msg.KEY_GET_PUB:
                return {"public_pem": s.get_pubkey(ident, body["key_id"]).decode()}, None
            if mtype == Msg.PRINCIPAL_ADD:
                cred = s.add_principal(ident, body["name"], body["role"], body["organisation"])
                return {"credential": cred.to_dict()}, None
            if mtype == Msg.NODE_REGISTER:
                token, cred = s.register_node(ident, body["node_id"], body["capabilities"])
                return {"token": token.to_dict(), "credential": cred.to_dict()}, None
            if mtype == Msg.TOKEN_VERIFY:
                return {"capabilities": s.verify_token(ident, AttestationToken.from_dict(body["token"]))}, None
            if mtype == Msg.JOB_AUTHORIZE:
                s.authorize_job(ident, body["job_id"], body["node_ids"], body["key_ids"],
                                body["security_level"], body["owner"])
                return {}, None
            if mtype == Msg.JOB_REVOKE:
                return {"revoked_leases": s.revoke_job(ident, body["job_id"])}, None
            if mtype == Msg.LEASE_REVOKE:
                s.revoke_lease(ident, body["lease_id"])
                return {}, None
            if mtype == Msg.KEY_UNWRAP:
                dek, lease = s.request_unwrap(ident, AttestationToken.from_dict(body["token"]),
                                              WrappedKey.from_dict(body["wrapped"]), body["job_id"],
                                              body["context"])
                return {"dek": _dek_reply(dek), "lease": lease.to_dict()}, None
            if mtype == Msg.KEY_OWNER_UNWRAP:
                dek = s.owner_unwrap(ident, WrappedKey.from_dict(body["wrapped"]), body["context"])
                return {"dek": _dek_reply(dek)}, None
            if mtype == Msg.AUDIT_QUERY:
                return {"entries": [e.to_dict() for e in s.audit(ident, int(body.get("since", 0)))]}, None
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed request: {exc}") from None
        raise ValidationError(f"unsupported message type {mtype:#x}")


class KeyServiceClient:
    """Remote key service API bound to one authenticated identity."""

    def __init__(self, rpc: RpcClient) -> None:
        self.rpc = rpc

    @classmethod
    def connect(cls, endpoint: str, ident: str, psk: bytes, timeout: float = 30.0) -> "KeyServiceClient":
        return cls(RpcClient(endpoint, ident, psk, timeout))

    def issue_keypair(self) -> tuple[str, bytes]:
        r, _ = self.rpc.call(Msg.KEY_ISSUE)
        return r["key_id"], r["public_pem"].encode()

    def get_pubkey(self, key_id: str) -> KeyPair:
        r, _ = self.rpc.call(Msg.KEY_GET_PUB, {"key_id": key_id})
        return KeyPair(key_id, crypto.load_public_key(r["public_pem"].encode()))

    def add_principal(self, name: str, role: str, organisation: str) -> Credential:
        r, _ = self.rpc.call(Msg.PRINCIPAL_ADD, {"name": name, "role": Role(role).value,
                                                 "organisation": organisation})
        return Credential.from_dict(r["credential"])

    def register_node(self, node_id: str, capabilities: dict) -> tuple[AttestationToken, Credential]:
        r, _ = self.rpc.call(Msg.NODE_REGISTER, {"node_id": node_id, "capabilities": capabilities})
        return AttestationToken.from_dict(r["token"]), Credential.from_dict(r["credential"])

    def verify_token(self, token: AttestationToken) -> dict:
        return self.rpc.call(Msg.TOKEN_VERIFY, {"token": token.to_dict()})[0]["capabilities"]

    def authorize_job(self, job_id: str, node_ids: list[str], key_ids: list[str], security_level: str,
                      owner: str) -> None:
        self.rpc.call(Msg.JOB_AUTHORIZE, {"job_id": job_id, "node_ids": list(node_ids),
                                          "key_ids": list(key_ids), "security_level": security_level,
                                          "owner": owner})

    def revoke_job(self, job_id: str) -> int:
        return self.rpc.call(Msg.JOB_REVOKE, {"job_id": job_id})[0]["revoked_leases"]

    def revoke_lease(self, lease_id: str) -> None:
        self.rpc.call(Msg.LEASE_REVOKE, {"lease_id": lease_id})

    def request_unwrap(self, token: AttestationToken, wrapped: WrappedKey, job_id: str,
                       context: dict) -> tuple[DEK, Lease]:
        r, _ = self.rpc.call(Msg.KEY_UNWRAP, {"token": token.to_dict(), "wrapped": wrapped.to_dict(),
                                              "job_id": job_id, "context": context})
        return _dek_from(r["dek"], context["purpose"]), Lease(**r["lease"])

    def owner_unwrap(self, wrapped: WrappedKey, context: dict) -> DEK:
        r, _ = self.rpc.call(Msg.KEY_OWNER_UNWRAP, {"wrapped": wrapped.to_dict(), "context": context})
        return _dek_from(r["dek"], context["purpose"])

    def audit(self, since: int = 0) -> list[AuditEntry]:
        r, _ = self.rpc.call(Msg.AUDIT_QUERY, {"since": since})
        return [AuditEntry(**e) for e in r["entries"]]

    def close(self) -> None:
        self.rpc.close()


class LocalKeyClient:
    """Same surface as :class:`KeyServiceClient` over an in-process service."""

    def __init__(self, service: KeyService, ident: str) -> None:
        self.service = service
        self.identity = ident

    def __getattr__(self, name: str):
        fn = getattr(self.service, name)
        return lambda *a, **kw: fn(self.identity, *a, **kw)

    def get_pubkey(self, key_id: str) -> KeyPair:
        pem = self.service.get_pubkey(self.identity, key_id)
        return KeyPair(key_id, crypto.load_public_key(pem))

    def close(self) -> None:
        pass
