"""Two-tier blob store with organisation-scoped secure domains.

Layout under ``root``::

    local/<blob_id>                 blob bytes, verbatim
    local/<blob_id>.meta.json       sidecar: length, digest
    secure/<domain>/.domain.json    owner organisation, members, wrapped master key
    secure/<domain>/<blob_id>       XTS-encrypted sectors (zero padded)
    secure/<domain>/<blob_id>.meta.json

Each secure blob is encrypted with AES-XTS-128 under a per-blob key derived
by HKDF from the domain master key; the master key is stored only wrapped
under the operator key pair. The local tier is meant for artifacts that are
already encrypted (bundles, images).
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import tempfile
import threading
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from . import crypto, recorder
from .crypto import DEK, Digest, KeyPair, Purpose, WrappedKey
from .dataimage import SectorDevice
from .errors import (
    AuthError,
    ConflictError,
    CorruptionError,
    MigrationError,
    NotFound,
    PolicyError,
    ValidationError,
)
from .identity import Principal, Role, check_name

LOCAL = "local"
SECURE = "secure"
TIERS = (LOCAL, SECURE)
BLOB_CIPHER = "AES-XTS-128"
_SECTOR = crypto.SECTOR_SIZE
_MASTER_CONTEXT = crypto.wrap_context("domain-master")


@dataclass(frozen=True)
class BlobRef:
    tier: str
    blob_id: str
    digest: Digest
    length: int
    domain: str | None = None

    def to_dict(self) -> dict:
        return {
            "tier": self.tier,
            "domain": self.domain,
            "blob_id": self.blob_id,
            "digest": self.digest.to_dict(),
            "length": self.length,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "BlobRef":
        try:
            tier = obj["tier"]
            if tier not in TIERS:
                raise ValidationError(f"unknown tier {tier!r}")
            return cls(tier, _check_blob_id(obj["blob_id"]), Digest.from_dict(obj["digest"]),
                       int(obj["length"]), obj.get("domain"))
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed blob reference: {exc}") from None


@dataclass(frozen=True)
class Domain:
    name: str
    organisation: str
    allowed: frozenset[str] = field(default_factory=frozenset)
    encrypted: bool = True

    def admits(self, principal: Principal) -> bool:
        return principal.organisation == self.organisation or principal.name in self.allowed


_BLOB_ID = re.compile(r"^[0-9a-f]{32}$")


def _check_blob_id(blob_id: str) -> str:
    if not isinstance(blob_id, str) or not _BLOB_ID.match(blob_id):
        raise ValidationError(f"invalid blob id {blob_id!r}")
    return blob_id


def _blob_key(master: DEK, blob_id: str) -> DEK:
    hkdf = HKDF(hashes.SHA256(), 32, salt=None, info=b"scw-blob|" + blob_id.encode())
    raw = bytearray(hkdf.derive(bytes(master.material)))
    try:
        return DEK(raw, Purpose.IMAGE)
    finally:
        raw[:] = bytes(len(raw))


def _json_bytes(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, indent=1).encode()


class BlobWriter:
    """Streaming writer; the blob becomes visible atomically on :meth:`close`."""

    def __init__(self, store: "BlobStore", tier: str, domain: Domain | None, blob_id: str,
                 key: DEK | None, fsync: bool) -> None:
        self._store = store
        self.tier = tier
        self.domain = domain
        self.blob_id = blob_id
        self._final = store._blob_path(tier, domain.name if domain else None, blob_id)
        self._final.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=self._final.parent, prefix=f".{blob_id}.", suffix=".tmp")
        os.close(fd)
        self._tmp = Path(tmp)
        self._fh = recorder.RecordedFile(tmp, "r+b")
        self._key = key
        self._dev = SectorDevice(self._fh, key, 0, None) if tier == SECURE else None
        self._pending = bytearray()
        self._sector = 0
        self._hash = hashlib.sha256()
        self.length = 0
        self._fsync = fsync
        self.closed = False

    def write(self, data) -> int:
        n = len(data)
        self._hash.update(data)
        self.length += n
        if self._dev is None:
            self._fh.write(data)
            return n
        view = memoryview(data)
        if self._pending:
            take = min(_SECTOR - len(self._pending), n)
            self._pending += view[:take]
            view = view[take:]
            if len(self._pending) == _SECTOR:
                self._dev.write(self._sector, self._pending)
                self._sector += 1
                self._pending[:] = bytes(_SECTOR)
                self._pending.clear()
        whole = len(view) - len(view) % _SECTOR
        if whole:
            self._dev.write(self._sector, view[:whole])
            self._sector += whole // _SECTOR
        if whole < len(view):
            self._pending += view[whole:]
        return n

    def close(self) -> BlobRef:
        if self.closed:
            raise ValidationError("writer already closed")
        self.closed = True
        try:
            if self._dev is not None and (self._pending or self.length == 0):
                pad = bytearray(_SECTOR)
                pad[:len(self._pending)] = self._pending
                self._dev.write(self._sector, pad)
                self._pending[:] = bytes(len(self._pending))
                pad[:] = bytes(_SECTOR)
            if self._fsync:
                self._fh.fsync()
            self._fh.close()
            ref = BlobRef(self.tier, self.blob_id, Digest(self._hash.digest()), self.length,
                          self.domain.name if self.domain else None)
            os.replace(self._tmp, self._final)
            self._store._write_meta(ref, self._final)
            return ref
        except BaseException:
            self.abort()
            raise
        finally:
            if self._key is not None:
                self._key.destroy()

    def abort(self) -> None:
        self.closed = True
        if not self._fh.closed:
            self._fh.close()
        self._tmp.unlink(missing_ok=True)
        if self._key is not None:
            self._key.destroy()

    def __enter__(self) -> "BlobWriter":
        return self

    def __exit__(self, exc_type, *exc) -> None:
        if exc_type is not None:
            self.abort()


class BlobStore:
    """Local and secure tiers under one root directory.

    Args:
        root: directory holding both tiers.
        operator: key pair wrapping the domain master keys. The private half
            is needed to read or write secure-tier blobs.
        allow_unencrypted: permit secure domains without at-rest encryption
            (benchmark control only).
    """

    def __init__(self, root: str | os.PathLike, operator: KeyPair | None = None, *,
                 allow_unencrypted: bool = False) -> None:
        self.root = Path(root)
        self.operator = operator
        self.allow_unencrypted = allow_unencrypted
        self._lock = threading.Lock()
        self._masters: dict[str, DEK] = {}
        (self.root / LOCAL).mkdir(parents=True, exist_ok=True)
        (self.root / SECURE).mkdir(parents=True, exist_ok=True)

    # -- domains ----------------------------------------------------------

    def _domain_dir(self, name: str) -> Path:
        return self.root / SECURE / check_name(name, "domain")

    def create_domain(self, name: str, organisation: str, principal: Principal,
                      allowed: Iterable[str] = (), *, encrypted: bool = True) -> Domain:
        if principal.role is not Role.OPERATOR:
            raise AuthError("only operators create storage domains", principal=principal.name)
        if not encrypted and not self.allow_unencrypted:
            raise PolicyError("unencrypted domains are only available to benchmark builds")
        if encrypted and self.operator is None:
            raise ValidationError("an operator key pair is required for encrypted domains")
        check_name(organisation, "organisation")
        domain = Domain(name, organisation, frozenset(allowed), encrypted)
        d = self._domain_dir(name)
        with self._lock:
            if (d / ".domain.json").exists():
                raise ConflictError(f"domain {name} exists")
            record = {
                "name": name,
                "organisation": organisation,
                "allowed": sorted(domain.allowed),
                "encrypted": encrypted,
                "wrapped_master": None,
            }
            if encrypted:
                with DEK.generate(Purpose.IMAGE, 32) as master:
                    record["wrapped_master"] = crypto.wrap_dek(
                        master, self.operator.public_key, self.operator.key_id, _MASTER_CONTEXT).to_dict()
            recorder.write_atomic(d / ".domain.json", _json_bytes(record))
        return domain

    def domain(self, name: str) -> Domain:
        path = self._domain_dir(name) / ".domain.json"
        try:
            rec = json.loads(path.read_bytes())
        except FileNotFoundError:
            raise NotFound(f"no storage domain {name}") from None
        return Domain(rec["name"], rec["organisation"], frozenset(rec["allowed"]), rec["encrypted"])

    def domains(self) -> list[Domain]:
        return [self.domain(p.name) for p in sorted((self.root / SECURE).iterdir())
                if (p / ".domain.json").exists()]

    def _authorize(self, domain: Domain, principal: Principal) -> None:
        if not domain.admits(principal):
            raise AuthError(f"{principal.name} is not a member of domain {domain.name}",
                            principal=principal.name, domain=domain.name)

    def _master(self, domain: Domain) -> DEK:
        with self._lock:
            cached = self._masters.get(domain.name)
            if cached is not None:
                return cached
            if self.operator is None or self.operator.private_key is None:
                raise ValidationError("operator private key unavailable for secure tier")
            rec = json.loads((self._domain_dir(domain.name) / ".domain.json").read_bytes())
            wrapped = WrappedKey.from_dict(rec["wrapped_master"])
            master = crypto.unwrap_dek(wrapped, self.operator.private_key, Purpose.IMAGE, _MASTER_CONTEXT)
            self._masters[domain.name] = master
            return master

    def _key_for(self, domain: Domain | None, blob_id: str) -> DEK | None:
        if domain is None or not domain.encrypted:
            return None
        return _blob_key(self._master(domain), blob_id)

    # -- paths and metadata ------------------------------------------------

    def _blob_path(self, tier: str, domain: str | None, blob_id: str) -> Path:
        if tier == LOCAL:
            return self.root / LOCAL / blob_id
        if tier == SECURE and domain:
            return self._domain_dir(domain) / blob_id
        raise ValidationError("secure tier requires a domain" if tier == SECURE else f"unknown tier {tier!r}")

    def _write_meta(self, ref: BlobRef, path: Path) -> None:
        recorder.write_atomic(path.with_name(path.name + ".meta.json"), _json_bytes(ref.to_dict()), fsync=False)

    def _resolve(self, tier: str, domain: str | None, principal: Principal) -> Domain | None:
        if tier == LOCAL:
            if domain is not None:
                raise ValidationError("the local tier has no domains")
            return None
        if tier != SECURE:
            raise ValidationError(f"unknown tier {tier!r}")
        if not domain:
            raise ValidationError("secure tier requires a domain")
        d = self.domain(domain)
        self._authorize(d, principal)
        return d

    # -- blob operations --------------------------------------------------

    def open_writer(self, tier: str, principal: Principal, domain: str | None = None, *,
                    fsync: bool = True) -> BlobWriter:
        d = self._resolve(tier, domain, principal)
        blob_id = uuid.uuid4().hex
        return BlobWriter(self, tier, d, blob_id, self._key_for(d, blob_id), fsync)

    def put(self, tier: str, data, principal: Principal, domain: str | None = None) -> BlobRef:
        w = self.open_writer(tier, principal, domain)
        with w:
            w.write(data)
            return w.close()

    def stored_ref(self, tier: str, blob_id: str, domain: str | None = None) -> BlobRef:
        path = self._blob_path(tier, domain, _check_blob_id(blob_id))
        try:
            return BlobRef.from_dict(json.loads(path.with_name(path.name + ".meta.json").read_bytes()))
        except FileNotFoundError:
            raise NotFound(f"blob {blob_id} not found") from None

    def exists(self, ref: BlobRef) -> bool:
        return self._blob_path(ref.tier, ref.domain, ref.blob_id).exists()

    def get(self, ref: BlobRef, principal: Principal) -> bytes:
        d = self._resolve(ref.tier, ref.domain, principal)
        path = self._blob_path(ref.tier, ref.domain, _check_blob_id(ref.blob_id))
        stored = self.stored_ref(ref.tier, ref.blob_id, ref.domain)
        try:
            with open(path, "rb") as fh:
                if ref.tier == LOCAL:
                    data = fh.read()
                else:
                    sectors = max(1, -(-stored.length // _SECTOR))
                    key = self._key_for(d, ref.blob_id)
                    try:
                        data = SectorDevice(fh, key, 0, sectors).read(0, sectors)[:stored.length]
                    finally:
                        if key is not None:
                            key.destroy()
        except FileNotFoundError:
            raise NotFound(f"blob {ref.blob_id} not found") from None
        if len(data) != ref.length or crypto.digest(data) != ref.digest:
            raise CorruptionError(f"blob {ref.blob_id} failed digest verification", blob_id=ref.blob_id)
        return data

    def delete(self, ref: BlobRef, principal: Principal) -> None:
        self._resolve(ref.tier, ref.domain, principal)
        path = self._blob_path(ref.tier, ref.domain, ref.blob_id)
        path.unlink(missing_ok=True)
        path.with_name(path.name + ".meta.json").unlink(missing_ok=True)

    def migrate(self, ref: BlobRef, domain: str, principal: Principal,
                copy_hook: Callable[[bytes], bytes] | None = None) -> BlobRef:
        """Move a local blob into a secure domain.

        The local copy is removed only after the secure copy reads back with
        the original digest. ``copy_hook`` lets tests corrupt the copy path.
        """
        if ref.tier != LOCAL:
            raise ValidationError("only local blobs can be migrated")
        d = self._resolve(SECURE, domain, principal)
        data = self.get(ref, principal)
        payload = copy_hook(data) if copy_hook else data
        blob_id = uuid.uuid4().hex
        w = BlobWriter(self, SECURE, d, blob_id, self._key_for(d, blob_id), True)
        with w:
            w.write(payload)
            written = w.close()
        target = BlobRef(SECURE, blob_id, ref.digest, ref.length, domain)
        try:
            self.get(target, principal)
        except CorruptionError:
            self.delete(written, principal)
            raise MigrationError(f"secure copy of {ref.blob_id} failed verification",
                                 blob_id=ref.blob_id) from None
        self.delete(ref, principal)
        return target

    def close(self) -> None:
        with self._lock:
            for k in self._masters.values():
                k.destroy()
            self._masters.clear()
