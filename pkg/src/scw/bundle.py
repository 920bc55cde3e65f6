"""Encrypted workflow bundles.

A bundle is a deterministic archive of a workflow directory, sealed in 1 MiB
AES-GCM chunks under a fresh DEK that is wrapped to the owner's public key.
The cleartext manifest travels in front of the chunks; every chunk's
associated data includes the manifest digest, so editing the manifest breaks
the payload.

File layout (big-endian integers)::

    "SCWB" | u16 version | u32 manifest_len | manifest (canonical JSON)
    repeated: u32 ct_len | 12-byte nonce | ct_len bytes of ciphertext || tag

Archive layout::

    "SCWA" | u16 version | u32 entry_count
    repeated: u16 path_len | path (UTF-8) | u8 flags (bit 0 = executable)
              | u64 size | data

Entries are sorted by the UTF-8 bytes of their POSIX relative path; there are
no timestamps, owners or permission bits beyond the executable flag.
"""

from __future__ import annotations

import hashlib
import json
import os
import stat
import struct
import uuid
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Iterable, Iterator, Union

from cryptography.hazmat.primitives.asymmetric import rsa

from . import crypto, recorder
from .crypto import DEK, Digest, KeyPair, Purpose, SealedChunk, WrappedKey
from .errors import (
    DigestMismatch,
    FormatError,
    PolicyError,
    ValidationError,
)

MAGIC = b"SCWB"
FORMAT_VERSION = 1
ARCHIVE_MAGIC = b"SCWA"
ARCHIVE_VERSION = 1
SECURITY_LEVELS = ("standard", "sev")
UNENCRYPTED_SUITE = "NONE"
DEFAULT_MAX_PAYLOAD = 64 << 20

_HEADER = struct.Struct(">4sHI")
_ARCHIVE_HEADER = struct.Struct(">4sHI")
_ENTRY_TAIL = struct.Struct(">BQ")
_READ_PIECE = 1 << 20

MANIFEST_FIELDS = frozenset({
    "bundle_id", "created_at", "entrypoint", "task_spec", "payload_digest",
    "payload_size", "chunk_size", "cipher_suite", "wrapped_dek", "key_id",
    "security_level",
})


# ---------------------------------------------------------------------------
# in-memory workflow trees

@dataclass
class FileEntry:
    data: bytearray
    executable: bool = False

    def wipe(self) -> None:
        self.data[:] = bytes(len(self.data))


Tree = dict[str, FileEntry]


def tree_from_mapping(files: dict[str, Union[bytes, tuple[bytes, bool]]]) -> Tree:
    tree: Tree = {}
    for path, value in files.items():
        data, exe = value if isinstance(value, tuple) else (value, False)
        tree[_check_path(path)] = FileEntry(bytearray(data), exe)
    return tree


@dataclass
class VerifiedWorkflow:
    """Plaintext workflow held only in memory after a successful unseal."""

    manifest: "BundleManifest"
    files: Tree

    def read(self, path: str) -> bytes:
        return bytes(self.files[path].data)

    def wipe(self) -> None:
        for entry in self.files.values():
            entry.wipe()


# ---------------------------------------------------------------------------
# archive

def _check_path(path: str) -> str:
    parts = path.split("/")
    if not path or path.startswith("/") or any(p in ("", ".", "..") for p in parts):
        raise ValidationError(f"invalid archive path {path!r}")
    return path


@dataclass(frozen=True)
class _DirEntry:
    path: str
    source: Path
    executable: bool


def scan_directory(root: Union[str, os.PathLike]) -> list[_DirEntry]:
    root = Path(root)
    if not root.is_dir():
        raise NotADirectoryError(str(root))
    found = []
    for dirpath, dirnames, filenames in os.walk(root):
        for name in dirnames + filenames:
            full = Path(dirpath) / name
            st = full.lstat()
            if stat.S_ISLNK(st.st_mode):
                raise ValidationError(f"symbolic links are not archived: {full}")
            if stat.S_ISREG(st.st_mode):
                rel = full.relative_to(root).as_posix()
                found.append(_DirEntry(rel, full, bool(st.st_mode & stat.S_IXUSR)))
    found.sort(key=lambda e: e.path.encode("utf-8"))
    return found


def _entry_header(path: str, executable: bool, size: int) -> bytes:
    raw = path.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise ValidationError("path too long")
    return struct.pack(">H", len(raw)) + raw + _ENTRY_TAIL.pack(1 if executable else 0, size)


def iter_directory_archive(entries: list[_DirEntry]) -> Iterator[bytes]:
    yield _ARCHIVE_HEADER.pack(ARCHIVE_MAGIC, ARCHIVE_VERSION, len(entries))
    for e in entries:
        with open(e.source, "rb") as fh:
            size = os.fstat(fh.fileno()).st_size
            yield _entry_header(e.path, e.executable, size)
            remaining = size
            while remaining:
                piece = fh.read(min(_READ_PIECE, remaining))
                if not piece:
                    raise ValidationError(f"{e.path} shrank while archiving")
                remaining -= len(piece)
                yield piece


def iter_tree_archive(tree: Tree) -> Iterator[bytes]:
    paths = sorted(tree, key=lambda p: p.encode("utf-8"))
    yield _ARCHIVE_HEADER.pack(ARCHIVE_MAGIC, ARCHIVE_VERSION, len(paths))
    for p in paths:
        entry = tree[p]
        yield _entry_header(p, entry.executable, len(entry.data))
        yield bytes(entry.data)


def archive_bytes(tree: Tree) -> bytes:
    return b"".join(iter_tree_archive(tree))


def parse_archive(data: Union[bytes, bytearray, memoryview]) -> Tree:
    view = memoryview(data)
    try:
        magic, version, count = _ARCHIVE_HEADER.unpack_from(view, 0)
    except struct.error:
        raise FormatError("archive header truncated") from None
    if magic != ARCHIVE_MAGIC or version != ARCHIVE_VERSION:
        raise FormatError("not an archive stream")
    off = _ARCHIVE_HEADER.size
    tree: Tree = {}
    prev = None
    try:
        for _ in range(count):
            (plen,) = struct.unpack_from(">H", view, off)
            off += 2
            raw_path = bytes(view[off:off + plen])
            off += plen
            flags, size = _ENTRY_TAIL.unpack_from(view, off)
            off += _ENTRY_TAIL.size
            if off + size > len(view) or flags & ~1:
                raise FormatError("archive entry truncated")
            path = _check_path(raw_path.decode("utf-8"))
            if prev is not None and raw_path <= prev:
                raise FormatError("archive entries out of order")
            prev = raw_path
            tree[path] = FileEntry(bytearray(view[off:off + size]), bool(flags & 1))
            off += size
    except (struct.error, UnicodeDecodeError, ValidationError) as exc:
        raise FormatError(f"malformed archive: {exc}") from None
    if off != len(view):
        raise FormatError("trailing bytes after archive")
    return tree


def write_tree(tree: Tree, root: Union[str, os.PathLike]) -> None:
    """Materialize an in-memory tree on disk (client side, after fetch)."""
    root = Path(root)
    for path, entry in tree.items():
        dest = root / path
        recorder.write_atomic(dest, bytes(entry.data), fsync=False)
        if entry.executable:
            dest.chmod(0o755)


# ---------------------------------------------------------------------------
# manifest

def canonical_json(obj: Any) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def _now_rfc3339() -> str:
    return datetime.now(timezone.utc).replace(microsecond=0).strftime("%Y-%m-%dT%H:%M:%SZ")


@dataclass(frozen=True)
class BundleManifest:
    bundle_id: str
    created_at: str
    entrypoint: str
    task_spec: dict
    payload_digest: Digest
    payload_size: int
    key_id: str
    wrapped_dek: WrappedKey | None
    security_level: str = "standard"
    cipher_suite: str = crypto.PAYLOAD_CIPHER
    chunk_size: int = crypto.CHUNK_SIZE

    @property
    def encrypted(self) -> bool:
        return self.cipher_suite != UNENCRYPTED_SUITE

    @property
    def chunk_count(self) -> int:
        return crypto.chunk_count(self.payload_size, self.chunk_size)

    def to_dict(self) -> dict:
        return {
            "bundle_id": self.bundle_id,
            "chunk_size": self.chunk_size,
            "cipher_suite": self.cipher_suite,
            "created_at": self.created_at,
            "entrypoint": self.entrypoint,
            "key_id": self.key_id,
            "payload_digest": self.payload_digest.to_dict(),
            "payload_size": self.payload_size,
            "security_level": self.security_level,
            "task_spec": self.task_spec,
            "wrapped_dek": self.wrapped_dek.to_dict() if self.wrapped_dek else None,
        }

    def canonical(self) -> bytes:
        return canonical_json(self.to_dict())

    def digest(self) -> Digest:
        return crypto.digest(self.canonical())

    @classmethod
    def from_bytes(cls, raw: bytes) -> "BundleManifest":
        """Strictly parse a canonical manifest; anything unexpected is a FormatError."""
        try:
            obj = json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"manifest is not valid JSON: {exc}") from None
        if not isinstance(obj, dict) or set(obj) != MANIFEST_FIELDS:
            raise FormatError("manifest fields do not match the schema")
        try:
            manifest = cls._from_obj(obj)
        except (TypeError, ValueError, KeyError) as exc:
            raise FormatError(f"manifest field invalid: {exc}") from None
        if manifest.canonical() != bytes(raw):
            raise FormatError("manifest is not in canonical form")
        return manifest

    @classmethod
    def _from_obj(cls, obj: dict) -> "BundleManifest":
        def need(name, typ):
            v = obj[name]
            if not isinstance(v, typ) or isinstance(v, bool) and typ is not bool:
                raise FormatError(f"manifest field {name} has wrong type")
            return v

        bundle_id = need("bundle_id", str)
        uuid.UUID(bundle_id)
        created_at = need("created_at", str)
        datetime.strptime(created_at, "%Y-%m-%dT%H:%M:%SZ")
        task_spec = need("task_spec", dict)
        if not isinstance(task_spec.get("kind"), str) or not isinstance(task_spec.get("params", {}), dict):
            raise FormatError("task_spec needs a kind and a params map")
        level = need("security_level", str)
        if level not in SECURITY_LEVELS:
            raise FormatError(f"unknown security level {level!r}")
        suite = need("cipher_suite", str)
        if suite not in (crypto.PAYLOAD_CIPHER, UNENCRYPTED_SUITE):
            raise FormatError(f"unsupported cipher suite {suite!r}")
        chunk_size = need("chunk_size", int)
        if chunk_size != crypto.CHUNK_SIZE:
            raise FormatError("unsupported chunk size")
        size = need("payload_size", int)
        if size < 0:
            raise FormatError("negative payload size")
        key_id = need("key_id", str)
        wrapped = None
        if suite == crypto.PAYLOAD_CIPHER:
            wrapped = WrappedKey.from_dict(need("wrapped_dek", dict))
            uuid.UUID(key_id)
            if wrapped.key_id != key_id:
                raise FormatError("wrapped key id does not match manifest key id")
        elif obj["wrapped_dek"] is not None or key_id:
            raise FormatError("unencrypted bundle must not carry key material")
        return cls(
            bundle_id=bundle_id,
            created_at=created_at,
            entrypoint=need("entrypoint", str),
            task_spec=task_spec,
            payload_digest=Digest.from_dict(need("payload_digest", dict)),
            payload_size=size,
            key_id=key_id,
            wrapped_dek=wrapped,
            security_level=level,
            cipher_suite=suite,
            chunk_size=chunk_size,
        )


# ---------------------------------------------------------------------------
# bundle container

@dataclass
class EncryptedBundle:
    manifest: BundleManifest
    manifest_bytes: bytes
    chunks: list[SealedChunk] = field(default_factory=list)
    version: int = FORMAT_VERSION

    @property
    def manifest_digest(self) -> Digest:
        return crypto.digest(self.manifest_bytes)

    def header_bytes(self) -> bytes:
        return _HEADER.pack(MAGIC, self.version, len(self.manifest_bytes)) + self.manifest_bytes

    def to_bytes(self) -> bytes:
        parts = [self.header_bytes()]
        for c in self.chunks:
            parts.append(_encode_chunk(c))
        return b"".join(parts)

    def write(self, path: Union[str, os.PathLike]) -> None:
        recorder.write_atomic(path, self.to_bytes())

    def regions(self) -> dict[str, list[tuple[int, int]]]:
        """Byte ranges of the header, manifest, wrapped key and chunks in ``to_bytes()``."""
        out: dict[str, list[tuple[int, int]]] = {"header": [(0, _HEADER.size)]}
        m0 = _HEADER.size
        out["manifest"] = [(m0, m0 + len(self.manifest_bytes))]
        if self.manifest.wrapped_dek is not None:
            b64 = self.manifest.wrapped_dek.to_dict()["ciphertext"].encode()
            at = self.manifest_bytes.find(b64)
            out["wrapped_key"] = [(m0 + at, m0 + at + len(b64))]
        off = m0 + len(self.manifest_bytes)
        out["chunks"] = []
        for c in self.chunks:
            n = 4 + len(c.nonce) + len(c.ciphertext)
            out["chunks"].append((off, off + n))
            off += n
        return out


def _encode_chunk(c: SealedChunk) -> bytes:
    return struct.pack(">I", len(c.ciphertext)) + c.nonce + c.ciphertext


def _parse_header(view: memoryview) -> tuple[int, BundleManifest, bytes, int]:
    if len(view) < _HEADER.size:
        raise FormatError("bundle truncated before header end")
    magic, version, mlen = _HEADER.unpack_from(view, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {bytes(magic)!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported bundle version {version}")
    end = _HEADER.size + mlen
    if end > len(view):
        raise FormatError("bundle truncated inside manifest")
    raw = bytes(view[_HEADER.size:end])
    return version, BundleManifest.from_bytes(raw), raw, end


def parse_bundle(data: Union[bytes, bytearray, memoryview]) -> EncryptedBundle:
    view = memoryview(data)
    version, manifest, raw, off = _parse_header(view)
    chunks = []
    while off < len(view):
        if off + 4 + crypto.NONCE_SIZE > len(view):
            raise FormatError("bundle truncated inside chunk header")
        (clen,) = struct.unpack_from(">I", view, off)
        off += 4
        nonce = bytes(view[off:off + crypto.NONCE_SIZE])
        off += crypto.NONCE_SIZE
        if off + clen > len(view):
            raise FormatError("bundle truncated inside chunk")
        chunks.append(SealedChunk(nonce, bytes(view[off:off + clen])))
        off += clen
    return EncryptedBundle(manifest, raw, chunks, version)


def read_bundle(source: Union[str, os.PathLike, bytes, bytearray, memoryview]) -> EncryptedBundle:
    if isinstance(source, (bytes, bytearray, memoryview)):
        return parse_bundle(source)
    return parse_bundle(Path(source).read_bytes())


def inspect(source: Union[str, os.PathLike, bytes, bytearray, memoryview]) -> BundleManifest:
    """Read and validate only the cleartext header; no key is needed."""
    if isinstance(source, (bytes, bytearray, memoryview)):
        return _parse_header(memoryview(source))[1]
    with open(source, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) == _HEADER.size:
            mlen = _HEADER.unpack(head)[2]
            head += fh.read(mlen)
    return _parse_header(memoryview(head))[1]


# ---------------------------------------------------------------------------
# packaging

def _new_manifest(task_spec, pub: KeyPair | None, level, size, payload_digest, entrypoint, dek):
    if level not in SECURITY_LEVELS:
        raise ValidationError(f"security level must be one of {SECURITY_LEVELS}")
    if not isinstance(task_spec, dict) or "kind" not in task_spec:
        raise ValidationError("task_spec must be a mapping with a kind")
    spec = {"kind": task_spec["kind"], "params": dict(task_spec.get("params", {}))}
    return BundleManifest(
        bundle_id=str(uuid.uuid4()),
        created_at=_now_rfc3339(),
        entrypoint=entrypoint or spec["kind"],
        task_spec=spec,
        payload_digest=payload_digest,
        payload_size=size,
        key_id=pub.key_id if pub else "",
        wrapped_dek=crypto.wrap_dek(dek, pub.public_key, pub.key_id,
                                    crypto.wrap_context(Purpose.BUNDLE, level)) if pub else None,
        security_level=level,
        cipher_suite=crypto.PAYLOAD_CIPHER if pub else UNENCRYPTED_SUITE,
    )


def _digest_stream(pieces: Iterable[bytes]) -> tuple[Digest, int]:
    h = hashlib.sha256()
    n = 0
    for p in pieces:
        h.update(p)
        n += len(p)
    return Digest(h.digest()), n


def _seal_stream(make_stream: Callable[[], Iterator[bytes]], task_spec, pub, level, entrypoint,
                 encrypt: bool, max_payload: int | None) -> EncryptedBundle:
    payload_digest, size = _digest_stream(make_stream())
    if max_payload is not None and size > max_payload:
        raise ValidationError(
            f"payload of {size} bytes exceeds the {max_payload}-byte bundle limit; "
            "put bulk data in a data image"
        )
    dek = DEK.generate(Purpose.BUNDLE) if encrypt else None
    try:
        manifest = _new_manifest(task_spec, pub if encrypt else None, level, size,
                                 payload_digest, entrypoint, dek)
        raw = manifest.canonical()
        md = crypto.digest(raw)
        check = hashlib.sha256()

        def counted():
            for piece in make_stream():
                check.update(piece)
                yield piece

        if encrypt:
            chunks = list(crypto.seal_payload(counted(), dek, md))
        else:
            chunks = [SealedChunk(bytes(crypto.NONCE_SIZE), c)
                      for c in crypto.iter_chunks(counted())]
        if check.digest() != payload_digest.value:
            raise ValidationError("input changed while packaging")
        return EncryptedBundle(manifest, raw, chunks)
    finally:
        if dek is not None:
            dek.destroy()


def package(
    workflow_dir: Union[str, os.PathLike],
    task_spec: dict,
    pub: KeyPair | None,
    security_level: str = "standard",
    *,
    entrypoint: str | None = None,
    encrypt: bool = True,
    allow_unencrypted: bool = False,
    max_payload: int | None = DEFAULT_MAX_PAYLOAD,
) -> EncryptedBundle:
    """Archive ``workflow_dir`` and seal it for the owner of ``pub``.

    The archive is streamed twice (digest, then seal); nothing plaintext is
    written to disk. ``encrypt=False`` produces the benchmark control bundle
    and is refused unless ``allow_unencrypted`` is set.
    """
    if not encrypt and not allow_unencrypted:
        raise PolicyError("unencrypted bundles are only available to benchmark builds")
    if encrypt and (pub is None or pub.public_key is None):
        raise ValidationError("a public key is required to package")
    entries = scan_directory(workflow_dir)
    return _seal_stream(lambda: iter_directory_archive(entries), task_spec, pub,
                        security_level, entrypoint, encrypt, max_payload)


def seal_tree(
    tree: Tree,
    task_spec: dict,
    pub: KeyPair | None,
    security_level: str = "standard",
    *,
    entrypoint: str | None = None,
    encrypt: bool = True,
    allow_unencrypted: bool = False,
) -> EncryptedBundle:
    """Seal an in-memory tree (used for job results)."""
    if not encrypt and not allow_unencrypted:
        raise PolicyError("unencrypted bundles are only available to benchmark builds")
    return _seal_stream(lambda: iter_tree_archive(tree), task_spec, pub,
                        security_level, entrypoint, encrypt, None)


# ---------------------------------------------------------------------------
# unsealing

Unwrapper = Union[rsa.RSAPrivateKey, KeyPair, DEK, Callable[[WrappedKey, dict], DEK]]


def unwrap_context(manifest: BundleManifest) -> dict:
    """Context a key holder needs to unwrap this bundle's DEK."""
    return {"purpose": Purpose.BUNDLE.value, "security_level": manifest.security_level}


def _obtain_dek(manifest: BundleManifest, key: Unwrapper) -> tuple[DEK, bool]:
    if isinstance(key, DEK):
        return key, False
    if isinstance(key, KeyPair):
        key = key.private_key
    if isinstance(key, rsa.RSAPrivateKey):
        label = crypto.wrap_context(Purpose.BUNDLE, manifest.security_level)
        return crypto.unwrap_dek(manifest.wrapped_dek, key, Purpose.BUNDLE, label), True
    return key(manifest.wrapped_dek, unwrap_context(manifest)), True


def unseal(
    bundle: Union[EncryptedBundle, bytes, str, os.PathLike],
    key: Unwrapper | None,
    *,
    allow_unencrypted: bool = False,
) -> VerifiedWorkflow:
    """Decrypt a bundle into memory and verify its payload digest.

    ``key`` may be an RSA private key, a :class:`KeyPair`, an already
    unwrapped :class:`DEK`, or a callable ``(wrapped, context) -> DEK``
    (e.g. a key-service lease request).
    """
    if not isinstance(bundle, EncryptedBundle):
        bundle = read_bundle(bundle)
    manifest = bundle.manifest
    buf = bytearray()
    try:
        if manifest.encrypted:
            if key is None:
                raise ValidationError("a key is required to unseal an encrypted bundle")
            dek, owned = _obtain_dek(manifest, key)
            try:
                for piece in crypto.open_payload(bundle.chunks, dek, bundle.manifest_digest):
                    buf += piece
            finally:
                if owned:
                    dek.destroy()
        else:
            if not allow_unencrypted:
                raise PolicyError("unencrypted bundles are only accepted by benchmark builds")
            for c in bundle.chunks:
                buf += c.ciphertext
        if len(bundle.chunks) != manifest.chunk_count or len(buf) != manifest.payload_size:
            raise FormatError(
                f"bundle has {len(bundle.chunks)} chunks, manifest implies {manifest.chunk_count}"
            )
        if hashlib.sha256(buf).digest() != manifest.payload_digest.value:
            raise DigestMismatch("payload digest does not match manifest")
        return VerifiedWorkflow(manifest, parse_archive(buf))
    finally:
        buf[:] = bytes(len(buf))
