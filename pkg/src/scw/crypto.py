"""Cryptographic core: key wrapping, chunked AEAD payloads, XTS sectors, digests.

Everything here composes standard primitives from ``cryptography``:

* RSA-3072 with OAEP(SHA-256) wraps data encryption keys (DEKs).
* AES-256-GCM seals payloads in 1 MiB chunks. Each chunk's associated data is
  the manifest digest followed by the 8-byte big-endian chunk index, so chunks
  cannot be reordered or moved to another manifest.
* AES-XTS encrypts fixed 4096-byte sectors, with the sector index encoded as a
  128-bit little-endian tweak (IEEE 1619 data unit sequence number).
"""

from __future__ import annotations

import base64
import binascii
import hashlib
import hmac
import os
import uuid
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Iterator, Union

import numpy as np
from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import padding, rsa
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from .errors import FormatError, IntegrityError, ValidationError, UseAfterClose

RSA_BITS = 3072
RSA_PUBLIC_EXPONENT = 65537
WRAP_ALGORITHM = "OAEP-SHA256"
WRAPPED_KEY_SIZE = RSA_BITS // 8
DIGEST_ALGORITHM = "SHA-256"
PAYLOAD_CIPHER = "AES-256-GCM"
CHUNK_SIZE = 1 << 20
NONCE_SIZE = 12
TAG_SIZE = 16
SECTOR_SIZE = 4096
XTS_KEY_SIZES = {"AES-XTS-128": 32, "AES-XTS-256": 64}



def _oaep(context: bytes) -> padding.OAEP:
    # the OAEP label binds a wrapped key to its purpose (and bundle security level)
    return padding.OAEP(
        mgf=padding.MGF1(algorithm=hashes.SHA256()),
        algorithm=hashes.SHA256(),
        label=context or None,
    )


# OAEP capacity: modulus bytes - 2 * hash length - 2
_OAEP_MAX = WRAPPED_KEY_SIZE - 2 * 32 - 2

Buffer = Union[bytes, bytearray, memoryview]


class Purpose(str, Enum):
    BUNDLE = "bundle"
    IMAGE = "image"


class Direction(str, Enum):
    ENCRYPT = "encrypt"
    DECRYPT = "decrypt"


# --------------------------------------------------------------------------
# digests

@dataclass(frozen=True)
class Digest:
    value: bytes
    algorithm: str = DIGEST_ALGORITHM

    @property
    def hex(self) -> str:
        return self.value.hex()

    def to_dict(self) -> dict:
        return {"algorithm": self.algorithm, "value": self.value.hex()}

    @classmethod
    def from_dict(cls, obj) -> "Digest":
        try:
            if obj["algorithm"] != DIGEST_ALGORITHM or set(obj) != {"algorithm", "value"}:
                raise FormatError("unsupported digest")
            value = bytes.fromhex(obj["value"])
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"malformed digest: {exc}") from None
        if len(value) != 32:
            raise FormatError("digest must be 32 bytes")
        return cls(value)

    @classmethod
    def from_hex(cls, text: str) -> "Digest":
        return cls(bytes.fromhex(text))


def digest(data: Buffer) -> Digest:
    return Digest(hashlib.sha256(data).digest())


# --------------------------------------------------------------------------
# data encryption keys

class DEK:
    """Symmetric key held in a mutable buffer so it can be wiped.

    Bundle keys are 32 bytes. Image keys are 32 bytes (``AES-XTS-128``, two
    128-bit halves) or 64 bytes (``AES-XTS-256``).
    """

    __slots__ = ("_buf", "purpose", "_destroyed")

    def __init__(self, material: Buffer, purpose: Purpose | str = Purpose.BUNDLE) -> None:
        purpose = Purpose(purpose)
        allowed = (32,) if purpose is Purpose.BUNDLE else (32, 64)
        if len(material) not in allowed:
            raise ValidationError(f"{purpose.value} key must be {' or '.join(map(str, allowed))} bytes")
        self._buf = bytearray(material)
        self.purpose = purpose
        self._destroyed = False

    @classmethod
    def generate(cls, purpose: Purpose | str = Purpose.BUNDLE, size: int = 32) -> "DEK":
        purpose = Purpose(purpose)
        while True:
            material = os.urandom(size)
            # OpenSSL refuses XTS keys whose two halves are equal
            if purpose is Purpose.BUNDLE or material[: size // 2] != material[size // 2:]:
                return cls(material, purpose)

    @property
    def material(self) -> bytearray:
        if self._destroyed:
            raise UseAfterClose("key has been destroyed")
        return self._buf

    @property
    def cipher_name(self) -> str:
        return "AES-XTS-128" if len(self._buf) == 32 else "AES-XTS-256"

    def equals(self, other: "DEK | Buffer") -> bool:
        other_bytes = other.material if isinstance(other, DEK) else other
        return hmac.compare_digest(bytes(self.material), bytes(other_bytes))

    def destroy(self) -> None:
        for i in range(len(self._buf)):
            self._buf[i] = 0
        self._destroyed = True

    @property
    def destroyed(self) -> bool:
        return self._destroyed

    def __len__(self) -> int:
        return len(self._buf)

    def __repr__(self) -> str:
        state = "destroyed" if self._destroyed else f"{len(self._buf)} bytes"
        return f"DEK(purpose={self.purpose.value}, {state})"

    def __enter__(self) -> "DEK":
        return self

    def __exit__(self, *exc) -> None:
        self.destroy()


def _key_material(key: "DEK | Buffer") -> Buffer:
    return key.material if isinstance(key, DEK) else key


# --------------------------------------------------------------------------
# asymmetric key pairs and wrapping

@dataclass
class KeyPair:
    key_id: str
    public_key: rsa.RSAPublicKey
    private_key: rsa.RSAPrivateKey | None = None

    def public_pem(self) -> bytes:
        return serialize_public_key(self.public_key)

    def public_only(self) -> "KeyPair":
        return KeyPair(self.key_id, self.public_key, None)


def generate_keypair(key_id: str | None = None) -> KeyPair:
    private = rsa.generate_private_key(public_exponent=RSA_PUBLIC_EXPONENT, key_size=RSA_BITS)
    return KeyPair(key_id or str(uuid.uuid4()), private.public_key(), private)


def serialize_public_key(public_key: rsa.RSAPublicKey) -> bytes:
    return public_key.public_bytes(
        serialization.Encoding.PEM, serialization.PublicFormat.SubjectPublicKeyInfo
    )


def load_public_key(pem: bytes) -> rsa.RSAPublicKey:
    try:
        key = serialization.load_pem_public_key(pem)
    except ValueError as exc:
        raise FormatError(f"unreadable public key: {exc}") from None
    if not isinstance(key, rsa.RSAPublicKey):
        raise FormatError("public key is not RSA")
    return key


def serialize_private_key(private_key: rsa.RSAPrivateKey) -> bytes:
    return private_key.private_bytes(
        serialization.Encoding.DER,
        serialization.PrivateFormat.PKCS8,
        serialization.NoEncryption(),
    )


def load_private_key(der: bytes) -> rsa.RSAPrivateKey:
    key = serialization.load_der_private_key(der, password=None)
    if not isinstance(key, rsa.RSAPrivateKey):
        raise FormatError("private key is not RSA")
    return key


@dataclass(frozen=True)
class WrappedKey:
    key_id: str
    ciphertext: bytes
    wrap_algorithm: str = WRAP_ALGORITHM

    def to_dict(self) -> dict:
        return {
            "ciphertext": base64.b64encode(self.ciphertext).decode("ascii"),
            "key_id": self.key_id,
            "wrap_algorithm": self.wrap_algorithm,
        }

    @classmethod
    def from_dict(cls, obj) -> "WrappedKey":
        try:
            if set(obj) != {"ciphertext", "key_id", "wrap_algorithm"}:
                raise FormatError("unexpected wrapped key fields")
            if obj["wrap_algorithm"] != WRAP_ALGORITHM:
                raise FormatError(f"unsupported wrap algorithm {obj['wrap_algorithm']!r}")
            ct = base64.b64decode(obj["ciphertext"], validate=True)
            key_id = obj["key_id"]
            if not isinstance(key_id, str):
                raise FormatError("key_id must be a string")
        except (KeyError, TypeError, binascii.Error) as exc:
            raise FormatError(f"malformed wrapped key: {exc}") from None
        if len(ct) != WRAPPED_KEY_SIZE:
            raise FormatError("wrapped key has wrong length")
        return cls(key_id, ct)


def wrap_context(purpose: Purpose | str, security_level: str | None = None) -> bytes:
    """OAEP label for a wrapped key: ``scw/<purpose>[/<security level>]``."""
    name = purpose.value if isinstance(purpose, Purpose) else str(purpose)
    return (f"scw/{name}" + (f"/{security_level}" if security_level else "")).encode()


def wrap_dek(
    dek: "DEK | Buffer",
    public_key: rsa.RSAPublicKey,
    key_id: str,
    context: bytes = b"",
) -> WrappedKey:
    material = bytes(_key_material(dek))
    if isinstance(dek, DEK):
        if len(material) not in (32, 64):
            raise ValidationError("DEK must be 32 or 64 bytes")
    elif len(material) > _OAEP_MAX:
        raise ValidationError(f"secret of {len(material)} bytes exceeds OAEP capacity {_OAEP_MAX}")
    return WrappedKey(key_id, public_key.encrypt(material, _oaep(context)))


def unwrap_dek(
    wrapped: WrappedKey,
    private_key: rsa.RSAPrivateKey,
    purpose: Purpose | str = Purpose.BUNDLE,
    context: bytes = b"",
) -> DEK:
    try:
        raw = bytearray(private_key.decrypt(wrapped.ciphertext, _oaep(context)))
    except ValueError:
        raise IntegrityError("wrapped key failed to decrypt", key_id=wrapped.key_id) from None
    try:
        return DEK(raw, purpose)
    except ValidationError:
        raise IntegrityError("unwrapped key has unexpected length") from None
    finally:
        for i in range(len(raw)):
            raw[i] = 0


# --------------------------------------------------------------------------
# chunked authenticated payloads

@dataclass(frozen=True)
class SealedChunk:
    nonce: bytes
    ciphertext: bytes  # includes the 16-byte tag

    @property
    def plaintext_size(self) -> int:
        return len(self.ciphertext) - TAG_SIZE


def chunk_aad(manifest_digest: "Digest | bytes", index: int) -> bytes:
    value = manifest_digest.value if isinstance(manifest_digest, Digest) else manifest_digest
    return bytes(value) + index.to_bytes(8, "big")


def iter_chunks(source, chunk_size: int = CHUNK_SIZE) -> Iterator[bytes]:
    """Re-chunk ``source`` into ``chunk_size`` pieces; always yields at least once.

    ``source`` may be a bytes-like object, a readable binary stream, or an
    iterable of bytes-like pieces.
    """
    if isinstance(source, (bytes, bytearray, memoryview)):
        view = memoryview(source)
        if len(view) == 0:
            yield b""
            return
        for off in range(0, len(view), chunk_size):
            yield bytes(view[off:off + chunk_size])
        return
    if hasattr(source, "read"):
        pieces: Iterable[bytes] = iter(lambda: source.read(chunk_size), b"")
    else:
        pieces = source
    buf = bytearray()
    emitted = False
    for piece in pieces:
        buf += piece
        while len(buf) >= chunk_size:
            yield bytes(buf[:chunk_size])
            del buf[:chunk_size]
            emitted = True
    if buf or not emitted:
        yield bytes(buf)


def chunk_count(payload_size: int, chunk_size: int = CHUNK_SIZE) -> int:
    return max(1, -(-payload_size // chunk_size))


def seal_payload(
    source,
    dek: DEK,
    manifest_digest: "Digest | bytes",
    chunk_size: int = CHUNK_SIZE,
) -> Iterator[SealedChunk]:
    """Encrypt ``source`` chunk by chunk under ``dek``; yields sealed chunks lazily."""
    if dek.purpose is not Purpose.BUNDLE:
        raise ValidationError("payload sealing needs a bundle-purpose key")
    aead = AESGCM(dek.material)
    seen: set[bytes] = set()
    for index, chunk in enumerate(iter_chunks(source, chunk_size)):
        nonce = os.urandom(NONCE_SIZE)
        while nonce in seen:
            nonce = os.urandom(NONCE_SIZE)
        seen.add(nonce)
        yield SealedChunk(nonce, aead.encrypt(nonce, chunk, chunk_aad(manifest_digest, index)))


def open_payload(
    chunks: Iterable[SealedChunk],
    dek: DEK,
    manifest_digest: "Digest | bytes",
) -> Iterator[bytes]:
    """Decrypt sealed chunks in order. Raises :class:`IntegrityError` with the chunk index."""
    aead = AESGCM(dek.material)
    for index, chunk in enumerate(chunks):
        try:
            yield aead.decrypt(chunk.nonce, chunk.ciphertext, chunk_aad(manifest_digest, index))
        except InvalidTag:
            raise IntegrityError(f"authentication failed at chunk {index}", chunk=index) from None


# --------------------------------------------------------------------------
# AES-XTS

def xts_key_size(cipher: str) -> int:
    try:
        return XTS_KEY_SIZES[cipher]
    except KeyError:
        raise ValidationError(f"unknown XTS cipher {cipher!r}") from None


def _xts_algorithm(key: "DEK | Buffer") -> algorithms.AES:
    material = _key_material(key)
    if len(material) not in (32, 64):
        raise ValidationError("XTS key must be 32 or 64 bytes")
    return algorithms.AES(material)


def _tweak(index: int) -> bytes:
    if index < 0 or index >= 1 << 64:
        raise ValidationError("sector index must fit in 64 bits")
    return index.to_bytes(16, "little")


def _xts_unit(alg: algorithms.AES, index: int, data: Buffer, direction: Direction) -> bytes:
    cipher = Cipher(alg, modes.XTS(_tweak(index)))
    try:
        ctx = cipher.encryptor() if direction is Direction.ENCRYPT else cipher.decryptor()
    except ValueError as exc:
        raise ValidationError(str(exc)) from None
    return ctx.update(data) + ctx.finalize()


def xts_encrypt_unit(key: "DEK | Buffer", unit_index: int, data: Buffer) -> bytes:
    """Encrypt one XTS data unit of any length >= 16 bytes."""
    if len(data) < 16:
        raise ValidationError("XTS data unit must be at least 16 bytes")
    return _xts_unit(_xts_algorithm(key), unit_index, data, Direction.ENCRYPT)


def xts_decrypt_unit(key: "DEK | Buffer", unit_index: int, data: Buffer) -> bytes:
    if len(data) < 16:
        raise ValidationError("XTS data unit must be at least 16 bytes")
    return _xts_unit(_xts_algorithm(key), unit_index, data, Direction.DECRYPT)


def xts_transform(
    key: "DEK | Buffer",
    sector_index: int,
    sector: Buffer,
    direction: Direction | str,
    sector_size: int = SECTOR_SIZE,
) -> bytes:
    if len(sector) != sector_size:
        raise ValidationError(f"sector must be exactly {sector_size} bytes, got {len(sector)}")
    return _xts_unit(_xts_algorithm(key), sector_index, sector, Direction(direction))


_U64 = np.uint64
_XTS_BATCH = 256  # sectors per tweak-generation pass
_XTS_SUB_BYTES = 64 * 1024  # bytes per AES call


def _mul_alpha_pow(lo: np.ndarray, hi: np.ndarray, m: int) -> tuple[np.ndarray, np.ndarray]:
    """Multiply 128-bit tweaks by alpha**m (m < 64 or m == 64) in GF(2^128)."""
    if m < 64:
        ov = hi >> _U64(64 - m)
        nhi = (hi << _U64(m)) | (lo >> _U64(64 - m))
        nlo = (lo << _U64(m)) ^ ov ^ (ov << _U64(1)) ^ (ov << _U64(2)) ^ (ov << _U64(7))
        return nlo, nhi
    nlo = hi ^ (hi << _U64(1)) ^ (hi << _U64(2)) ^ (hi << _U64(7))
    nhi = lo ^ (hi >> _U64(63)) ^ (hi >> _U64(62)) ^ (hi >> _U64(57))
    return nlo, nhi


def _xts_tweaks(k2_enc, first_index: int, count: int, blocks: int) -> np.ndarray:
    """Per-block tweaks for ``count`` sectors, flattened to uint64 pairs."""
    idx = b"".join(i.to_bytes(16, "little") for i in range(first_index, first_index + count))
    t0 = np.frombuffer(k2_enc.update(idx), dtype="<u8").reshape(count, 2)
    lo, hi = t0[:, 0:1].copy(), t0[:, 1:2].copy()
    m = 1
    while m < blocks:
        # extend the run T_0..T_{m-1} with T_m..T_{2m-1} = T_j * alpha^m
        step = min(m, 64)
        nlo, nhi = lo, hi
        for _ in range(m // step):
            nlo, nhi = _mul_alpha_pow(nlo, nhi, step)
        lo = np.concatenate([lo, nlo], axis=1)
        hi = np.concatenate([hi, nhi], axis=1)
        m *= 2
    out = np.empty((count, m, 2), dtype="<u8")
    out[..., 0] = lo
    out[..., 1] = hi
    return out[:, :blocks].reshape(-1)


def xts_transform_sectors(
    key: "DEK | Buffer",
    first_index: int,
    data: Buffer,
    direction: Direction | str,
    sector_size: int = SECTOR_SIZE,
) -> bytes:
    """Transform a run of consecutive sectors starting at ``first_index``.

    Whole sectors are processed in one pass: tweaks for every block are
    derived up front and the data goes through a single AES-ECB call, which
    is equivalent to per-sector XTS for sector sizes that are a multiple of
    the AES block size.
    """
    if len(data) % sector_size:
        raise ValidationError("data length must be a multiple of the sector size")
    direction = Direction(direction)
    material = bytes(_key_material(key))
    if len(material) not in (32, 64):
        raise ValidationError("XTS key must be 32 or 64 bytes")
    half = len(material) // 2
    k1, k2 = material[:half], material[half:]
    if hmac.compare_digest(k1, k2):
        raise ValidationError("XTS key halves must differ")
    count = len(data) // sector_size
    if count == 0:
        return b""
    if sector_size % 16:
        alg = algorithms.AES(material)
        view = memoryview(data)
        return b"".join(_xts_unit(alg, first_index + n, view[n * sector_size:(n + 1) * sector_size], direction)
                        for n in range(count))
    if first_index < 0 or first_index + count > 1 << 64:
        raise ValidationError("sector index must fit in 64 bits")
    blocks = sector_size // 16
    k2_enc = Cipher(algorithms.AES(k2), modes.ECB()).encryptor()
    ecb = Cipher(algorithms.AES(k1), modes.ECB())
    ctx = ecb.encryptor() if direction is Direction.ENCRYPT else ecb.decryptor()
    src = np.frombuffer(data, dtype="<u8")
    # update_into wants one spare block of output room
    out = np.empty(len(src) + 2, dtype="<u8")
    words = blocks * 2
    sub = max(1, _XTS_SUB_BYTES // sector_size)
    mixed = np.empty(sub * words, dtype="<u8")
    for n in range(0, count, _XTS_BATCH):
        m = min(_XTS_BATCH, count - n)
        tweaks = _xts_tweaks(k2_enc, first_index + n, m, blocks)
        # AES in cache-sized slices; one big update runs several times slower
        for s in range(0, m, sub):
            k = min(sub, m - s)
            lo, hi = (n + s) * words, (n + s + k) * words
            tw = tweaks[s * words:(s + k) * words]
            mx = mixed[:k * words]
            np.bitwise_xor(src[lo:hi], tw, out=mx)
            ctx.update_into(memoryview(mx).cast("B"), memoryview(out[lo:hi + 2]).cast("B"))
            out[lo:hi] ^= tw
    return out[:-2].tobytes()
