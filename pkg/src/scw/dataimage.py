"""Sector-encrypted block images for bulk data.

An image is a fixed 4096-byte header followed by ``sector_count`` sectors,
each encrypted independently with AES-XTS using the sector index as tweak.

Header layout (big-endian integers, zero padded to 4096 bytes)::

    "SCDI" | u16 version | u8 cipher | u8 reserved (0)
    u32 sector_size | u64 sector_count
    u16 key_id_len | key_id | u8 wrap_alg_len | wrap_alg
    u16 wrapped_len | wrapped key ciphertext
    32-byte SHA-256 over all preceding header bytes

Cipher codes: 1 = AES-XTS-128, 2 = AES-XTS-256, 0 = PLAIN (benchmark
control only; no key material, sectors stored verbatim).
"""

from __future__ import annotations

import base64
import hashlib
import io
import os
import struct
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Callable, Union

from cryptography.hazmat.primitives.asymmetric import rsa

from . import crypto, recorder
from .crypto import DEK, KeyPair, Purpose, WrappedKey
from .errors import FormatError, PolicyError, RangeError, UseAfterClose, ValidationError

MAGIC = b"SCDI"
VERSION = 1
HEADER_SIZE = 4096
PLAIN = "PLAIN"
CIPHER_CODES = {PLAIN: 0, "AES-XTS-128": 1, "AES-XTS-256": 2}
_CODE_NAMES = {v: k for k, v in CIPHER_CODES.items()}
_FIXED = struct.Struct(">4sHBBIQ")
_BATCH_SECTORS = 256

Target = Union[str, os.PathLike, BinaryIO]
KeySource = Union[rsa.RSAPrivateKey, KeyPair, DEK, Callable[[WrappedKey, dict], DEK]]
UNWRAP_CONTEXT = {"purpose": Purpose.IMAGE.value}


@dataclass(frozen=True)
class ImageHeader:
    cipher: str
    sector_count: int
    wrapped_key: WrappedKey | None
    sector_size: int = crypto.SECTOR_SIZE
    version: int = VERSION

    @property
    def encrypted(self) -> bool:
        return self.cipher != PLAIN

    @property
    def file_size(self) -> int:
        return HEADER_SIZE + self.sector_size * self.sector_count

    def encode(self) -> bytes:
        if self.wrapped_key is not None:
            kid = self.wrapped_key.key_id.encode()
            alg = self.wrapped_key.wrap_algorithm.encode()
            ct = self.wrapped_key.ciphertext
        else:
            kid = alg = ct = b""
        body = (
            _FIXED.pack(MAGIC, self.version, CIPHER_CODES[self.cipher], 0,
                        self.sector_size, self.sector_count)
            + struct.pack(">H", len(kid)) + kid
            + struct.pack(">B", len(alg)) + alg
            + struct.pack(">H", len(ct)) + ct
        )
        body += hashlib.sha256(body).digest()
        if len(body) > HEADER_SIZE:
            raise ValidationError("image header does not fit in one sector")
        return body + bytes(HEADER_SIZE - len(body))

    @classmethod
    def decode(cls, raw: bytes) -> "ImageHeader":
        """Parse and verify a header. Every failure is a :class:`FormatError`."""
        if len(raw) < HEADER_SIZE:
            raise FormatError("image header truncated")
        raw = bytes(raw[:HEADER_SIZE])
        try:
            magic, version, code, reserved, sector_size, count = _FIXED.unpack_from(raw, 0)
            off = _FIXED.size
            (n,) = struct.unpack_from(">H", raw, off)
            kid = raw[off + 2:off + 2 + n]
            off += 2 + n
            (n,) = struct.unpack_from(">B", raw, off)
            alg = raw[off + 1:off + 1 + n]
            off += 1 + n
            (n,) = struct.unpack_from(">H", raw, off)
            ct = raw[off + 2:off + 2 + n]
            off += 2 + n
            stored = raw[off:off + 32]
        except struct.error:
            raise FormatError("image header malformed") from None
        if off + 32 > HEADER_SIZE or hashlib.sha256(raw[:off]).digest() != stored:
            raise FormatError("image header digest mismatch")
        if any(raw[off + 32:]):
            raise FormatError("image header padding is not zero")
        if magic != MAGIC or version != VERSION or reserved:
            raise FormatError("not a data image")
        if code not in _CODE_NAMES:
            raise FormatError(f"unknown image cipher code {code}")
        if sector_size != crypto.SECTOR_SIZE or count < 1:
            raise FormatError("unsupported sector geometry")
        cipher = _CODE_NAMES[code]
        wrapped = None
        if cipher != PLAIN:
            try:
                wrapped = WrappedKey.from_dict({
                    "key_id": kid.decode(),
                    "wrap_algorithm": alg.decode(),
                    "ciphertext": base64.b64encode(ct).decode(),
                })
            except UnicodeDecodeError:
                raise FormatError("image key id is not UTF-8") from None
        elif kid or alg or ct:
            raise FormatError("plain image must not carry key material")
        return cls(cipher, count, wrapped, sector_size, version)


class SectorDevice:
    """XTS sector transform over a region of a seekable binary file.

    Shared by :class:`ImageHandle` and the secure storage tier. ``key`` of
    ``None`` stores sectors verbatim (benchmark control).
    """

    def __init__(self, fh, key: DEK | None, data_offset: int, sector_count: int | None,
                 sector_size: int = crypto.SECTOR_SIZE) -> None:
        self._fh = fh
        self._key = key
        self.data_offset = data_offset
        self.sector_count = sector_count
        self.sector_size = sector_size

    def _check(self, first: int, count: int) -> None:
        if first < 0 or count < 0:
            raise RangeError("negative sector range")
        if self.sector_count is not None and first + count > self.sector_count:
            raise RangeError(f"sectors [{first}, {first + count}) outside [0, {self.sector_count})")

    def read(self, first: int, count: int) -> bytes:
        self._check(first, count)
        self._fh.seek(self.data_offset + first * self.sector_size)
        raw = self._fh.read(count * self.sector_size)
        if len(raw) != count * self.sector_size:
            raise FormatError("image shorter than its declared geometry")
        if self._key is None:
            return raw
        return crypto.xts_transform_sectors(self._key, first, raw, crypto.Direction.DECRYPT, self.sector_size)

    def write(self, first: int, data) -> int:
        if len(data) % self.sector_size:
            raise ValidationError("write length must be a multiple of the sector size")
        count = len(data) // self.sector_size
        self._check(first, count)
        out = data if self._key is None else crypto.xts_transform_sectors(
            self._key, first, data, crypto.Direction.ENCRYPT, self.sector_size)
        self._fh.seek(self.data_offset + first * self.sector_size)
        self._fh.write(out)
        return count


def _open_file(target: Target, mode: str):
    if hasattr(target, "read"):
        return target, False
    return recorder.RecordedFile(target, mode), True


def _resolve_key(header: ImageHeader, key: KeySource | None) -> tuple[DEK | None, bool]:
    if not header.encrypted:
        return None, False
    if key is None:
        raise ValidationError("an encrypted image needs a key to open")
    if isinstance(key, DEK):
        if len(key) != crypto.xts_key_size(header.cipher):
            raise ValidationError("key length does not match image cipher")
        return key, False
    if isinstance(key, KeyPair):
        key = key.private_key
    if isinstance(key, rsa.RSAPrivateKey):
        dek = crypto.unwrap_dek(header.wrapped_key, key, Purpose.IMAGE, crypto.wrap_context(Purpose.IMAGE))
    else:
        dek = key(header.wrapped_key, dict(UNWRAP_CONTEXT))
    if len(dek) != crypto.xts_key_size(header.cipher):
        dek.destroy()
        raise FormatError("unwrapped key length does not match image cipher")
    return dek, True


def create_image(
    target: Target,
    sector_count: int,
    cipher: str = "AES-XTS-128",
    pub: KeyPair | None = None,
    *,
    allow_plain: bool = False,
) -> ImageHeader:
    """Create an image whose sectors are encryptions of zero sectors.

    The fresh XTS key is wrapped to ``pub`` and stored only in the header.
    """
    if sector_count < 1:
        raise ValidationError("sector_count must be at least 1")
    if cipher not in CIPHER_CODES:
        raise ValidationError(f"cipher must be one of {sorted(CIPHER_CODES)}")
    if cipher == PLAIN:
        if not allow_plain:
            raise PolicyError("plain images are only available to benchmark builds")
        dek, wrapped = None, None
    else:
        if pub is None:
            raise ValidationError("a public key is required to create an encrypted image")
        dek = DEK.generate(Purpose.IMAGE, crypto.xts_key_size(cipher))
        wrapped = crypto.wrap_dek(dek, pub.public_key, pub.key_id, crypto.wrap_context(Purpose.IMAGE))
    header = ImageHeader(cipher, sector_count, wrapped)
    if not hasattr(target, "read"):
        Path(target).parent.mkdir(parents=True, exist_ok=True)
    fh, owned = _open_file(target, "w+b")
    try:
        fh.write(header.encode())
        dev = SectorDevice(fh, dek, HEADER_SIZE, sector_count)
        zeros = bytes(_BATCH_SECTORS * crypto.SECTOR_SIZE)
        for first in range(0, sector_count, _BATCH_SECTORS):
            n = min(_BATCH_SECTORS, sector_count - first)
            dev.write(first, zeros[:n * crypto.SECTOR_SIZE])
        fh.flush()
    finally:
        if dek is not None:
            dek.destroy()
        if owned:
            fh.close()
    return header


def read_header(target: Target) -> ImageHeader:
    if hasattr(target, "read"):
        target.seek(0)
        return ImageHeader.decode(target.read(HEADER_SIZE))
    with open(target, "rb") as fh:
        return ImageHeader.decode(fh.read(HEADER_SIZE))


class ImageHandle:
    """Open image with its unwrapped key held in memory until :meth:`close`.

    One writer or several sequential readers per handle; distinct handles on
    the same file are not coordinated.
    """

    def __init__(self, fh, header: ImageHeader, key: DEK | None, owns_file: bool, owns_key: bool) -> None:
        self.header = header
        self._fh = fh
        self._key = key
        self._owns_file = owns_file
        self._owns_key = owns_key
        self._dev = SectorDevice(fh, key, HEADER_SIZE, header.sector_count, header.sector_size)
        self._lock = threading.Lock()
        self.dirty: set[int] = set()
        self.closed = False

    @property
    def sector_count(self) -> int:
        return self.header.sector_count

    @property
    def sector_size(self) -> int:
        return self.header.sector_size

    def _live(self) -> None:
        if self.closed:
            raise UseAfterClose("image handle is closed")

    def read_sectors(self, first: int, count: int) -> bytes:
        self._live()
        with self._lock:
            return self._dev.read(first, count)

    def write_sectors(self, first: int, data) -> None:
        self._live()
        with self._lock:
            n = self._dev.write(first, data)
        self.dirty.update(range(first, first + n))

    def read_bytes(self, offset: int, length: int) -> bytes:
        """Read an arbitrary byte range (sector-aligned I/O underneath)."""
        if length == 0:
            return b""
        first, skip = divmod(offset, self.sector_size)
        count = -(-(skip + length) // self.sector_size)
        return self.read_sectors(first, count)[skip:skip + length]

    def write_bytes(self, offset: int, data: bytes) -> None:
        """Write an arbitrary byte range, read-modify-writing partial sectors."""
        if not data:
            return
        first, skip = divmod(offset, self.sector_size)
        count = -(-(skip + len(data)) // self.sector_size)
        if skip or len(data) % self.sector_size:
            buf = bytearray(self.read_sectors(first, count))
        else:
            buf = bytearray(len(data))
        buf[skip:skip + len(data)] = data
        self.write_sectors(first, buf)
        buf[:] = bytes(len(buf))

    def flush(self) -> None:
        self._live()
        self._fh.flush()

    def close(self) -> None:
        if self.closed:
            return
        self.closed = True
        try:
            self._fh.flush()
        finally:
            if self._key is not None and self._owns_key:
                self._key.destroy()
            self._key = None
            if self._owns_file:
                self._fh.close()

    def __enter__(self) -> "ImageHandle":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def open_image(target: Target, key: KeySource | None, *, writable: bool = True) -> ImageHandle:
    """Verify the header, unwrap the key and return a handle.

    The header digest is checked before any key operation. No sector is
    decrypted until it is read.
    """
    fh, owned = _open_file(target, "r+b" if writable else "rb")
    try:
        fh.seek(0)
        header = ImageHeader.decode(fh.read(HEADER_SIZE))
        fh.seek(0, io.SEEK_END)
        if fh.tell() != header.file_size:
            raise FormatError(f"image is {fh.tell()} bytes, header implies {header.file_size}")
        dek, owns_key = _resolve_key(header, key)
    except BaseException:
        if owned:
            fh.close()
        raise
    return ImageHandle(fh, header, dek, owned, owns_key)
