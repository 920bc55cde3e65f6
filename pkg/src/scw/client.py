"""User-side client: key generation, packaging, submission and result retrieval.

Users never hold private keys. Key pairs live sealed inside the key service;
results and images are opened through the owner-only unwrap operation over
the authenticated channel, so decrypted outputs exist only in the client's
memory.
"""

from __future__ import annotations

import io
import os
import time
from pathlib import Path
from typing import Any, Iterable, Union

from . import bundle as bundle_mod
from . import dataimage
from .bundle import EncryptedBundle
from .crypto import KeyPair
from .errors import FormatError, TimeoutError_, ValidationError, WrongState
from .scheduler import TERMINAL
from .storage import BlobRef

BundleSource = Union[EncryptedBundle, bytes, str, os.PathLike]


def unseal_results(blobs: Iterable[bytes], key: Any, *, allow_unencrypted: bool = False) -> dict[str, bytes]:
    """Open sealed per-node result bundles and merge their files.

    Args:
        blobs: Sealed result bundles, one per node.
        key: Anything :func:`bundle.unseal` accepts (private key, key pair or
            unwrap callable).
    """
    merged: dict[str, bytes] = {}
    for raw in blobs:
        wf = bundle_mod.unseal(raw, key, allow_unencrypted=allow_unencrypted)
        try:
            for name, entry in wf.files.items():
                if name in merged:
                    raise FormatError(f"result file {name} returned twice")
                merged[name] = bytes(entry.data)
        finally:
            wf.wipe()
    return dict(sorted(merged.items()))


class ScwClient:
    """Client bound to one user identity.

    Args:
        keys: Key-service client (remote or local) for this user.
        scheduler: Scheduler client for this user.
        allow_unencrypted: Accept unencrypted control-path results (bench).
    """

    def __init__(self, keys: Any, scheduler: Any, *, allow_unencrypted: bool = False) -> None:
        self.keys = keys
        self.scheduler = scheduler
        self.allow_unencrypted = allow_unencrypted

    # -- keys ------------------------------------------------------------------

    def keygen(self) -> KeyPair:
        """Create a key pair in the key service; only the public half is returned."""
        key_id, _ = self.keys.issue_keypair()
        return self.keys.get_pubkey(key_id)

    def public_key(self, key_id: str) -> KeyPair:
        return self.keys.get_pubkey(key_id)

    def _owner_unwrap(self, wrapped, context):
        return self.keys.owner_unwrap(wrapped, context)

    # -- artifacts -------------------------------------------------------------

    def package(self, workflow_dir: str | os.PathLike, task_spec: dict, key_id: str,
                security_level: str = "standard", **kw: Any) -> EncryptedBundle:
        return bundle_mod.package(workflow_dir, task_spec, self.public_key(key_id), security_level, **kw)

    def create_image(self, target: Any, sector_count: int, key_id: str, cipher: str = "AES-XTS-128"):
        return dataimage.create_image(target, sector_count, cipher, self.public_key(key_id))

    def open_image(self, target: Any, *, writable: bool = True) -> dataimage.ImageHandle:
        """Open one of this user's images; the key is unwrapped by the key service."""
        return dataimage.open_image(target, self._owner_unwrap, writable=writable)

    def upload_image(self, source: Union[bytes, str, os.PathLike]) -> BlobRef:
        data = source if isinstance(source, (bytes, bytearray)) else Path(source).read_bytes()
        return self.scheduler.upload(bytes(data), "image")

    def upload_bundle(self, source: BundleSource) -> BlobRef:
        return self.scheduler.upload(_bundle_bytes(source), "bundle")

    # -- jobs ------------------------------------------------------------------

    def submit(self, bundle: BundleSource | BlobRef, images: Iterable[BlobRef] = (), *,
               node_count: int = 1, procs_per_node: int = 1, run_timeout: float | None = None) -> str:
        kw: dict[str, Any] = {"image_refs": list(images), "node_count": node_count,
                              "procs_per_node": procs_per_node, "run_timeout": run_timeout}
        if isinstance(bundle, BlobRef):
            return self.scheduler.submit(bundle_ref=bundle, **kw)
        return self.scheduler.submit(bundle=_bundle_bytes(bundle), **kw)

    def status(self, job_id: str) -> dict:
        return self.scheduler.status(job_id)

    def jobs(self) -> list[dict]:
        return self.scheduler.list_jobs()

    def wait(self, job_id: str, timeout: float = 300.0, poll: float = 0.05) -> dict:
        """Poll until the job is COMPLETED or FAILED."""
        deadline = time.monotonic() + timeout
        while True:
            view = self.status(job_id)
            if view["state"] in {s.value for s in TERMINAL}:
                return view
            if time.monotonic() > deadline:
                raise TimeoutError_(f"job {job_id} still {view['state']} after {timeout:g} s")
            time.sleep(poll)

    def fetch_sealed(self, job_id: str) -> list[bytes]:
        view = self.status(job_id)
        if view["state"] != "COMPLETED":
            raise WrongState(f"job {job_id} is {view['state']}, results exist only once COMPLETED")
        return [self.scheduler.fetch(job_id, i) for i in range(len(view["result_refs"]))]

    def fetch(self, job_id: str) -> dict[str, bytes]:
        """Download and decrypt a completed job's outputs (``rank-NNNNN.out``)."""
        return unseal_results(self.fetch_sealed(job_id), self._owner_unwrap,
                              allow_unencrypted=self.allow_unencrypted)

    def close(self) -> None:
        self.keys.close()
        self.scheduler.close()


def _bundle_bytes(source: BundleSource) -> bytes:
    if isinstance(source, EncryptedBundle):
        return source.to_bytes()
    if isinstance(source, (bytes, bytearray, memoryview)):
        return bytes(source)
    if isinstance(source, (str, os.PathLike)):
        return Path(source).read_bytes()
    if isinstance(source, io.IOBase):
        return source.read()
    raise ValidationError(f"cannot read a bundle from {type(source).__name__}")
