"""Node agent: receives assignments, decrypts strictly in memory, runs, seals.

Lifecycle of one assignment:

1. acknowledge it to the scheduler;
2. fetch the encrypted bundle (and images) over the secure channel;
3. obtain each data key through a key-service lease and unseal into memory;
4. run the local ranks concurrently;
5. seal the outputs under a fresh key wrapped to the submitting user;
6. zeroize every plaintext buffer and key, then report.

Nothing plaintext is written to persistent storage. Spilling benchmark data
to an unencrypted persistent target must be enabled explicitly and is always
refused for sev-level bundles.
"""

from __future__ import annotations

import hashlib
import io
import logging
import os
import threading
import time
from dataclasses import dataclass, field
from typing import Any

from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from . import bundle as bundle_mod
from . import dataimage, tasks
from .bundle import FileEntry
from .crypto import DEK, Purpose, WrappedKey
from .errors import IntegrityError, PolicyError, ScwError, SpillRefused, TaskError, WrongState
from .identity import Principal, Role
from .scheduler import HEARTBEAT_INTERVAL, Assignment
from .storage import LOCAL, SECURE, BlobStore, BlobWriter
from .wire import b64, unb64

log = logging.getLogger(__name__)


@dataclass
class ExecutionReport:
    """Timing and accounting for one assignment. Contains no payload bytes."""

    job_id: str
    node_id: str
    ranks: list[dict] = field(default_factory=list)
    bytes_read: int = 0
    bytes_written: int = 0
    outcome: str = "ok"
    result_digest: str | None = None
    seconds: float = 0.0
    unseal_seconds: float = 0.0
    seal_seconds: float = 0.0

    def to_dict(self) -> dict:
        return {
            "job_id": self.job_id, "node_id": self.node_id, "ranks": self.ranks,
            "bytes_read": self.bytes_read, "bytes_written": self.bytes_written,
            "outcome": self.outcome, "result_digest": self.result_digest,
            "seconds": self.seconds, "unseal_seconds": self.unseal_seconds,
            "seal_seconds": self.seal_seconds,
        }


class _Killed(Exception):
    """Raised inside executions of a worker that has been killed."""


class _GatherCipher:
    """Encrypts allgather contributions under a key derived from the job DEK."""

    def __init__(self, dek: DEK, job_id: str) -> None:
        key = HKDF(hashes.SHA256(), 32, None, b"scw-allgather|" + job_id.encode()).derive(bytes(dek.material))
        self._key = bytearray(key)
        self._job = job_id.encode()

    def _aad(self, tag: str, rank: int) -> bytes:
        return self._job + b"|" + tag.encode() + b"|" + str(rank).encode()

    def seal(self, tag: str, rank: int, data: bytes) -> bytes:
        nonce = os.urandom(12)
        return nonce + AESGCM(bytes(self._key)).encrypt(nonce, data, self._aad(tag, rank))

    def open(self, tag: str, rank: int, blob: bytes) -> bytes:
        from cryptography.exceptions import InvalidTag

        try:
            return AESGCM(bytes(self._key)).decrypt(blob[:12], blob[12:], self._aad(tag, rank))
        except InvalidTag:
            raise IntegrityError(f"allgather contribution of rank {rank} failed authentication") from None

    def destroy(self) -> None:
        self._key[:] = bytes(len(self._key))


class _BlobSink:
    def __init__(self, store: BlobStore, writer: BlobWriter, principal: Principal) -> None:
        self.store, self.writer, self.principal = store, writer, principal
        self.ref = None

    def write(self, data: bytes) -> int:
        return self.writer.write(data)

    def close(self) -> None:
        self.ref = self.writer.close()

    def discard(self) -> None:
        if self.ref is not None:
            self.store.delete(self.ref, self.principal)
        else:
            self.writer.abort()


@dataclass
class _Execution:
    assignment: Assignment
    collective: tasks.GroupCollective | None = None
    gather: _GatherCipher | None = None
    cancelled: bool = False


class Worker:
    """Worker node agent.

    Args:
        node_id: Registered node name.
        scheduler: Scheduler client bound to ``node:<node_id>``.
        keys: Key-service client bound to ``node:<node_id>``.
        token: Attestation token issued at registration.
        slots: Concurrent assignments this node accepts.
        store: Blob store for io_bench storage targets (optional).
        allow_spill: Permit io_bench writes to unencrypted persistent
            targets (benchmark nodes only; never for sev bundles).
        allow_unencrypted: Accept bench control bundles and plain images.
        heartbeat_interval: Seconds between heartbeats (long-poll period).
    """

    def __init__(
        self,
        node_id: str,
        scheduler: Any,
        keys: Any,
        token: Any,
        *,
        slots: int = 1,
        store: BlobStore | None = None,
        allow_spill: bool = False,
        allow_unencrypted: bool = False,
        heartbeat_interval: float = HEARTBEAT_INTERVAL,
        endpoint: str = "",
    ) -> None:
        self.node_id = node_id
        self.scheduler = scheduler
        self.keys = keys
        self.token = token
        self.slots = slots
        self.store = store
        self.allow_spill = allow_spill
        self.allow_unencrypted = allow_unencrypted
        self.heartbeat_interval = heartbeat_interval
        self.endpoint = endpoint
        self.principal = Principal(node_id, Role.NODE, token.capabilities["domain"])
        self.reports: list[ExecutionReport] = []
        self._active: dict[str, _Execution] = {}
        self._threads: list[threading.Thread] = []
        self._lock = threading.Lock()
        self._stop = threading.Event()
        self._killed = False
        self._loop_thread: threading.Thread | None = None

    # -- lifecycle -----------------------------------------------------------

    def join(self) -> dict:
        return self.scheduler.node_join(self.token, self.endpoint, self.slots)

    def start(self) -> "Worker":
        self.join()
        self._stop.clear()
        self._loop_thread = threading.Thread(target=self._loop, name=f"worker-{self.node_id}", daemon=True)
        self._loop_thread.start()
        return self

    def _loop(self) -> None:
        while not self._stop.is_set():
            try:
                reply = self.scheduler.heartbeat(self.heartbeat_interval)
            except ScwError as exc:
                if self._stop.is_set():
                    return
                log.warning("%s: heartbeat rejected (%s); re-joining", self.node_id, exc)
                try:
                    self.join()
                except (ScwError, OSError) as exc2:
                    log.warning("%s: re-join failed: %s", self.node_id, exc2)
                    self._stop.wait(self.heartbeat_interval)
                continue
            except OSError as exc:
                if self._stop.is_set():
                    return
                log.warning("%s: scheduler unreachable: %s", self.node_id, exc)
                self._stop.wait(self.heartbeat_interval)
                continue
            if self._stop.is_set():
                return
            for job_id in reply.get("cancel", []):
                self._cancel(job_id)
            for raw in reply.get("assignments", []):
                a = Assignment.from_dict(raw)
                t = threading.Thread(target=self._run, args=(a,), name=f"{self.node_id}-{a.job_id[:8]}",
                                     daemon=True)
                with self._lock:
                    self._threads = [x for x in self._threads if x.is_alive()] + [t]
                t.start()

    def _cancel(self, job_id: str) -> None:
        with self._lock:
            ex = self._active.get(job_id)
        if ex is not None:
            ex.cancelled = True
            if ex.collective is not None:
                ex.collective.abort(TaskError("job cancelled by the scheduler"))

    def stop(self, timeout: float = 30.0) -> None:
        """Stop heartbeating after in-flight assignments finish."""
        with self._lock:
            threads = list(self._threads)
        for t in threads:
            t.join(timeout)
        self._stop.set()
        if self._loop_thread is not None:
            self._loop_thread.join(timeout)

    def kill(self) -> None:
        """Simulate a crash: stop heartbeats and abandon running work silently."""
        self._killed = True
        self._stop.set()
        with self._lock:
            active = list(self._active.values())
        for ex in active:
            ex.cancelled = True
            if ex.collective is not None:
                ex.collective.abort(_Killed())

    @property
    def alive(self) -> bool:
        return not self._killed and not self._stop.is_set()

    # -- execution -----------------------------------------------------------

    def _call(self, fn, *args):
        if self._killed:
            raise _Killed()
        return fn(*args)

    def _run(self, a: Assignment) -> None:
        try:
            self.execute(a)
        except _Killed:
            pass
        except Exception:  # noqa: BLE001 - keep the agent alive
            log.exception("%s: assignment %s crashed", self.node_id, a.job_id)

    def execute(self, a: Assignment) -> ExecutionReport:
        """Run one assignment end to end and report the outcome to the scheduler."""
        report = ExecutionReport(a.job_id, self.node_id)
        ex = _Execution(a)
        with self._lock:
            self._active[a.job_id] = ex
        start = time.perf_counter()
        try:
            self._call(self.scheduler.ack, a.job_id)
            sealed = self._execute(a, ex, report)
            report.seconds = time.perf_counter() - start
            report.result_digest = hashlib.sha256(sealed).hexdigest()
            if ex.cancelled:
                raise _Killed() if self._killed else WrongState("job was cancelled")
            self._call(self.scheduler.complete, a.job_id, sealed, report.to_dict())
        except _Killed:
            raise
        except WrongState as exc:
            # the job already ended elsewhere (peer failure or timeout)
            report.outcome = "abandoned"
            log.info("%s: %s", self.node_id, exc)
        except Exception as exc:  # noqa: BLE001 - every failure is reported
            report.outcome = "failed"
            report.seconds = time.perf_counter() - start
            err = exc.to_dict() if isinstance(exc, ScwError) else {
                "code": "task", "message": f"{type(exc).__name__}: {exc}", "details": {}}
            err["report"] = report.to_dict()
            if not ex.cancelled:
                try:
                    self._call(self.scheduler.fail, a.job_id, err)
                except (_Killed, WrongState):
                    pass
                except (ScwError, OSError) as exc2:
                    log.warning("%s: could not report failure of %s: %s", self.node_id, a.job_id, exc2)
        finally:
            with self._lock:
                self._active.pop(a.job_id, None)
            if ex.gather is not None:
                ex.gather.destroy()
            self.reports.append(report)
        return report

    def _unwrapper(self, a: Assignment, ex: _Execution):
        def unwrap(wrapped: WrappedKey, context: dict) -> DEK:
            dek, lease = self._call(self.keys.request_unwrap, self.token, wrapped, a.job_id, context)
            if context.get("purpose") == Purpose.BUNDLE.value and ex.gather is None:
                ex.gather = _GatherCipher(dek, a.job_id)
            return dek

        return unwrap

    def _execute(self, a: Assignment, ex: _Execution, report: ExecutionReport) -> bytes:
        raw = self._call(self.scheduler.get_blob, a.job_id, a.bundle_ref)
        t0 = time.perf_counter()
        parsed = bundle_mod.parse_bundle(raw)
        encrypted = parsed.manifest.encrypted
        if parsed.manifest.security_level != a.security_level:
            raise IntegrityError("bundle security level differs from the scheduled level")
        workflow = bundle_mod.unseal(parsed, self._unwrapper(a, ex) if encrypted else None,
                                     allow_unencrypted=self.allow_unencrypted)
        images: list[bytearray] = []
        outputs: bundle_mod.Tree = {}
        try:
            for ref in a.image_refs:
                images.append(self._load_image(a, ex, ref))
            report.unseal_seconds = time.perf_counter() - t0
            spec = tasks.validate(workflow.manifest.task_spec)
            exchange = self._exchange(a, ex) if a.world_size > len(a.ranks) else None
            ex.collective = tasks.GroupCollective(a.ranks, a.world_size, exchange)
            results = tasks.run_ranks(a.ranks, a.world_size, workflow, spec, images=[bytes(i) for i in images],
                                      collective=ex.collective, open_sink=self._sink_factory(a))
            for r in results:
                outputs[tasks.result_name(r.rank)] = FileEntry(bytearray(r.output))
                report.ranks.append(r.report())
                report.bytes_read += r.bytes_read
                report.bytes_written += r.bytes_written
            t1 = time.perf_counter()
            pub = self._call(self.keys.get_pubkey, workflow.manifest.key_id) if encrypted else None
            sealed = bundle_mod.seal_tree(
                outputs,
                {"kind": "result", "params": {"job_id": a.job_id, "node_id": self.node_id,
                                              "ranks": [a.rank_start, a.rank_end]}},
                pub, a.security_level, encrypt=encrypted, allow_unencrypted=self.allow_unencrypted,
            ).to_bytes()
            report.seal_seconds = time.perf_counter() - t1
            return sealed
        finally:
            workflow.wipe()
            for buf in images:
                buf[:] = bytes(len(buf))
            for entry in outputs.values():
                entry.wipe()

    def _load_image(self, a: Assignment, ex: _Execution, ref) -> bytearray:
        raw = self._call(self.scheduler.get_blob, a.job_id, ref)
        header = dataimage.read_header(io.BytesIO(raw))
        if header.cipher == dataimage.PLAIN:
            if not self.allow_unencrypted:
                raise PolicyError("plain data images are only accepted by benchmark builds")
            key = None
        else:
            key = self._unwrapper(a, ex)
        with dataimage.open_image(io.BytesIO(raw), key, writable=False) as img:
            return bytearray(img.read_sectors(0, img.header.sector_count))

    def _exchange(self, a: Assignment, ex: _Execution):
        def exchange(tag: str, parts: dict[int, bytes]) -> dict[int, bytes]:
            g = ex.gather
            if g is None:
                if not self.allow_unencrypted:
                    raise PolicyError("cross-node exchange requires an encrypted job")
                enc = {r: b64(p) for r, p in parts.items()}
                return {r: unb64(v) for r, v in self._call(self.scheduler.allgather, a.job_id, tag, enc).items()}
            enc = {r: b64(g.seal(tag, r, p)) for r, p in parts.items()}
            out = self._call(self.scheduler.allgather, a.job_id, tag, enc)
            return {r: g.open(tag, r, unb64(v)) for r, v in out.items()}

        return exchange

    def _sink_factory(self, a: Assignment):
        def open_sink(target: Any, rank: int, fsync: bool):
            if target == "scratch":
                return tasks.ScratchSink()
            if self.store is None:
                raise TaskError("this node has no storage attached", rank=rank)
            tier = target["tier"]
            domain = target.get("domain")
            plaintext_at_rest = tier == LOCAL or not self.store.domain(domain).encrypted
            if plaintext_at_rest:
                if a.security_level == "sev":
                    raise SpillRefused("sev bundles may not spill to unencrypted persistent storage", rank=rank)
                if not self.allow_spill:
                    raise SpillRefused("spill to unencrypted persistent storage is disabled on this node",
                                       rank=rank)
            writer = self.store.open_writer(LOCAL if tier == LOCAL else SECURE, self.principal, domain,
                                            fsync=fsync)
            return _BlobSink(self.store, writer, self.principal)

        return open_sink
