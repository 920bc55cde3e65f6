"""Control-plane scheduler: job state machine, node selection and dispatch.

The scheduler stores submitted bundles and images as opaque encrypted blobs,
selects worker nodes with a deterministic round-robin policy, asks the key
service to authorise exactly those nodes, and hands out assignments on the
nodes' heartbeat long-polls. It never sees a data key: bundles, images,
results and allgather traffic all pass through it encrypted.
"""

from __future__ import annotations

import io
import itertools
import json
import logging
import os
import threading
import time
import uuid
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Iterable

from . import bundle as bundle_mod
from . import dataimage, errors, recorder
from .errors import AuthError, NotFound, PolicyError, ScwError, ValidationError, WrongState
from .identity import Principal, Role, derive_credential
from .storage import LOCAL, BlobRef, BlobStore
from .wire import Msg, RpcClient

log = logging.getLogger(__name__)

ACK_TIMEOUT = 10.0
HEARTBEAT_INTERVAL = 5.0
LIVENESS_INTERVALS = 3
RUN_TIMEOUT = 300.0
ALLGATHER_TIMEOUT = 600.0

_SERVICE = Principal("scheduler", Role.SCHEDULER, "infra")


class JobState(str, Enum):
    SUBMITTED = "SUBMITTED"
    SCHEDULED = "SCHEDULED"
    RUNNING = "RUNNING"
    COMPLETED = "COMPLETED"
    FAILED = "FAILED"


S = JobState
TRANSITIONS: dict[JobState, frozenset[JobState]] = {
    S.SUBMITTED: frozenset({S.SCHEDULED, S.FAILED}),
    S.SCHEDULED: frozenset({S.RUNNING, S.FAILED}),
    S.RUNNING: frozenset({S.COMPLETED, S.FAILED}),
    S.COMPLETED: frozenset(),
    S.FAILED: frozenset(),
}
TERMINAL = frozenset({S.COMPLETED, S.FAILED})
ACTIVE = frozenset({S.SCHEDULED, S.RUNNING})


def legal(src: JobState, dst: JobState) -> bool:
    return dst in TRANSITIONS[src]


def failure_reason(code: str) -> str:
    """Coarse failure reason recorded on a job for an error code."""
    cls = errors.ERRORS_BY_CODE.get(code, ScwError)
    if cls.category == "integrity":
        return "integrity"
    return code


# ---------------------------------------------------------------------------
# records

@dataclass
class NodeRecord:
    node_id: str
    endpoint: str
    capabilities: dict
    slots: int
    last_heartbeat: float
    active: set[str] = field(default_factory=set)

    @property
    def sev(self) -> bool:
        return bool(self.capabilities.get("sev"))

    def free_slots(self) -> int:
        return self.slots - len(self.active)

    def to_dict(self) -> dict:
        return {"node_id": self.node_id, "endpoint": self.endpoint, "capabilities": self.capabilities,
                "slots": self.slots, "last_heartbeat": self.last_heartbeat, "active": sorted(self.active)}

    @classmethod
    def from_dict(cls, obj: dict) -> "NodeRecord":
        return cls(obj["node_id"], obj["endpoint"], obj["capabilities"], obj["slots"],
                   obj["last_heartbeat"], set(obj["active"]))


@dataclass(frozen=True)
class Assignment:
    job_id: str
    node_id: str
    rank_start: int
    rank_end: int
    world_size: int
    procs_per_node: int
    bundle_ref: BlobRef
    image_refs: tuple[BlobRef, ...]
    security_level: str

    @property
    def ranks(self) -> list[int]:
        return list(range(self.rank_start, self.rank_end))

    def to_dict(self) -> dict:
        return {
            "job_id": self.job_id, "node_id": self.node_id,
            "rank_start": self.rank_start, "rank_end": self.rank_end,
            "world_size": self.world_size, "procs_per_node": self.procs_per_node,
            "bundle_ref": self.bundle_ref.to_dict(),
            "image_refs": [r.to_dict() for r in self.image_refs],
            "security_level": self.security_level,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "Assignment":
        return cls(obj["job_id"], obj["node_id"], obj["rank_start"], obj["rank_end"], obj["world_size"],
                   obj["procs_per_node"], BlobRef.from_dict(obj["bundle_ref"]),
                   tuple(BlobRef.from_dict(r) for r in obj["image_refs"]), obj["security_level"])


@dataclass
class Job:
    job_id: str
    owner: str
    bundle_ref: BlobRef
    image_refs: list[BlobRef]
    node_count: int
    procs_per_node: int
    security_level: str
    key_ids: list[str]
    task_kind: str
    run_timeout: float
    seq: int
    state: JobState = S.SUBMITTED
    history: list[tuple[str, float]] = field(default_factory=list)
    assignments: list[Assignment] = field(default_factory=list)
    acked: set[str] = field(default_factory=set)
    results: dict[str, BlobRef] = field(default_factory=dict)
    reports: dict[str, dict] = field(default_factory=dict)
    result_refs: list[BlobRef] = field(default_factory=list)
    failure: dict | None = None
    scheduled_at: float | None = None
    running_at: float | None = None

    @property
    def world_size(self) -> int:
        return self.node_count * self.procs_per_node

    def assignment_for(self, node_id: str) -> Assignment | None:
        for a in self.assignments:
            if a.node_id == node_id:
                return a
        return None

    def view(self) -> dict:
        """Client-facing status; contains refs and timings, never payload bytes."""
        return {
            "job_id": self.job_id,
            "owner": self.owner,
            "state": self.state.value,
            "security_level": self.security_level,
            "task_kind": self.task_kind,
            "node_count": self.node_count,
            "procs_per_node": self.procs_per_node,
            "world_size": self.world_size,
            "assignments": [{"node_id": a.node_id, "ranks": [a.rank_start, a.rank_end]}
                            for a in self.assignments],
            "result_refs": [r.to_dict() for r in self.result_refs],
            "failure": self.failure,
            "history": [list(h) for h in self.history],
            "reports": [self.reports[a.node_id] for a in self.assignments if a.node_id in self.reports],
        }

    def to_dict(self) -> dict:
        d = self.view()
        d.update({
            "bundle_ref": self.bundle_ref.to_dict(),
            "image_refs": [r.to_dict() for r in self.image_refs],
            "key_ids": self.key_ids,
            "run_timeout": self.run_timeout,
            "seq": self.seq,
            "assignments": [a.to_dict() for a in self.assignments],
            "acked": sorted(self.acked),
            "results": {k: v.to_dict() for k, v in self.results.items()},
            "reports": self.reports,
            "scheduled_at": self.scheduled_at,
            "running_at": self.running_at,
        })
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Job":
        return cls(
            job_id=d["job_id"], owner=d["owner"], bundle_ref=BlobRef.from_dict(d["bundle_ref"]),
            image_refs=[BlobRef.from_dict(r) for r in d["image_refs"]], node_count=d["node_count"],
            procs_per_node=d["procs_per_node"], security_level=d["security_level"], key_ids=d["key_ids"],
            task_kind=d["task_kind"], run_timeout=d["run_timeout"], seq=d["seq"], state=S(d["state"]),
            history=[tuple(h) for h in d["history"]],
            assignments=[Assignment.from_dict(a) for a in d["assignments"]], acked=set(d["acked"]),
            results={k: BlobRef.from_dict(v) for k, v in d["results"].items()}, reports=d["reports"],
            result_refs=[BlobRef.from_dict(r) for r in d["result_refs"]], failure=d["failure"],
            scheduled_at=d["scheduled_at"], running_at=d["running_at"],
        )


# ---------------------------------------------------------------------------
# policy (pure functions; the oracle tests reimplement these independently)

def is_live(node: NodeRecord, now: float, interval: float = HEARTBEAT_INTERVAL) -> bool:
    return now - node.last_heartbeat <= LIVENESS_INTERVALS * interval


def eligible(node: NodeRecord, security_level: str, now: float, interval: float = HEARTBEAT_INTERVAL) -> bool:
    return is_live(node, now, interval) and node.free_slots() > 0 and (security_level != "sev" or node.sev)


def select_nodes(
    nodes: Iterable[NodeRecord],
    cursor: str | None,
    count: int,
    security_level: str,
    now: float,
    interval: float = HEARTBEAT_INTERVAL,
) -> tuple[list[str], str | None] | None:
    """Round-robin over node ids in lexicographic order, starting at ``cursor``.

    Returns the chosen node ids (in visiting order) and the next cursor, which
    is the node after the last one chosen. ``None`` when fewer than ``count``
    nodes are eligible; the cursor is then left unchanged.
    """
    order = sorted(nodes, key=lambda n: n.node_id)
    if not order:
        return None
    ids = [n.node_id for n in order]
    start = 0
    if cursor is not None:
        start = next((i for i, nid in enumerate(ids) if nid >= cursor), 0)
    chosen: list[int] = []
    for k in range(len(order)):
        i = (start + k) % len(order)
        if eligible(order[i], security_level, now, interval):
            chosen.append(i)
            if len(chosen) == count:
                return [ids[i] for i in chosen], ids[(i + 1) % len(ids)]
    return None


def rank_ranges(node_ids: Iterable[str], procs_per_node: int) -> list[tuple[str, int, int]]:
    """Contiguous rank ranges, assigned in node id order."""
    return [(nid, i * procs_per_node, (i + 1) * procs_per_node)
            for i, nid in enumerate(sorted(node_ids))]


# ---------------------------------------------------------------------------
# the service

class Scheduler:
    """Scheduler service state and operations.

    Args:
        keys: Key-service client bound to the scheduler identity
            (``authorize_job``, ``revoke_job``, ``verify_token``).
        store: Blob store; only its local tier is used (blobs are already
            encrypted).
        state_dir: Where ``scheduler.json`` is persisted; ``None`` keeps
            state in memory.
        service_secret: Root from which channel credentials of connecting
            principals are derived.
        clock: Time source for liveness and timeouts.
        heartbeat_interval: Expected node heartbeat period.
        ack_timeout: Seconds a scheduled node has to acknowledge.
        run_timeout: Default per-job run limit.
        allow_unencrypted: Accept bench control bundles (suite ``NONE``).
    """

    def __init__(
        self,
        keys: Any,
        store: BlobStore,
        state_dir: str | os.PathLike | None = None,
        *,
        service_secret: bytes | None = None,
        clock: Callable[[], float] = time.time,
        heartbeat_interval: float = HEARTBEAT_INTERVAL,
        ack_timeout: float = ACK_TIMEOUT,
        run_timeout: float = RUN_TIMEOUT,
        allgather_timeout: float = ALLGATHER_TIMEOUT,
        allow_unencrypted: bool = False,
        fsync: bool = True,
    ) -> None:
        self.keys = keys
        self.store = store
        self.state_dir = Path(state_dir) if state_dir is not None else None
        self._secret = service_secret
        self.clock = clock
        self.heartbeat_interval = heartbeat_interval
        self.ack_timeout = ack_timeout
        self.run_timeout = run_timeout
        self.allgather_timeout = allgather_timeout
        self.allow_unencrypted = allow_unencrypted
        self.fsync = fsync
        self._lock = threading.RLock()
        self._cond = threading.Condition(self._lock)
        self.jobs: dict[str, Job] = {}
        self.nodes: dict[str, NodeRecord] = {}
        self.cursor: str | None = None
        self.uploads: dict[str, str] = {}  # blob_id -> owner identity
        self._seq = itertools.count(1)
        self._mailbox: dict[str, list[Assignment]] = {}
        self._cancel: dict[str, set[str]] = {}
        self._gathers: dict[tuple[str, str], dict[int, str]] = {}
        self._gather_readers: dict[tuple[str, str], set[str]] = {}
        self._thread: threading.Thread | None = None
        self._stop = threading.Event()
        self._wake = threading.Event()
        if self.state_dir is not None:
            self.state_dir.mkdir(parents=True, exist_ok=True)
            with self._lock:
                self._load()

    # -- persistence ---------------------------------------------------------

    @property
    def _state_path(self) -> Path:
        assert self.state_dir is not None
        return self.state_dir / "scheduler.json"

    def _save(self) -> None:
        if self.state_dir is None:
            return
        state = {
            "version": 1,
            "cursor": self.cursor,
            "jobs": [j.to_dict() for j in sorted(self.jobs.values(), key=lambda j: j.seq)],
            "nodes": [n.to_dict() for n in sorted(self.nodes.values(), key=lambda n: n.node_id)],
            "uploads": self.uploads,
        }
        recorder.write_atomic(self._state_path, json.dumps(state, sort_keys=True).encode(), fsync=self.fsync)

    def _load(self) -> None:
        try:
            state = json.loads(self._state_path.read_bytes())
        except FileNotFoundError:
            return
        self.cursor = state["cursor"]
        self.uploads = dict(state["uploads"])
        for d in state["nodes"]:
            node = NodeRecord.from_dict(d)
            node.active.clear()
            self.nodes[node.node_id] = node
        last = 0
        for d in state["jobs"]:
            job = Job.from_dict(d)
            self.jobs[job.job_id] = job
            last = max(last, job.seq)
        self._seq = itertools.count(last + 1)
        # assignments in flight cannot be resumed: their workers held
        # in-memory state that a restart has lost track of
        for job in self.jobs.values():
            if job.state in ACTIVE:
                self._fail(job, "scheduler_restart", "scheduler restarted while the job was active")
        self._save()

    # -- identities ----------------------------------------------------------

    def credential_for(self, ident: str) -> bytes | None:
        if self._secret is None or not isinstance(ident, str) or ":" not in ident:
            return None
        role, name = ident.split(":", 1)
        try:
            Principal(name, Role(role), "x")
        except (ValueError, ScwError):
            return None
        return derive_credential(self._secret, ident)

    @staticmethod
    def _role(actor: str, *roles: Role) -> str:
        role, _, name = actor.partition(":")
        if role not in {r.value for r in roles}:
            raise AuthError(f"{actor} may not perform this operation")
        return name

    def _job(self, job_id: str) -> Job:
        try:
            return self.jobs[job_id]
        except (KeyError, TypeError):
            raise NotFound(f"no job {job_id}") from None

    def _owned_job(self, actor: str, job_id: str) -> Job:
        job = self._job(job_id)
        if actor != job.owner and not actor.startswith("operator:"):
            # do not disclose other users' job ids
            raise NotFound(f"no job {job_id}")
        return job

    # -- state machine -------------------------------------------------------

    def _transition(self, job: Job, new: JobState) -> None:
        if not legal(job.state, new):
            raise WrongState(f"job {job.job_id}: illegal transition {job.state.value} -> {new.value}")
        job.state = new
        job.history.append((new.value, self.clock()))

    def _release(self, job: Job) -> None:
        for a in job.assignments:
            node = self.nodes.get(a.node_id)
            if node is not None:
                node.active.discard(job.job_id)
        for key in [k for k in self._gathers if k[0] == job.job_id]:
            del self._gathers[key]
            self._gather_readers.pop(key, None)

    def _revoke(self, job: Job) -> None:
        if not job.assignments or not job.key_ids:
            return
        try:
            self.keys.revoke_job(job.job_id)
        except ScwError as exc:
            log.warning("could not revoke leases for %s: %s", job.job_id, exc)

    def _fail(self, job: Job, reason: str, message: str, node_id: str | None = None, **details: Any) -> None:
        if job.state in TERMINAL:
            return
        self._transition(job, S.FAILED)
        job.failure = {"reason": reason, "message": message, "node_id": node_id, "details": details}
        for ref in job.results.values():
            # partial results are discarded
            self.store.delete(ref, _SERVICE)
            self.uploads.pop(ref.blob_id, None)
        job.results.clear()
        for a in job.assignments:
            if a.node_id != node_id:
                self._cancel.setdefault(a.node_id, set()).add(job.job_id)
        self._release(job)
        self._revoke(job)
        self._cond.notify_all()

    # -- client operations ---------------------------------------------------

    def upload(self, actor: str, data: bytes, kind: str) -> BlobRef:
        """Store an encrypted bundle or image for later submission."""
        self._role(actor, Role.USER)
        if kind == "bundle":
            bundle_mod.parse_bundle(data)
        elif kind == "image":
            dataimage.read_header(io.BytesIO(data))
        else:
            raise ValidationError(f"unknown upload kind {kind!r}")
        ref = self.store.put(LOCAL, data, _SERVICE)
        with self._lock:
            self.uploads[ref.blob_id] = actor
            self._save()
        return ref

    def _owned_blob(self, actor: str, ref: BlobRef) -> bytes:
        if self.uploads.get(ref.blob_id) != actor or ref.tier != LOCAL:
            raise NotFound(f"no uploaded blob {ref.blob_id}")
        return self.store.get(ref, _SERVICE)

    def submit(
        self,
        actor: str,
        *,
        bundle: bytes | None = None,
        bundle_ref: BlobRef | None = None,
        image_refs: Iterable[BlobRef] = (),
        node_count: int = 1,
        procs_per_node: int = 1,
        run_timeout: float | None = None,
    ) -> str:
        self._role(actor, Role.USER)
        for name, value in (("node_count", node_count), ("procs_per_node", procs_per_node)):
            if isinstance(value, bool) or not isinstance(value, int) or value < 1:
                raise ValidationError(f"{name} must be an integer >= 1")
        if run_timeout is not None and not run_timeout > 0:
            raise ValidationError("run_timeout must be positive")
        if (bundle is None) == (bundle_ref is None):
            raise ValidationError("submit needs exactly one of a bundle or a bundle reference")
        if bundle is not None:
            parsed = bundle_mod.parse_bundle(bundle)
            ref = None
        else:
            parsed = bundle_mod.parse_bundle(self._owned_blob(actor, bundle_ref))
            ref = bundle_ref
        manifest = parsed.manifest
        if not manifest.encrypted and not self.allow_unencrypted:
            raise PolicyError("this scheduler does not accept unencrypted bundles")
        key_ids = [manifest.key_id] if manifest.encrypted else []
        images = list(image_refs)
        for img in images:
            header = dataimage.read_header(io.BytesIO(self._owned_blob(actor, img)))
            if header.wrapped_key is not None:
                key_ids.append(header.wrapped_key.key_id)
        if ref is None:
            ref = self.store.put(LOCAL, bundle, _SERVICE)
        with self._lock:
            self.uploads[ref.blob_id] = actor
            job = Job(
                job_id=uuid.uuid4().hex, owner=actor, bundle_ref=ref, image_refs=images,
                node_count=node_count, procs_per_node=procs_per_node,
                security_level=manifest.security_level, key_ids=sorted(set(key_ids)),
                task_kind=str(manifest.task_spec.get("kind")),
                run_timeout=float(run_timeout or self.run_timeout), seq=next(self._seq),
            )
            job.history.append((S.SUBMITTED.value, self.clock()))
            self.jobs[job.job_id] = job
            self._save()
        log.info("job %s submitted by %s (%d x %d, %s)", job.job_id, actor, node_count,
                 procs_per_node, job.security_level)
        self._wake.set()
        return job.job_id

    def status(self, actor: str, job_id: str) -> dict:
        with self._lock:
            return self._owned_job(actor, job_id).view()

    def list_jobs(self, actor: str) -> list[dict]:
        with self._lock:
            return [j.view() for j in sorted(self.jobs.values(), key=lambda j: j.seq)
                    if actor == j.owner or actor.startswith("operator:")]

    def fetch(self, actor: str, job_id: str, index: int) -> bytes:
        with self._lock:
            job = self._owned_job(actor, job_id)
            if job.state is not S.COMPLETED:
                raise WrongState(f"job {job_id} is {job.state.value}, results exist only once COMPLETED")
            if not 0 <= index < len(job.result_refs):
                raise NotFound(f"job {job_id} has no result {index}")
            ref = job.result_refs[index]
        return self.store.get(ref, _SERVICE)

    # -- scheduling ----------------------------------------------------------

    def schedule(self, job_id: str) -> list[Assignment]:
        """Place one SUBMITTED job; it ends SCHEDULED or FAILED."""
        with self._lock:
            job = self._job(job_id)
            if job.state is not S.SUBMITTED:
                raise WrongState(f"job {job_id} is {job.state.value}")
            now = self.clock()
            pick = select_nodes(self.nodes.values(), self.cursor, job.node_count, job.security_level,
                                now, self.heartbeat_interval)
            if pick is None:
                self._fail(job, "no_eligible_nodes", "no eligible nodes",
                           needed=job.node_count, security_level=job.security_level)
                self._save()
                return []
            chosen, next_cursor = pick
            if job.key_ids:
                try:
                    self.keys.authorize_job(job.job_id, chosen, job.key_ids, job.security_level,
                                            job.owner.split(":", 1)[1])
                except ScwError as exc:
                    self._fail(job, failure_reason(exc.code), f"key authorisation failed: {exc.message}")
                    self._save()
                    return []
            self.cursor = next_cursor
            job.assignments = [
                Assignment(job.job_id, nid, lo, hi, job.world_size, job.procs_per_node, job.bundle_ref,
                           tuple(job.image_refs), job.security_level)
                for nid, lo, hi in rank_ranges(chosen, job.procs_per_node)
            ]
            for a in job.assignments:
                self.nodes[a.node_id].active.add(job.job_id)
                self._mailbox.setdefault(a.node_id, []).append(a)
            job.scheduled_at = now
            self._transition(job, S.SCHEDULED)
            self._save()
            self._cond.notify_all()
            return list(job.assignments)

    def schedule_pending(self) -> None:
        with self._lock:
            pending = sorted((j for j in self.jobs.values() if j.state is S.SUBMITTED), key=lambda j: j.seq)
            for job in pending:
                self.schedule(job.job_id)

    def reap(self) -> None:
        """Fail active jobs whose nodes missed acks, heartbeats or the run limit."""
        with self._lock:
            now = self.clock()
            changed = False
            for job in list(self.jobs.values()):
                if job.state not in ACTIVE:
                    continue
                for a in job.assignments:
                    node = self.nodes.get(a.node_id)
                    if node is None or not is_live(node, now, self.heartbeat_interval):
                        self._fail(job, "timeout", f"node {a.node_id} stopped sending heartbeats",
                                   node_id=a.node_id, phase="heartbeat")
                        break
                    if (job.state is S.SCHEDULED and a.node_id not in job.acked
                            and now - job.scheduled_at > self.ack_timeout):
                        self._fail(job, "timeout", f"node {a.node_id} did not acknowledge its assignment",
                                   node_id=a.node_id, phase="ack")
                        break
                if job.state is S.RUNNING and now - job.running_at > job.run_timeout:
                    self._fail(job, "timeout", f"job exceeded its {job.run_timeout:g} s run limit",
                               phase="run")
                changed |= job.state is S.FAILED
            if changed:
                self._save()

    def tick(self) -> None:
        self.reap()
        self.schedule_pending()

    # -- node operations -----------------------------------------------------

    def _node(self, actor: str) -> NodeRecord:
        name = self._role(actor, Role.NODE)
        node = self.nodes.get(name)
        if node is None:
            raise NotFound(f"node {name} has not joined")
        return node

    def node_join(self, actor: str, token: Any, endpoint: str = "", slots: int = 1) -> dict:
        name = self._role(actor, Role.NODE)
        if getattr(token, "node_id", None) != name:
            raise AuthError("attestation token does not belong to the caller")
        if isinstance(slots, bool) or not isinstance(slots, int) or slots < 1:
            raise ValidationError("slots must be an integer >= 1")
        caps = self.keys.verify_token(token)
        with self._lock:
            old = self.nodes.get(name)
            if old is not None:
                # a re-joining node has lost whatever it was running
                for job_id in sorted(old.active):
                    self._fail(self.jobs[job_id], "node_restarted", f"node {name} re-joined", node_id=name)
            self.nodes[name] = NodeRecord(name, endpoint, caps, slots, self.clock())
            self._mailbox[name] = []
            self._cancel[name] = set()
            self._save()
        log.info("node %s joined (sev=%s, slots=%d)", name, caps["sev"], slots)
        self._wake.set()
        return {"node_id": name, "capabilities": caps, "heartbeat_interval": self.heartbeat_interval}

    def heartbeat(self, actor: str, wait: float = 0.0) -> dict:
        """Record liveness, then long-poll up to ``wait`` seconds for work."""
        deadline = time.monotonic() + max(0.0, min(wait, self.heartbeat_interval))
        with self._lock:
            node = self._node(actor)
            node.last_heartbeat = self.clock()
            while True:
                box = self._mailbox.get(node.node_id, [])
                cancel = self._cancel.get(node.node_id, set())
                remaining = deadline - time.monotonic()
                if box or cancel or remaining <= 0:
                    break
                self._cond.wait(remaining)
            self._mailbox[node.node_id] = []
            self._cancel[node.node_id] = set()
            return {"assignments": [a.to_dict() for a in box], "cancel": sorted(cancel)}

    def _active_assignment(self, actor: str, job_id: str) -> tuple[Job, Assignment]:
        node = self._node(actor)
        job = self._job(job_id)
        a = job.assignment_for(node.node_id)
        if a is None:
            raise AuthError(f"node {node.node_id} is not assigned to job {job_id}")
        if job.state not in ACTIVE:
            raise WrongState(f"job {job_id} is {job.state.value}")
        return job, a

    def ack(self, actor: str, job_id: str) -> None:
        with self._lock:
            job, a = self._active_assignment(actor, job_id)
            job.acked.add(a.node_id)
            if job.state is S.SCHEDULED and len(job.acked) == len(job.assignments):
                job.running_at = self.clock()
                self._transition(job, S.RUNNING)
            self._save()

    def get_blob(self, actor: str, job_id: str, ref: BlobRef) -> bytes:
        with self._lock:
            job, _ = self._active_assignment(actor, job_id)
            if ref != job.bundle_ref and ref not in job.image_refs:
                raise AuthError("blob is not part of this job")
        return self.store.get(ref, _SERVICE)

    def complete(self, actor: str, job_id: str, result: bytes, report: dict) -> None:
        bundle_mod.parse_bundle(result)  # malformed results are rejected before storing
        with self._lock:
            job, a = self._active_assignment(actor, job_id)
            if a.node_id in job.results:
                raise WrongState(f"node {a.node_id} already completed job {job_id}")
        ref = self.store.put(LOCAL, result, _SERVICE)
        with self._lock:
            if job.state not in ACTIVE:
                self.store.delete(ref, _SERVICE)
                raise WrongState(f"job {job_id} is {job.state.value}")
            self.uploads[ref.blob_id] = job.owner
            job.results[a.node_id] = ref
            job.reports[a.node_id] = dict(report, node_id=a.node_id)
            if len(job.results) == len(job.assignments):
                if job.state is S.SCHEDULED:
                    job.running_at = self.clock()
                    self._transition(job, S.RUNNING)
                job.result_refs = [job.results[x.node_id] for x in job.assignments]
                self._transition(job, S.COMPLETED)
                self._release(job)
                self._revoke(job)
                log.info("job %s completed", job_id)
            self._save()
            self._cond.notify_all()

    def fail(self, actor: str, job_id: str, error: dict) -> None:
        with self._lock:
            job, a = self._active_assignment(actor, job_id)
            code = str(error.get("code", "error"))
            details = error.get("details") or {}
            self._fail(job, failure_reason(code), str(error.get("message", code)), node_id=a.node_id,
                       code=code, **{k: v for k, v in details.items() if k in ("rank", "chunk")})
            if "report" in error:
                job.reports[a.node_id] = dict(error["report"], node_id=a.node_id)
            self._save()
        log.info("job %s failed on %s: %s", job_id, a.node_id, error.get("message"))

    def allgather(self, actor: str, job_id: str, tag: str, parts: dict[int, str]) -> dict[int, str]:
        """Relay opaque (worker-encrypted) rank contributions between nodes."""
        if not isinstance(tag, str) or not tag or len(tag) > 256:
            raise ValidationError("invalid allgather tag")
        deadline = time.monotonic() + self.allgather_timeout
        with self._lock:
            job, a = self._active_assignment(actor, job_id)
            key = (job_id, tag)
            slot = self._gathers.setdefault(key, {})
            for rank, payload in parts.items():
                if not a.rank_start <= rank < a.rank_end:
                    raise AuthError(f"rank {rank} is not assigned to node {a.node_id}")
                if rank in slot:
                    raise ValidationError(f"rank {rank} already contributed to {tag!r}")
                slot[rank] = payload
            self._cond.notify_all()
            while len(slot) < job.world_size:
                if job.state not in ACTIVE:
                    raise WrongState(f"job {job_id} is {job.state.value}")
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    raise errors.TimeoutError_(f"allgather {tag!r} timed out")
                self._cond.wait(min(remaining, 1.0))
            out = dict(slot)
            readers = self._gather_readers.setdefault(key, set())
            readers.add(a.node_id)
            if len(readers) == len(job.assignments):
                self._gathers.pop(key, None)
                self._gather_readers.pop(key, None)
            return out

    # -- background loop -----------------------------------------------------

    def start(self) -> "Scheduler":
        self._stop.clear()
        self._thread = threading.Thread(target=self._loop, name="scheduler", daemon=True)
        self._thread.start()
        return self

    def _loop(self) -> None:
        period = min(1.0, self.heartbeat_interval / 2)
        while not self._stop.is_set():
            try:
                self.tick()
            except Exception:  # noqa: BLE001 - keep the control loop alive
                log.exception("scheduler tick failed")
            self._wake.wait(period)
            self._wake.clear()

    def stop(self) -> None:
        self._stop.set()
        self._wake.set()
        if self._thread is not None:
            self._thread.join(timeout=5)
            self._thread = None
        with self._lock:
            self._cond.notify_all()


# ---------------------------------------------------------------------------
# wire binding

def _ref(obj: Any) -> BlobRef:
    if not isinstance(obj, dict):
        raise ValidationError("blob reference must be an object")
    return BlobRef.from_dict(obj)


class SchedulerServer:
    """Maps framed messages onto a :class:`Scheduler`."""

    def __init__(self, scheduler: Scheduler) -> None:
        self.scheduler = scheduler

    def dispatch(self, ident: str, mtype: int, body: dict, blob: bytes | None) -> tuple[dict, bytes | None]:
        from .keysvc import AttestationToken

        s = self.scheduler
        try:
            if mtype == Msg.UPLOAD:
                if blob is None:
                    raise ValidationError("upload carries no blob")
                return {"ref": s.upload(ident, blob, body["kind"]).to_dict()}, None
            if mtype == Msg.SUBMIT:
                job_id = s.submit(
                    ident, bundle=blob,
                    bundle_ref=_ref(body["bundle_ref"]) if body.get("bundle_ref") else None,
                    image_refs=[_ref(r) for r in body.get("image_refs", [])],
                    node_count=body["node_count"], procs_per_node=body["procs_per_node"],
                    run_timeout=body.get("run_timeout"),
                )
                return {"job_id": job_id}, None
            if mtype == Msg.STATUS:
                return {"job": s.status(ident, body["job_id"])}, None
            if mtype == Msg.LIST_JOBS:
                return {"jobs": s.list_jobs(ident)}, None
            if mtype == Msg.FETCH:
                return {}, s.fetch(ident, body["job_id"], int(body["index"]))
            if mtype == Msg.NODE_JOIN:
                return s.node_join(ident, AttestationToken.from_dict(body["token"]), body.get("endpoint", ""),
                                   body["slots"]), None
            if mtype == Msg.HEARTBEAT:
                return s.heartbeat(ident, float(body.get("wait", 0.0))), None
            if mtype == Msg.ACK:
                s.ack(ident, body["job_id"])
                return {}, None
            if mtype == Msg.GET_BLOB:
                return {}, s.get_blob(ident, body["job_id"], _ref(body["ref"]))
            if mtype == Msg.COMPLETE:
                if blob is None:
                    raise ValidationError("completion carries no result")
                s.complete(ident, body["job_id"], blob, body.get("report", {}))
                return {}, None
            if mtype == Msg.FAIL:
                s.fail(ident, body["job_id"], body["error"])
                return {}, None
            if mtype == Msg.ALLGATHER:
                parts = {int(r): p for r, p in body["parts"].items()}
                out = s.allgather(ident, body["job_id"], body["tag"], parts)
                return {"parts": {str(r): p for r, p in out.items()}}, None
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"malformed request: {exc!r}") from None
        raise ValidationError(f"unsupported message type {mtype:#x}")


class SchedulerClient:
    """Remote scheduler API bound to one authenticated identity."""

    def __init__(self, rpc: RpcClient) -> None:
        self.rpc = rpc

    @classmethod
    def connect(cls, endpoint: str, ident: str, psk: bytes, timeout: float = 60.0) -> "SchedulerClient":
        return cls(RpcClient(endpoint, ident, psk, timeout))

    @property
    def identity(self) -> str:
        return self.rpc.identity

    # user side
    def upload(self, data: bytes, kind: str) -> BlobRef:
        return BlobRef.from_dict(self.rpc.call(Msg.UPLOAD, {"kind": kind}, data)[0]["ref"])

    def submit(self, *, bundle: bytes | None = None, bundle_ref: BlobRef | None = None,
               image_refs: Iterable[BlobRef] = (), node_count: int = 1, procs_per_node: int = 1,
               run_timeout: float | None = None) -> str:
        body = {"bundle_ref": bundle_ref.to_dict() if bundle_ref else None,
                "image_refs": [r.to_dict() for r in image_refs],
                "node_count": node_count, "procs_per_node": procs_per_node, "run_timeout": run_timeout}
        return self.rpc.call(Msg.SUBMIT, body, bundle)[0]["job_id"]

    def status(self, job_id: str) -> dict:
        return self.rpc.call(Msg.STATUS, {"job_id": job_id})[0]["job"]

    def list_jobs(self) -> list[dict]:
        return self.rpc.call(Msg.LIST_JOBS)[0]["jobs"]

    def fetch(self, job_id: str, index: int) -> bytes:
        return self.rpc.call(Msg.FETCH, {"job_id": job_id, "index": index})[1] or b""

    # node side
    def node_join(self, token: Any, endpoint: str = "", slots: int = 1) -> dict:
        return self.rpc.call(Msg.NODE_JOIN, {"token": token.to_dict(), "endpoint": endpoint, "slots": slots})[0]

    def heartbeat(self, wait: float = 0.0) -> dict:
        return self.rpc.call(Msg.HEARTBEAT, {"wait": wait}, timeout=wait + 30.0)[0]

    def ack(self, job_id: str) -> None:
        self.rpc.call(Msg.ACK, {"job_id": job_id})

    def get_blob(self, job_id: str, ref: BlobRef) -> bytes:
        return self.rpc.call(Msg.GET_BLOB, {"job_id": job_id, "ref": ref.to_dict()})[1] or b""

    def complete(self, job_id: str, result: bytes, report: dict) -> None:
        self.rpc.call(Msg.COMPLETE, {"job_id": job_id, "report": report}, result)

    def fail(self, job_id: str, error: dict) -> None:
        self.rpc.call(Msg.FAIL, {"job_id": job_id, "error": error})

    def allgather(self, job_id: str, tag: str, parts: dict[int, str]) -> dict[int, str]:
        r, _ = self.rpc.call(Msg.ALLGATHER, {"job_id": job_id, "tag": tag,
                                             "parts": {str(k): v for k, v in parts.items()}},
                             timeout=ALLGATHER_TIMEOUT + 30.0)
        return {int(k): v for k, v in r["parts"].items()}

    def close(self) -> None:
        self.rpc.close()


class LocalSchedulerClient:
    """Same surface as :class:`SchedulerClient` over an in-process scheduler."""

    def __init__(self, scheduler: Scheduler, ident: str) -> None:
        self.scheduler = scheduler
        self.identity = ident

    def __getattr__(self, name: str):
        fn = getattr(self.scheduler, name)
        return lambda *a, **kw: fn(self.identity, *a, **kw)

    def close(self) -> None:
        pass
