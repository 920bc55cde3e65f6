"""In-process deployment: key service, scheduler and workers over real sockets.

Used by the tests, the demos and the bench harness. Every component talks to
the others through the authenticated wire protocol on localhost, exactly as
separate daemons would.
"""

from __future__ import annotations

import logging
import os
import shutil
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Iterable

from . import crypto
from .client import ScwClient
from .crypto import KeyPair
from .identity import SCHEDULER, SCHEDULER_IDENTITY, Credential, Principal, Role, service_secret
from .keysvc import KeyService, KeyServiceClient, KeyServiceServer
from .scheduler import (
    ACK_TIMEOUT,
    RUN_TIMEOUT,
    Scheduler,
    SchedulerClient,
    SchedulerServer,
)
from .storage import BlobStore
from .wire import RpcServer
from .worker import Worker

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class NodeSpec:
    name: str
    sev: bool = False
    slots: int = 1
    domain: str = "orgA"


OPERATOR_NAME = "ops"
DEFAULT_NODES = (NodeSpec("node-a"), NodeSpec("node-b"), NodeSpec("node-c"))


class LocalCluster:
    """A complete deployment inside one process.

    Args:
        root: State directory; a temporary one is created (and removed on
            stop) when omitted.
        nodes: Worker nodes to register and start.
        heartbeat_interval: Node heartbeat period (seconds).
        allow_unencrypted: Bench build: accept control-path bundles, plain
            images and unencrypted storage domains.
        allow_spill: Let workers write io_bench data to unencrypted
            persistent targets (never for sev bundles).
        keypair_factory: Key-pair generator for the key service (tests pass a
            pre-generated pool to save RSA key generation time).
    """

    def __init__(
        self,
        root: str | os.PathLike | None = None,
        nodes: Iterable[NodeSpec] = DEFAULT_NODES,
        *,
        heartbeat_interval: float = 0.5,
        ack_timeout: float = ACK_TIMEOUT,
        run_timeout: float = RUN_TIMEOUT,
        allow_unencrypted: bool = False,
        allow_spill: bool = False,
        keypair_factory: Callable[[], KeyPair] = crypto.generate_keypair,
        fsync: bool = False,
    ) -> None:
        self._owns_root = root is None
        self.root = Path(root) if root is not None else Path(tempfile.mkdtemp(prefix="scw-cluster-"))
        self.node_specs = list(nodes)
        self.heartbeat_interval = heartbeat_interval
        self.ack_timeout = ack_timeout
        self.run_timeout = run_timeout
        self.allow_unencrypted = allow_unencrypted
        self.allow_spill = allow_spill
        self.keypair_factory = keypair_factory
        self.fsync = fsync
        self.workers: dict[str, Worker] = {}
        self.credentials: dict[str, Credential] = {}
        self._clients: list[Any] = []
        self._servers: list[RpcServer] = []
        self.started = False

    # -- lifecycle -------------------------------------------------------------

    def start(self) -> "LocalCluster":
        control = os.urandom(32)
        self.keysvc = KeyService(control, self.root / "keysvc", keypair_factory=self.keypair_factory)
        self.operator_credential = self.keysvc.bootstrap_operator(OPERATOR_NAME, "infra")
        self.operator = Principal(OPERATOR_NAME, Role.OPERATOR, "infra")
        self.storage_key = self.keypair_factory()
        self.store = BlobStore(self.root / "storage", self.storage_key,
                               allow_unencrypted=self.allow_unencrypted)
        ks_server = RpcServer(KeyServiceServer(self.keysvc).dispatch, self.keysvc.credential_for).start()
        self._servers.append(ks_server)
        self.keysvc_endpoint = ks_server.endpoint

        sched_keys = self._track(KeyServiceClient.connect(
            self.keysvc_endpoint, SCHEDULER_IDENTITY, self.keysvc.scheduler_credential()))
        self.scheduler = Scheduler(
            sched_keys, BlobStore(self.root / "scheduler" / "blobs"), self.root / "scheduler",
            service_secret=service_secret(control, SCHEDULER),
            heartbeat_interval=self.heartbeat_interval, ack_timeout=self.ack_timeout,
            run_timeout=self.run_timeout, allow_unencrypted=self.allow_unencrypted, fsync=self.fsync,
        )
        sched_server = RpcServer(SchedulerServer(self.scheduler).dispatch, self.scheduler.credential_for).start()
        self._servers.append(sched_server)
        self.scheduler_endpoint = sched_server.endpoint
        self.scheduler.start()

        self.ops_keys = self._track(KeyServiceClient.connect(
            self.keysvc_endpoint, self.operator_credential.identity, self.operator_credential.keysvc))
        for spec in self.node_specs:
            self.add_node(spec)
        self.started = True
        return self

    def _track(self, client: Any) -> Any:
        self._clients.append(client)
        return client

    def add_node(self, spec: NodeSpec) -> Worker:
        token, cred = self.ops_keys.register_node(spec.name, {"sev": spec.sev, "domain": spec.domain})
        self.credentials[cred.identity] = cred
        worker = Worker(
            spec.name,
            self._track(SchedulerClient.connect(self.scheduler_endpoint, cred.identity, cred.scheduler)),
            self._track(KeyServiceClient.connect(self.keysvc_endpoint, cred.identity, cred.keysvc)),
            token, slots=spec.slots, store=self.store, allow_spill=self.allow_spill,
            allow_unencrypted=self.allow_unencrypted, heartbeat_interval=self.heartbeat_interval,
        )
        self.workers[spec.name] = worker.start()
        return worker

    def add_user(self, name: str, organisation: str = "orgA") -> Credential:
        cred = self.ops_keys.add_principal(name, "user", organisation)
        self.credentials[cred.identity] = cred
        return cred

    def client(self, credential: Credential) -> ScwClient:
        keys = self._track(KeyServiceClient.connect(self.keysvc_endpoint, credential.identity, credential.keysvc))
        sched = self._track(SchedulerClient.connect(self.scheduler_endpoint, credential.identity,
                                                    credential.scheduler))
        return ScwClient(keys, sched, allow_unencrypted=self.allow_unencrypted)

    def user(self, name: str, organisation: str = "orgA") -> ScwClient:
        """Register a user and return a connected client for them."""
        return self.client(self.add_user(name, organisation))

    def create_domain(self, name: str, organisation: str = "orgA", *, encrypted: bool = True,
                      allowed: Iterable[str] = ()):
        return self.store.create_domain(name, organisation, self.operator, allowed, encrypted=encrypted)

    def kill_node(self, name: str) -> None:
        self.workers[name].kill()

    def stop(self) -> None:
        if not self.started:
            return
        self.started = False
        for w in self.workers.values():
            w.kill()
        self.scheduler.stop()
        for c in self._clients:
            c.close()
        for s in self._servers:
            s.stop()
        self.store.close()
        if self._owns_root:
            shutil.rmtree(self.root, ignore_errors=True)

    def __enter__(self) -> "LocalCluster":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()
