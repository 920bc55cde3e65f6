"""Command-line entry points: ``scw`` (client) and ``scwd`` (daemons).

Client configuration comes from flags, then ``SCW_*`` environment variables,
then a JSON config file; the first source that sets a field wins. Every error
maps to one exit status: 1 usage, 2 auth, 3 integrity, 4 not found, 5 I/O.
No command prints key material.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import signal
import sys
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

from . import __version__, bench, bundle, crypto, dataimage
from .client import ScwClient
from .errors import (
    ERRORS_BY_CODE,
    EXIT_USAGE,
    AuthError,
    ConflictError,
    ScwError,
    ValidationError,
    exit_code_for,
)
from .identity import SCHEDULER, SCHEDULER_IDENTITY, Credential, service_secret
from .keysvc import AttestationToken, KeyService, KeyServiceClient, KeyServiceServer
from .scheduler import Scheduler, SchedulerClient, SchedulerServer
from .storage import BlobStore
from .wire import RpcServer, parse_endpoint
from .worker import Worker

log = logging.getLogger(__name__)

LEVELS = ("standard", "sev")
ENV_PREFIX = "SCW_"
CONFIG_FIELDS = ("keysvc", "scheduler", "credential", "security_level")


def default_config_path() -> Path:
    base = os.environ.get("XDG_CONFIG_HOME") or Path.home() / ".config"
    return Path(base) / "scw" / "config.json"


@dataclass(frozen=True)
class ClientConfig:
    """Resolved client settings.

    Attributes:
        keysvc: Key-service endpoint (``host:port``).
        scheduler: Scheduler endpoint (``host:port``).
        credential: Path to this user's credential file.
        security_level: Default level for ``package``.
    """

    keysvc: str | None = None
    scheduler: str | None = None
    credential: Path | None = None
    security_level: str = "standard"

    def __post_init__(self) -> None:
        for name in ("keysvc", "scheduler"):
            value = getattr(self, name)
            if value is not None:
                parse_endpoint(value)
        if self.security_level not in LEVELS:
            raise ValidationError(f"security_level must be one of {LEVELS}")

    @classmethod
    def load(cls, flags: Mapping[str, Any] | None = None, env: Mapping[str, str] | None = None,
             path: str | os.PathLike | None = None) -> "ClientConfig":
        """Merge the three sources with precedence flags > env > file.

        ``path`` (or ``SCW_CONFIG``) names the file; a missing default file
        is fine, a missing explicit one is an error.
        """
        flags = dict(flags or {})
        env = os.environ if env is None else env
        explicit = path or env.get(ENV_PREFIX + "CONFIG")
        file_path = Path(explicit) if explicit else default_config_path()
        from_file: dict[str, Any] = {}
        if explicit or file_path.exists():
            try:
                from_file = json.loads(file_path.read_text())
            except json.JSONDecodeError as exc:
                raise ValidationError(f"config file {file_path} is not JSON: {exc}") from None
            if not isinstance(from_file, dict):
                raise ValidationError(f"config file {file_path} must hold an object")
            unknown = set(from_file) - set(CONFIG_FIELDS)
            if unknown:
                raise ValidationError(f"unknown config keys: {sorted(unknown)}")
            cred = from_file.get("credential")
            if cred is not None:
                # relative credential paths are relative to the config file
                from_file["credential"] = str(file_path.parent / cred)
        merged: dict[str, Any] = {}
        for name in CONFIG_FIELDS:
            for source in (flags.get(name), env.get(ENV_PREFIX + name.upper()), from_file.get(name)):
                if source is not None:
                    merged[name] = source
                    break
        if "credential" in merged:
            merged["credential"] = Path(merged["credential"])
        return cls(**merged)

    def require(self, name: str) -> str:
        value = getattr(self, name)
        if value is None:
            raise ValidationError(f"no {name} endpoint configured (--{name} or {ENV_PREFIX}{name.upper()})")
        return value

    def load_credential(self) -> Credential:
        if self.credential is None:
            raise AuthError(f"no credential configured (--credential or {ENV_PREFIX}CREDENTIAL)")
        return read_credential(self.credential)


# -- credential and secret files ------------------------------------------------


def write_private(path: str | os.PathLike, data: bytes) -> Path:
    """Write ``data`` readable by the owner only."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o600)
    with os.fdopen(fd, "wb") as fh:
        fh.write(data)
    os.chmod(path, 0o600)
    return path


def _read_json(path: str | os.PathLike, what: str) -> dict:
    try:
        obj = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{what} file {path} is not JSON: {exc}") from None
    if not isinstance(obj, dict):
        raise ValidationError(f"{what} file {path} must hold an object")
    return obj


def read_credential(path: str | os.PathLike) -> Credential:
    obj = _read_json(path, "credential")
    return Credential.from_dict(obj.get("credential", obj))


def write_credential(path: str | os.PathLike, cred: Credential, token: AttestationToken | None = None) -> Path:
    obj: dict[str, Any] = {"credential": cred.to_dict()}
    if token is not None:
        obj["token"] = token.to_dict()
    return write_private(path, json.dumps(obj, indent=2).encode())


def read_token(path: str | os.PathLike) -> AttestationToken:
    obj = _read_json(path, "credential")
    if "token" not in obj:
        raise AuthError(f"{path} holds no attestation token; register the node first")
    return AttestationToken.from_dict(obj["token"])


# -- output ------------------------------------------------------------------


class Output:
    def __init__(self, as_json: bool, stream=None) -> None:
        self.as_json = as_json
        self.stream = stream or sys.stdout

    def emit(self, obj: Any, text: str | Callable[[], str]) -> None:
        if self.as_json:
            print(json.dumps(obj, indent=2, sort_keys=True, default=str), file=self.stream)
        else:
            print(text() if callable(text) else text, file=self.stream)


def _job_text(view: dict) -> str:
    lines = [f"{view['job_id']}  {view['state']}  {view['task_kind']}  "
             f"{view['node_count']}x{view['procs_per_node']}  {view['security_level']}"]
    for a in view.get("assignments", []):
        lines.append(f"  {a['node_id']}: ranks {a['ranks'][0]}..{a['ranks'][1] - 1}")
    if view.get("failure"):
        f = view["failure"]
        lines.append(f"  failed: {f['reason']}: {f['message']}")
    return "\n".join(lines)


def _task_spec(text: str) -> dict:
    raw = Path(text[1:]).read_text() if text.startswith("@") else text
    try:
        spec = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"task spec is not JSON: {exc}") from None
    if not isinstance(spec, dict):
        raise ValidationError("task spec must be a JSON object")
    return spec


def failure_exit_code(view: dict) -> int:
    """Exit status for a FAILED job, from its failure reason."""
    reason = (view.get("failure") or {}).get("reason", "")
    cls = ERRORS_BY_CODE.get(reason)
    return cls("").exit_code if cls else EXIT_USAGE


# -- client commands -----------------------------------------------------------


class _Session:
    """Lazily connected clients for one command."""

    def __init__(self, config: ClientConfig) -> None:
        self.config = config
        self._keys: KeyServiceClient | None = None
        self._sched: SchedulerClient | None = None
        self._cred: Credential | None = None

    @property
    def credential(self) -> Credential:
        if self._cred is None:
            self._cred = self.config.load_credential()
        return self._cred

    @property
    def keys(self) -> KeyServiceClient:
        if self._keys is None:
            cred = self.credential
            self._keys = KeyServiceClient.connect(self.config.require("keysvc"), cred.identity,
                                                  cred.keysvc)
        return self._keys

    @property
    def scheduler(self) -> SchedulerClient:
        if self._sched is None:
            cred = self.credential
            self._sched = SchedulerClient.connect(self.config.require("scheduler"), cred.identity,
                                                  cred.scheduler)
        return self._sched

    @property
    def client(self) -> ScwClient:
        return ScwClient(self.keys, _Deferred(lambda: self.scheduler))

    def close(self) -> None:
        for c in (self._keys, self._sched):
            if c is not None:
                c.close()


class _Deferred:
    """Connect to a service only when a method is first used."""

    def __init__(self, factory: Callable[[], Any]) -> None:
        self._factory = factory

    def __getattr__(self, name: str) -> Any:
        return getattr(self._factory(), name)


def cmd_keygen(args, s: _Session, out: Output) -> int:
    pair = s.client.keygen()
    if args.pubkey_out:
        Path(args.pubkey_out).write_bytes(pair.public_pem())
    fingerprint = hashlib.sha256(pair.public_pem()).hexdigest()
    out.emit({"key_id": pair.key_id, "fingerprint": fingerprint, "public_key": args.pubkey_out},
             f"{pair.key_id}\nfingerprint sha256:{fingerprint}")
    return 0


def cmd_package(args, s: _Session, out: Output) -> int:
    level = args.level or s.config.security_level
    spec = _task_spec(args.task)
    if args.pubkey:
        pub = crypto.KeyPair(args.key_id, crypto.load_public_key(Path(args.pubkey).read_bytes()))
    else:
        pub = s.client.public_key(args.key_id)
    sealed = bundle.package(args.dir, spec, pub, level, entrypoint=args.entrypoint)
    sealed.write(args.out)
    m = sealed.manifest
    out.emit({"bundle_id": m.bundle_id, "out": str(args.out), "payload_size": m.payload_size,
              "chunks": m.chunk_count, "security_level": m.security_level},
             f"{m.bundle_id} -> {args.out} ({m.payload_size} bytes, {m.chunk_count} chunks, {m.security_level})")
    return 0


def cmd_inspect(args, s: _Session, out: Output) -> int:
    m = bundle.inspect(args.bundle)
    d = m.to_dict()
    d.pop("wrapped_dek", None)
    d["encrypted"] = m.encrypted
    out.emit(d, lambda: "\n".join(f"{k}: {json.dumps(v, sort_keys=True)}" for k, v in sorted(d.items())))
    return 0


def cmd_image_create(args, s: _Session, out: Output) -> int:
    header = s.client.create_image(args.image, args.sectors, args.key_id, args.cipher)
    out.emit({"image": str(args.image), "cipher": header.cipher, "sectors": header.sector_count,
              "sector_size": header.sector_size},
             f"{args.image}: {header.sector_count} x {header.sector_size} bytes, {header.cipher}")
    return 0


def cmd_image_put(args, s: _Session, out: Output) -> int:
    data = Path(args.input).read_bytes()
    with s.client.open_image(args.image) as img:
        img.write_bytes(args.offset, data)
    out.emit({"image": str(args.image), "offset": args.offset, "bytes": len(data)},
             f"wrote {len(data)} bytes at offset {args.offset}")
    return 0


def cmd_image_get(args, s: _Session, out: Output) -> int:
    with s.client.open_image(args.image, writable=False) as img:
        length = args.length if args.length is not None else img.sector_count * img.sector_size - args.offset
        data = img.read_bytes(args.offset, length)
    Path(args.out).write_bytes(data)
    out.emit({"image": str(args.image), "offset": args.offset, "bytes": len(data), "out": str(args.out)},
             f"read {len(data)} bytes to {args.out}")
    return 0


def cmd_image_info(args, s: _Session, out: Output) -> int:
    h = dataimage.read_header(args.image)
    d = {"cipher": h.cipher, "sectors": h.sector_count, "sector_size": h.sector_size, "version": h.version,
         "encrypted": h.encrypted, "key_id": h.wrapped_key.key_id if h.wrapped_key else None}
    out.emit(d, lambda: "\n".join(f"{k}: {v}" for k, v in d.items()))
    return 0


def cmd_submit(args, s: _Session, out: Output) -> int:
    client = s.client
    raw = Path(args.bundle).read_bytes()
    if not args.no_verify:
        # full owner-side verification; catches tampering before anything is uploaded
        bundle.unseal(raw, client._owner_unwrap).wipe()
    images = [client.upload_image(p) for p in args.image]
    job_id = client.submit(raw, images, node_count=args.nodes, procs_per_node=args.procs,
                           run_timeout=args.timeout)
    if not args.wait:
        out.emit({"job_id": job_id}, job_id)
        return 0
    view = client.wait(job_id, timeout=args.wait_timeout)
    out.emit(view, lambda: _job_text(view))
    return 0 if view["state"] == "COMPLETED" else failure_exit_code(view)


def cmd_status(args, s: _Session, out: Output) -> int:
    view = s.client.status(args.job_id)
    out.emit(view, lambda: _job_text(view))
    return 0


def cmd_wait(args, s: _Session, out: Output) -> int:
    view = s.client.wait(args.job_id, timeout=args.timeout)
    out.emit(view, lambda: _job_text(view))
    return 0 if view["state"] == "COMPLETED" else failure_exit_code(view)


def cmd_jobs(args, s: _Session, out: Output) -> int:
    jobs = s.client.jobs()
    out.emit(jobs, lambda: "\n".join(_job_text(v).splitlines()[0] for v in jobs) or "no jobs")
    return 0


def cmd_fetch(args, s: _Session, out: Output) -> int:
    files = s.client.fetch(args.job_id)
    dest = Path(args.out)
    dest.mkdir(parents=True, exist_ok=True)
    listing = []
    for name, data in files.items():
        (dest / name).write_bytes(data)
        listing.append({"name": name, "size": len(data), "sha256": hashlib.sha256(data).hexdigest()})
    out.emit({"job_id": args.job_id, "out": str(dest), "files": listing},
             lambda: "\n".join(f"{f['name']}  {f['size']}" for f in listing))
    return 0


def cmd_bench(args, s: _Session, out: Output) -> int:
    kind = args.experiment
    loader = bench.BenchMatrix if kind == "io" else bench.ComputeMatrix
    matrix = loader.load(args.matrix) if args.matrix else loader()
    progress = (lambda msg: print(msg, file=sys.stderr)) if args.verbose else None
    with bench.bench_cluster(args.workdir, slots=max(matrix.process_counts),
                             fsync=getattr(matrix, "fsync", False)) as cluster:
        run = bench.run_io_matrix if kind == "io" else bench.run_compute_matrix
        report = run(matrix, cluster, progress=progress)
    paths = bench.emit(report, args.out)
    flagged = report.flagged
    out.emit({"files": {k: str(v) for k, v in paths.items()}, "summary": report.summary,
              "failures": report.failures, "flagged": flagged},
             lambda: _bench_text(report, paths))
    return 0


def _bench_text(report: bench.BenchReport, paths: dict) -> str:
    lines = [json.dumps(s, sort_keys=True) for s in report.summary]
    lines += [f"FAILED {json.dumps(f, sort_keys=True)}" for f in report.failures]
    lines.append(f"flagged cells: {len(report.flagged)}")
    lines += [f"wrote {p}" for p in paths.values()]
    return "\n".join(lines)


def cmd_admin_add_user(args, s: _Session, out: Output) -> int:
    cred = s.keys.add_principal(args.name, args.role, args.org)
    write_credential(args.out, cred)
    out.emit({"identity": cred.identity, "credential": str(args.out)}, f"{cred.identity} -> {args.out}")
    return 0


def cmd_admin_register_node(args, s: _Session, out: Output) -> int:
    token, cred = s.keys.register_node(args.name, {"sev": args.sev, "domain": args.domain})
    write_credential(args.out, cred, token)
    out.emit({"identity": cred.identity, "credential": str(args.out), "capabilities": token.capabilities},
             f"{cred.identity} ({'sev' if args.sev else 'standard'}) -> {args.out}")
    return 0


def cmd_admin_audit(args, s: _Session, out: Output) -> int:
    entries = [e.to_dict() for e in s.keys.audit(args.since)]
    out.emit(entries, lambda: "\n".join(
        f"{e['seq']:>6} {e['timestamp']:.3f} {e['actor']} {e['action']} {e['object']} {e['outcome']}"
        for e in entries))
    return 0


# -- parsers -----------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    """Usage errors exit with status 1, matching the documented scheme."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be at least 1")
    return value


def _nonneg(text: str) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError("must not be negative")
    return value


def build_parser() -> argparse.ArgumentParser:
    # SUPPRESS keeps a subcommand from resetting options given before it
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    g = common.add_argument_group("connection")
    g.add_argument("--config", help="JSON config file (default ~/.config/scw/config.json or $SCW_CONFIG)")
    g.add_argument("--keysvc", help="key-service endpoint host:port ($SCW_KEYSVC)")
    g.add_argument("--scheduler", help="scheduler endpoint host:port ($SCW_SCHEDULER)")
    g.add_argument("--credential", help="credential file ($SCW_CREDENTIAL)")
    g.add_argument("--json", action="store_true", help="machine-readable output")
    g.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    p = _Parser(prog="scw", description="Secure workflow client.", parents=[common])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name: str, func, help: str, parent=sub) -> argparse.ArgumentParser:
        sp = parent.add_parser(name, help=help, description=help, parents=[common])
        sp.set_defaults(func=func)
        return sp

    sp = add("keygen", cmd_keygen, "Create a key pair in the key service; prints its key id.")
    sp.add_argument("--pubkey-out", help="also write the public key (PEM) here")

    sp = add("package", cmd_package, "Archive and seal a workflow directory into a bundle.")
    sp.add_argument("dir")
    sp.add_argument("--key-id", required=True)
    sp.add_argument("--level", choices=LEVELS, help="security level ($SCW_SECURITY_LEVEL, default standard)")
    sp.add_argument("--task", default='{"kind": "echo"}', help="task spec as JSON or @file")
    sp.add_argument("--entrypoint")
    sp.add_argument("--pubkey", help="seal offline against this public key (PEM) instead of fetching it")
    sp.add_argument("--out", "-o", required=True)

    sp = add("inspect", cmd_inspect, "Show a bundle's manifest without decrypting it.")
    sp.add_argument("bundle")

    img = sub.add_parser("image", help="Encrypted data images.", description="Encrypted data images.")
    isub = img.add_subparsers(dest="image_command", required=True, parser_class=_Parser)
    sp = add("create", cmd_image_create, "Create an image of zero sectors.", isub)
    sp.add_argument("image")
    sp.add_argument("--sectors", type=_positive, required=True)
    sp.add_argument("--key-id", required=True)
    sp.add_argument("--cipher", default="AES-XTS-128", choices=["AES-XTS-128", "AES-XTS-256"])
    sp = add("put", cmd_image_put, "Write a file's bytes into an image at a byte offset.", isub)
    sp.add_argument("image")
    sp.add_argument("input")
    sp.add_argument("--offset", type=_nonneg, default=0)
    sp = add("get", cmd_image_get, "Read bytes from an image into a file.", isub)
    sp.add_argument("image")
    sp.add_argument("--offset", type=_nonneg, default=0)
    sp.add_argument("--length", type=_nonneg)
    sp.add_argument("--out", "-o", required=True)
    sp = add("info", cmd_image_info, "Show an image header.", isub)
    sp.add_argument("image")

    sp = add("submit", cmd_submit, "Verify and submit a bundle; prints the job id.")
    sp.add_argument("bundle")
    sp.add_argument("--image", action="append", default=[], help="data image to attach (repeatable)")
    sp.add_argument("--nodes", type=_positive, default=1)
    sp.add_argument("--procs", type=_positive, default=1, help="processes per node")
    sp.add_argument("--timeout", type=float, help="run timeout in seconds")
    sp.add_argument("--wait", action="store_true", help="block until the job finishes")
    sp.add_argument("--wait-timeout", type=float, default=300.0)
    sp.add_argument("--no-verify", action="store_true", help="skip the local integrity check")

    sp = add("status", cmd_status, "Show one job.")
    sp.add_argument("job_id")
    sp = add("wait", cmd_wait, "Block until a job finishes.")
    sp.add_argument("job_id")
    sp.add_argument("--timeout", type=float, default=300.0)
    add("jobs", cmd_jobs, "List your jobs.")
    sp = add("fetch", cmd_fetch, "Download and decrypt a completed job's outputs.")
    sp.add_argument("job_id")
    sp.add_argument("--out", "-o", required=True)

    sp = add("bench", cmd_bench, "Run a benchmark matrix on an in-process cluster.")
    sp.add_argument("experiment", choices=["io", "compute"])
    sp.add_argument("--matrix", help="matrix JSON file (defaults built in)")
    sp.add_argument("--out", "-o", required=True)
    sp.add_argument("--workdir", help="cluster state directory (temporary by default)")

    adm = sub.add_parser("admin", help="Operator commands.", description="Operator commands.")
    asub = adm.add_subparsers(dest="admin_command", required=True, parser_class=_Parser)
    sp = add("add-user", cmd_admin_add_user, "Register a principal and write its credential file.", asub)
    sp.add_argument("name")
    sp.add_argument("--org", required=True)
    sp.add_argument("--role", choices=["user", "operator"], default="user")
    sp.add_argument("--out", "-o", required=True)
    sp = add("register-node", cmd_admin_register_node, "Register a node; writes credential and token.", asub)
    sp.add_argument("name")
    sp.add_argument("--sev", action="store_true")
    sp.add_argument("--domain", default="orgA")
    sp.add_argument("--out", "-o", required=True)
    sp = add("audit", cmd_admin_audit, "Print the key-service audit log.", asub)
    sp.add_argument("--since", type=_nonneg, default=0)
    return p


def _report_error(exc: BaseException, as_json: bool, prog: str) -> int:
    code = exit_code_for(exc)
    if isinstance(exc, ScwError):
        payload = {"code": exc.code, "message": exc.message}
    elif isinstance(exc, OSError):
        payload = {"code": "io", "message": f"{exc.strerror or exc}: {exc.filename}" if exc.filename else str(exc)}
    else:
        payload = {"code": "error", "message": str(exc)}
    if as_json:
        print(json.dumps({"error": payload, "exit_code": code}), file=sys.stderr)
    else:
        print(f"{prog}: {payload['code']}: {payload['message']}", file=sys.stderr)
    return code


def _setup_logging(verbose: bool) -> None:
    logging.basicConfig(level=logging.DEBUG if verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def main(argv: Sequence[str] | None = None) -> int:
    """``scw`` entry point; returns the exit status."""
    args = build_parser().parse_args(argv)
    for name in ("config", "keysvc", "scheduler", "credential"):
        setattr(args, name, getattr(args, name, None))
    args.json = getattr(args, "json", False)
    args.verbose = getattr(args, "verbose", False)
    _setup_logging(args.verbose)
    session = None
    try:
        config = ClientConfig.load({"keysvc": args.keysvc, "scheduler": args.scheduler,
                                    "credential": args.credential}, path=args.config)
        session = _Session(config)
        return args.func(args, session, Output(args.json))
    except (ScwError, OSError) as exc:
        return _report_error(exc, args.json, "scw")
    finally:
        if session is not None:
            session.close()


# -- daemons -----------------------------------------------------------------


CONTROL_FILE = "control.key"
OPERATOR_FILE = "operator.cred"
SCHEDULER_SECRET_FILE = "scheduler.secret"
STORAGE_KEY_FILE = "storage-operator.key"


def _serve(stop: threading.Event, ready: Callable[[], None] | None = None) -> None:
    def handler(signum, frame):
        stop.set()

    if threading.current_thread() is threading.main_thread():
        signal.signal(signal.SIGTERM, handler)
        signal.signal(signal.SIGINT, handler)
    if ready:
        ready()
    while not stop.wait(0.5):
        pass


def _announce(what: str, endpoint: str) -> None:
    print(f"{what} listening on {endpoint}", flush=True)


def load_or_create_control(state: Path) -> bytes:
    path = state / CONTROL_FILE
    if path.exists():
        secret = path.read_bytes()
        if len(secret) < 16:
            raise ValidationError(f"{path} is too short to be a control secret")
        return secret
    secret = os.urandom(32)
    write_private(path, secret)
    return secret


def run_keysvc(args, stop: threading.Event) -> int:
    state = Path(args.state)
    control = load_or_create_control(state)
    service = KeyService(control, state / "service")
    try:
        cred = service.bootstrap_operator(args.operator, args.org)
        write_credential(state / OPERATOR_FILE, cred)
        log.info("bootstrapped operator %s; credential in %s", cred.identity, state / OPERATOR_FILE)
    except ConflictError:
        pass
    secret = {"identity": SCHEDULER_IDENTITY, "keysvc": service.scheduler_credential().hex(),
              "service_secret": service_secret(control, SCHEDULER).hex()}
    write_private(state / SCHEDULER_SECRET_FILE, json.dumps(secret).encode())
    host, port = parse_endpoint(args.listen)
    server = RpcServer(KeyServiceServer(service).dispatch, service.credential_for, host, port).start()
    try:
        _serve(stop, lambda: _announce("keysvc", server.endpoint))
    finally:
        server.stop()
    return 0


def run_scheduler(args, stop: threading.Event) -> int:
    secret = _read_json(args.secret, "scheduler secret")
    try:
        ident, psk, svc = secret["identity"], bytes.fromhex(secret["keysvc"]), bytes.fromhex(secret["service_secret"])
    except (KeyError, ValueError, TypeError) as exc:
        raise AuthError(f"malformed scheduler secret file: {exc}") from None
    state = Path(args.state)
    keys = KeyServiceClient.connect(args.keysvc, ident, psk)
    sched = Scheduler(keys, BlobStore(state / "blobs"), state, service_secret=svc,
                      heartbeat_interval=args.heartbeat, ack_timeout=args.ack_timeout,
                      run_timeout=args.run_timeout, fsync=True)
    host, port = parse_endpoint(args.listen)
    server = RpcServer(SchedulerServer(sched).dispatch, sched.credential_for, host, port).start()
    sched.start()
    try:
        _serve(stop, lambda: _announce("scheduler", server.endpoint))
    finally:
        sched.stop()
        server.stop()
        keys.close()
    return 0


def load_or_create_storage_key(root: Path) -> crypto.KeyPair:
    path = root / STORAGE_KEY_FILE
    if path.exists():
        obj = _read_json(path, "storage key")
        private = crypto.load_private_key(bytes.fromhex(obj["private"]))
        return crypto.KeyPair(obj["key_id"], private.public_key(), private)
    pair = crypto.generate_keypair()
    write_private(path, json.dumps({"key_id": pair.key_id,
                                    "private": crypto.serialize_private_key(pair.private_key).hex()}).encode())
    return pair


def run_worker(args, stop: threading.Event) -> int:
    cred = read_credential(args.credential)
    token = read_token(args.credential)
    if bool(token.capabilities.get("sev")) != args.sev:
        raise AuthError(f"--sev={'on' if args.sev else 'off'} disagrees with the node's attested capabilities")
    store = None
    if args.storage:
        root = Path(args.storage)
        store = BlobStore(root, load_or_create_storage_key(root))
    sched = SchedulerClient.connect(args.scheduler, cred.identity, cred.scheduler)
    keys = KeyServiceClient.connect(args.keysvc, cred.identity, cred.keysvc)
    worker = Worker(token.node_id, sched, keys, token, slots=args.slots, store=store,
                    allow_spill=args.allow_spill, heartbeat_interval=args.heartbeat)
    worker.start()
    try:
        _serve(stop, lambda: print(f"worker {token.node_id} joined {args.scheduler}", flush=True))
    finally:
        worker.stop()
        sched.close()
        keys.close()
        if store is not None:
            store.close()
    return 0


def build_daemon_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="scwd", description="Secure workflow daemons.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="daemon", required=True, parser_class=_Parser)

    sp = sub.add_parser("keysvc", help="Run the key service.", description="Run the key service.")
    sp.add_argument("--listen", default="127.0.0.1:7401", help="host:port (port 0 picks one)")
    sp.add_argument("--state", required=True, help="state directory (control secret, keys, audit log)")
    sp.add_argument("--operator", default="ops", help="operator bootstrapped on first start")
    sp.add_argument("--org", default="infra")
    sp.set_defaults(run=run_keysvc)

    sp = sub.add_parser("scheduler", help="Run the scheduler.", description="Run the scheduler.")
    sp.add_argument("--listen", default="127.0.0.1:7402")
    sp.add_argument("--keysvc", required=True)
    sp.add_argument("--secret", required=True, help="scheduler secret file written by the key service")
    sp.add_argument("--state", required=True)
    sp.add_argument("--heartbeat", type=float, default=5.0)
    sp.add_argument("--ack-timeout", type=float, default=10.0)
    sp.add_argument("--run-timeout", type=float, default=300.0)
    sp.set_defaults(run=run_scheduler)

    sp = sub.add_parser("worker", help="Run a worker node agent.", description="Run a worker node agent.")
    sp.add_argument("--scheduler", required=True)
    sp.add_argument("--keysvc", required=True)
    sp.add_argument("--slots", type=_positive, default=1)
    sp.add_argument("--sev", action="store_true", help="must match the attested capability")
    sp.add_argument("--credential", required=True, help="node credential file from 'scw admin register-node'")
    sp.add_argument("--storage", help="blob store root for io_bench storage targets")
    sp.add_argument("--allow-spill", action="store_true")
    sp.add_argument("--heartbeat", type=float, default=5.0)
    sp.set_defaults(run=run_worker)
    return p


def daemon_main(argv: Sequence[str] | None = None, stop: threading.Event | None = None) -> int:
    """``scwd`` entry point; runs until SIGTERM/SIGINT or ``stop`` is set."""
    args = build_daemon_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    for name in ("keysvc", "scheduler", "listen"):
        if getattr(args, name, None):
            try:
                parse_endpoint(getattr(args, name))
            except ScwError as exc:
                return _report_error(exc, False, "scwd")
    try:
        return args.run(args, stop or threading.Event())
    except (ScwError, OSError) as exc:
        return _report_error(exc, False, "scwd")


# -- flag reference ----------------------------------------------------------


def flag_reference() -> str:
    """Markdown reference for every command, built from the parsers."""
    parts = ["# Command reference", ""]

    def walk(parser: argparse.ArgumentParser, title: str) -> None:
        parser.formatter_class = lambda prog: argparse.HelpFormatter(prog, width=100)
        parts.extend([f"## {title}", "", "```", parser.format_help().rstrip(), "```", ""])
        for action in parser._actions:
            if isinstance(action, argparse._SubParsersAction):
                for name, child in action.choices.items():
                    walk(child, f"{title} {name}")

    walk(build_parser(), "scw")
    walk(build_daemon_parser(), "scwd")
    return "\n".join(parts)


if __name__ == "__main__":
    sys.exit(main())
