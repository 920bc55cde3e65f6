"""Typed task kernels run by workers, one call per rank.

Workers never execute arbitrary commands. A bundle's ``task_spec`` names one
of the kernels below and supplies its parameters. Every kernel sees its rank,
the world size and the verified workflow tree, and returns the bytes that
become ``rank-NNNNN.out`` in the sealed result.
"""

from __future__ import annotations

import hashlib
import json
import math
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Protocol

import numpy as np

from .bundle import Tree, VerifiedWorkflow, canonical_json, tree_from_mapping
from .errors import ScwError, TaskError, ValidationError

MiB = 1 << 20
TASK_KINDS = ("echo", "transform", "compute_bench", "io_bench")
COLLECTIVE_TIMEOUT = 600.0


def result_name(rank: int) -> str:
    return f"rank-{rank:05d}.out"


def rank_slice(length: int, rank: int, world_size: int) -> tuple[int, int]:
    """Contiguous share of ``length`` items owned by ``rank``."""
    return length * rank // world_size, length * (rank + 1) // world_size


# ---------------------------------------------------------------------------
# parameter schemas

def _int(params: dict, name: str, default: int | None = None, minimum: int | None = None) -> int:
    value = params.get(name, default)
    if isinstance(value, bool) or not isinstance(value, int):
        raise ValidationError(f"parameter {name!r} must be an integer")
    if minimum is not None and value < minimum:
        raise ValidationError(f"parameter {name!r} must be >= {minimum}")
    return value


def _check_keys(kind: str, params: dict, allowed: set[str]) -> None:
    extra = set(params) - allowed
    if extra:
        raise ValidationError(f"unknown {kind} parameters: {sorted(extra)}")


def _input_ref(params: dict) -> str:
    ref = params.get("input", "input")
    if not isinstance(ref, str) or not ref:
        raise ValidationError("parameter 'input' must be a non-empty string")
    return ref


def check_target(target: Any) -> Any:
    """Validate an io_bench target: ``"scratch"`` or a storage tier selector."""
    if target == "scratch":
        return target
    if isinstance(target, dict):
        tier = target.get("tier")
        if tier == "local" and set(target) == {"tier"}:
            return {"tier": "local"}
        if tier == "secure" and set(target) == {"tier", "domain"} and isinstance(target["domain"], str):
            return {"tier": "secure", "domain": target["domain"]}
    raise ValidationError(f"invalid io_bench target {target!r}")


def validate(task_spec: Mapping) -> dict:
    """Normalise a task spec, filling defaults. Raises ValidationError."""
    if not isinstance(task_spec, Mapping):
        raise ValidationError("task spec must be a mapping")
    kind = task_spec.get("kind")
    params = task_spec.get("params", {})
    if kind not in TASK_KINDS:
        raise ValidationError(f"unknown task kind {kind!r}; expected one of {TASK_KINDS}")
    if not isinstance(params, Mapping):
        raise ValidationError("task params must be a mapping")
    params = dict(params)
    if kind == "echo":
        _check_keys(kind, params, {"input"})
        out = {"input": _input_ref(params)}
    elif kind == "transform":
        _check_keys(kind, params, {"input", "amount"})
        out = {"input": _input_ref(params), "amount": _int(params, "amount", 1) % 256}
    elif kind == "compute_bench":
        _check_keys(kind, params, {"matrix_dim", "iterations", "seed", "factors", "reg"})
        reg = params.get("reg", 1e-3)
        if isinstance(reg, bool) or not isinstance(reg, (int, float)) or not reg > 0:
            raise ValidationError("parameter 'reg' must be a positive number")
        out = {
            "matrix_dim": _int(params, "matrix_dim", 64, 1),
            "iterations": _int(params, "iterations", 10, 0),
            "seed": _int(params, "seed", 42, 0),
            "factors": _int(params, "factors", 8, 1),
            "reg": float(reg),
        }
    else:
        _check_keys(kind, params, {"block_size", "total_bytes", "target", "fsync", "seed"})
        fsync = params.get("fsync", True)
        if not isinstance(fsync, bool):
            raise ValidationError("parameter 'fsync' must be a boolean")
        out = {
            "block_size": _int(params, "block_size", MiB, 1),
            "total_bytes": _int(params, "total_bytes", 0, 0),
            "target": check_target(params.get("target", "scratch")),
            "fsync": fsync,
            "seed": _int(params, "seed", 0, 0),
        }
    return {"kind": kind, "params": out}


# ---------------------------------------------------------------------------
# collectives

class CollectiveAborted(TaskError):
    """A peer rank failed, so this rank's collective cannot complete."""


class Collective(Protocol):
    def allgather(self, rank: int, tag: str, payload: bytes) -> list[bytes]: ...

    def abort(self, exc: BaseException) -> None: ...


class GroupCollective:
    """Allgather among a node's local ranks, optionally bridged to other nodes.

    Local ranks rendezvous in-process. When every local rank has contributed
    to a tag, one of them calls ``exchange(tag, {rank: payload})``, which must
    return the contributions of all ``world_size`` ranks.

    Args:
        local_ranks: Ranks executing in this process.
        world_size: Total ranks in the job.
        exchange: Cross-node exchange; ``None`` when the local ranks are the
            whole world.
        timeout: Seconds to wait for peers before failing the rank.
    """

    def __init__(
        self,
        local_ranks: list[int],
        world_size: int,
        exchange: Callable[[str, dict[int, bytes]], dict[int, bytes]] | None = None,
        timeout: float = COLLECTIVE_TIMEOUT,
    ) -> None:
        if exchange is None and sorted(local_ranks) != list(range(world_size)):
            raise ValidationError("a purely local collective must hold every rank")
        self.local_ranks = set(local_ranks)
        self.world_size = world_size
        self.exchange = exchange
        self.timeout = timeout
        self._cond = threading.Condition()
        self._pending: dict[str, dict[int, bytes]] = {}
        self._done: dict[str, list[bytes]] = {}
        self._readers: dict[str, int] = {}
        self._error: BaseException | None = None

    def abort(self, exc: BaseException) -> None:
        with self._cond:
            if self._error is None:
                self._error = exc
            self._cond.notify_all()

    def _check(self) -> None:
        if self._error is not None:
            raise CollectiveAborted(f"collective aborted: {self._error}")

    def allgather(self, rank: int, tag: str, payload: bytes) -> list[bytes]:
        if rank not in self.local_ranks:
            raise ValidationError(f"rank {rank} is not local to this collective")
        with self._cond:
            self._check()
            slot = self._pending.setdefault(tag, {})
            if rank in slot:
                raise ValidationError(f"rank {rank} already contributed to {tag!r}")
            slot[rank] = bytes(payload)
            leader = len(slot) == len(self.local_ranks)
        if leader:
            try:
                if self.exchange is None:
                    full = slot
                else:
                    full = self.exchange(tag, dict(slot))
                if sorted(full) != list(range(self.world_size)):
                    raise TaskError(f"allgather {tag!r} returned ranks {sorted(full)}")
                result = [full[r] for r in range(self.world_size)]
            except BaseException as exc:
                self.abort(exc)
                raise
            with self._cond:
                del self._pending[tag]
                self._done[tag] = result
                self._readers[tag] = 0
                self._cond.notify_all()
        with self._cond:
            deadline = time.monotonic() + self.timeout
            while tag not in self._done:
                self._check()
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    raise TaskError(f"allgather {tag!r} timed out")
                self._cond.wait(remaining)
            result = self._done[tag]
            self._readers[tag] += 1
            if self._readers[tag] == len(self.local_ranks):
                del self._done[tag], self._readers[tag]
            return list(result)


# ---------------------------------------------------------------------------
# I/O sinks

class Sink(Protocol):
    def write(self, data: bytes) -> int: ...

    def close(self) -> None: ...

    def discard(self) -> None: ...


class ScratchSink:
    """Volatile in-memory sink."""

    def __init__(self) -> None:
        self.buf = bytearray()

    def write(self, data: bytes) -> int:
        self.buf += data
        return len(data)

    def close(self) -> None:
        pass

    def discard(self) -> None:
        self.buf[:] = bytes(len(self.buf))
        self.buf.clear()


def scratch_only(target: Any, rank: int, fsync: bool) -> Sink:
    if target != "scratch":
        raise TaskError(f"target {target!r} is not available here", rank=rank)
    return ScratchSink()


SinkFactory = Callable[[Any, int, bool], Sink]


# ---------------------------------------------------------------------------
# execution

@dataclass
class RankContext:
    rank: int
    world_size: int
    workflow: VerifiedWorkflow
    images: list[bytes] = field(default_factory=list)
    collective: Collective | None = None
    open_sink: SinkFactory = scratch_only


@dataclass
class RankResult:
    rank: int
    output: bytes
    seconds: float = 0.0
    bytes_read: int = 0
    bytes_written: int = 0
    samples: list[float] = field(default_factory=list)

    def report(self) -> dict:
        """Timing and accounting for the scheduler; contains no payload bytes."""
        return {
            "rank": self.rank,
            "seconds": self.seconds,
            "bytes_read": self.bytes_read,
            "bytes_written": self.bytes_written,
            "samples": list(self.samples),
        }


def _read_input(ctx: RankContext, ref: str) -> bytes:
    if ref.startswith("image:"):
        try:
            return ctx.images[int(ref[6:])]
        except (ValueError, IndexError):
            raise TaskError(f"no data image {ref[6:]!r} attached to this job", rank=ctx.rank) from None
    try:
        return ctx.workflow.read(ref)
    except KeyError:
        raise TaskError(f"input {ref!r} not found in workflow", rank=ctx.rank) from None


def _echo(ctx: RankContext, p: dict) -> RankResult:
    data = _read_input(ctx, p["input"])
    lo, hi = rank_slice(len(data), ctx.rank, ctx.world_size)
    return RankResult(ctx.rank, bytes(data[lo:hi]), bytes_read=hi - lo)


def _transform(ctx: RankContext, p: dict) -> RankResult:
    data = _read_input(ctx, p["input"])
    lo, hi = rank_slice(len(data), ctx.rank, ctx.world_size)
    arr = np.frombuffer(data, dtype=np.uint8, count=hi - lo, offset=lo)
    out = (arr + np.uint8(p["amount"])).tobytes()  # wraps mod 256
    return RankResult(ctx.rank, out, bytes_read=hi - lo)


# compute_bench: alternating least squares on a seeded synthetic matrix

def als_problem(dim: int, factors: int, seed: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Synthetic low-rank-plus-noise matrix and initial factors."""
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((dim, factors))
    b = rng.standard_normal((dim, factors))
    ratings = a @ b.T / math.sqrt(factors) + 0.1 * rng.standard_normal((dim, dim))
    u = 0.1 * rng.standard_normal((dim, factors))
    v = 0.1 * rng.standard_normal((dim, factors))
    return ratings, u, v


def _solve_rows(target: np.ndarray, fixed: np.ndarray, rows: range, reg: float) -> np.ndarray:
    gram = fixed.T @ fixed + reg * np.eye(fixed.shape[1])
    out = np.empty((len(rows), fixed.shape[1]))
    # one solve per row: identical arithmetic whatever the partition
    for n, i in enumerate(rows):
        out[n] = np.linalg.solve(gram, fixed.T @ target[i])
    return out


def _gather_rows(ctx: RankContext, tag: str, mine: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if ctx.world_size == 1:
        return mine
    if ctx.collective is None:
        raise TaskError("multi-rank compute needs a collective", rank=ctx.rank)
    parts = ctx.collective.allgather(ctx.rank, tag, mine.astype("<f8").tobytes())
    full = np.frombuffer(b"".join(parts), dtype="<f8")
    if full.size != shape[0] * shape[1]:
        raise TaskError(f"allgather {tag!r} returned {full.size} values", rank=ctx.rank)
    return full.reshape(shape).copy()


def als_digest(u: np.ndarray, v: np.ndarray) -> str:
    return hashlib.sha256(u.astype("<f8").tobytes() + v.astype("<f8").tobytes()).hexdigest()


def _compute_bench(ctx: RankContext, p: dict) -> RankResult:
    dim, k, reg = p["matrix_dim"], p["factors"], p["reg"]
    ratings, u, v = als_problem(dim, k, p["seed"])
    lo, hi = rank_slice(dim, ctx.rank, ctx.world_size)
    rows = range(lo, hi)
    for it in range(p["iterations"]):
        u = _gather_rows(ctx, f"als/{it}/u", _solve_rows(ratings, v, rows, reg), (dim, k))
        v = _gather_rows(ctx, f"als/{it}/v", _solve_rows(ratings.T, u, rows, reg), (dim, k))
    rmse = float(np.sqrt(np.mean((ratings - u @ v.T) ** 2)))
    body = {"kind": "compute_bench", "digest": als_digest(u, v), "rmse": repr(rmse),
            "matrix_dim": dim, "iterations": p["iterations"]}
    return RankResult(ctx.rank, canonical_json(body))


def _io_bench(ctx: RankContext, p: dict) -> RankResult:
    total, bs = p["total_bytes"], p["block_size"]
    block = np.random.default_rng([p["seed"], ctx.rank]).bytes(min(bs, total)) if total else b""
    sink = ctx.open_sink(p["target"], ctx.rank, p["fsync"])
    samples: list[float] = []
    written = 0
    start = time.perf_counter()
    try:
        for off in range(0, total, bs):
            piece = block[: min(bs, total - off)]
            t0 = time.perf_counter()
            written += sink.write(piece)
            dt = time.perf_counter() - t0
            samples.append(len(piece) / MiB / dt if dt > 0 else math.inf)
        sink.close()
    finally:
        sink.discard()
    seconds = time.perf_counter() - start
    if written != total:
        raise TaskError(f"wrote {written} of {total} bytes", rank=ctx.rank)
    body = {"kind": "io_bench", "bytes_written": written, "blocks": len(samples),
            "target": p["target"]}
    return RankResult(ctx.rank, canonical_json(body), seconds=seconds,
                      bytes_written=written, samples=samples)


KERNELS: dict[str, Callable[[RankContext, dict], RankResult]] = {
    "echo": _echo,
    "transform": _transform,
    "compute_bench": _compute_bench,
    "io_bench": _io_bench,
}


def run_rank(ctx: RankContext, task_spec: Mapping) -> RankResult:
    """Run one rank of a validated task; failures surface as TaskError with the rank."""
    spec = validate(task_spec)
    start = time.perf_counter()
    try:
        result = KERNELS[spec["kind"]](ctx, spec["params"])
    except ScwError as exc:
        if "rank" not in exc.details and isinstance(exc, TaskError):
            exc.details["rank"] = ctx.rank
        raise
    except Exception as exc:  # noqa: BLE001 - kernel bugs become task failures
        raise TaskError(f"{spec['kind']} failed on rank {ctx.rank}: {exc}", rank=ctx.rank) from exc
    if not result.seconds:
        result.seconds = time.perf_counter() - start
    return result


def run_ranks(
    ranks: list[int],
    world_size: int,
    workflow: VerifiedWorkflow,
    task_spec: Mapping,
    *,
    images: list[bytes] | None = None,
    collective: Collective | None = None,
    open_sink: SinkFactory = scratch_only,
) -> list[RankResult]:
    """Run ``ranks`` concurrently, one thread per rank, returning results in rank order."""
    spec = validate(task_spec)
    if collective is None:
        collective = GroupCollective(ranks, world_size)
    results: dict[int, RankResult] = {}
    failures: list[BaseException] = []

    def one(rank: int) -> None:
        ctx = RankContext(rank, world_size, workflow, images or [], collective, open_sink)
        try:
            results[rank] = run_rank(ctx, spec)
        except BaseException as exc:  # noqa: BLE001
            failures.append(exc)
            collective.abort(exc)

    threads = [threading.Thread(target=one, args=(r,), name=f"rank-{r}") for r in ranks]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if failures:
        # prefer the root cause over the peers' "collective aborted" errors
        primary = [f for f in failures if not isinstance(f, CollectiveAborted)]
        raise (primary or failures)[0]
    return [results[r] for r in ranks]


def run_local(workflow: VerifiedWorkflow | Tree | Mapping[str, bytes], task_spec: Mapping,
              world_size: int = 1, *, images: list[bytes] | None = None) -> dict[str, bytes]:
    """Plaintext reference run of a task in this process.

    Returns the same ``rank-NNNNN.out`` mapping a fetched job result contains.
    """
    if not isinstance(workflow, VerifiedWorkflow):
        tree = workflow if all(hasattr(e, "data") for e in workflow.values()) else tree_from_mapping(workflow)
        workflow = VerifiedWorkflow(None, tree)
    results = run_ranks(list(range(world_size)), world_size, workflow, task_spec, images=images)
    return {result_name(r.rank): r.output for r in results}


def load_spec(text: str) -> dict:
    """Parse a JSON task spec (CLI helper)."""
    try:
        return validate(json.loads(text))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"task spec is not valid JSON: {exc}") from None
