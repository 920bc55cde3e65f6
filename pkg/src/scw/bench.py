"""Benchmark harness: storage bandwidth and compute wall-clock, encrypted vs not.

Both experiments run real jobs on an in-process cluster (see
:mod:`scw.cluster`) so every measured run goes through the same
packaging, scheduling, unsealing and sealing as production jobs.

* ``io``: IOR-style writes of ``bytes_per_proc`` per rank in ``block_size``
  blocks to three targets: the plain local tier, an encrypted secure-tier
  domain and an unencrypted secure-tier domain.
* ``compute``: the ALS kernel submitted once as an encrypted bundle and once
  through the unencrypted control path, over several process counts on one
  node.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import platform
import statistics
import tempfile
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Iterable

from . import __version__, tasks
from .bundle import tree_from_mapping
from .errors import ScwError, ValidationError

KiB, MiB = 1 << 10, 1 << 20
TARGETS = ("plain_local", "secure_encrypted", "secure_unencrypted")
CSV_COLUMNS = ("experiment", "target", "block_size", "procs", "encrypted", "rep",
               "metric_name", "metric_value", "timestamp")
IO_THRESHOLD = 0.15
COMPUTE_THRESHOLD = 0.10
ENC_DOMAIN, PLAIN_DOMAIN = "bench-enc", "bench-plain"
AGGREGATES = ("mean", "min", "max")


def _positive_ints(values: Any, name: str) -> list[int]:
    if not isinstance(values, (list, tuple)) or not values:
        raise ValidationError(f"{name} must be a non-empty list")
    out = []
    for v in values:
        if isinstance(v, bool) or not isinstance(v, int) or v < 1:
            raise ValidationError(f"{name} entries must be positive integers")
        out.append(v)
    return out


@dataclass
class BenchMatrix:
    """Cells of the I/O experiment.

    Each of ``targets × block_sizes × process_counts`` is run ``repetitions``
    times; every rank writes ``bytes_per_proc`` bytes.
    """

    block_sizes: list[int] = field(default_factory=lambda: [64 * KiB, 256 * KiB, MiB, 4 * MiB, 16 * MiB])
    process_counts: list[int] = field(default_factory=lambda: [1, 10])
    targets: list[str] = field(default_factory=lambda: list(TARGETS))
    repetitions: int = 5
    bytes_per_proc: int = 16 * MiB
    fsync: bool = True

    def __post_init__(self) -> None:
        self.block_sizes = _positive_ints(self.block_sizes, "block_sizes")
        self.process_counts = _positive_ints(self.process_counts, "process_counts")
        if not self.targets or any(t not in TARGETS for t in self.targets):
            raise ValidationError(f"targets must be drawn from {TARGETS}")
        if isinstance(self.repetitions, bool) or not isinstance(self.repetitions, int) or self.repetitions < 1:
            raise ValidationError("repetitions must be a positive integer")
        if isinstance(self.bytes_per_proc, bool) or not isinstance(self.bytes_per_proc, int) \
                or self.bytes_per_proc < 0:
            raise ValidationError("bytes_per_proc must be a non-negative integer")
        if not isinstance(self.fsync, bool):
            raise ValidationError("fsync must be a boolean")

    @classmethod
    def from_dict(cls, obj: dict) -> "BenchMatrix":
        if not isinstance(obj, dict):
            raise ValidationError("bench matrix must be a JSON object")
        unknown = set(obj) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ValidationError(f"unknown bench matrix fields: {sorted(unknown)}")
        return cls(**obj)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "BenchMatrix":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise ValidationError(f"bench matrix is not valid JSON: {exc}") from None

    def cells(self) -> list[tuple[str, int, int]]:
        return [(t, b, p) for t in self.targets for b in self.block_sizes for p in self.process_counts]


@dataclass
class ComputeMatrix:
    """Cells of the compute experiment (one node, both bundle paths)."""

    process_counts: list[int] = field(default_factory=lambda: [1, 2, 4, 8, 10])
    repetitions: int = 3
    matrix_dim: int = 256
    iterations: int | None = None  # None: calibrate to ``min_seconds``
    min_seconds: float = 5.0
    seed: int = 42

    def __post_init__(self) -> None:
        self.process_counts = _positive_ints(self.process_counts, "process_counts")
        _positive_ints([self.repetitions, self.matrix_dim], "repetitions/matrix_dim")
        if self.iterations is not None:
            _positive_ints([self.iterations], "iterations")
        if not isinstance(self.min_seconds, (int, float)) or self.min_seconds < 0:
            raise ValidationError("min_seconds must be a non-negative number")

    @classmethod
    def from_dict(cls, obj: dict) -> "ComputeMatrix":
        if not isinstance(obj, dict):
            raise ValidationError("compute matrix must be a JSON object")
        unknown = set(obj) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ValidationError(f"unknown compute matrix fields: {sorted(unknown)}")
        return cls(**obj)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "ComputeMatrix":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise ValidationError(f"compute matrix is not valid JSON: {exc}") from None


@dataclass(frozen=True)
class BenchRow:
    experiment: str
    target: str
    block_size: int
    procs: int
    encrypted: bool
    rep: str  # repetition index, or an aggregate name
    metric_name: str
    metric_value: float
    timestamp: str

    def csv_values(self) -> list[str]:
        return [self.experiment, self.target, str(self.block_size), str(self.procs),
                "true" if self.encrypted else "false", self.rep, self.metric_name,
                repr(float(self.metric_value)), self.timestamp]

    @classmethod
    def from_csv(cls, rec: dict) -> "BenchRow":
        if rec.get("encrypted") not in ("true", "false"):
            raise ValidationError(f"bad encrypted flag {rec.get('encrypted')!r}")
        return cls(rec["experiment"], rec["target"], int(rec["block_size"]), int(rec["procs"]),
                   rec["encrypted"] == "true", rec["rep"], rec["metric_name"], float(rec["metric_value"]),
                   rec["timestamp"])


@dataclass
class BenchReport:
    """Measured rows plus per-cell comparison of the encrypted and plain paths."""

    experiment: str
    rows: list[BenchRow] = field(default_factory=list)
    environment: dict = field(default_factory=dict)
    failures: list[dict] = field(default_factory=list)
    summary: list[dict] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def measurements(self, metric: str) -> list[BenchRow]:
        return [r for r in self.rows if r.metric_name == metric and r.rep.isdigit()]

    def aggregate(self, target: str, block_size: int, procs: int, metric: str, stat: str = "mean") -> float | None:
        for r in self.rows:
            if (r.target, r.block_size, r.procs, r.metric_name, r.rep) == (target, block_size, procs, metric, stat):
                return r.metric_value
        return None

    @property
    def flagged(self) -> list[dict]:
        return [s for s in self.summary if s["flagged"]]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.rows:
            w.writerow(r.csv_values())
        return buf.getvalue()

    def plot_data(self) -> dict:
        """Series for re-drawing the figure: one per (target, procs), x = block size or procs."""
        series: dict[tuple, dict] = {}
        metric = "bandwidth_mib_s" if self.experiment == "io" else "seconds"
        for r in self.rows:
            if r.metric_name != metric or r.rep not in AGGREGATES:
                continue
            key = (r.target, r.procs) if self.experiment == "io" else (r.target,)
            s = series.setdefault(key, {"target": r.target, "encrypted": r.encrypted, "points": {}})
            if self.experiment == "io":
                s["procs"] = r.procs
            x = r.block_size if self.experiment == "io" else r.procs
            s["points"].setdefault(x, {"x": x})[r.rep] = r.metric_value
        out = []
        for key in sorted(series):
            s = series[key]
            s["points"] = [s["points"][x] for x in sorted(s["points"])]
            out.append(s)
        return {
            "experiment": self.experiment,
            "x_axis": "block_size_bytes" if self.experiment == "io" else "procs",
            "y_axis": "bandwidth_mib_s" if self.experiment == "io" else "wall_clock_seconds",
            "series": out,
        }


def parse_csv(text: str, experiment: str | None = None) -> BenchReport:
    """Inverse of :meth:`BenchReport.to_csv` for the measured rows."""
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
        raise ValidationError(f"CSV header must be {','.join(CSV_COLUMNS)}")
    rows = [BenchRow.from_csv(rec) for rec in reader]
    name = experiment or (rows[0].experiment if rows else "io")
    return BenchReport(name, rows)


def emit(report: BenchReport, out_dir: str | os.PathLike) -> dict[str, Path]:
    """Write ``<experiment>.csv``, ``<experiment>-plot.json`` and ``<experiment>-summary.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "csv": out / f"{report.experiment}.csv",
        "plot": out / f"{report.experiment}-plot.json",
        "summary": out / f"{report.experiment}-summary.json",
    }
    paths["csv"].write_text(report.to_csv())
    paths["plot"].write_text(json.dumps(report.plot_data(), indent=2, sort_keys=True) + "\n")
    summary = {"experiment": report.experiment, "environment": report.environment, "config": report.config,
               "cells": report.summary, "flagged": report.flagged, "failures": report.failures}
    paths["summary"].write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return paths


# ---------------------------------------------------------------------------
# shared helpers

def environment() -> dict:
    import cryptography
    import numpy

    flags = ""
    try:
        for line in Path("/proc/cpuinfo").read_text().splitlines():
            if line.startswith("flags"):
                flags = line
                break
    except OSError:
        pass
    return {
        "scw": __version__,
        "python": platform.python_version(),
        "platform": platform.platform(),
        "machine": platform.machine(),
        "cpu_count": os.cpu_count(),
        "aes_ni": " aes " in f" {flags} ",
        "cryptography": cryptography.__version__,
        "numpy": numpy.__version__,
    }


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="microseconds")


def _stats_rows(experiment, target, block_size, procs, encrypted, metric, values) -> list[BenchRow]:
    if not values:
        return []
    ts = _now()
    stats = {"mean": statistics.fmean(values), "min": min(values), "max": max(values)}
    return [BenchRow(experiment, target, block_size, procs, encrypted, name, metric, stats[name], ts)
            for name in AGGREGATES]


def relative_difference(encrypted: float, plain: float) -> float:
    """``|encrypted - plain| / plain``; 0 when both are 0."""
    if plain == 0:
        return 0.0 if encrypted == 0 else math.inf
    return abs(encrypted - plain) / plain


def bench_cluster(root: str | os.PathLike | None = None, *, slots: int = 1, fsync: bool = False, **kw):
    """Single-node in-process cluster in benchmark mode (control path enabled)."""
    from .cluster import LocalCluster, NodeSpec

    return LocalCluster(root, [NodeSpec("bench-0", slots=slots)], allow_unencrypted=True, allow_spill=True,
                        fsync=fsync, **kw)


class _BenchSession:
    """A started bench cluster plus a user with one key pair."""

    def __init__(self, cluster=None) -> None:
        self._own = cluster is None
        self.cluster = cluster if cluster is not None else bench_cluster().start()
        self.client = self.cluster.user(f"bench{os.getpid()}x{int(time.time() * 1e6) % 10**9}")
        self.key = self.client.keygen()
        self.workdir = Path(tempfile.mkdtemp(prefix="scw-bench-"))

    def package(self, spec: dict, *, encrypt: bool = True) -> bytes:
        from . import bundle as bundle_mod

        if encrypt:
            return self.client.package(self.workdir, spec, self.key.key_id).to_bytes()
        return bundle_mod.package(self.workdir, spec, None, encrypt=False, allow_unencrypted=True).to_bytes()

    def run(self, bundle: bytes, *, procs: int, timeout: float) -> tuple[str, dict]:
        job_id = self.client.submit(bundle, node_count=1, procs_per_node=procs)
        return job_id, self.client.wait(job_id, timeout, poll=0.01)

    def close(self) -> None:
        import shutil

        shutil.rmtree(self.workdir, ignore_errors=True)
        self.client.close()
        if self._own:
            self.cluster.stop()


def _ensure_domains(cluster) -> None:
    existing = {d.name for d in cluster.store.domains()}
    if ENC_DOMAIN not in existing:
        cluster.create_domain(ENC_DOMAIN, "orgA", encrypted=True)
    if PLAIN_DOMAIN not in existing:
        cluster.create_domain(PLAIN_DOMAIN, "orgA", encrypted=False)


def target_spec(target: str) -> Any:
    return {
        "plain_local": {"tier": "local"},
        "secure_encrypted": {"tier": "secure", "domain": ENC_DOMAIN},
        "secure_unencrypted": {"tier": "secure", "domain": PLAIN_DOMAIN},
    }[target]


# ---------------------------------------------------------------------------
# I/O experiment

def run_io_matrix(matrix: BenchMatrix | None = None, cluster=None, *,
                  progress: Callable[[str], None] | None = None, timeout: float = 600.0) -> BenchReport:
    """Run every I/O cell ``repetitions`` times and collate aggregate bandwidths.

    Repetitions are the outer loop so slow drift of the host affects all
    targets alike. A failed job marks its cell failed; the harness carries on.
    """
    matrix = matrix or BenchMatrix()
    report = BenchReport("io", environment=environment(), config=asdict(matrix))
    session = _BenchSession(cluster)
    try:
        _ensure_domains(session.cluster)
        bundles = {}
        for target, bs, procs in matrix.cells():
            spec = {"kind": "io_bench", "params": {"block_size": bs, "total_bytes": matrix.bytes_per_proc,
                                                   "target": target_spec(target), "fsync": matrix.fsync}}
            bundles[(target, bs)] = session.package(spec)
        bw: dict[tuple, list[float]] = {c: [] for c in matrix.cells()}
        written: dict[tuple, set[int]] = {c: set() for c in matrix.cells()}
        failed: set[tuple] = set()
        for rep in range(matrix.repetitions):
            for cell in matrix.cells():
                target, bs, procs = cell
                if cell in failed:
                    continue
                enc = target == "secure_encrypted"
                try:
                    job_id, view = session.run(bundles[(target, bs)], procs=procs, timeout=timeout)
                    if view["state"] != "COMPLETED":
                        raise ScwError(f"job {view['failure']['reason']}: {view['failure']['message']}")
                    outputs = session.client.fetch(job_id)
                except ScwError as exc:
                    failed.add(cell)
                    report.failures.append({"target": target, "block_size": bs, "procs": procs, "rep": rep,
                                            "error": str(exc)})
                    report.rows.append(BenchRow("io", target, bs, procs, enc, str(rep), "failed", 1.0, _now()))
                    continue
                ranks = [r for rep_ in view["reports"] for r in rep_["ranks"]]
                total = sum(r["bytes_written"] for r in ranks)
                declared = sum(json.loads(o)["bytes_written"] for o in outputs.values())
                if total != declared or total != matrix.bytes_per_proc * procs:
                    raise ScwError(f"accounting mismatch in {cell}: {total} != {matrix.bytes_per_proc * procs}")
                seconds = max((r["seconds"] for r in ranks), default=0.0)
                mibs = total / MiB / seconds if total and seconds > 0 else 0.0
                bw[cell].append(mibs)
                written[cell].add(total)
                report.rows.append(BenchRow("io", target, bs, procs, enc, str(rep), "bandwidth_mib_s", mibs, _now()))
                if progress:
                    progress(f"io rep {rep} {target} bs={bs} procs={procs}: {mibs:.1f} MiB/s")
        for cell in matrix.cells():
            target, bs, procs = cell
            enc = target == "secure_encrypted"
            report.rows += _stats_rows("io", target, bs, procs, enc, "bandwidth_mib_s", bw[cell])
            if written[cell]:
                report.rows.append(BenchRow("io", target, bs, procs, enc, "all", "bytes_written",
                                            float(max(written[cell])), _now()))
        if {"secure_encrypted", "secure_unencrypted"} <= set(matrix.targets):
            for bs in matrix.block_sizes:
                for procs in matrix.process_counts:
                    e = report.aggregate("secure_encrypted", bs, procs, "bandwidth_mib_s")
                    p = report.aggregate("secure_unencrypted", bs, procs, "bandwidth_mib_s")
                    if e is None or p is None:
                        continue
                    diff = relative_difference(e, p)
                    report.summary.append({"block_size": bs, "procs": procs, "encrypted_mib_s": e,
                                           "unencrypted_mib_s": p, "relative_difference": diff,
                                           "threshold": IO_THRESHOLD, "flagged": diff >= IO_THRESHOLD})
    finally:
        session.close()
    return report


# ---------------------------------------------------------------------------
# compute experiment

def calibrate_iterations(matrix_dim: int, min_seconds: float, seed: int = 42) -> int:
    """ALS iterations needed for a single-rank run to take at least ``min_seconds``."""
    if min_seconds <= 0:
        return 1
    probe = 2
    while True:
        spec = {"kind": "compute_bench", "params": {"matrix_dim": matrix_dim, "iterations": probe, "seed": seed}}
        t0 = time.perf_counter()
        tasks.run_local(tree_from_mapping({}), spec, 1)
        dt = time.perf_counter() - t0
        if dt >= 0.5 or probe >= 1 << 20:
            break
        probe *= 4
    # 20% headroom so the slowest path stays above the floor
    return max(1, math.ceil(probe * min_seconds * 1.2 / dt))


def run_compute_matrix(matrix: ComputeMatrix | None = None, cluster=None, *,
                       progress: Callable[[str], None] | None = None, timeout: float = 3600.0) -> BenchReport:
    """Wall-clock of encrypted vs unencrypted bundle paths per process count.

    One measurement covers packaging, submission, execution, result sealing
    and client-side fetch and decryption. The two paths alternate within each
    repetition. Their decrypted outputs must be byte-identical.
    """
    matrix = matrix or ComputeMatrix()
    iterations = matrix.iterations or calibrate_iterations(matrix.matrix_dim, matrix.min_seconds, matrix.seed)
    config = dict(asdict(matrix), iterations=iterations)
    report = BenchReport("compute", environment=environment(), config=config)
    spec = {"kind": "compute_bench",
            "params": {"matrix_dim": matrix.matrix_dim, "iterations": iterations, "seed": matrix.seed}}
    paths = (("encrypted", True), ("unencrypted", False))
    session = _BenchSession(cluster)
    try:
        secs: dict[tuple, list[float]] = {(p, t): [] for p in matrix.process_counts for t, _ in paths}
        reference: bytes | None = None
        failed: set[tuple] = set()
        for rep in range(matrix.repetitions):
            for procs in matrix.process_counts:
                order = paths if rep % 2 == 0 else paths[::-1]
                for target, enc in order:
                    if (procs, target) in failed:
                        continue
                    t0 = time.perf_counter()
                    try:
                        bundle = session.package(spec, encrypt=enc)
                        job_id, view = session.run(bundle, procs=procs, timeout=timeout)
                        if view["state"] != "COMPLETED":
                            raise ScwError(f"job {view['failure']['reason']}: {view['failure']['message']}")
                        outputs = session.client.fetch(job_id)
                    except ScwError as exc:
                        failed.add((procs, target))
                        report.failures.append({"target": target, "procs": procs, "rep": rep, "error": str(exc)})
                        report.rows.append(BenchRow("compute", target, 0, procs, enc, str(rep), "failed", 1.0,
                                                    _now()))
                        continue
                    dt = time.perf_counter() - t0
                    digests = set(outputs.values())
                    if len(outputs) != procs or len(digests) != 1:
                        raise ScwError(f"ranks disagree on the compute result ({target}, procs={procs})")
                    (result,) = digests
                    if reference is None:
                        reference = result
                    elif result != reference:
                        raise ScwError(f"{target} path with {procs} procs produced a different result")
                    secs[(procs, target)].append(dt)
                    report.rows.append(BenchRow("compute", target, 0, procs, enc, str(rep), "seconds", dt, _now()))
                    if progress:
                        progress(f"compute rep {rep} {target} procs={procs}: {dt:.2f} s")
        for procs in matrix.process_counts:
            for target, enc in paths:
                report.rows += _stats_rows("compute", target, 0, procs, enc, "seconds", secs[(procs, target)])
            e = report.aggregate("encrypted", 0, procs, "seconds")
            p = report.aggregate("unencrypted", 0, procs, "seconds")
            if e is None or p is None:
                continue
            overhead = e / p - 1 if p > 0 else math.inf
            report.summary.append({"procs": procs, "encrypted_s": e, "unencrypted_s": p, "overhead": overhead,
                                   "threshold": COMPUTE_THRESHOLD, "flagged": overhead >= COMPUTE_THRESHOLD,
                                   "identical_outputs": reference is not None})
        if reference is not None:
            report.config["result"] = json.loads(reference)
    finally:
        session.close()
    return report


def run_experiments(names: Iterable[str], out_dir: str | os.PathLike, **kw) -> dict[str, BenchReport]:
    runners = {"io": run_io_matrix, "compute": run_compute_matrix}
    out = {}
    for name in names:
        report = runners[name](**kw)
        emit(report, out_dir)
        out[name] = report
    return out
