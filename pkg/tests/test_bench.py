from __future__ import annotations

import json

import pytest

from scw import bench
from scw.bench import CSV_COLUMNS, BenchMatrix, BenchReport, BenchRow, ComputeMatrix
from scw.cluster import LocalCluster, NodeSpec
from scw.errors import ValidationError

KiB = 1024


@pytest.fixture(scope="module")
def bench_cluster(keypair_pool, tmp_path_factory):
    with bench.bench_cluster(tmp_path_factory.mktemp("bench"), slots=1, keypair_factory=keypair_pool,
                             heartbeat_interval=0.2) as c:
        yield c


def test_default_matrix_shape():
    m = BenchMatrix()
    assert m.block_sizes == [64 * KiB, 256 * KiB, KiB * KiB, 4 * KiB * KiB, 16 * KiB * KiB]
    assert m.process_counts == [1, 10] and m.repetitions == 5
    assert len(m.cells()) == 30
    assert ComputeMatrix().process_counts == [1, 2, 4, 8, 10]


@pytest.mark.parametrize("bad", [
    {"block_sizes": []}, {"block_sizes": [0]}, {"process_counts": [True]}, {"targets": ["nfs"]},
    {"repetitions": 0}, {"bytes_per_proc": -1}, {"fsync": "no"}, {"colour": 1},
])
def test_matrix_validation(bad):
    with pytest.raises(ValidationError):
        BenchMatrix.from_dict(bad)


def test_matrix_file(tmp_path):
    p = tmp_path / "m.json"
    p.write_text(json.dumps({"block_sizes": [4096], "process_counts": [2], "repetitions": 1}))
    m = BenchMatrix.load(p)
    assert m.cells() == [(t, 4096, 2) for t in bench.TARGETS]
    p.write_text("{")
    with pytest.raises(ValidationError):
        BenchMatrix.load(p)


def test_zero_byte_cell(bench_cluster):
    m = BenchMatrix(block_sizes=[4096], process_counts=[1], targets=["secure_encrypted"], repetitions=1,
                    bytes_per_proc=0)
    report = bench.run_io_matrix(m, bench_cluster)
    assert report.failures == []
    (row,) = report.measurements("bandwidth_mib_s")
    assert row.metric_value == 0.0
    assert report.aggregate("secure_encrypted", 4096, 1, "bytes_written", "all") == 0.0


def test_full_default_matrix_structure(bench_cluster):
    m = BenchMatrix(bytes_per_proc=64 * KiB, fsync=False)
    report = bench.run_io_matrix(m, bench_cluster)
    assert report.failures == []
    rows = report.measurements("bandwidth_mib_s")
    assert len(rows) == 5 * 2 * 3 * 5
    cells = {(r.target, r.block_size, r.procs) for r in rows}
    assert cells == set(m.cells())
    # accounting is identical across targets for the same cell
    for bs in m.block_sizes:
        for procs in m.process_counts:
            written = {report.aggregate(t, bs, procs, "bytes_written", "all") for t in bench.TARGETS}
            assert written == {float(64 * KiB * procs)}
            mean = report.aggregate("plain_local", bs, procs, "bandwidth_mib_s")
            lo = report.aggregate("plain_local", bs, procs, "bandwidth_mib_s", "min")
            hi = report.aggregate("plain_local", bs, procs, "bandwidth_mib_s", "max")
            assert lo <= mean <= hi
    assert len(report.summary) == 10
    assert all(r.encrypted == (r.target == "secure_encrypted") for r in report.rows)


def test_failed_cell_does_not_stop_the_harness(keypair_pool, tmp_path):
    with LocalCluster(tmp_path / "c", [NodeSpec("n")], allow_unencrypted=True, allow_spill=False,
                      keypair_factory=keypair_pool, heartbeat_interval=0.2) as c:
        m = BenchMatrix(block_sizes=[4096], process_counts=[1], repetitions=2, bytes_per_proc=8192)
        report = bench.run_io_matrix(m, c)
    failed = {f["target"] for f in report.failures}
    assert failed == {"plain_local", "secure_unencrypted"}
    ok = report.measurements("bandwidth_mib_s")
    assert {r.target for r in ok} == {"secure_encrypted"} and len(ok) == 2
    assert [r.target for r in report.rows if r.metric_name == "failed"] == ["plain_local", "secure_unencrypted"]


def test_compute_matrix_paths_agree(bench_cluster):
    m = ComputeMatrix(process_counts=[1, 2, 4], repetitions=1, matrix_dim=16, iterations=3)
    report = bench.run_compute_matrix(m, bench_cluster)
    assert report.failures == []
    means = [r for r in report.rows if r.rep == "mean"]
    assert len(means) == 6
    assert {(r.target, r.procs) for r in means} == {(t, p) for t in ("encrypted", "unencrypted") for p in (1, 2, 4)}
    assert [s["procs"] for s in report.summary] == [1, 2, 4]
    for s in report.summary:
        assert s["overhead"] == pytest.approx(s["encrypted_s"] / s["unencrypted_s"] - 1)
        assert s["identical_outputs"]
    assert report.config["result"]["iterations"] == 3


def test_calibration_reaches_floor():
    n = bench.calibrate_iterations(16, 0.2)
    assert n >= 1
    assert bench.calibrate_iterations(16, 0) == 1


def test_relative_difference():
    assert bench.relative_difference(90, 100) == pytest.approx(0.1)
    assert bench.relative_difference(0, 0) == 0.0


# emit

def sample_report() -> BenchReport:
    rows = [BenchRow("io", "plain_local", 4096, 1, False, "0", "bandwidth_mib_s", 123.456789, "t0"),
            BenchRow("io", "secure_encrypted", 4096, 10, True, "mean", "bandwidth_mib_s", 0.1 + 0.2, "t1"),
            BenchRow("io", "secure_encrypted", 4096, 10, True, "min", "bandwidth_mib_s", 0.1, "t1"),
            BenchRow("io", "secure_encrypted", 4096, 10, True, "max", "bandwidth_mib_s", 0.5, "t1")]
    return BenchReport("io", rows)


def test_empty_report_is_header_only():
    assert BenchReport("io").to_csv() == ",".join(CSV_COLUMNS) + "\n"
    assert bench.parse_csv(BenchReport("io").to_csv()).rows == []


def test_csv_round_trip_and_column_order(tmp_path):
    report = sample_report()
    text = report.to_csv()
    assert text.splitlines()[0] == "experiment,target,block_size,procs,encrypted,rep,metric_name,metric_value,timestamp"
    assert bench.parse_csv(text).rows == report.rows
    paths = bench.emit(report, tmp_path)
    assert paths["csv"].read_text() == text
    plot = json.loads(paths["plot"].read_text())
    (series,) = plot["series"]
    assert series["target"] == "secure_encrypted" and series["points"] == [
        {"x": 4096, "mean": 0.1 + 0.2, "min": 0.1, "max": 0.5}]
    assert json.loads(paths["summary"].read_text())["experiment"] == "io"


def test_csv_rejects_wrong_header():
    with pytest.raises(ValidationError):
        bench.parse_csv("a,b\n1,2\n")


def test_environment_stamp():
    env = bench.environment()
    assert {"python", "cryptography", "numpy", "cpu_count", "aes_ni"} <= set(env)
