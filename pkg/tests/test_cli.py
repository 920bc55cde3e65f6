from __future__ import annotations

import json
import os
import stat
import subprocess
import sys
import threading
from pathlib import Path

import pytest

from conftest import make_tree
from scw import bundle, cli, tasks
from scw.cli import ClientConfig
from scw.errors import AuthError, ValidationError

DAEMON = [sys.executable, "-c", "import sys; from scw.cli import daemon_main; sys.exit(daemon_main())"]


def start_daemon(*argv: str) -> tuple[subprocess.Popen, str]:
    proc = subprocess.Popen([*DAEMON, *argv], stdout=subprocess.PIPE, stderr=subprocess.DEVNULL, text=True)
    line = proc.stdout.readline()
    if "listening on" not in line and "joined" not in line:
        proc.kill()
        raise RuntimeError(f"daemon {argv[0]} did not start: {line!r}")
    return proc, line.split()[-1]


class Deployment:
    def __init__(self, root: Path) -> None:
        self.root = root
        self.procs: list[subprocess.Popen] = []
        ks, self.keysvc = self._start("keysvc", "--listen", "127.0.0.1:0", "--state", str(root / "ks"))
        _, self.scheduler = self._start("scheduler", "--listen", "127.0.0.1:0", "--keysvc", self.keysvc,
                                        "--secret", str(root / "ks" / cli.SCHEDULER_SECRET_FILE),
                                        "--state", str(root / "sched"), "--heartbeat", "0.2")
        self.operator = root / "ks" / cli.OPERATOR_FILE
        for name in ("n1", "n2"):
            cred = root / f"{name}.cred"
            assert self.run("admin", "register-node", name, "-o", str(cred), cred=self.operator)[0] == 0
            self._start("worker", "--scheduler", self.scheduler, "--keysvc", self.keysvc, "--slots", "2",
                        "--credential", str(cred), "--heartbeat", "0.2")
        self.alice = root / "alice.cred"
        assert self.run("admin", "add-user", "alice", "--org", "orgA", "-o", str(self.alice),
                        cred=self.operator)[0] == 0

    def _start(self, *argv: str):
        proc, endpoint = start_daemon(*argv)
        self.procs.append(proc)
        return proc, endpoint

    def run(self, *argv: str, cred: Path | None = None, json_out: bool = False):
        """Run ``scw`` in-process; returns (exit, stdout, stderr)."""
        import contextlib
        import io

        out, err = io.StringIO(), io.StringIO()
        flags = ["--keysvc", self.keysvc, "--scheduler", self.scheduler,
                 "--credential", str(cred or self.alice)]
        if json_out:
            flags.append("--json")
        with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
            code = cli.main([*flags, *argv])
        return code, out.getvalue(), err.getvalue()

    def stop(self) -> None:
        for p in self.procs:
            p.terminate()
        for p in self.procs:
            try:
                p.wait(10)
            except subprocess.TimeoutExpired:
                p.kill()


@pytest.fixture(autouse=True)
def _hermetic_config(monkeypatch, tmp_path):
    monkeypatch.setenv("XDG_CONFIG_HOME", str(tmp_path / "xdg"))
    for name in ("CONFIG", "KEYSVC", "SCHEDULER", "CREDENTIAL", "SECURITY_LEVEL"):
        monkeypatch.delenv("SCW_" + name, raising=False)


@pytest.fixture(scope="module")
def dep(tmp_path_factory):
    d = Deployment(tmp_path_factory.mktemp("deploy"))
    yield d
    d.stop()


@pytest.fixture(scope="module")
def key_id(dep):
    code, out, _ = dep.run("keygen")
    assert code == 0
    return out.split()[0]


@pytest.fixture
def workflow(tmp_path):
    return make_tree(tmp_path / "wf", {"input": bytes(range(256)) * 40, "lib/readme.txt": b"notes"})


def package(dep, key_id, workflow, out: Path, task='{"kind": "echo"}') -> Path:
    code, _, err = dep.run("package", str(workflow), "--key-id", key_id, "--task", task, "-o", str(out))
    assert code == 0, err
    return out


# end to end


def test_golden_echo_end_to_end(dep, key_id, workflow, tmp_path):
    b = package(dep, key_id, workflow, tmp_path / "wf.scwb")
    code, out, err = dep.run("submit", str(b), "--nodes", "2", "--procs", "2", "--wait", json_out=True)
    assert code == 0, err
    view = json.loads(out)
    assert view["state"] == "COMPLETED" and view["world_size"] == 4
    code, out, _ = dep.run("fetch", view["job_id"], "-o", str(tmp_path / "res"), json_out=True)
    assert code == 0
    listing = json.loads(out)["files"]
    expected = tasks.run_local({"input": (workflow / "input").read_bytes()}, {"kind": "echo"}, 4)
    assert [f["name"] for f in listing] == list(expected)
    for name, data in expected.items():
        assert (tmp_path / "res" / name).read_bytes() == data


def test_submit_then_poll(dep, key_id, workflow, tmp_path):
    b = package(dep, key_id, workflow, tmp_path / "wf.scwb", '{"kind": "transform", "params": {"amount": 3}}')
    code, out, _ = dep.run("submit", str(b))
    job_id = out.strip()
    assert code == 0 and job_id
    assert dep.run("wait", job_id)[0] == 0
    code, out, _ = dep.run("status", job_id)
    assert code == 0 and "COMPLETED" in out
    assert job_id in dep.run("jobs")[1]
    dep.run("fetch", job_id, "-o", str(tmp_path / "r"))
    src = (workflow / "input").read_bytes()
    assert (tmp_path / "r" / "rank-00000.out").read_bytes() == bytes((x + 3) % 256 for x in src)


def test_inspect_shows_manifest_only(dep, key_id, workflow, tmp_path):
    b = package(dep, key_id, workflow, tmp_path / "wf.scwb")
    code, out, _ = dep.run("inspect", str(b), json_out=True)
    m = json.loads(out)
    assert code == 0 and m["key_id"] == key_id and m["encrypted"] and "wrapped_dek" not in m


# exit codes


def test_status_of_unknown_job_exits_4(dep):
    assert dep.run("status", "no-such-job")[0] == 4


def test_tampered_bundle_exits_3(dep, key_id, workflow, tmp_path):
    b = package(dep, key_id, workflow, tmp_path / "wf.scwb")
    raw = bytearray(b.read_bytes())
    raw[-20] ^= 0x01
    b.write_bytes(bytes(raw))
    code, _, err = dep.run("submit", str(b))
    assert code == 3 and "integrity" in err
    # skipping the local check, the workers catch it
    code, _, _ = dep.run("submit", str(b), "--no-verify", "--wait")
    assert code == 3


def test_bad_magic_exits_3(dep, tmp_path):
    p = tmp_path / "junk.scwb"
    p.write_bytes(b"XXXX" + bytes(64))
    assert dep.run("submit", str(p))[0] == 3
    assert dep.run("inspect", str(p))[0] == 3


def test_other_users_job_is_not_found(dep, key_id, workflow, tmp_path):
    b = package(dep, key_id, workflow, tmp_path / "wf.scwb")
    job_id = dep.run("submit", str(b))[1].strip()
    bob = tmp_path / "bob.cred"
    dep.run("admin", "add-user", "bob", "--org", "orgA", "-o", str(bob), cred=dep.operator)
    assert dep.run("status", job_id, cred=bob)[0] == 4
    assert dep.run("fetch", job_id, "-o", str(tmp_path / "x"), cred=bob)[0] == 4


def test_user_cannot_run_admin_commands(dep, tmp_path):
    assert dep.run("admin", "add-user", "mallory", "--org", "orgA", "-o", str(tmp_path / "m"))[0] == 2


def test_missing_credential_exits_2(capsys):
    assert cli.main(["--keysvc", "127.0.0.1:1", "--scheduler", "127.0.0.1:1", "status", "x"]) == 2
    assert "credential" in capsys.readouterr().err


def test_wrong_credential_exits_2(dep, tmp_path):
    forged = json.loads(dep.alice.read_text())
    forged["credential"]["scheduler"] = "00" * 32
    p = tmp_path / "forged.cred"
    p.write_text(json.dumps(forged))
    assert dep.run("status", "x", cred=p)[0] == 2


def test_unreachable_service_exits_5(dep, tmp_path):
    code = cli.main(["--keysvc", "127.0.0.1:1", "--scheduler", "127.0.0.1:1", "--credential", str(dep.alice),
                     "status", "x"])
    assert code == 5


def test_missing_file_exits_5(dep, tmp_path):
    assert dep.run("submit", str(tmp_path / "absent.scwb"))[0] == 5


@pytest.mark.parametrize("argv", [[], ["status"], ["submit", "b", "--nodes", "0"], ["frobnicate"]])
def test_usage_errors_exit_1(argv):
    with pytest.raises(SystemExit) as info:
        cli.main(argv)
    assert info.value.code == 1


def test_bad_endpoint_exits_1():
    assert cli.main(["--keysvc", "nohost", "--credential", "x", "keygen"]) == 1


# images


def test_image_round_trip(dep, key_id, tmp_path):
    img = tmp_path / "d.img"
    assert dep.run("image", "create", str(img), "--sectors", "4", "--key-id", key_id)[0] == 0
    secret = b"sector secret " * 100
    (tmp_path / "in").write_bytes(secret)
    assert dep.run("image", "put", str(img), str(tmp_path / "in"), "--offset", "100")[0] == 0
    assert secret not in img.read_bytes()
    code, _, _ = dep.run("image", "get", str(img), "--offset", "100", "--length", str(len(secret)),
                         "-o", str(tmp_path / "out"))
    assert code == 0 and (tmp_path / "out").read_bytes() == secret
    code, out, _ = dep.run("image", "info", str(img), json_out=True)
    info = json.loads(out)
    assert info["sectors"] == 4 and info["cipher"] == "AES-XTS-128" and info["key_id"] == key_id


def test_image_attached_to_job(dep, key_id, tmp_path):
    img = tmp_path / "d.img"
    dep.run("image", "create", str(img), "--sectors", "1", "--key-id", key_id)
    (tmp_path / "in").write_bytes(b"abcdef")
    dep.run("image", "put", str(img), str(tmp_path / "in"))
    wf = make_tree(tmp_path / "wf", {"x": b""})
    spec = json.dumps({"kind": "echo", "params": {"input": "image:0"}})
    b = package(dep, key_id, wf, tmp_path / "wf.scwb", spec)
    code, out, err = dep.run("submit", str(b), "--image", str(img), "--wait", json_out=True)
    assert code == 0, err
    dep.run("fetch", json.loads(out)["job_id"], "-o", str(tmp_path / "r"))
    assert (tmp_path / "r" / "rank-00000.out").read_bytes()[:6] == b"abcdef"


# secrets hygiene


def test_no_key_material_in_output(dep, key_id, workflow, tmp_path):
    outputs = []
    b = package(dep, key_id, workflow, tmp_path / "wf.scwb")
    for argv in (["keygen"], ["inspect", str(b)], ["submit", str(b), "--wait"], ["jobs"],
                 ["admin", "audit"]):
        for as_json in (False, True):
            cred = dep.operator if argv[0] == "admin" else None
            outputs.append("".join(dep.run("-v", *argv, cred=cred, json_out=as_json)[1:]))
    text = "\n".join(outputs)
    for path in (dep.alice, dep.operator):
        cred = json.loads(path.read_text())["credential"]
        assert cred["keysvc"] not in text and cred["scheduler"] not in text
    manifest = bundle.inspect(b)
    assert manifest.wrapped_dek.to_dict()["ciphertext"] not in text
    assert "PRIVATE KEY" not in text


def test_secret_files_are_owner_only(dep):
    for p in (dep.alice, dep.operator, dep.root / "ks" / cli.CONTROL_FILE,
              dep.root / "ks" / cli.SCHEDULER_SECRET_FILE, dep.root / "n1.cred"):
        assert stat.S_IMODE(os.stat(p).st_mode) == 0o600


def test_worker_sev_flag_must_match_token(dep):
    code = cli.daemon_main(["worker", "--scheduler", dep.scheduler, "--keysvc", dep.keysvc, "--sev",
                            "--credential", str(dep.root / "n1.cred")], stop=threading.Event())
    assert code == 2


def test_worker_needs_a_token(dep):
    code = cli.daemon_main(["worker", "--scheduler", dep.scheduler, "--keysvc", dep.keysvc,
                            "--credential", str(dep.alice)], stop=threading.Event())
    assert code == 2


def test_keysvc_restart_keeps_state(dep, tmp_path):
    state = tmp_path / "ks"
    stop = threading.Event()
    stop.set()
    assert cli.daemon_main(["keysvc", "--listen", "127.0.0.1:0", "--state", str(state)], stop=stop) == 0
    first = (state / cli.OPERATOR_FILE).read_bytes()
    control = (state / cli.CONTROL_FILE).read_bytes()
    assert cli.daemon_main(["keysvc", "--listen", "127.0.0.1:0", "--state", str(state)], stop=stop) == 0
    assert (state / cli.OPERATOR_FILE).read_bytes() == first
    assert (state / cli.CONTROL_FILE).read_bytes() == control


# configuration


def test_config_precedence(tmp_path):
    cfg = tmp_path / "c" / "config.json"
    cfg.parent.mkdir()
    cfg.write_text(json.dumps({"keysvc": "file:1", "scheduler": "file:2", "credential": "me.cred",
                               "security_level": "sev"}))
    env = {"SCW_SCHEDULER": "env:2", "SCW_KEYSVC": "env:1"}
    c = ClientConfig.load({"keysvc": "flag:1"}, env, cfg)
    assert (c.keysvc, c.scheduler, c.security_level) == ("flag:1", "env:2", "sev")
    assert c.credential == cfg.parent / "me.cred"
    assert ClientConfig.load({}, {"SCW_CONFIG": str(cfg)}).keysvc == "file:1"


def test_default_config_file(tmp_path, monkeypatch):
    monkeypatch.setenv("XDG_CONFIG_HOME", str(tmp_path))
    (tmp_path / "scw").mkdir()
    (tmp_path / "scw" / "config.json").write_text(json.dumps({"scheduler": "h:9"}))
    assert ClientConfig.load({}, {}).scheduler == "h:9"


@pytest.mark.parametrize("body", ['{"keysvc": "nohost"}', '{"colour": "red"}', "[]", "{",
                                  '{"security_level": "max"}'])
def test_config_rejects(tmp_path, body):
    p = tmp_path / "c.json"
    p.write_text(body)
    with pytest.raises(ValidationError):
        ClientConfig.load({}, {}, p)


def test_explicit_missing_config_is_an_error(tmp_path):
    with pytest.raises(OSError):
        ClientConfig.load({}, {}, tmp_path / "absent.json")


def test_missing_credential_is_explicit():
    with pytest.raises(AuthError):
        ClientConfig().load_credential()


# bench and docs


def test_bench_io_writes_report(tmp_path):
    m = tmp_path / "m.json"
    m.write_text(json.dumps({"block_sizes": [4096], "process_counts": [1], "repetitions": 1,
                             "bytes_per_proc": 8192, "fsync": False}))
    code = cli.main(["bench", "io", "--matrix", str(m), "--out", str(tmp_path / "out")])
    assert code == 0
    rows = (tmp_path / "out" / "io.csv").read_text().splitlines()
    assert rows[0].startswith("experiment,target,block_size")
    assert {r.split(",")[1] for r in rows[1:]} == {"plain_local", "secure_encrypted", "secure_unencrypted"}


def test_flag_reference_is_current():
    doc = Path(__file__).parent.parent / "docs" / "cli.md"
    assert doc.read_text() == cli.flag_reference() + "\n", "regenerate docs/cli.md from cli.flag_reference()"
