"""Full confidentiality lifecycle on an in-process cluster.

Generates a key, packages a small workflow, runs it on two nodes with three
ranks each, fetches the decrypted outputs and checks them against a local
plaintext run. Everything travels over authenticated localhost sockets.

    python demos/lifecycle.py
"""

from __future__ import annotations

import os
import tempfile
import time
from pathlib import Path

from scw import tasks
from scw.cluster import LocalCluster, NodeSpec


def main() -> None:
    with tempfile.TemporaryDirectory() as tmp:
        wf = Path(tmp) / "workflow"
        wf.mkdir()
        data = os.urandom(3 * 1024 * 1024)
        (wf / "input").write_bytes(data)
        spec = {"kind": "transform", "params": {"amount": 42}}

        t0 = time.monotonic()
        nodes = [NodeSpec("node-a", sev=True, slots=3), NodeSpec("node-b", sev=True, slots=3)]
        with LocalCluster(Path(tmp) / "cluster", nodes, heartbeat_interval=0.2) as cluster:
            alice = cluster.user("alice")
            key = alice.keygen()
            print(f"key {key.key_id}")
            bundle = alice.package(wf, spec, key.key_id, "sev")
            print(f"bundle {bundle.manifest.bundle_id}: {bundle.manifest.chunk_count} chunks, sev")
            job_id = alice.submit(bundle, node_count=2, procs_per_node=3)
            view = alice.wait(job_id, timeout=60)
            for a in view["assignments"]:
                print(f"  {a['node_id']} ran ranks {a['ranks'][0]}..{a['ranks'][1] - 1}")
            outputs = alice.fetch(job_id)
        elapsed = time.monotonic() - t0

        expected = tasks.run_local({"input": data}, spec, 6)
        print(f"{view['state']} in {elapsed:.1f} s; outputs identical to a local run: {outputs == expected}")


if __name__ == "__main__":
    main()
