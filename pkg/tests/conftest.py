from __future__ import annotations

import itertools
import sys
import uuid
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from scw import crypto  # noqa: E402

DATA = Path(__file__).parent / "data"


@pytest.fixture(scope="session")
def keypair() -> crypto.KeyPair:
    return crypto.generate_keypair()


@pytest.fixture(scope="session")
def other_keypair() -> crypto.KeyPair:
    return crypto.generate_keypair()


@pytest.fixture(scope="session")
def keypair_pool():
    """Pre-generated 3072-bit pairs handed out in order to key services under test."""
    pool = [crypto.generate_keypair() for _ in range(12)]
    counter = itertools.count()

    def factory() -> crypto.KeyPair:
        src = pool[next(counter) % len(pool)]
        # fresh id every time so uniqueness checks still mean something
        return crypto.KeyPair(str(uuid.uuid4()), src.public_key, src.private_key)

    return factory


def make_tree(root: Path, files: dict[str, bytes], executable: tuple[str, ...] = ()) -> Path:
    for rel, data in files.items():
        p = root / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_bytes(data)
        if rel in executable:
            p.chmod(0o755)
    return root


# -- acceptance reporting ---------------------------------------------------------

_CRITERIA: dict[str, str] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion, reported in the summary")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or not (rep.when == "call" or rep.failed):
        return
    name = marker.args[0]
    detail = dict(item.user_properties).get("detail", "")
    line = f"{'PASS' if rep.passed else 'FAIL'}  {name}" + (f"  ({detail})" if detail else "")
    _CRITERIA[name] = line
    print(f"\n{line}")


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in _CRITERIA.values():
            terminalreporter.write_line(line)
