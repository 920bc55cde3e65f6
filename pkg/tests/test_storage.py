from __future__ import annotations

import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scw import recorder
from scw.errors import (
    AuthError,
    ConflictError,
    CorruptionError,
    MigrationError,
    NotFound,
    PolicyError,
    ValidationError,
)
from scw.identity import Principal, Role
from scw.storage import LOCAL, SECURE, BlobRef, BlobStore

OP = Principal("ops", Role.OPERATOR, "infra")
ALICE = Principal("alice", Role.USER, "orgA")
BOB = Principal("bob", Role.USER, "orgB")
CAROL = Principal("carol", Role.USER, "orgC")


@pytest.fixture
def store(tmp_path, keypair):
    s = BlobStore(tmp_path / "store", keypair, allow_unencrypted=True)
    s.create_domain("domA", "orgA", OP, allowed=["carol"])
    s.create_domain("domB", "orgB", OP)
    yield s
    s.close()


def _raw_files(store):
    return [p for p in store.root.rglob("*") if p.is_file()]


@pytest.mark.parametrize("size", [0, 1, 4095, 4096, 4097, 100_000])
def test_round_trip_both_tiers(store, size):
    data = random.Random(size).randbytes(size)
    ref = store.put(LOCAL, data, ALICE)
    assert store.get(ref, ALICE) == data
    sref = store.put(SECURE, data, ALICE, "domA")
    assert sref.length == size and sref.domain == "domA"
    assert store.get(sref, ALICE) == data


def test_secure_tier_ciphertext_at_rest(store):
    data = random.Random(1).randbytes(50_000)
    with recorder.recording() as rec:
        store.put(SECURE, data, ALICE, "domA")
    assert rec.find_leaks(data) == []
    for p in _raw_files(store):
        raw = p.read_bytes()
        assert not any(data[o:o + 64] in raw for o in range(0, len(data) - 64, 997))


def test_local_tier_is_verbatim(store):
    ref = store.put(LOCAL, b"already-encrypted-bytes", ALICE)
    assert (store.root / "local" / ref.blob_id).read_bytes() == b"already-encrypted-bytes"


# allow table: (principal, domain) -> allowed
ACCESS = {
    (ALICE, "domA"): True,
    (ALICE, "domB"): False,
    (BOB, "domA"): False,
    (BOB, "domB"): True,
    (CAROL, "domA"): True,  # explicit member from another organisation
    (CAROL, "domB"): False,
}


@pytest.mark.parametrize("who,domain", list(ACCESS))
def test_domain_isolation_matrix(store, who, domain):
    owner = ALICE if domain == "domA" else BOB
    ref = store.put(SECURE, b"secret", owner, domain)
    if ACCESS[(who, domain)]:
        assert store.get(ref, who) == b"secret"
        store.put(SECURE, b"x", who, domain)
    else:
        with pytest.raises(AuthError):
            store.get(ref, who)
        with pytest.raises(AuthError):
            store.put(SECURE, b"x", who, domain)


def test_domain_management(store, tmp_path):
    with pytest.raises(AuthError):
        store.create_domain("domX", "orgA", ALICE)
    with pytest.raises(ConflictError):
        store.create_domain("domA", "orgA", OP)
    with pytest.raises(NotFound):
        store.put(SECURE, b"x", ALICE, "missing")
    assert [d.name for d in store.domains()] == ["domA", "domB"]
    strict = BlobStore(tmp_path / "strict", store.operator)
    with pytest.raises(PolicyError):
        strict.create_domain("plain", "orgA", OP, encrypted=False)


def test_unencrypted_domain_for_benchmarks(store):
    store.create_domain("bench", "orgA", OP, encrypted=False)
    ref = store.put(SECURE, b"z" * 5000, ALICE, "bench")
    raw = (store.root / "secure" / "bench" / ref.blob_id).read_bytes()
    assert raw[:5000] == b"z" * 5000 and len(raw) == 8192
    assert store.get(ref, ALICE) == b"z" * 5000


def test_corruption_detected(store):
    for tier, dom in ((LOCAL, None), (SECURE, "domA")):
        ref = store.put(tier, b"q" * 10_000, ALICE, dom)
        path = store._blob_path(tier, dom, ref.blob_id)
        raw = bytearray(path.read_bytes())
        raw[100] ^= 1
        path.write_bytes(bytes(raw))
        with pytest.raises(CorruptionError):
            store.get(ref, ALICE)


def test_streaming_writer_matches_put(store):
    rng = random.Random(4)
    pieces = [rng.randbytes(rng.randint(0, 9000)) for _ in range(20)]
    with store.open_writer(SECURE, ALICE, "domA") as w:
        for p in pieces:
            w.write(p)
        ref = w.close()
    assert store.get(ref, ALICE) == b"".join(pieces)
    assert not list((store.root / "secure" / "domA").glob("*.tmp"))


def test_writer_abort_leaves_nothing(store):
    with pytest.raises(RuntimeError):
        with store.open_writer(LOCAL, ALICE) as w:
            w.write(b"partial")
            raise RuntimeError("boom")
    assert [p for p in (store.root / "local").iterdir()] == []


def test_migrate(store):
    data = random.Random(9).randbytes(30_000)
    ref = store.put(LOCAL, data, ALICE)
    new = store.migrate(ref, "domA", ALICE)
    assert new.tier == SECURE and store.get(new, ALICE) == data
    assert not store.exists(ref)


def test_migrate_unauthorized_leaves_blob(store):
    ref = store.put(LOCAL, b"data", ALICE)
    with pytest.raises(AuthError):
        store.migrate(ref, "domB", ALICE)
    assert store.get(ref, ALICE) == b"data"


def test_migrate_injected_corruption(store):
    ref = store.put(LOCAL, b"d" * 9000, ALICE)

    def corrupt(b):
        return b[:10] + bytes([b[10] ^ 1]) + b[11:]

    with pytest.raises(MigrationError):
        store.migrate(ref, "domA", ALICE, copy_hook=corrupt)
    assert store.get(ref, ALICE) == b"d" * 9000
    assert not [p for p in (store.root / "secure" / "domA").iterdir() if not p.name.startswith(".domain")]


def test_blobref_round_trip_and_validation(store):
    ref = store.put(SECURE, b"abc", ALICE, "domA")
    assert BlobRef.from_dict(ref.to_dict()) == ref
    assert store.stored_ref(SECURE, ref.blob_id, "domA") == ref
    with pytest.raises(ValidationError):
        BlobRef.from_dict({**ref.to_dict(), "blob_id": "../../etc"})
    with pytest.raises(ValidationError):
        store.put(SECURE, b"x", ALICE)


def test_recorder_sees_exactly_the_put(store):
    with recorder.recording() as rec:
        store.put(LOCAL, b"exact-bytes", ALICE)
    blob_writes = [r for r in rec.records if not r.path.endswith(".meta.json")]
    assert [r.data for r in blob_writes] == [b"exact-bytes"]


@settings(max_examples=20, deadline=None)
@given(st.binary(max_size=20_000), st.booleans())
def test_tier_transparency(tmp_path_factory, keypair, data, secure):
    s = BlobStore(tmp_path_factory.mktemp("s"), keypair)
    if secure:
        s.create_domain("d", "orgA", OP)
        ref = s.put(SECURE, data, ALICE, "d")
    else:
        ref = s.put(LOCAL, data, ALICE)
    assert s.get(ref, ALICE) == data
