from __future__ import annotations

import random
import threading

import pytest

from scw import crypto
from scw.crypto import DEK, KeyPair, Purpose
from scw.errors import AuthError, ConflictError, IntegrityError, NotFound, PolicyError, ValidationError
from scw.identity import SCHEDULER_IDENTITY
from scw.keysvc import AttestationToken, KeyService, KeyServiceClient, KeyServiceServer
from scw.wire import RpcServer

SECRET = b"s" * 32
OPS = "operator:ops"
ALICE = "user:alice"
BOB = "user:bob"
SCHED = SCHEDULER_IDENTITY


class Clock:
    def __init__(self, t=1_000_000.0):
        self.t = t

    def __call__(self):
        return self.t


def _wrap(pub: KeyPair, level="standard", dek=None):
    dek = dek or DEK.generate()
    return dek, crypto.wrap_dek(dek, pub.public_key, pub.key_id, crypto.wrap_context("bundle", level))


BUNDLE_STD = {"purpose": "bundle", "security_level": "standard"}
BUNDLE_SEV = {"purpose": "bundle", "security_level": "sev"}


@pytest.fixture
def world(keypair_pool, tmp_path):
    clock = Clock()
    ks = KeyService(SECRET, tmp_path / "ks", clock=clock, keypair_factory=keypair_pool)
    ks.bootstrap_operator("ops", "infra")
    ks.add_principal(OPS, "alice", "user", "orgA")
    ks.add_principal(OPS, "bob", "user", "orgB")
    plain_tok, _ = ks.register_node(OPS, "n-plain", {"sev": False, "domain": "orgA"})
    sev_tok, _ = ks.register_node(OPS, "n-sev", {"sev": True, "domain": "orgA"})
    key_id, pem = ks.issue_keypair(ALICE)
    pub = KeyPair(key_id, crypto.load_public_key(pem))
    ks.authorize_job(SCHED, "j-std", ["n-plain"], [key_id], "standard", "alice")
    ks.authorize_job(SCHED, "j-sev", ["n-plain", "n-sev"], [key_id], "sev", "alice")
    return dict(ks=ks, clock=clock, pub=pub, key_id=key_id, tok={"n-plain": plain_tok, "n-sev": sev_tok})


def test_issue_and_get_pubkey(world):
    ks = world["ks"]
    assert ks.get_pubkey(BOB, world["key_id"]) == world["pub"].public_pem()
    before = len(ks.audit_entries())
    k1, _ = ks.issue_keypair(BOB)
    k2, _ = ks.issue_keypair(BOB)
    assert k1 != k2
    assert len(ks.audit_entries()) == before + 2
    with pytest.raises(NotFound):
        ks.get_pubkey(BOB, "nope")


def test_unwrap_round_trip(world):
    dek, wrapped = _wrap(world["pub"])
    got, lease = world["ks"].request_unwrap("node:n-plain", world["tok"]["n-plain"], wrapped, "j-std", BUNDLE_STD)
    assert got.equals(dek)
    assert lease.state == "active" and lease.node_id == "n-plain" and lease.job_id == "j-std"
    assert lease.expires_at == world["clock"].t + 3600


def test_sev_policy(world):
    _, wrapped = _wrap(world["pub"], "sev")
    with pytest.raises(PolicyError):
        world["ks"].request_unwrap("node:n-plain", world["tok"]["n-plain"], wrapped, "j-sev", BUNDLE_SEV)
    dek, _ = world["ks"].request_unwrap("node:n-sev", world["tok"]["n-sev"], wrapped, "j-sev", BUNDLE_SEV)
    assert len(dek) == 32


def test_level_mismatch_and_forged_context(world):
    ks = world["ks"]
    _, wrapped = _wrap(world["pub"], "sev")
    # claiming a standard bundle for a sev job is refused outright
    with pytest.raises(AuthError):
        ks.request_unwrap("node:n-sev", world["tok"]["n-sev"], wrapped, "j-sev", BUNDLE_STD)
    # a sev-wrapped key presented as standard for a standard job cannot unwrap
    with pytest.raises(IntegrityError):
        ks.request_unwrap("node:n-plain", world["tok"]["n-plain"], wrapped, "j-std", BUNDLE_STD)


def test_authorization_required(world):
    ks = world["ks"]
    _, wrapped = _wrap(world["pub"])
    with pytest.raises(AuthError):
        ks.request_unwrap("node:n-plain", world["tok"]["n-plain"], wrapped, "j-unknown", BUNDLE_STD)
    with pytest.raises(AuthError):  # authorized for n-plain only
        ks.request_unwrap("node:n-sev", world["tok"]["n-sev"], wrapped, "j-std", BUNDLE_STD)
    with pytest.raises(AuthError):  # someone else's token
        ks.request_unwrap("node:n-sev", world["tok"]["n-plain"], wrapped, "j-std", BUNDLE_STD)
    other = crypto.generate_keypair()
    _, foreign = _wrap(other)
    with pytest.raises(AuthError):  # key not part of the job
        ks.request_unwrap("node:n-plain", world["tok"]["n-plain"], foreign, "j-std", BUNDLE_STD)


def test_revocation_sequence_audited(world):
    ks = world["ks"]
    _, wrapped = _wrap(world["pub"])
    args = ("node:n-plain", world["tok"]["n-plain"], wrapped, "j-std", BUNDLE_STD)
    _, lease = ks.request_unwrap(*args)
    ks.revoke_lease(OPS, lease.lease_id)
    with pytest.raises(AuthError):
        ks.request_unwrap(*args)
    unwraps = [e for e in ks.audit_entries() if e.action == "key_unwrap"]
    assert [e.outcome for e in unwraps] == ["ok", "denied:auth"]


def test_job_revocation(world):
    ks = world["ks"]
    _, wrapped = _wrap(world["pub"])
    args = ("node:n-plain", world["tok"]["n-plain"], wrapped, "j-std", BUNDLE_STD)
    ks.request_unwrap(*args)
    assert ks.revoke_job(SCHED, "j-std") == 1
    with pytest.raises(AuthError):
        ks.request_unwrap(*args)


def test_lease_expiry(world):
    ks = world["ks"]
    _, wrapped = _wrap(world["pub"])
    args = ("node:n-plain", world["tok"]["n-plain"], wrapped, "j-std", BUNDLE_STD)
    ks.request_unwrap(*args)
    world["clock"].t += 3599
    ks.request_unwrap(*args)
    world["clock"].t += 2
    with pytest.raises(AuthError, match="expired"):
        ks.request_unwrap(*args)


def test_token_mac_and_expiry(world):
    ks = world["ks"]
    tok = world["tok"]["n-sev"]
    assert ks.verify_token(SCHED, tok) == {"sev": True, "domain": "orgA"}
    forged = AttestationToken(tok.node_id, {"sev": False, "domain": "orgA"}, tok.issued_at, tok.mac)
    with pytest.raises(AuthError):
        ks.verify_token(SCHED, forged)
    upgraded = AttestationToken("n-plain", {"sev": True, "domain": "orgA"}, tok.issued_at,
                                world["tok"]["n-plain"].mac)
    with pytest.raises(AuthError):
        ks.verify_token(SCHED, upgraded)
    world["clock"].t += 24 * 3600 + 1
    with pytest.raises(AuthError, match="expired"):
        ks.verify_token(SCHED, tok)


def test_duplicates_and_validation(world):
    ks = world["ks"]
    with pytest.raises(ConflictError):
        ks.register_node(OPS, "n-sev", {"sev": True, "domain": "orgA"})
    with pytest.raises(ConflictError):
        ks.add_principal(OPS, "alice", "user", "orgA")
    with pytest.raises(ValidationError):
        ks.register_node(OPS, "n3", {"sev": "yes", "domain": "orgA"})
    with pytest.raises(ValidationError):
        ks.add_principal(OPS, "x", "node", "orgA")
    with pytest.raises(NotFound):
        ks.authorize_job(SCHED, "j2", ["n-sev"], ["missing-key"], "standard", "alice")
    with pytest.raises(ConflictError):
        ks.authorize_job(SCHED, "j-std", ["n-plain"], [world["key_id"]], "standard", "alice")
    with pytest.raises(ConflictError):
        ks.bootstrap_operator("ops2", "infra")
    with pytest.raises(AuthError):  # alice's key in a job submitted by bob
        ks.authorize_job(SCHED, "j3", ["n-sev"], [world["key_id"]], "standard", "bob")


def test_owner_unwrap(world):
    ks = world["ks"]
    dek, wrapped = _wrap(world["pub"])
    assert ks.owner_unwrap(ALICE, wrapped, BUNDLE_STD).equals(dek)
    with pytest.raises(AuthError):
        ks.owner_unwrap(BOB, wrapped, BUNDLE_STD)
    img = DEK.generate(Purpose.IMAGE, 64)
    w = crypto.wrap_dek(img, world["pub"].public_key, world["key_id"], crypto.wrap_context("image"))
    assert ks.owner_unwrap(ALICE, w, {"purpose": "image"}).equals(img)


# ---------------------------------------------------------------------------
# RBAC matrix

ROLES = {"user": ALICE, "operator": OPS, "node": "node:n-sev", "scheduler": SCHED}
ALLOW = {
    "add_principal": {"operator"},
    "issue_keypair": {"user"},
    "get_pubkey": {"user", "operator", "node", "scheduler"},
    "register_node": {"operator"},
    "verify_token": {"operator", "scheduler"},
    "authorize_job": {"scheduler"},
    "revoke_job": {"operator", "scheduler"},
    "revoke_lease": {"operator"},
    "request_unwrap": {"node"},
    "owner_unwrap": {"user"},
    "audit": {"operator"},
}


def _invoke(world, op, actor, n):
    ks = world["ks"]
    dek, wrapped = _wrap(world["pub"], "sev")
    if op == "add_principal":
        return ks.add_principal(actor, f"p{n}", "user", "orgA")
    if op == "issue_keypair":
        return ks.issue_keypair(actor)
    if op == "get_pubkey":
        return ks.get_pubkey(actor, world["key_id"])
    if op == "register_node":
        return ks.register_node(actor, f"n{n}", {"sev": False, "domain": "orgA"})
    if op == "verify_token":
        return ks.verify_token(actor, world["tok"]["n-sev"])
    if op == "authorize_job":
        return ks.authorize_job(actor, f"j{n}", ["n-sev"], [world["key_id"]], "standard", "alice")
    if op == "revoke_job":
        return ks.revoke_job(actor, "j-std")
    if op == "revoke_lease":
        _, lease = ks.request_unwrap("node:n-sev", world["tok"]["n-sev"], wrapped, "j-sev", BUNDLE_SEV)
        return ks.revoke_lease(actor, lease.lease_id)
    if op == "request_unwrap":
        return ks.request_unwrap(actor, world["tok"]["n-sev"], wrapped, "j-sev", BUNDLE_SEV)
    if op == "owner_unwrap":
        return ks.owner_unwrap(actor, wrapped, BUNDLE_SEV)
    if op == "audit":
        return ks.audit(actor)
    raise AssertionError(op)


CASES = [(op, role) for op in ALLOW for role in ROLES]


@pytest.mark.parametrize("op,role", CASES)
def test_rbac_matrix(world, op, role):
    allowed = role in ALLOW[op]
    try:
        _invoke(world, op, ROLES[role], CASES.index((op, role)))
        outcome = True
    except AuthError as exc:
        assert not isinstance(exc, PolicyError)
        outcome = False
    assert outcome == allowed


def test_unknown_identity_denied(world):
    with pytest.raises(AuthError):
        world["ks"].issue_keypair("user:mallory")
    with pytest.raises(AuthError):
        world["ks"].issue_keypair("operator:alice")  # right name, wrong role
    assert world["ks"].credential_for("user:mallory") is None
    assert world["ks"].credential_for(ALICE) is not None


def test_sev_gating_randomized(world):
    ks = world["ks"]
    rng = random.Random(1)
    for n in range(40):
        node = rng.choice(["n-plain", "n-sev"])
        level = rng.choice(["standard", "sev"])
        job = f"r{n}"
        ks.authorize_job(SCHED, job, ["n-plain", "n-sev"], [world["key_id"]], level, "alice")
        _, wrapped = _wrap(world["pub"], level)
        ctx = {"purpose": "bundle", "security_level": level}
        try:
            ks.request_unwrap(f"node:{node}", world["tok"][node], wrapped, job, ctx)
            granted = True
        except PolicyError:
            granted = False
        assert granted == (level == "standard" or node == "n-sev")


# ---------------------------------------------------------------------------
# persistence

def test_state_survives_restart_and_compaction(world, tmp_path, keypair_pool):
    ks = world["ks"]
    dek, wrapped = _wrap(world["pub"])
    ks.request_unwrap("node:n-plain", world["tok"]["n-plain"], wrapped, "j-std", BUNDLE_STD)
    n_audit = len(ks.audit_entries())
    again = KeyService(SECRET, tmp_path / "ks", clock=world["clock"])
    assert again.audit_entries() == ks.audit_entries()
    assert again.owner_unwrap(ALICE, wrapped, BUNDLE_STD).equals(dek)
    again.compact()
    third = KeyService(SECRET, tmp_path / "ks", clock=world["clock"])
    assert len(third.audit_entries()) == n_audit + 1
    assert [e.seq for e in third.audit_entries()] == list(range(1, n_audit + 2))
    assert third.leases.keys() == ks.leases.keys()


def test_no_dek_in_persistent_state(world, tmp_path):
    ks = world["ks"]
    deks = []
    for _ in range(10):
        dek, wrapped = _wrap(world["pub"])
        deks.append(bytes(dek.material))
        ks.owner_unwrap(ALICE, wrapped, BUNDLE_STD)
    ks.compact()
    blob = b"".join(p.read_bytes() for p in (tmp_path / "ks").iterdir())
    for d in deks:
        assert d not in blob
        assert d.hex().encode() not in blob
        assert crypto.base64.b64encode(d) not in blob


def test_private_keys_sealed(world, tmp_path):
    from cryptography.hazmat.primitives import serialization

    ks = world["ks"]
    der = ks._private(world["key_id"]).private_bytes(
        serialization.Encoding.DER, serialization.PrivateFormat.PKCS8, serialization.NoEncryption())
    blob = (tmp_path / "ks" / "records.jsonl").read_bytes()
    assert der[100:164] not in blob
    assert crypto.base64.b64encode(der)[200:264] not in blob
    with pytest.raises(Exception):
        KeyService(b"t" * 32, tmp_path / "ks")._private(world["key_id"])


# ---------------------------------------------------------------------------
# over the wire

def test_remote_api_and_concurrent_audit(world):
    ks = world["ks"]
    server = RpcServer(KeyServiceServer(ks).dispatch, ks.credential_for).start()
    try:
        cred = ks.add_principal(OPS, "carol", "user", "orgA")
        carol = KeyServiceClient.connect(server.endpoint, cred.identity, cred.keysvc)
        key_id, pem = carol.issue_keypair()
        assert carol.get_pubkey(key_id).public_pem() == pem
        ops_cred = ks.credential_for(OPS)
        ops = KeyServiceClient.connect(server.endpoint, OPS, ops_cred)
        tok, node_cred = ops.register_node("n-wire", {"sev": False, "domain": "orgA"})
        sched = KeyServiceClient.connect(server.endpoint, SCHED, ks.scheduler_credential())
        assert sched.verify_token(tok) == {"sev": False, "domain": "orgA"}
        sched.authorize_job("j-wire", ["n-wire"], [key_id], "standard", "carol")
        node = KeyServiceClient.connect(server.endpoint, node_cred.identity, node_cred.keysvc)
        pub = carol.get_pubkey(key_id)
        dek, wrapped = _wrap(pub)
        with pytest.raises(AuthError):
            carol.request_unwrap(tok, wrapped, "j-wire", BUNDLE_STD)

        start = len(ks.audit_entries())
        errors = []

        def worker(i):
            try:
                if i % 2:
                    got, _ = node.request_unwrap(tok, wrapped, "j-wire", BUNDLE_STD)
                    assert got.equals(dek)
                else:
                    carol.get_pubkey(key_id)
            except Exception as exc:  # pragma: no cover - surfaced below
                errors.append(exc)

        threads = [threading.Thread(target=worker, args=(i,)) for i in range(100)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert errors == []
        entries = ops.audit(since=start)
        assert len(entries) == 100
        seqs = [e.seq for e in ks.audit_entries()]
        assert seqs == list(range(1, len(seqs) + 1))
        for c in (carol, ops, sched, node):
            c.close()
    finally:
        server.stop()
