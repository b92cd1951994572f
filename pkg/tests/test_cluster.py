import json
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from edgeattest import crypto
from edgeattest.cluster import LEGAL_TRANSITIONS, EventKind, MockCluster, NodeStatus, Phase
from edgeattest.crypto import CertificateAuthority
from edgeattest.errors import (
    AccessDenied,
    AlreadyExists,
    BadCertificate,
    DanglingReference,
    IllegalTransition,
    NameCollision,
    NotFound,
)
from edgeattest.scenario import make_chain, make_reference

_SHARED_CA = CertificateAuthority("shared-test-ca")
_REFERENCE = make_reference(make_chain(random.Random(0)), random.Random(1))

EK = b"-----BEGIN CERTIFICATE-----\nnot-parsed-here\n-----END CERTIFICATE-----\n"


@pytest.fixture
def node(cluster, reference):
    return cluster.apply_edge_node("edge-01", EK, reference, "127.0.0.1:1", [("create", "node"), ("get", "pod")])


def test_apply_and_get(cluster, node):
    got = cluster.get_edge_node("edge-01")
    assert got.status.phase is Phase.UNREGISTERED
    assert got.spec.ek_cert == EK


def test_apply_duplicate(cluster, node, reference):
    with pytest.raises(AlreadyExists):
        cluster.apply_edge_node("edge-01", EK, reference, "x:1")


def test_get_unknown(cluster):
    with pytest.raises(NotFound):
        cluster.get_edge_node("nope")
    with pytest.raises(NotFound):
        cluster.get_resource("Gadget", "x")


def test_patch_registered_notifies(cluster, node):
    w = cluster.watch()
    cluster.patch_status("edge-01", NodeStatus(Phase.REGISTERED))
    note = w.get(timeout=1)
    assert note.phase is Phase.REGISTERED and note.name == "edge-01"
    assert [e.kind for e in cluster.events("edge-01")] == [EventKind.REGISTERED]


def test_illegal_transition_names_both_states(cluster, node):
    w = cluster.watch()
    with pytest.raises(IllegalTransition, match="Unregistered -> Attested"):
        cluster.patch_status("edge-01", NodeStatus(Phase.ATTESTED))
    assert w.pending() == []
    assert cluster.get_edge_node("edge-01").status_history == []


def test_attested_to_unattested(cluster, node):
    for phase in (Phase.REGISTERED, Phase.ATTESTED):
        cluster.patch_status("edge-01", NodeStatus(phase))
    res = cluster.patch_status("edge-01", NodeStatus(Phase.UNATTESTED, "digest-not-allowed:kernel"))
    assert res.status.message == "digest-not-allowed:kernel"
    assert cluster.events("edge-01")[-1].kind is EventKind.ATTESTATION_FAILED


def test_unattested_needs_message():
    with pytest.raises(ValueError):
        NodeStatus(Phase.UNATTESTED)


def test_watch_order_and_replay(cluster, node):
    w = cluster.watch()
    cluster.patch_status("edge-01", NodeStatus(Phase.REGISTERED))
    cluster.patch_status("edge-01", NodeStatus(Phase.ATTESTED))
    notes = w.pending()
    assert [n.phase for n in notes] == [Phase.REGISTERED, Phase.ATTESTED]
    assert notes[0].seq < notes[1].seq
    replayed = cluster.watch(replay=True).pending()
    assert [n.type for n in replayed] == ["ADDED", "MODIFIED", "MODIFIED"]


def test_watch_close_ends_iteration(cluster):
    w = cluster.watch()
    w.close()
    assert list(w) == []


@settings(max_examples=100)
@given(st.lists(st.sampled_from(list(Phase)), max_size=40))
def test_history_only_legal_transitions(targets):
    cluster = MockCluster(ca=_SHARED_CA)
    cluster.apply_edge_node("n", EK, _REFERENCE, "x:1")
    for t in targets:
        msg = "reason" if t is Phase.UNATTESTED else ""
        try:
            cluster.patch_status("n", NodeStatus(t, msg))
        except IllegalTransition:
            pass
    res = cluster.get_edge_node("n")
    phases = [Phase.UNREGISTERED] + [s.phase for s, _ in res.status_history]
    assert all(pair in LEGAL_TRANSITIONS for pair in zip(phases, phases[1:]))
    stamps = [ts for _, ts in res.status_history]
    assert stamps == sorted(stamps) and len(set(stamps)) == len(stamps)
    # every transition has a matching event
    assert len(cluster.events("n")) == len(res.status_history)




def test_sign_csr(cluster):
    key = crypto.new_signing_key()
    cert = cluster.sign_csr(key.public_key(), "edge-user-edge-01")
    parsed = crypto.verify_certificate(cert, cluster.ca.certificate)
    assert crypto.certificate_subject(parsed) == "edge-user-edge-01"
    with pytest.raises(BadCertificate):
        crypto.verify_certificate(cert, CertificateAuthority("manufacturer").certificate)
    # same key again is fine, different key collides
    cluster.sign_csr(key.public_key(), "edge-user-edge-01")
    with pytest.raises(NameCollision):
        cluster.sign_csr(crypto.new_signing_key().public_key(), "edge-user-edge-01")


def _user(cluster, name="u"):
    key = crypto.new_signing_key()
    return key, cluster.sign_csr(key.public_key(), name)


def test_rbac_grant_and_revoke(cluster):
    _user(cluster)
    assert not cluster.check_access("u", "create", "node")
    cluster.create_role("r", [("create", "node"), ("get", "pod")])
    cluster.create_rolebinding("b", "r", "u")
    assert cluster.check_access("u", "create", "node")
    assert cluster.check_access("u", "get", "pod")
    assert not cluster.check_access("u", "delete", "node")
    assert cluster.delete_rolebinding("b") is True
    assert cluster.delete_rolebinding("b") is False
    for verb, kind in [("create", "node"), ("get", "pod"), ("delete", "node")]:
        assert not cluster.check_access("u", verb, kind)


def test_rolebinding_dangling(cluster):
    _user(cluster)
    with pytest.raises(DanglingReference):
        cluster.create_rolebinding("b", "missing", "u")
    cluster.create_role("r", [])
    with pytest.raises(DanglingReference):
        cluster.create_rolebinding("b", "r", "ghost")


def test_register_worker(cluster):
    key, cert = _user(cluster)
    with pytest.raises(AccessDenied):
        cluster.register_worker(cert, "edge-01")
    cluster.create_role("r", [("create", "node")])
    cluster.create_rolebinding("b", "r", "u")
    rec = cluster.register_worker(cert, "edge-01")
    assert rec.user == "u" and cluster.list_workers() == ["edge-01"]
    assert cluster.register_worker(cert, "edge-01") == rec  # no second worker
    assert [e.kind for e in cluster.events("edge-01")] == [EventKind.WORKER_ENROLLED]
    cluster.delete_rolebinding("b")
    with pytest.raises(AccessDenied):
        cluster.register_worker(cert, "edge-02")


def test_register_worker_wrong_trust_root(cluster):
    other = CertificateAuthority("simulated-tpm-manufacturer")
    key = crypto.new_signing_key()
    cert = other.issue("u", key.public_key())
    with pytest.raises(BadCertificate):
        cluster.register_worker(cert, "edge-01")


def test_event_export_and_dump(cluster, node):
    cluster.patch_status("edge-01", NodeStatus(Phase.REGISTERED))
    cluster.record_event(EventKind.CREDENTIALS_ISSUED, "edge-01", "x")
    lines = cluster.export_events().splitlines()
    assert [json.loads(l)["kind"] for l in lines] == ["Registered", "CredentialsIssued"]
    assert "T" in json.loads(lines[0])["timestamp"]
    dump = json.loads(json.dumps(cluster.dump()))
    assert dump["edge_nodes"][0]["status"]["phase"] == "Registered"
    assert set(dump) == {"edge_nodes", "users", "roles", "rolebindings", "workers"}
