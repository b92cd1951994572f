import builtins
import io
import os
import threading

import pytest

from edgeattest.agent import AgentConfig, EdgeAgent
from edgeattest.errors import ChallengeFailed, EnrollmentInFlight, HandoffFailed, SchemaError, UnknownDevice
from edgeattest.payload import xor_bytes
from edgeattest.registrar import Registrar
from edgeattest.tenant import KeySplit, Tenant, TenantClient, split_key
from edgeattest.transport import InProcessNetwork
from edgeattest.verifier import Mode, Verifier

PAYLOAD = b"PK\x03\x04 pretend zip bytes"


def test_split_recombines():
    s = split_key()
    assert xor_bytes(s.share_agent, s.share_verifier) == s.payload_key
    assert s.share_agent != s.payload_key and s.share_verifier != s.payload_key


def test_zero_share_identity():
    share = os.urandom(32)
    s = KeySplit(share, bytes(32), share)
    assert s.payload_key == s.share_verifier
    with pytest.raises(ValueError):
        KeySplit(os.urandom(32), bytes(32), os.urandom(32))


def test_splits_never_repeat():
    keys = {split_key().payload_key for _ in range(1000)}
    assert len(keys) == 1000


def test_repr_hides_key_material():
    s = split_key()
    assert s.payload_key.hex() not in repr(s)


class Stack:
    def __init__(self, manufacturer_ca, cluster, chain, reference):
        self.net = InProcessNetwork()
        self.cluster = cluster
        self.registrar_address = self.net.serve(Registrar(manufacturer_ca, cluster))
        self.verifier = Verifier(cluster, self.net, autostart=False)
        self.verifier_address = self.net.serve(self.verifier)
        self.tenant = Tenant(self.net, self.registrar_address, self.verifier_address, cluster)
        self.agent = EdgeAgent("edge-01", manufacturer_ca, cluster, AgentConfig(registration_backoff=0.01))
        self.agent.listen(self.net)
        cluster.apply_edge_node("edge-01", self.agent.ek_cert, reference, self.agent.address)
        self.agent.boot_and_register(chain, self.registrar_address)
        self.reference = reference


@pytest.fixture
def stack(manufacturer_ca, cluster, chain, reference):
    return Stack(manufacturer_ca, cluster, chain, reference)


def test_enroll_happy_path(stack):
    receipt = stack.tenant.enroll("edge-01", PAYLOAD, stack.reference)
    assert receipt.steps_completed == (
        "registrar-lookup",
        "payload-encrypted",
        "agent-identity-verified",
        "payload-delivered",
        "verifier-handoff",
    )
    assert stack.agent.state.held_ciphertext and stack.agent.state.held_share
    entry = stack.verifier.monitor("edge-01")
    assert entry.mode is Mode.INITIAL and entry.share is not None
    assert xor_bytes(entry.share, stack.agent.state.held_share) != entry.share
    assert [e.kind.value for e in stack.cluster.events("edge-01")][-1] == "PayloadDelivered"


def test_enroll_unknown_device(stack):
    with pytest.raises(UnknownDevice):
        stack.tenant.enroll("edge-99", PAYLOAD, stack.reference)


def test_enroll_empty_payload(stack):
    with pytest.raises(SchemaError):
        stack.tenant.enroll("edge-01", b"", stack.reference)


def test_imposter_agent_gets_nothing(stack, manufacturer_ca, cluster, chain):
    imposter = EdgeAgent("edge-01", manufacturer_ca, cluster)
    imposter.boot(chain)
    stack.net._services[stack.agent.address] = imposter
    with pytest.raises(ChallengeFailed):
        stack.tenant.enroll("edge-01", PAYLOAD, stack.reference)
    assert imposter.state.held_ciphertext is None
    with pytest.raises(Exception):
        stack.verifier.monitor("edge-01")


def test_verifier_handoff_failure(stack):
    stack.net.stop(stack.verifier_address)
    with pytest.raises(HandoffFailed):
        stack.tenant.enroll("edge-01", PAYLOAD, stack.reference)
    # agent has at most ciphertext plus its own share, never both shares
    assert stack.agent.share_deliveries == 0
    assert not stack.agent.state.executed


def test_one_enrollment_in_flight(stack):
    gate, entered = threading.Event(), threading.Event()
    real = stack.agent.identity_challenge

    def slow(nonce):
        entered.set()
        gate.wait(5)
        return real(nonce)

    stack.agent.identity_challenge = slow
    t = threading.Thread(target=stack.tenant.enroll, args=("edge-01", PAYLOAD, stack.reference))
    t.start()
    assert entered.wait(5)
    with pytest.raises(EnrollmentInFlight):
        stack.tenant.enroll("edge-01", PAYLOAD, stack.reference)
    gate.set()
    t.join(5)
    assert stack.verifier.monitor("edge-01")


def test_no_filesystem_writes(stack, monkeypatch):
    opened = []
    real_open, real_os_open = builtins.open, os.open

    def rec_open(file, mode="r", *a, **kw):
        opened.append((file, mode))
        return real_open(file, mode, *a, **kw)

    def rec_os_open(path, flags, *a, **kw):
        opened.append((path, flags))
        return real_os_open(path, flags, *a, **kw)

    monkeypatch.setattr(builtins, "open", rec_open)
    monkeypatch.setattr(io, "open", rec_open)
    monkeypatch.setattr(os, "open", rec_os_open)
    stack.tenant.enroll("edge-01", PAYLOAD, stack.reference)
    assert opened == []


def test_enroll_over_wire(stack):
    client = TenantClient(stack.net.connect(stack.net.serve(stack.tenant)))
    receipt = client.enroll("edge-01", PAYLOAD, stack.reference)
    assert receipt.device_id == "edge-01" and len(receipt.enrollment_id) == 32
    with pytest.raises(UnknownDevice):
        client.enroll("nobody", PAYLOAD, stack.reference)
