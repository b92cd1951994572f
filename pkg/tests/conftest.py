import hashlib
import os
import random

import pytest

from edgeattest.cluster import MockCluster
from edgeattest.crypto import CertificateAuthority
from edgeattest.scenario import Deployment, make_chain, make_reference


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def oracle_chain(digests, start=bytes(32)) -> bytes:
    """Independent extend chain: value <- SHA256(value || d)."""
    value = start
    for d in digests:
        value = sha256(value + d)
    return value


@pytest.fixture(scope="session")
def manufacturer_ca():
    return CertificateAuthority("test-tpm-manufacturer")


@pytest.fixture
def cluster():
    return MockCluster()


@pytest.fixture
def rng():
    return random.Random(1234)


@pytest.fixture
def chain(rng):
    return make_chain(rng)


@pytest.fixture
def reference(chain, rng):
    return make_reference(chain, rng)


@pytest.fixture
def deployment():
    dep = Deployment("inproc", poll_interval=0.2, registration_backoff=0.01)
    yield dep
    dep.close()


@pytest.fixture
def nonce():
    return os.urandom(32)


def wait_until(pred, timeout=5.0, interval=0.005):
    import time

    deadline = time.monotonic() + timeout
    while not pred():
        if time.monotonic() > deadline:
            return False
        time.sleep(interval)
    return True


def start_device(dep, name, chain, reference, boot_chain=None):
    """Create an agent, apply its EdgeNode, boot and register it."""
    agent = dep.create_agent(name)
    dep.apply_edge_node(agent, reference)
    agent.boot_and_register(boot_chain or chain, dep.registrar_address)
    return agent


def has_monitor(dep, name):
    try:
        dep.verifier.monitor(name)
        return True
    except Exception:
        return False


@pytest.fixture
def manual_deployment():
    """Deployment whose verifier only attests when a test calls attest_once."""
    dep = Deployment("inproc", poll_interval=0.2, registration_backoff=0.01, verifier_options={"autostart": False})
    yield dep
    dep.close()
