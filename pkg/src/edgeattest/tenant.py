"""Tenant: the enrollment endpoint the controller calls.

It encrypts the payload under a key split into two shares, hands the
ciphertext and one share to the agent after re-checking the agent's EK,
and gives the other share plus the reference state to the verifier.
The payload and key material live only in memory.
"""

from __future__ import annotations

import base64
import logging
import os
import threading
import uuid
from dataclasses import dataclass

from . import tpm
from .agent import AgentClient
from .boot import ReferenceState
from .cluster import EventKind
from .errors import ChallengeFailed, EdgeAttestError, EnrollmentInFlight, HandoffFailed, SchemaError
from .payload import KEY_SIZE, seal, xor_bytes
from .registrar import RegistrarClient
from .transport import Service

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class KeySplit:
    """payload_key == share_agent XOR share_verifier."""

    payload_key: bytes
    share_agent: bytes
    share_verifier: bytes

    def __post_init__(self):
        if xor_bytes(self.share_agent, self.share_verifier) != self.payload_key:
            raise ValueError("shares do not recombine to the payload key")

    def __repr__(self) -> str:
        return "KeySplit(<redacted>)"


def split_key() -> KeySplit:
    key = os.urandom(KEY_SIZE)
    share_agent = os.urandom(KEY_SIZE)
    return KeySplit(key, share_agent, xor_bytes(key, share_agent))


@dataclass(frozen=True)
class EnrollmentReceipt:
    enrollment_id: str
    device_id: str
    steps_completed: tuple[str, ...]

    def to_dict(self) -> dict:
        return {"enrollment_id": self.enrollment_id, "device_id": self.device_id, "steps_completed": list(self.steps_completed)}

    @classmethod
    def from_dict(cls, data: dict) -> "EnrollmentReceipt":
        return cls(data["enrollment_id"], data["device_id"], tuple(data["steps_completed"]))


class Tenant(Service):
    name = "tenant"

    def __init__(self, network, registrar_address: str, verifier_address: str, cluster=None):
        super().__init__()
        self.network = network
        self.registrar_address = registrar_address
        self.verifier_address = verifier_address
        self.cluster = cluster
        self._in_flight: set[str] = set()
        self._lock = threading.Lock()
        self.operations = {"enroll": self._op_enroll}

    def enroll(self, device_id: str, payload_zip: bytes, reference: ReferenceState) -> EnrollmentReceipt:
        if not payload_zip:
            raise SchemaError("payload must be nonempty")
        reference.validate()
        with self._lock:
            if device_id in self._in_flight:
                raise EnrollmentInFlight(f"enrollment for {device_id!r} already in progress")
            self._in_flight.add(device_id)
        try:
            return self._enroll(device_id, payload_zip, reference)
        finally:
            with self._lock:
                self._in_flight.discard(device_id)

    def _enroll(self, device_id: str, payload_zip: bytes, reference: ReferenceState) -> EnrollmentReceipt:
        steps = []
        record = RegistrarClient(self.network.connect(self.registrar_address)).lookup_device(device_id)
        steps.append("registrar-lookup")

        split = split_key()
        ciphertext = seal(split.payload_key, payload_zip, device_id.encode())
        steps.append("payload-encrypted")

        agent = AgentClient(self.network.connect(record.agent_address))
        nonce = os.urandom(32)
        session, proof = agent.identity_challenge(nonce)
        if not tpm.verify_possession(record.ek_cert, nonce, proof):
            raise ChallengeFailed(f"{device_id}: agent at {record.agent_address} does not hold the registered EK")
        steps.append("agent-identity-verified")

        agent.deliver_payload(session, ciphertext, split.share_agent)
        steps.append("payload-delivered")
        if self.cluster is not None:
            self.cluster.record_event(EventKind.PAYLOAD_DELIVERED, device_id, "ciphertext and first key share held by agent")

        try:
            self.network.connect(self.verifier_address).call(
                "add_monitor",
                {
                    "device_id": device_id,
                    "reference_state": reference.to_dict(),
                    "share": split.share_verifier.hex(),
                    "ak": record.ak.to_dict(),
                    "ek_cert": record.ek_cert.decode(),
                    "agent_address": record.agent_address,
                },
            )
        except EdgeAttestError as e:
            raise HandoffFailed(f"{device_id}: verifier handoff failed: {e}") from e
        finally:
            del split
        steps.append("verifier-handoff")
        receipt = EnrollmentReceipt(uuid.uuid4().hex, device_id, tuple(steps))
        logger.info("enrollment %s for %s complete", receipt.enrollment_id, device_id)
        return receipt

    def _op_enroll(self, body: dict) -> dict:
        receipt = self.enroll(
            body["device_id"], base64.b64decode(body["payload"]), ReferenceState.from_dict(body["reference_state"])
        )
        return receipt.to_dict()


class TenantClient:
    def __init__(self, channel):
        self.channel = channel

    def enroll(self, device_id: str, payload_zip: bytes, reference: ReferenceState) -> EnrollmentReceipt:
        result = self.channel.call(
            "enroll",
            {
                "device_id": device_id,
                "payload": base64.b64encode(payload_zip).decode(),
                "reference_state": reference.to_dict(),
            },
        )
        return EnrollmentReceipt.from_dict(result)
