"""Registrar: identity intake for edge devices.

Runs the EK challenge, keeps one record per proven device, and flips the
matching EdgeNode to Registered so the controller can take over.
"""

from __future__ import annotations

import logging
import os
import threading
import time
from collections import defaultdict
from dataclasses import dataclass
from typing import Callable

from . import crypto, tpm
from .cluster import MockCluster, NodeStatus, Phase
from .crypto import CertificateAuthority
from .errors import (
    BadBinding,
    BadCertificate,
    ChallengeExpired,
    IllegalTransition,
    InvalidProof,
    NoChallenge,
    NotFound,
    UnknownDevice,
)
from .tpm import AkPublic
from .transport import Service

logger = logging.getLogger(__name__)

DEFAULT_CHALLENGE_TTL = 30.0


@dataclass(frozen=True)
class DeviceRecord:
    device_id: str
    ek_cert: bytes
    ak: AkPublic
    agent_address: str
    registered_at: float

    def to_dict(self) -> dict:
        return {
            "device_id": self.device_id,
            "ek_cert": self.ek_cert.decode(),
            "ak": self.ak.to_dict(),
            "agent_address": self.agent_address,
            "registered_at": self.registered_at,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "DeviceRecord":
        return cls(
            data["device_id"],
            data["ek_cert"].encode(),
            AkPublic.from_dict(data["ak"]),
            data["agent_address"],
            float(data["registered_at"]),
        )


@dataclass
class _Challenge:
    nonce: bytes
    expires: float
    ek_cert: bytes
    ak: AkPublic
    agent_address: str


class Registrar(Service):
    name = "registrar"

    def __init__(
        self,
        manufacturer_ca: CertificateAuthority,
        cluster: MockCluster,
        challenge_ttl: float = DEFAULT_CHALLENGE_TTL,
        clock: Callable[[], float] = time.monotonic,
    ):
        super().__init__()
        self._ca_cert = manufacturer_ca.certificate
        self.cluster = cluster
        self.challenge_ttl = challenge_ttl
        self._clock = clock
        self._challenges: dict[str, _Challenge] = {}
        self._records: dict[str, DeviceRecord] = {}
        self._held: set[str] = set()
        self._device_locks: defaultdict[str, threading.Lock] = defaultdict(threading.Lock)
        self._table_lock = threading.Lock()
        self._watch = None
        self.operations = {
            "begin_registration": self._op_begin,
            "complete_registration": self._op_complete,
            "lookup_device": self._op_lookup,
        }

    def _lock_for(self, device_id: str) -> threading.Lock:
        with self._table_lock:
            return self._device_locks[device_id]

    def begin_registration(self, device_id: str, ek_cert: bytes, ak: AkPublic, agent_address: str) -> bytes:
        cert = crypto.verify_certificate(ek_cert, self._ca_cert)
        if crypto.certificate_subject(cert) != device_id:
            raise BadCertificate(f"EK certificate subject does not name device {device_id!r}")
        ek_public = crypto.public_raw(crypto.certificate_public_key(cert))
        if not ak.verify_binding(ek_public):
            raise BadBinding(f"{device_id}: AK binding signature does not verify under the EK")
        nonce = os.urandom(crypto.DIGEST_SIZE)
        with self._lock_for(device_id):
            # A new challenge replaces any outstanding one.
            self._challenges[device_id] = _Challenge(
                nonce, self._clock() + self.challenge_ttl, bytes(ek_cert), ak, agent_address
            )
        return nonce

    def complete_registration(self, device_id: str, proof: bytes) -> DeviceRecord:
        with self._lock_for(device_id):
            challenge = self._challenges.pop(device_id, None)
            if challenge is None:
                raise NoChallenge(f"{device_id}: no outstanding challenge")
            if self._clock() > challenge.expires:
                raise ChallengeExpired(f"{device_id}: challenge expired")
            if not tpm.verify_possession(challenge.ek_cert, challenge.nonce, proof):
                raise InvalidProof(f"{device_id}: possession proof does not verify")
            record = DeviceRecord(device_id, challenge.ek_cert, challenge.ak, challenge.agent_address, time.time())
            self._records[device_id] = record
            logger.info("registered device %s at %s", device_id, record.agent_address)
            self._mark_registered(device_id)
            return record

    def _mark_registered(self, device_id: str) -> bool:
        try:
            res = self.cluster.get_edge_node(device_id)
        except NotFound:
            self._held.add(device_id)
            # Re-check after holding: an apply racing with us is either seen
            # here or delivered to the watch after the hold is visible.
            if not self.cluster.has_edge_node(device_id):
                logger.info("no EdgeNode %s yet; holding registration", device_id)
                return False
            res = self.cluster.get_edge_node(device_id)
        self._held.discard(device_id)
        if res.status.phase is not Phase.UNREGISTERED:
            return False
        try:
            self.cluster.patch_status(device_id, NodeStatus(Phase.REGISTERED, "EK identity verified"))
        except IllegalTransition:
            return False
        return True

    def is_held(self, device_id: str) -> bool:
        return device_id in self._held

    def flush_held(self) -> list[str]:
        """Patch any held registrations whose EdgeNode now exists."""
        done = []
        for device_id in sorted(self._held):
            with self._lock_for(device_id):
                if device_id in self._held and self.cluster.has_edge_node(device_id):
                    if self._mark_registered(device_id):
                        done.append(device_id)
        return done

    def start(self) -> None:
        """Follow EdgeNode creations so held registrations are released promptly."""
        if self._watch is not None:
            return
        self._watch = self.cluster.watch()
        threading.Thread(target=self._follow, name="registrar-watch", daemon=True).start()

    def _follow(self) -> None:
        for note in self._watch:
            if note.type == "ADDED" and self._held:
                self.flush_held()

    def stop(self) -> None:
        if self._watch is not None:
            self._watch.close()
            self._watch = None

    def lookup_device(self, device_id: str) -> DeviceRecord:
        record = self._records.get(device_id)
        if record is None:
            raise UnknownDevice(f"no registered device {device_id!r}")
        return record

    def records(self) -> list[str]:
        return sorted(self._records)

    # -- wire handlers -------------------------------------------------

    def _op_begin(self, body: dict) -> dict:
        nonce = self.begin_registration(
            body["device_id"], body["ek_cert"].encode(), AkPublic.from_dict(body["ak"]), body["agent_address"]
        )
        return {"nonce": nonce.hex(), "ttl": self.challenge_ttl}

    def _op_complete(self, body: dict) -> dict:
        record = self.complete_registration(body["device_id"], bytes.fromhex(body["proof"]))
        return {"record": record.to_dict(), "held": self.is_held(record.device_id)}

    def _op_lookup(self, body: dict) -> dict:
        return self.lookup_device(body["device_id"]).to_dict()


class RegistrarClient:
    def __init__(self, channel):
        self.channel = channel

    def begin_registration(self, device_id: str, ek_cert: bytes, ak: AkPublic, agent_address: str) -> bytes:
        result = self.channel.call(
            "begin_registration",
            {"device_id": device_id, "ek_cert": ek_cert.decode(), "ak": ak.to_dict(), "agent_address": agent_address},
        )
        return bytes.fromhex(result["nonce"])

    def complete_registration(self, device_id: str, proof: bytes) -> DeviceRecord:
        result = self.channel.call("complete_registration", {"device_id": device_id, "proof": proof.hex()})
        return DeviceRecord.from_dict(result["record"])

    def lookup_device(self, device_id: str) -> DeviceRecord:
        return DeviceRecord.from_dict(self.channel.call("lookup_device", {"device_id": device_id}))
