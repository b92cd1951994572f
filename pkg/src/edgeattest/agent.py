"""The agent running on each simulated edge device.

It owns the device's TPM, performs the measured boot, registers with the
registrar, answers identity and quote requests, and holds the encrypted
payload until the second key share arrives. Only then is the payload
decrypted and executed, which joins the device to the cluster as a worker.
"""

from __future__ import annotations

import base64
import logging
import secrets
import threading
import time
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from . import crypto
from .boot import DEFAULT_PCR_ALLOCATION, BootComponent, BootEventLog, Stage, simulate_boot
from .cluster import MockCluster
from .crypto import CertificateAuthority
from .errors import (
    ChallengeFailed,
    DecryptionFailed,
    EdgeAttestError,
    MissingCiphertext,
    NotBooted,
)
from .payload import KEY_SIZE, UnpackedPayload, unpack_payload, unseal, xor_bytes
from .registrar import RegistrarClient
from .tpm import Quote, SimulatedTPM
from .transport import Service

logger = logging.getLogger(__name__)

SESSION_TTL = 30.0


@dataclass
class AgentConfig:
    registration_attempts: int = 3
    registration_backoff: float = 2.0
    worker_startup_delay: float = 0.0
    pcr_allocation: Mapping[Stage, int] = field(default_factory=lambda: dict(DEFAULT_PCR_ALLOCATION))


@dataclass
class AgentState:
    held_ciphertext: bytes | None = None
    held_share: bytes | None = None
    executed: bool = False
    worker_enrolled: bool = False
    plaintext: bytes | None = None
    worker_error: str | None = None


class EdgeAgent(Service):
    name = "agent"

    def __init__(
        self,
        device_id: str,
        manufacturer_ca: CertificateAuthority,
        cluster: MockCluster,
        config: AgentConfig | None = None,
    ):
        super().__init__()
        self.device_id = device_id
        self.tpm = SimulatedTPM(device_id, manufacturer_ca)
        self.cluster = cluster
        self.config = config or AgentConfig()
        self.state = AgentState()
        self.log: BootEventLog | None = None
        self.address: str | None = None
        self.network = None
        self.timings: dict[str, float] = {}
        self._booted = False
        self._lock = threading.RLock()
        self._sessions: dict[str, float] = {}
        self._executed_share: bytes | None = None
        self.share_deliveries = 0
        self._worker_done = threading.Event()
        self._worker_thread: threading.Thread | None = None
        self.operations = {
            "identity_challenge": self._op_identity,
            "quote": self._op_quote,
            "deliver_payload": self._op_payload,
            "deliver_share": self._op_share,
        }

    @property
    def ek_cert(self) -> bytes:
        return self.tpm.ek_cert

    @property
    def booted(self) -> bool:
        return self._booted

    # -- lifecycle --------------------------------------------------------

    def listen(self, network) -> str:
        self.network = network
        self.address = network.serve(self, name=self.device_id)
        return self.address

    def boot(self, components: Sequence[BootComponent]) -> BootEventLog:
        with self._lock:
            self._booted = False
            self.tpm.power_cycle()
            _, log = simulate_boot(components, self.tpm.bank, self.config.pcr_allocation)
            self.log = log
            self._booted = True
            return log

    def reboot(self, components: Sequence[BootComponent]) -> BootEventLog:
        """Restart the device with a (possibly different) boot chain.

        Identity and registration survive; held payload material does not.
        """
        with self._lock:
            self.state.held_ciphertext = None
            self.state.held_share = None
            return self.boot(components)

    def register(self, registrar_address: str) -> None:
        if self.network is None or self.address is None:
            raise RuntimeError("agent must listen() before registering")
        attempts = max(1, self.config.registration_attempts)
        for attempt in range(1, attempts + 1):
            try:
                client = RegistrarClient(self.network.connect(registrar_address))
                nonce = client.begin_registration(self.device_id, self.tpm.ek_cert, self.tpm.ak.public, self.address)
                client.complete_registration(self.device_id, self.tpm.prove_possession(nonce))
                self.timings["registered"] = time.time()
                return
            except EdgeAttestError as e:
                logger.warning("%s: registration attempt %d/%d failed: %s", self.device_id, attempt, attempts, e)
                if attempt == attempts:
                    raise
                time.sleep(self.config.registration_backoff)

    def boot_and_register(self, components: Sequence[BootComponent], registrar_address: str, network=None) -> AgentState:
        self.timings["started"] = time.time()
        if network is not None and self.address is None:
            self.listen(network)
        self.boot(components)
        self.register(registrar_address)
        return self.state

    # -- requests ----------------------------------------------------------

    def identity_challenge(self, nonce: bytes) -> tuple[str, bytes]:
        proof = self.tpm.prove_possession(nonce)
        session = secrets.token_hex(16)
        with self._lock:
            now = time.monotonic()
            self._sessions = {s: t for s, t in self._sessions.items() if now - t < SESSION_TTL}
            self._sessions[session] = now
        return session, proof

    def handle_quote_request(self, nonce: bytes, selection: Sequence[int]) -> tuple[Quote, BootEventLog]:
        with self._lock:
            if not self._booted or self.log is None:
                raise NotBooted(f"{self.device_id}: boot has not completed")
            return self.tpm.quote(nonce, selection), BootEventLog(list(self.log.entries))

    def receive_payload(self, session: str, ciphertext: bytes, share: bytes) -> None:
        if len(share) != KEY_SIZE:
            raise ValueError("key share must be 32 bytes")
        with self._lock:
            started = self._sessions.pop(session, None)
            if started is None or time.monotonic() - started > SESSION_TTL:
                raise ChallengeFailed(f"{self.device_id}: payload delivered without a completed identity challenge")
            # Overwrite both fields together so a retry never mixes deliveries.
            self.state.held_ciphertext, self.state.held_share = bytes(ciphertext), bytes(share)
            self.timings["payload_received"] = time.time()

    def receive_key_share(self, share: bytes) -> dict:
        if len(share) != KEY_SIZE:
            raise ValueError("key share must be 32 bytes")
        with self._lock:
            self.share_deliveries += 1
            if self.state.executed:
                if share == self._executed_share:
                    return self._result()
                raise DecryptionFailed(f"{self.device_id}: payload already executed with a different share")
            if self.state.held_ciphertext is None or self.state.held_share is None:
                raise MissingCiphertext(f"{self.device_id}: no payload held")
            key = xor_bytes(self.state.held_share, share)
            plaintext = unseal(key, self.state.held_ciphertext, self.device_id.encode())
            unpacked = unpack_payload(plaintext)
            self.state.plaintext = plaintext
            self.state.executed = True
            self._executed_share = bytes(share)
            self.timings["executed"] = time.time()
            self._worker_thread = threading.Thread(
                target=self._run_worker, args=(unpacked,), name=f"worker-{self.device_id}", daemon=True
            )
            self._worker_thread.start()
            return self._result()

    def _result(self) -> dict:
        return {"executed": self.state.executed, "worker_enrolled": self.state.worker_enrolled}

    def _run_worker(self, payload: UnpackedPayload) -> None:
        """Stand-in for starting the edge worker service with the delivered credentials."""
        try:
            key = crypto.load_private_pem(payload.credentials["private_key"].encode())
            cert = payload.credentials["cert"].encode()
            if crypto.public_raw(key) != crypto.public_raw(crypto.certificate_public_key(cert)):
                raise EdgeAttestError("delivered private key does not match certificate")
            if self.config.worker_startup_delay > 0:
                time.sleep(self.config.worker_startup_delay)
            self.cluster.register_worker(cert, payload.node_name)
            self.state.worker_enrolled = True
            self.timings["worker_enrolled"] = time.time()
            logger.info("%s enrolled as worker %s", self.device_id, payload.node_name)
        except EdgeAttestError as e:
            self.state.worker_error = str(e)
            logger.warning("%s: worker enrollment failed: %s", self.device_id, e)
        finally:
            self._worker_done.set()

    def wait_for_worker(self, timeout: float | None = None) -> bool:
        """Block until the worker start attempt finishes; True iff it enrolled."""
        self._worker_done.wait(timeout)
        return self.state.worker_enrolled

    # -- wire handlers -------------------------------------------------

    def _op_identity(self, body: dict) -> dict:
        session, proof = self.identity_challenge(bytes.fromhex(body["nonce"]))
        return {"session": session, "proof": proof.hex()}

    def _op_quote(self, body: dict) -> dict:
        q, log = self.handle_quote_request(bytes.fromhex(body["nonce"]), [int(i) for i in body["selection"]])
        return {"quote": q.to_dict(), "event_log": log.to_json()}

    def _op_payload(self, body: dict) -> dict:
        self.receive_payload(body["session"], base64.b64decode(body["ciphertext"]), bytes.fromhex(body["share"]))
        return {"held": True}

    def _op_share(self, body: dict) -> dict:
        return self.receive_key_share(bytes.fromhex(body["share"]))


class AgentClient:
    """Cloud-side view of an agent endpoint."""

    def __init__(self, channel):
        self.channel = channel

    def identity_challenge(self, nonce: bytes) -> tuple[str, bytes]:
        r = self.channel.call("identity_challenge", {"nonce": nonce.hex()})
        return r["session"], bytes.fromhex(r["proof"])

    def quote(self, nonce: bytes, selection: Sequence[int]) -> tuple[Quote, BootEventLog]:
        r = self.channel.call("quote", {"nonce": nonce.hex(), "selection": list(selection)})
        return Quote.from_dict(r["quote"]), BootEventLog.from_json(r["event_log"])

    def deliver_payload(self, session: str, ciphertext: bytes, share: bytes) -> None:
        self.channel.call(
            "deliver_payload",
            {"session": session, "ciphertext": base64.b64encode(ciphertext).decode(), "share": share.hex()},
        )

    def deliver_share(self, share: bytes) -> dict:
        return self.channel.call("deliver_share", {"share": share.hex()})
