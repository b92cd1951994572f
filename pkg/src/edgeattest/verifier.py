"""Verifier: gates the second key share on a passing boot attestation, then
keeps polling and reports failures natively (EdgeNode status) or by webhook.
"""

from __future__ import annotations

import enum
import logging
import os
import threading
import time
from dataclasses import dataclass, field
from typing import Iterable

from . import crypto
from .agent import AgentClient
from .boot import AttestationVerdict, Reason, ReferenceState, check_reference
from .cluster import MockCluster, NodeStatus, Phase
from .errors import DuplicateMonitor, EdgeAttestError, IllegalTransition, NotFound, Unreachable
from .tpm import AkPublic
from .transport import Service, post_json

logger = logging.getLogger(__name__)

DEFAULT_POLL_INTERVAL = 2.0
WEBHOOK_ATTEMPTS = 3


class Mode(str, enum.Enum):
    INITIAL = "initial"
    CONTINUOUS = "continuous"
    REVOKED = "revoked"


class Channel(str, enum.Enum):
    NATIVE = "native"
    WEBHOOK = "webhook"


@dataclass
class MonitorEntry:
    device_id: str
    reference: ReferenceState
    share: bytes | None = field(repr=False)
    ak: AkPublic
    ek_public: bytes
    agent_address: str
    poll_interval: float = DEFAULT_POLL_INTERVAL
    consecutive_failures_allowed: int = 0
    last_verdict: AttestationVerdict | None = None
    mode: Mode = Mode.INITIAL
    failures: int = 0
    polls: int = 0
    nonces: list[bytes] = field(default_factory=list, repr=False)
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False)
    stop: threading.Event = field(default_factory=threading.Event, repr=False)


class Verifier(Service):
    name = "verifier"

    def __init__(
        self,
        cluster: MockCluster,
        network,
        poll_interval: float = DEFAULT_POLL_INTERVAL,
        consecutive_failures_allowed: int = 0,
        channels: Iterable[Channel | str] = (Channel.NATIVE,),
        webhook_url: str | None = None,
        webhook_retry_delay: float = 0.2,
        autostart: bool = True,
    ):
        super().__init__()
        if poll_interval <= 0:
            raise ValueError("poll interval must be positive")
        self.cluster = cluster
        self.network = network
        self.poll_interval = poll_interval
        self.consecutive_failures_allowed = consecutive_failures_allowed
        self.channels = frozenset(Channel(c) for c in channels)
        self.webhook_url = webhook_url
        self.webhook_retry_delay = webhook_retry_delay
        self.autostart = autostart
        self._monitors: dict[str, MonitorEntry] = {}
        self._lock = threading.Lock()
        self.operations = {"add_monitor": self._op_add, "monitor_status": self._op_status}

    # -- monitor management ---------------------------------------------

    def add_monitor(
        self,
        device_id: str,
        reference: ReferenceState,
        share: bytes,
        ak: AkPublic,
        ek_cert: bytes,
        agent_address: str,
    ) -> MonitorEntry:
        reference.validate()
        if len(share) != 32:
            raise ValueError("key share must be 32 bytes")
        ek_public = crypto.public_raw(crypto.certificate_public_key(ek_cert))
        entry = MonitorEntry(
            device_id,
            reference,
            bytes(share),
            ak,
            ek_public,
            agent_address,
            poll_interval=self.poll_interval,
            consecutive_failures_allowed=self.consecutive_failures_allowed,
        )
        with self._lock:
            current = self._monitors.get(device_id)
            if current is not None and current.mode is not Mode.REVOKED:
                raise DuplicateMonitor(f"{device_id} is already monitored")
            self._monitors[device_id] = entry
        logger.info("monitoring %s at %s every %.2fs", device_id, agent_address, entry.poll_interval)
        if self.autostart:
            threading.Thread(target=self._poll_loop, args=(entry,), name=f"poll-{device_id}", daemon=True).start()
        return entry

    def monitor(self, device_id: str) -> MonitorEntry:
        with self._lock:
            entry = self._monitors.get(device_id)
        if entry is None:
            raise NotFound(f"no monitor for {device_id!r}")
        return entry

    def stop(self) -> None:
        with self._lock:
            entries = list(self._monitors.values())
        for e in entries:
            e.stop.set()

    def _poll_loop(self, entry: MonitorEntry) -> None:
        # First attestation runs immediately, then once per interval.
        while not entry.stop.is_set():
            self.attest_once(entry.device_id)
            if entry.mode is Mode.REVOKED:
                return
            entry.stop.wait(entry.poll_interval)

    # -- attestation -----------------------------------------------------

    def attest_once(self, device_id: str) -> AttestationVerdict:
        entry = self.monitor(device_id)
        with entry.lock:
            if entry.mode is Mode.REVOKED:
                return entry.last_verdict
            verdict = self._appraise(entry)
            entry.last_verdict = verdict
            entry.polls += 1
            if verdict.passed:
                if entry.mode is Mode.INITIAL:
                    self._release(entry)
            elif verdict.reason is Reason.AGENT_UNREACHABLE and entry.failures <= entry.consecutive_failures_allowed:
                logger.warning("%s unreachable (%d tolerated)", device_id, entry.failures)
            else:
                self._revoke(entry, verdict)
            return entry.last_verdict

    def _appraise(self, entry: MonitorEntry) -> AttestationVerdict:
        nonce = os.urandom(32)
        entry.nonces.append(nonce)
        try:
            quote, log = AgentClient(self.network.connect(entry.agent_address)).quote(
                nonce, entry.reference.pcr_selection
            )
        except (Unreachable, EdgeAttestError) as e:
            entry.failures += 1
            return AttestationVerdict.fail(Reason.AGENT_UNREACHABLE, detail=str(e))
        entry.failures = 0
        verdict = check_reference(log, quote, entry.reference, entry.ak, entry.ek_public, nonce)
        if not verdict.passed:
            logger.warning("%s failed attestation: %s %s", entry.device_id, verdict.message, verdict.detail)
        return verdict

    def _release(self, entry: MonitorEntry) -> None:
        # Status goes to Attested first so the cluster timeline always shows
        # Attested before the worker that the released share lets start.
        self._patch(entry.device_id, NodeStatus(Phase.ATTESTED, "boot attestation passed"))
        share, entry.share = entry.share, None
        try:
            AgentClient(self.network.connect(entry.agent_address)).deliver_share(share)
        except EdgeAttestError as e:
            verdict = AttestationVerdict.fail(Reason.AGENT_UNREACHABLE, detail=f"key share delivery failed: {e}")
            entry.last_verdict = verdict
            self._revoke(entry, verdict)
            return
        finally:
            del share
        entry.mode = Mode.CONTINUOUS
        logger.info("%s attested; key share released", entry.device_id)

    def _revoke(self, entry: MonitorEntry, verdict: AttestationVerdict) -> None:
        entry.share = None
        entry.mode = Mode.REVOKED
        entry.stop.set()
        self.notify_revocation(entry.device_id, verdict)

    def notify_revocation(
        self, device_id: str, verdict: AttestationVerdict, channels: Iterable[Channel | str] | None = None
    ) -> None:
        if verdict.passed:
            raise ValueError("cannot revoke on a passing verdict")
        chosen = self.channels if channels is None else frozenset(Channel(c) for c in channels)
        if Channel.WEBHOOK in chosen:
            self._post_webhook(device_id, verdict)
        if Channel.NATIVE in chosen:
            self._patch(device_id, NodeStatus(Phase.UNATTESTED, verdict.message))

    def _post_webhook(self, device_id: str, verdict: AttestationVerdict) -> bool:
        if not self.webhook_url:
            logger.error("webhook channel selected but no URL configured")
            return False
        body = {
            "device_id": device_id,
            "reason": verdict.reason.value,
            "failing_stage": verdict.failing_stage.value if verdict.failing_stage else None,
            "timestamp": time.time(),
        }
        for attempt in range(1, WEBHOOK_ATTEMPTS + 1):
            try:
                post_json(self.webhook_url, body)
                return True
            except Unreachable as e:
                logger.warning("webhook attempt %d/%d failed: %s", attempt, WEBHOOK_ATTEMPTS, e)
                if attempt < WEBHOOK_ATTEMPTS:
                    time.sleep(self.webhook_retry_delay)
        logger.error("webhook for %s permanently unreachable", device_id)
        return False

    def _patch(self, device_id: str, status: NodeStatus) -> None:
        try:
            self.cluster.patch_status(device_id, status)
        except (IllegalTransition, NotFound) as e:
            logger.error("could not patch %s: %s", device_id, e)

    # -- wire handlers -------------------------------------------------

    def _op_add(self, body: dict) -> dict:
        entry = self.add_monitor(
            body["device_id"],
            ReferenceState.from_dict(body["reference_state"]),
            bytes.fromhex(body["share"]),
            AkPublic.from_dict(body["ak"]),
            body["ek_cert"].encode(),
            body["agent_address"],
        )
        return {"device_id": entry.device_id, "mode": entry.mode.value}

    def _op_status(self, body: dict) -> dict:
        entry = self.monitor(body["device_id"])
        return {
            "device_id": entry.device_id,
            "mode": entry.mode.value,
            "share_held": entry.share is not None,
            "polls": entry.polls,
            "last_verdict": entry.last_verdict.to_dict() if entry.last_verdict else None,
        }
