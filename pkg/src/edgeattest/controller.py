"""EdgeNode controller: the reconcile loop that turns attestation status
into credentials and permissions.

Reconciliation is level-triggered: each notification only names a resource,
and the controller acts on that resource's *current* status. Every action is
idempotent, so replaying the watch stream from the start is harmless.
"""

from __future__ import annotations

import enum
import logging
import queue
import threading
import time
from dataclasses import dataclass

from . import crypto
from .cluster import EdgeNodeResource, EventKind, MockCluster, Notification, Phase
from .errors import ChallengeFailed, EdgeAttestError, IdentityMismatch, NameCollision, NotFound
from .payload import CredentialBundle, build_payload
from .registrar import DeviceRecord

logger = logging.getLogger(__name__)


class Action(str, enum.Enum):
    VERIFY_AND_ENROLL = "VerifyAndEnroll"
    REVOKE = "Revoke"
    RECORD_ATTESTED = "RecordAttested"
    NONE = "None"


_ACTION_FOR_PHASE = {
    Phase.REGISTERED: Action.VERIFY_AND_ENROLL,
    Phase.UNATTESTED: Action.REVOKE,
    Phase.ATTESTED: Action.RECORD_ATTESTED,
}


@dataclass(frozen=True)
class ReconcileAction:
    action: Action
    name: str
    idempotency_key: tuple[str, str, int]
    skipped: bool = False


@dataclass
class ControllerConfig:
    retries: int = 3
    backoff: float = 2.0
    user_prefix: str = "edge-user-"
    role_prefix: str = "edge-role-"
    binding_prefix: str = "edge-binding-"


# Failures that retrying cannot fix.
_PERMANENT = (IdentityMismatch, ChallengeFailed, NameCollision)


class Controller:
    def __init__(self, cluster: MockCluster, registrar, tenant, config: ControllerConfig | None = None):
        self.cluster = cluster
        self.registrar = registrar
        self.tenant = tenant
        self.config = config or ControllerConfig()
        self.actions: list[ReconcileAction] = []
        self._done: set[tuple[str, str, int]] = set()
        self._done_lock = threading.Lock()
        self._watch = None
        self._queues: dict[str, queue.Queue] = {}
        self._queues_lock = threading.Lock()
        self._stopped = threading.Event()

    # -- naming -------------------------------------------------------------

    def user_name(self, node: str) -> str:
        return self.config.user_prefix + node

    def role_name(self, node: str) -> str:
        return self.config.role_prefix + node

    def binding_name(self, node: str) -> str:
        return self.config.binding_prefix + node

    # -- event loop -------------------------------------------------------

    def start(self, replay: bool = False) -> None:
        """Watch EdgeNodes on a background thread; one worker thread per resource."""
        self._watch = self.cluster.watch(MockCluster.EDGE_NODE, replay=replay)
        threading.Thread(target=self._dispatch, name="controller-watch", daemon=True).start()

    def stop(self) -> None:
        self._stopped.set()
        if self._watch is not None:
            self._watch.close()
        with self._queues_lock:
            for q in self._queues.values():
                q.put(None)

    def _dispatch(self) -> None:
        for note in self._watch:
            with self._queues_lock:
                q = self._queues.get(note.name)
                if q is None:
                    q = self._queues[note.name] = queue.Queue()
                    threading.Thread(target=self._worker, args=(q,), name=f"reconcile-{note.name}", daemon=True).start()
            q.put(note)

    def _worker(self, q: queue.Queue) -> None:
        while not self._stopped.is_set():
            note = q.get()
            if note is None:
                return
            try:
                self.reconcile(note)
            except Exception:
                logger.exception("reconcile of %s failed", note.name)

    def attach(self, replay: bool = False):
        """Synchronous alternative to start(): subscribe now, drain with process_pending()."""
        self._watch = self.cluster.watch(MockCluster.EDGE_NODE, replay=replay)
        return self._watch

    def process_pending(self) -> list[ReconcileAction]:
        return [self.reconcile(n) for n in self._watch.pending()]

    # -- reconciliation ---------------------------------------------------

    def reconcile(self, note: Notification | str) -> ReconcileAction:
        name = note if isinstance(note, str) else note.name
        try:
            res = self.cluster.get_edge_node(name)
        except NotFound:
            return ReconcileAction(Action.NONE, name, (name, "", -1), skipped=True)
        key = (name, res.status.phase.value, res.generation)
        action = _ACTION_FOR_PHASE.get(res.status.phase, Action.NONE)
        with self._done_lock:
            if key in self._done:
                return ReconcileAction(action, name, key, skipped=True)
            self._done.add(key)
        if action is Action.VERIFY_AND_ENROLL:
            self._verify_and_enroll(res)
        elif action is Action.REVOKE:
            self.revoke_permissions(res)
        elif action is Action.RECORD_ATTESTED:
            self._record_attested(res)
        done = ReconcileAction(action, name, key)
        self.actions.append(done)
        return done

    def _retrying(self, what: str, name: str, fn):
        attempts = max(1, self.config.retries)
        for attempt in range(1, attempts + 1):
            try:
                return fn()
            except _PERMANENT:
                raise
            except EdgeAttestError as e:
                self.cluster.annotate(name, f"{what} failed (attempt {attempt}/{attempts}): {e}")
                if attempt == attempts:
                    raise
                time.sleep(self.config.backoff)

    def _verify_and_enroll(self, res: EdgeNodeResource) -> None:
        name = res.name
        if self.cluster.has_user(self.user_name(name)):
            logger.info("%s already has credentials; nothing to enroll", name)
            return
        try:
            record = self._retrying("registrar lookup", name, lambda: self.registrar.lookup_device(name))
            self.verify_identity(res, record)
            bundle = self.issue_credentials(res)
            payload = build_payload(bundle, name)
            del bundle
            self._retrying("tenant enrollment", name, lambda: self.tenant.enroll(name, payload, res.spec.reference))
        except EdgeAttestError as e:
            logger.error("enrollment of %s aborted: %s", name, e)
            self.cluster.annotate(name, f"enrollment aborted: {e}")

    def verify_identity(self, res: EdgeNodeResource, record: DeviceRecord) -> None:
        """The registrar already validated the device's cert; exact byte equality suffices."""
        if bytes(res.spec.ek_cert) != bytes(record.ek_cert):
            self.cluster.annotate(res.name, "EK certificate does not match the registered device")
            raise IdentityMismatch(f"{res.name}: EK certificate in spec differs from registrar record")

    def issue_credentials(self, res: EdgeNodeResource) -> CredentialBundle:
        name = res.name
        user, role, binding = self.user_name(name), self.role_name(name), self.binding_name(name)
        if self.cluster.has_user(user):
            raise NameCollision(f"credentials for {name!r} already issued")
        key = crypto.new_signing_key()
        cert = self.cluster.sign_csr(key.public_key(), user)
        self.cluster.create_role(role, res.spec.role_rules)
        self.cluster.create_rolebinding(binding, role, user)
        self.cluster.record_event(EventKind.CREDENTIALS_ISSUED, name, f"user {user}, role {role}")
        return CredentialBundle(user, key, cert, role, binding)

    def revoke_permissions(self, res: EdgeNodeResource | str) -> bool:
        """Drop the node's rolebinding; the user and role stay for audit."""
        name = res if isinstance(res, str) else res.name
        removed = self.cluster.delete_rolebinding(self.binding_name(name))
        if removed:
            self.cluster.record_event(EventKind.PERMISSIONS_REVOKED, name, f"rolebinding {self.binding_name(name)} deleted")
        return removed

    def _record_attested(self, res: EdgeNodeResource) -> None:
        name = res.name
        user, role, binding = self.user_name(name), self.role_name(name), self.binding_name(name)
        if not self.cluster.has_user(user) or self.cluster.has_rolebinding(binding):
            return
        # Re-attested after a revocation: give the permissions back.
        try:
            self.cluster.get_resource("Role", role)
        except NotFound:
            return
        self.cluster.create_rolebinding(binding, role, user)
        self.cluster.record_event(EventKind.CREDENTIALS_ISSUED, name, f"rolebinding {binding} restored")
