"""In-memory stand-in for the orchestrator API server.

Holds EdgeNode resources, RBAC objects, worker nodes and the event log;
offers watch streams, a cluster CA for user certificates, and access checks.
``MockCluster`` is the only implementation here, but callers depend only on
its public methods so a real API client could take its place.
"""

from __future__ import annotations

import copy
import datetime
import enum
import itertools
import json
import logging
import queue
import threading
import time
from dataclasses import dataclass, field
from typing import Iterable, Iterator

from . import crypto
from .boot import ReferenceState
from .crypto import CertificateAuthority
from .errors import (
    AccessDenied,
    AlreadyExists,
    BadCertificate,
    DanglingReference,
    IllegalTransition,
    NameCollision,
    NotFound,
)

logger = logging.getLogger(__name__)


class Phase(str, enum.Enum):
    UNREGISTERED = "Unregistered"
    REGISTERED = "Registered"
    ATTESTED = "Attested"
    UNATTESTED = "Unattested"


LEGAL_TRANSITIONS: frozenset[tuple[Phase, Phase]] = frozenset(
    {
        (Phase.UNREGISTERED, Phase.REGISTERED),
        (Phase.REGISTERED, Phase.ATTESTED),
        (Phase.REGISTERED, Phase.UNATTESTED),
        (Phase.ATTESTED, Phase.UNATTESTED),
        (Phase.UNATTESTED, Phase.ATTESTED),
    }
)


@dataclass(frozen=True)
class NodeStatus:
    phase: Phase
    message: str = ""

    def __post_init__(self):
        object.__setattr__(self, "phase", Phase(self.phase))
        if self.phase is Phase.UNATTESTED and not self.message:
            raise ValueError("an Unattested status must carry the verdict reason")


class EventKind(str, enum.Enum):
    REGISTERED = "Registered"
    CREDENTIALS_ISSUED = "CredentialsIssued"
    PAYLOAD_DELIVERED = "PayloadDelivered"
    ATTESTED = "Attested"
    ATTESTATION_FAILED = "AttestationFailed"
    PERMISSIONS_REVOKED = "PermissionsRevoked"
    WORKER_ENROLLED = "WorkerEnrolled"


_EVENT_FOR_PHASE = {
    Phase.REGISTERED: EventKind.REGISTERED,
    Phase.ATTESTED: EventKind.ATTESTED,
    Phase.UNATTESTED: EventKind.ATTESTATION_FAILED,
}

Rule = tuple[str, str]


@dataclass
class EdgeNodeSpec:
    ek_cert: bytes
    reference: ReferenceState
    agent_address: str
    role_rules: tuple[Rule, ...] = ()

    def __post_init__(self):
        self.role_rules = tuple((str(v), str(k)) for v, k in self.role_rules)


@dataclass
class EdgeNodeResource:
    name: str
    spec: EdgeNodeSpec
    status: NodeStatus = field(default_factory=lambda: NodeStatus(Phase.UNREGISTERED))
    status_history: list[tuple[NodeStatus, float]] = field(default_factory=list)
    conditions: list[str] = field(default_factory=list)

    @property
    def generation(self) -> int:
        return len(self.status_history)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "spec": {
                "ek_cert": self.spec.ek_cert.decode(),
                "reference_state": self.spec.reference.to_dict(),
                "agent_address": self.spec.agent_address,
                "role_rules": [list(r) for r in self.spec.role_rules],
            },
            "status": {"phase": self.status.phase.value, "message": self.status.message},
            "status_history": [
                {"phase": s.phase.value, "message": s.message, "timestamp": _iso(ts)} for s, ts in self.status_history
            ],
            "conditions": list(self.conditions),
        }


@dataclass(frozen=True)
class ClusterEvent:
    timestamp: float
    kind: EventKind
    subject: str
    detail: str = ""

    def to_dict(self) -> dict:
        return {"timestamp": _iso(self.timestamp), "kind": self.kind.value, "subject": self.subject, "detail": self.detail}


@dataclass(frozen=True)
class Notification:
    seq: int
    type: str  # ADDED | MODIFIED
    kind: str
    name: str
    phase: Phase
    generation: int


@dataclass(frozen=True)
class Role:
    name: str
    rules: frozenset[Rule]


@dataclass(frozen=True)
class RoleBinding:
    name: str
    role: str
    user: str


@dataclass(frozen=True)
class WorkerRecord:
    node_name: str
    user: str
    enrolled_at: float


def _iso(ts: float) -> str:
    return datetime.datetime.fromtimestamp(ts, datetime.timezone.utc).isoformat()


def _snapshot(obj):
    """Caller-owned copy. EdgeNode specs are never mutated in place, so they are shared."""
    if isinstance(obj, EdgeNodeResource):
        return EdgeNodeResource(obj.name, obj.spec, obj.status, list(obj.status_history), list(obj.conditions))
    return copy.deepcopy(obj)


class Watch:
    """An ordered stream of change notifications for one resource kind."""

    def __init__(self, cluster: "MockCluster", kind: str):
        self._cluster = cluster
        self.kind = kind
        self._queue: queue.Queue[Notification | None] = queue.Queue()
        self.closed = False

    def _deliver(self, note: Notification | None) -> None:
        self._queue.put(note)

    def get(self, timeout: float | None = None) -> Notification | None:
        """Next notification, or None on timeout or close."""
        if self.closed and self._queue.empty():
            return None
        try:
            return self._queue.get(timeout=timeout)
        except queue.Empty:
            return None

    def pending(self) -> list[Notification]:
        out = []
        while True:
            try:
                note = self._queue.get_nowait()
            except queue.Empty:
                return out
            if note is not None:
                out.append(note)

    def close(self) -> None:
        if not self.closed:
            self.closed = True
            self._cluster._unsubscribe(self)
            self._queue.put(None)

    def __iter__(self) -> Iterator[Notification]:
        while True:
            note = self.get()
            if note is None:
                return
            yield note


class MockCluster:
    EDGE_NODE = "EdgeNode"

    def __init__(self, ca: CertificateAuthority | None = None):
        self.ca = ca or CertificateAuthority("edgeattest-cluster-ca")
        self._lock = threading.RLock()
        self._nodes: dict[str, EdgeNodeResource] = {}
        self._users: dict[str, bytes] = {}  # user -> public key bytes
        self._roles: dict[str, Role] = {}
        self._bindings: dict[str, RoleBinding] = {}
        self._workers: dict[str, WorkerRecord] = {}
        self._events: list[ClusterEvent] = []
        self._notifications: list[Notification] = []
        self._watches: list[Watch] = []
        self._seq = itertools.count(1)
        self._last_ts = 0.0

    def _now(self) -> float:
        # Strictly increasing so histories and timelines are totally ordered.
        ts = max(time.time(), self._last_ts + 1e-6)
        self._last_ts = ts
        return ts

    # -- events and watches ------------------------------------------------

    def _record(self, kind: EventKind, subject: str, detail: str = "") -> ClusterEvent:
        ev = ClusterEvent(self._now(), kind, subject, detail)
        self._events.append(ev)
        logger.debug("event %s %s %s", kind.value, subject, detail)
        return ev

    def record_event(self, kind: EventKind | str, subject: str, detail: str = "") -> ClusterEvent:
        with self._lock:
            return self._record(EventKind(kind), subject, detail)

    def _notify(self, type_: str, res: EdgeNodeResource) -> None:
        note = Notification(next(self._seq), type_, self.EDGE_NODE, res.name, res.status.phase, res.generation)
        self._notifications.append(note)
        for w in list(self._watches):
            if w.kind == self.EDGE_NODE:
                w._deliver(note)

    def watch(self, kind: str = EDGE_NODE, replay: bool = False) -> Watch:
        """Subscribe to changes; with ``replay`` the stream starts from the first commit."""
        w = Watch(self, kind)
        with self._lock:
            if replay:
                for note in self._notifications:
                    if note.kind == kind:
                        w._deliver(note)
            self._watches.append(w)
        return w

    def _unsubscribe(self, w: Watch) -> None:
        with self._lock:
            if w in self._watches:
                self._watches.remove(w)

    def events(self, subject: str | None = None) -> list[ClusterEvent]:
        with self._lock:
            return [e for e in self._events if subject is None or e.subject == subject]

    def export_events(self) -> str:
        """JSON-lines, one event per line."""
        with self._lock:
            return "".join(json.dumps(e.to_dict(), sort_keys=True) + "\n" for e in self._events)

    # -- EdgeNode resources -------------------------------------------------

    def apply_resource(self, resource: EdgeNodeResource) -> EdgeNodeResource:
        with self._lock:
            if resource.name in self._nodes:
                raise AlreadyExists(f"EdgeNode {resource.name!r} already exists")
            stored = EdgeNodeResource(resource.name, resource.spec)
            self._nodes[stored.name] = stored
            self._notify("ADDED", stored)
            return _snapshot(stored)

    def apply_edge_node(
        self,
        name: str,
        ek_cert: bytes,
        reference: ReferenceState,
        agent_address: str,
        role_rules: Iterable[Rule] = (),
    ) -> EdgeNodeResource:
        return self.apply_resource(EdgeNodeResource(name, EdgeNodeSpec(ek_cert, reference, agent_address, tuple(role_rules))))

    def get_resource(self, kind: str, name: str):
        with self._lock:
            table = {
                self.EDGE_NODE: self._nodes,
                "Role": self._roles,
                "RoleBinding": self._bindings,
                "Node": self._workers,
                "User": self._users,
            }.get(kind)
            if table is None:
                raise NotFound(f"unknown resource kind {kind!r}")
            if name not in table:
                raise NotFound(f"{kind} {name!r} not found")
            return _snapshot(table[name])

    def get_edge_node(self, name: str) -> EdgeNodeResource:
        return self.get_resource(self.EDGE_NODE, name)

    def has_edge_node(self, name: str) -> bool:
        with self._lock:
            return name in self._nodes

    def list_edge_nodes(self) -> list[str]:
        with self._lock:
            return sorted(self._nodes)

    def patch_status(self, name: str, status: NodeStatus) -> EdgeNodeResource:
        with self._lock:
            res = self._nodes.get(name)
            if res is None:
                raise NotFound(f"EdgeNode {name!r} not found")
            old = res.status.phase
            if (old, status.phase) not in LEGAL_TRANSITIONS:
                raise IllegalTransition(f"EdgeNode {name!r}: {old.value} -> {status.phase.value} is not allowed")
            ts = self._now()
            res.status = status
            res.status_history.append((status, ts))
            self._record(_EVENT_FOR_PHASE[status.phase], name, status.message)
            self._notify("MODIFIED", res)
            logger.info("EdgeNode %s: %s -> %s %s", name, old.value, status.phase.value, status.message)
            return _snapshot(res)

    def annotate(self, name: str, condition: str) -> None:
        """Attach a condition message; not a status change, so no notification."""
        with self._lock:
            res = self._nodes.get(name)
            if res is None:
                raise NotFound(f"EdgeNode {name!r} not found")
            res.conditions.append(condition)

    # -- certificates and RBAC ---------------------------------------------

    def sign_csr(self, public_key, user_name: str) -> bytes:
        raw = crypto.public_raw(public_key)
        with self._lock:
            owner = self._users.get(user_name)
            if owner is not None and owner != raw:
                raise NameCollision(f"user {user_name!r} is already bound to a different key")
            self._users[user_name] = raw
            return self.ca.issue(user_name, public_key, org="edge-workers")

    def has_user(self, user_name: str) -> bool:
        with self._lock:
            return user_name in self._users

    def create_role(self, name: str, rules: Iterable[Rule]) -> Role:
        role = Role(name, frozenset((str(v), str(k)) for v, k in rules))
        with self._lock:
            existing = self._roles.get(name)
            if existing is not None:
                if existing == role:
                    return existing
                raise AlreadyExists(f"role {name!r} already exists with different rules")
            self._roles[name] = role
            return role

    def create_rolebinding(self, name: str, role_name: str, user_name: str) -> RoleBinding:
        with self._lock:
            if role_name not in self._roles:
                raise DanglingReference(f"rolebinding {name!r}: role {role_name!r} does not exist")
            if user_name not in self._users:
                raise DanglingReference(f"rolebinding {name!r}: user {user_name!r} does not exist")
            binding = RoleBinding(name, role_name, user_name)
            existing = self._bindings.get(name)
            if existing is not None:
                if existing == binding:
                    return existing
                raise AlreadyExists(f"rolebinding {name!r} already exists")
            self._bindings[name] = binding
            return binding

    def delete_rolebinding(self, name: str) -> bool:
        """Idempotent; returns whether a binding was actually removed."""
        with self._lock:
            return self._bindings.pop(name, None) is not None

    def has_rolebinding(self, name: str) -> bool:
        with self._lock:
            return name in self._bindings

    def check_access(self, user_name: str, verb: str, resource_kind: str) -> bool:
        with self._lock:
            for b in self._bindings.values():
                if b.user != user_name:
                    continue
                role = self._roles.get(b.role)
                if role is not None and (verb, resource_kind) in role.rules:
                    return True
            return False

    # -- worker nodes ----------------------------------------------------

    def register_worker(self, cert_pem: bytes, node_name: str) -> WorkerRecord:
        try:
            cert = crypto.verify_certificate(cert_pem, self.ca.certificate)
        except BadCertificate as e:
            raise BadCertificate(f"worker {node_name!r}: {e}") from e
        user = crypto.certificate_subject(cert)
        with self._lock:
            if self._users.get(user) != crypto.public_raw(crypto.certificate_public_key(cert)):
                raise BadCertificate(f"certificate for {user!r} does not match the registered user key")
            if not self.check_access(user, "create", "node"):
                raise AccessDenied(f"user {user!r} may not create nodes")
            existing = self._workers.get(node_name)
            if existing is not None:
                if existing.user == user:
                    return existing
                raise AlreadyExists(f"worker node {node_name!r} belongs to {existing.user!r}")
            rec = WorkerRecord(node_name, user, self._now())
            self._workers[node_name] = rec
            self._record(EventKind.WORKER_ENROLLED, node_name, f"user {user}")
            return rec

    def list_workers(self) -> list[str]:
        with self._lock:
            return sorted(self._workers)

    def dump(self) -> dict:
        """Resources and RBAC tables as one JSON-ready document."""
        with self._lock:
            return {
                "edge_nodes": [r.to_dict() for _, r in sorted(self._nodes.items())],
                "users": sorted(self._users),
                "roles": [
                    {"name": r.name, "rules": sorted([list(x) for x in r.rules])} for _, r in sorted(self._roles.items())
                ],
                "rolebindings": [
                    {"name": b.name, "role": b.role, "user": b.user} for _, b in sorted(self._bindings.items())
                ],
                "workers": [
                    {"node_name": w.node_name, "user": w.user, "enrolled_at": _iso(w.enrolled_at)}
                    for _, w in sorted(self._workers.items())
                ],
            }
