"""Measured boot simulation, golden-value reference state, and appraisal."""

from __future__ import annotations

import enum
import json
import re
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from . import crypto
from .crypto import HASH_ALG
from .errors import BootOrderError, SchemaError
from .tpm import AkPublic, PcrBank, Quote


class Stage(str, enum.Enum):
    CRTM = "crtm"
    FIRMWARE = "firmware"
    BOOTLOADER = "bootloader"
    KERNEL = "kernel"
    KEYS = "keys"

    @property
    def rank(self) -> int:
        return _STAGE_ORDER.index(self)


_STAGE_ORDER = list(Stage)
STAGES: tuple[Stage, ...] = tuple(_STAGE_ORDER)

DEFAULT_PCR_ALLOCATION: dict[Stage, int] = {
    Stage.CRTM: 0,
    Stage.FIRMWARE: 0,
    Stage.BOOTLOADER: 4,
    Stage.KERNEL: 5,
    Stage.KEYS: 7,
}
DEFAULT_PCR_SELECTION = (0, 4, 5, 7)

_HEX_DIGEST = re.compile(r"[0-9a-f]*")


@dataclass(frozen=True)
class BootComponent:
    stage: Stage
    name: str
    content_digest: bytes

    @classmethod
    def from_content(cls, stage: Stage | str, name: str, content: bytes) -> "BootComponent":
        return cls(Stage(stage), name, crypto.digest(content))


@dataclass(frozen=True)
class LogEntry:
    stage: Stage
    name: str
    digest: bytes
    pcr: int

    def to_dict(self) -> dict:
        return {"stage": self.stage.value, "name": self.name, "digest": self.digest.hex(), "pcr": self.pcr}

    @classmethod
    def from_dict(cls, data: Mapping) -> "LogEntry":
        try:
            entry = cls(Stage(data["stage"]), str(data["name"]), bytes.fromhex(data["digest"]), int(data["pcr"]))
        except (KeyError, ValueError, TypeError) as e:
            raise SchemaError(f"malformed event log entry {data!r}: {e}") from e
        if len(entry.digest) != crypto.DIGEST_SIZE:
            raise SchemaError(f"event log digest for {entry.name!r} has wrong length")
        return entry


@dataclass
class BootEventLog:
    entries: list[LogEntry] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def to_json(self) -> list[dict]:
        return [e.to_dict() for e in self.entries]

    @classmethod
    def from_json(cls, data: Sequence[Mapping]) -> "BootEventLog":
        if not isinstance(data, list):
            raise SchemaError("event log must be a JSON array")
        return cls([LogEntry.from_dict(d) for d in data])


def _check_chain(components: Sequence[BootComponent]) -> None:
    if not components:
        raise BootOrderError("boot chain must contain at least one component")
    for prev, cur in zip(components, components[1:]):
        if cur.stage.rank < prev.stage.rank:
            raise BootOrderError(
                f"stage {cur.stage.value} ({cur.name}) measured after {prev.stage.value} ({prev.name})"
            )


def simulate_boot(
    components: Sequence[BootComponent],
    bank: PcrBank,
    allocation: Mapping[Stage, int] = DEFAULT_PCR_ALLOCATION,
) -> tuple[PcrBank, BootEventLog]:
    """Measure each component into its stage's PCR, in order, logging as we go."""
    _check_chain(components)
    log = BootEventLog()
    for comp in components:
        pcr = allocation[comp.stage]
        bank.extend(pcr, comp.content_digest)
        log.entries.append(LogEntry(comp.stage, comp.name, comp.content_digest, pcr))
    return bank, log


def replay_event_log(log: BootEventLog) -> dict[int, bytes]:
    bank = PcrBank()
    for entry in log:
        if not isinstance(entry, LogEntry):
            raise SchemaError(f"malformed event log entry {entry!r}")
        try:
            bank.extend(entry.pcr, entry.digest)
        except ValueError as e:
            raise SchemaError(f"malformed event log entry {entry.name!r}: {e}") from e
    return bank.snapshot()


@dataclass
class ReferenceState:
    """Administrator-supplied golden values: allowed digests for each boot stage."""

    allowed: dict[Stage, frozenset[bytes]]
    pcr_selection: tuple[int, ...] = DEFAULT_PCR_SELECTION
    hash_alg: str = HASH_ALG

    def __post_init__(self):
        self.allowed = {Stage(k): frozenset(v) for k, v in self.allowed.items()}
        self.pcr_selection = tuple(self.pcr_selection)
        self.validate()

    def validate(self) -> None:
        for stage in STAGES:
            if not self.allowed.get(stage):
                raise SchemaError(f"allowed.{stage.value}: stage missing or empty")
        if not self.pcr_selection:
            raise SchemaError("pcr_selection: must be nonempty")
        for i in self.pcr_selection:
            if not isinstance(i, int) or isinstance(i, bool) or not 0 <= i < 24:
                raise SchemaError(f"pcr_selection: invalid index {i!r}")

    def with_allowed(self, stage: Stage, digests: Iterable[bytes]) -> "ReferenceState":
        allowed = dict(self.allowed)
        allowed[stage] = allowed[stage] | frozenset(digests)
        return ReferenceState(allowed, self.pcr_selection, self.hash_alg)

    def to_dict(self) -> dict:
        return {
            "allowed": {s.value: sorted(d.hex() for d in self.allowed[s]) for s in STAGES},
            "pcr_selection": list(self.pcr_selection),
            "hash_alg": self.hash_alg,
        }

    @classmethod
    def from_dict(cls, data: object) -> "ReferenceState":
        if not isinstance(data, dict):
            raise SchemaError("reference state must be a JSON object")
        unknown = set(data) - {"allowed", "pcr_selection", "hash_alg"}
        if unknown:
            raise SchemaError(f"unknown field(s): {', '.join(sorted(unknown))}")
        for key in ("allowed", "pcr_selection"):
            if key not in data:
                raise SchemaError(f"{key}: required field missing")
        allowed_raw = data["allowed"]
        if not isinstance(allowed_raw, dict):
            raise SchemaError("allowed: must be an object")
        stage_names = {s.value for s in STAGES}
        extra = set(allowed_raw) - stage_names
        if extra:
            raise SchemaError(f"allowed: unknown stage(s) {', '.join(sorted(extra))}")
        allowed: dict[Stage, frozenset[bytes]] = {}
        for stage in STAGES:
            if stage.value not in allowed_raw:
                raise SchemaError(f"allowed.{stage.value}: stage missing")
            values = allowed_raw[stage.value]
            if not isinstance(values, list) or not values:
                raise SchemaError(f"allowed.{stage.value}: must be a nonempty list")
            digests = set()
            for i, h in enumerate(values):
                path = f"allowed.{stage.value}[{i}]"
                if not isinstance(h, str) or not _HEX_DIGEST.fullmatch(h):
                    raise SchemaError(f"{path}: not lowercase hex")
                if len(h) % 2:
                    raise SchemaError(f"{path}: odd hex length")
                if len(h) != 2 * crypto.DIGEST_SIZE:
                    raise SchemaError(f"{path}: expected {crypto.DIGEST_SIZE}-byte digest")
                digests.add(bytes.fromhex(h))
            allowed[stage] = frozenset(digests)
        selection = data["pcr_selection"]
        if not isinstance(selection, list):
            raise SchemaError("pcr_selection: must be a list")
        hash_alg = data.get("hash_alg", HASH_ALG)
        if hash_alg != HASH_ALG:
            raise SchemaError(f"hash_alg: unsupported {hash_alg!r}")
        return cls(allowed, tuple(selection), hash_alg)


def serialize_reference_state(ref: ReferenceState) -> bytes:
    return json.dumps(ref.to_dict(), sort_keys=True, indent=2).encode()


def parse_reference_state(data: bytes | str) -> ReferenceState:
    try:
        obj = json.loads(data)
    except json.JSONDecodeError as e:
        raise SchemaError(f"reference state is not valid JSON: {e}") from e
    return ReferenceState.from_dict(obj)


class Reason(str, enum.Enum):
    DIGEST_NOT_ALLOWED = "digest-not-allowed"
    PCR_MISMATCH = "pcr-mismatch"
    BAD_SIGNATURE = "bad-signature"
    STALE_NONCE = "stale-nonce"
    LOG_REPLAY_MISMATCH = "log-replay-mismatch"
    AGENT_UNREACHABLE = "agent-unreachable"


@dataclass(frozen=True)
class AttestationVerdict:
    passed: bool
    failing_stage: Stage | None = None
    reason: Reason | None = None
    detail: str = ""

    def __post_init__(self):
        if self.passed and (self.failing_stage is not None or self.reason is not None):
            raise ValueError("a passing verdict carries no failure information")
        if not self.passed and self.reason is None:
            raise ValueError("a failing verdict needs a reason")

    @classmethod
    def ok(cls) -> "AttestationVerdict":
        return cls(True)

    @classmethod
    def fail(cls, reason: Reason, stage: Stage | None = None, detail: str = "") -> "AttestationVerdict":
        return cls(False, stage, reason, detail)

    @property
    def message(self) -> str:
        """Status message form, e.g. ``digest-not-allowed:kernel``."""
        if self.passed:
            return "attested"
        text = self.reason.value
        if self.failing_stage is not None:
            text += f":{self.failing_stage.value}"
        return text

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "failing_stage": self.failing_stage.value if self.failing_stage else None,
            "reason": self.reason.value if self.reason else None,
            "detail": self.detail,
        }


def check_reference(
    log: BootEventLog,
    quote: Quote,
    reference: ReferenceState,
    ak: AkPublic,
    ek_public: bytes,
    nonce: bytes,
) -> AttestationVerdict:
    """Appraise one quote and event log against the golden values.

    Checks run in a fixed order (signature, nonce, PCR replay, golden values)
    and the first failure decides the verdict.
    """
    if not quote.signature_valid(ak.public):
        return AttestationVerdict.fail(Reason.BAD_SIGNATURE, detail="quote signature invalid under AK")
    if not ak.verify_binding(ek_public):
        return AttestationVerdict.fail(Reason.BAD_SIGNATURE, detail="AK not bound to EK")
    if quote.nonce != nonce:
        return AttestationVerdict.fail(Reason.STALE_NONCE)
    if quote.pcr_selection != reference.pcr_selection or quote.hash_alg != reference.hash_alg:
        return AttestationVerdict.fail(
            Reason.PCR_MISMATCH,
            detail=f"quoted {list(quote.pcr_selection)}, expected {list(reference.pcr_selection)}",
        )
    try:
        replayed = replay_event_log(log)
    except SchemaError as e:
        return AttestationVerdict.fail(Reason.LOG_REPLAY_MISMATCH, detail=str(e))
    expected = crypto.digest(b"".join(replayed[i] for i in reference.pcr_selection))
    if expected != quote.composite_digest:
        return AttestationVerdict.fail(Reason.LOG_REPLAY_MISMATCH, detail="event log does not reproduce quoted PCRs")
    for entry in log:
        if entry.digest not in reference.allowed.get(entry.stage, ()):
            return AttestationVerdict.fail(
                Reason.DIGEST_NOT_ALLOWED, entry.stage, detail=f"{entry.name} {entry.digest.hex()[:16]}..."
            )
    return AttestationVerdict.ok()
