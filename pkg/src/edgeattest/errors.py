"""Exception hierarchy shared by every service.

Each class carries a stable ``code`` so errors survive the JSON wire protocol
and are re-raised with the same type on the calling side.
"""

from __future__ import annotations


class EdgeAttestError(Exception):
    code = "error"


class NotFound(EdgeAttestError):
    code = "not-found"


class AlreadyExists(EdgeAttestError):
    code = "already-exists"


class IllegalTransition(EdgeAttestError):
    code = "illegal-transition"


class BadCertificate(EdgeAttestError):
    code = "bad-certificate"


class AccessDenied(EdgeAttestError):
    code = "access-denied"


class NameCollision(EdgeAttestError):
    code = "name-collision"


class DanglingReference(EdgeAttestError):
    code = "dangling-reference"


class SchemaError(EdgeAttestError, ValueError):
    code = "schema-error"


class BootOrderError(EdgeAttestError, ValueError):
    code = "boot-order"


class RegistrationError(EdgeAttestError):
    code = "registration-error"


class BadBinding(RegistrationError):
    code = "bad-binding"


class NoChallenge(RegistrationError):
    code = "no-challenge"


class ChallengeExpired(RegistrationError):
    code = "challenge-expired"


class InvalidProof(RegistrationError):
    code = "invalid-proof"


class ResourceMissing(RegistrationError):
    """The device proved its identity but no EdgeNode exists yet; the record is held."""

    code = "resource-missing"


class UnknownDevice(EdgeAttestError):
    code = "unknown-device"


class IdentityMismatch(EdgeAttestError):
    code = "identity-mismatch"


class NotBooted(EdgeAttestError):
    code = "not-booted"


class ChallengeFailed(EdgeAttestError):
    code = "challenge-failed"


class MissingCiphertext(EdgeAttestError):
    code = "missing-ciphertext"


class DecryptionFailed(EdgeAttestError):
    code = "decryption-failed"


class EnrollmentInFlight(EdgeAttestError):
    code = "enrollment-in-flight"


class HandoffFailed(EdgeAttestError):
    code = "handoff-failed"


class DuplicateMonitor(EdgeAttestError):
    code = "duplicate-monitor"


class Unreachable(EdgeAttestError):
    code = "unreachable"


_BY_CODE = {}


def _collect(cls: type) -> None:
    _BY_CODE[cls.code] = cls
    for sub in cls.__subclasses__():
        _collect(sub)


_collect(EdgeAttestError)


def from_code(code: str, message: str) -> EdgeAttestError:
    """Rebuild an exception received over the wire."""
    return _BY_CODE.get(code, EdgeAttestError)(message)
