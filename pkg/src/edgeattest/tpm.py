"""A TPM 2.0-like coprocessor simulator.

Covers exactly what boot attestation needs: a 24-register PCR bank with
extend/reset, an endorsement identity certified by a manufacturer CA, an
attestation key bound to the EK, signed quotes and EK possession proofs.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey

from . import crypto
from .crypto import DIGEST_SIZE, HASH_ALG, CertificateAuthority

logger = logging.getLogger(__name__)

PCR_COUNT = 24
ZERO_DIGEST = bytes(DIGEST_SIZE)

# Domain-separation tags keep EK/AK signatures from being replayed across uses.
_POSSESSION_TAG = b"edgeattest/ek-possession/v1:"
_BINDING_TAG = b"edgeattest/ak-binding/v1:"
_QUOTE_TAG = b"edgeattest/quote/v1:"


def _check_index(index: int) -> None:
    if not isinstance(index, int) or isinstance(index, bool) or not 0 <= index < PCR_COUNT:
        raise ValueError(f"PCR index {index!r} out of range 0-{PCR_COUNT - 1}")


def _check_digest(value: bytes, what: str = "digest") -> None:
    if not isinstance(value, (bytes, bytearray)) or len(value) != DIGEST_SIZE:
        raise ValueError(f"{what} must be exactly {DIGEST_SIZE} bytes")


@dataclass
class PcrBank:
    """Platform configuration registers plus the history of every change."""

    registers: list[bytes] = field(default_factory=lambda: [ZERO_DIGEST] * PCR_COUNT)
    hash_alg: str = HASH_ALG
    history: list[tuple[str, int, bytes | None]] = field(default_factory=list)

    def __getitem__(self, index: int) -> bytes:
        _check_index(index)
        return self.registers[index]

    def extend(self, index: int, value: bytes) -> "PcrBank":
        _check_index(index)
        _check_digest(value)
        value = bytes(value)
        self.registers[index] = crypto.digest(self.registers[index] + value)
        self.history.append(("extend", index, value))
        return self

    def reset(self, index: int) -> "PcrBank":
        _check_index(index)
        self.registers[index] = ZERO_DIGEST
        self.history.append(("reset", index, None))
        return self

    def reset_all(self) -> "PcrBank":
        for i in range(PCR_COUNT):
            self.reset(i)
        return self

    def snapshot(self) -> dict[int, bytes]:
        return dict(enumerate(self.registers))

    def composite(self, selection: Sequence[int]) -> bytes:
        for i in selection:
            _check_index(i)
        return crypto.digest(b"".join(self.registers[i] for i in selection))

    @classmethod
    def replay(cls, history: Sequence[tuple[str, int, bytes | None]]) -> "PcrBank":
        bank = cls()
        for op, index, value in history:
            if op == "extend":
                bank.extend(index, value)
            elif op == "reset":
                bank.reset(index)
            else:
                raise ValueError(f"unknown history op {op!r}")
        return bank


def pcr_extend(bank: PcrBank, index: int, value: bytes) -> PcrBank:
    return bank.extend(index, value)


def pcr_reset(bank: PcrBank, index: int) -> PcrBank:
    return bank.reset(index)


@dataclass
class EndorsementIdentity:
    device_id: str
    ek_key: Ed25519PrivateKey = field(repr=False)
    ek_cert: bytes

    @property
    def ek_public(self) -> bytes:
        return crypto.public_raw(self.ek_key)


def generate_endorsement(device_id: str, manufacturer_ca: CertificateAuthority) -> EndorsementIdentity:
    if not device_id:
        raise ValueError("device-id must be nonempty")
    key = crypto.new_signing_key()
    cert = manufacturer_ca.issue(device_id, key.public_key(), org="Simulated TPM Manufacturer")
    return EndorsementIdentity(device_id, key, cert)


def prove_possession(identity: EndorsementIdentity, nonce: bytes) -> bytes:
    _check_digest(nonce, "nonce")
    return identity.ek_key.sign(_POSSESSION_TAG + bytes(nonce))


def verify_possession(ek_cert: bytes, nonce: bytes, proof: bytes) -> bool:
    """True iff ``proof`` was made over ``nonce`` by the key certified in ``ek_cert``."""
    if not isinstance(nonce, (bytes, bytearray)) or len(nonce) != DIGEST_SIZE:
        return False
    public = crypto.certificate_public_key(ek_cert)
    return crypto.verify_signature(public, proof, _POSSESSION_TAG + bytes(nonce))


@dataclass(frozen=True)
class AkPublic:
    """The public half of an attestation key, as it travels with registration."""

    public: bytes
    binding_sig: bytes

    def verify_binding(self, ek_public: bytes) -> bool:
        return crypto.verify_signature(ek_public, self.binding_sig, _BINDING_TAG + self.public)

    def to_dict(self) -> dict:
        return {"public": self.public.hex(), "binding_sig": self.binding_sig.hex()}

    @classmethod
    def from_dict(cls, data: dict) -> "AkPublic":
        return cls(bytes.fromhex(data["public"]), bytes.fromhex(data["binding_sig"]))


@dataclass
class AttestationKey:
    key: Ed25519PrivateKey = field(repr=False)
    binding_sig: bytes

    @classmethod
    def create(cls, identity: EndorsementIdentity) -> "AttestationKey":
        key = crypto.new_signing_key()
        binding = identity.ek_key.sign(_BINDING_TAG + crypto.public_raw(key))
        return cls(key, binding)

    @property
    def public(self) -> AkPublic:
        return AkPublic(crypto.public_raw(self.key), self.binding_sig)


@dataclass(frozen=True)
class Quote:
    nonce: bytes
    pcr_selection: tuple[int, ...]
    composite_digest: bytes
    signature: bytes
    hash_alg: str = HASH_ALG

    def signed_bytes(self) -> bytes:
        return _QUOTE_TAG + crypto.canonical_json(
            {
                "hash_alg": self.hash_alg,
                "nonce": self.nonce.hex(),
                "pcr_selection": list(self.pcr_selection),
                "composite_digest": self.composite_digest.hex(),
            }
        )

    def signature_valid(self, ak_public: bytes) -> bool:
        return crypto.verify_signature(ak_public, self.signature, self.signed_bytes())

    def to_dict(self) -> dict:
        return {
            "hash_alg": self.hash_alg,
            "nonce": self.nonce.hex(),
            "pcr_selection": list(self.pcr_selection),
            "composite_digest": self.composite_digest.hex(),
            "signature": self.signature.hex(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Quote":
        return cls(
            nonce=bytes.fromhex(data["nonce"]),
            pcr_selection=tuple(int(i) for i in data["pcr_selection"]),
            composite_digest=bytes.fromhex(data["composite_digest"]),
            signature=bytes.fromhex(data["signature"]),
            hash_alg=data.get("hash_alg", HASH_ALG),
        )


def quote(bank: PcrBank, ak: AttestationKey, nonce: bytes, selection: Sequence[int]) -> Quote:
    _check_digest(nonce, "nonce")
    if not selection:
        raise ValueError("PCR selection must be nonempty")
    selection = tuple(selection)
    composite = bank.composite(selection)
    unsigned = Quote(bytes(nonce), selection, composite, b"", bank.hash_alg)
    return Quote(bytes(nonce), selection, composite, ak.key.sign(unsigned.signed_bytes()), bank.hash_alg)


def verify_quote(q: Quote, ak: AkPublic, ek_public: bytes, nonce: bytes) -> bool:
    return q.signature_valid(ak.public) and ak.verify_binding(ek_public) and q.nonce == nonce


class SimulatedTPM:
    """Everything one device's TPM holds, bundled together."""

    def __init__(self, device_id: str, manufacturer_ca: CertificateAuthority):
        self.identity = generate_endorsement(device_id, manufacturer_ca)
        self.ak = AttestationKey.create(self.identity)
        self.bank = PcrBank()

    @property
    def device_id(self) -> str:
        return self.identity.device_id

    @property
    def ek_cert(self) -> bytes:
        return self.identity.ek_cert

    def prove_possession(self, nonce: bytes) -> bytes:
        return prove_possession(self.identity, nonce)

    def quote(self, nonce: bytes, selection: Sequence[int]) -> Quote:
        return quote(self.bank, self.ak, nonce, selection)

    def power_cycle(self) -> None:
        """Platform reset: every PCR back to zero, history restarted."""
        self.bank = PcrBank()
