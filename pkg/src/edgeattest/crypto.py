"""Key, certificate and hashing helpers used by every component.

All signing keys are Ed25519; certificates are X.509 (PEM) so that the
manufacturer CA and the cluster CA behave like real trust roots.
"""

from __future__ import annotations

import datetime
import hashlib
import json
from typing import Any

from cryptography import x509
from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.x509.oid import NameOID

from .errors import BadCertificate

HASH_ALG = "sha256"
DIGEST_SIZE = 32


def digest(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def canonical_json(obj: Any) -> bytes:
    """Byte-stable JSON encoding; this is what gets signed."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def new_signing_key() -> Ed25519PrivateKey:
    return Ed25519PrivateKey.generate()


def public_raw(key: Ed25519PublicKey | Ed25519PrivateKey) -> bytes:
    if isinstance(key, Ed25519PrivateKey):
        key = key.public_key()
    return key.public_bytes(serialization.Encoding.Raw, serialization.PublicFormat.Raw)


def load_public_raw(raw: bytes) -> Ed25519PublicKey:
    return Ed25519PublicKey.from_public_bytes(raw)


def private_pem(key: Ed25519PrivateKey) -> bytes:
    return key.private_bytes(
        serialization.Encoding.PEM,
        serialization.PrivateFormat.PKCS8,
        serialization.NoEncryption(),
    )


def load_private_pem(data: bytes) -> Ed25519PrivateKey:
    key = serialization.load_pem_private_key(data, password=None)
    if not isinstance(key, Ed25519PrivateKey):
        raise ValueError("expected an Ed25519 private key")
    return key


def verify_signature(public: Ed25519PublicKey | bytes, signature: bytes, message: bytes) -> bool:
    if isinstance(public, bytes):
        try:
            public = load_public_raw(public)
        except ValueError:
            return False
    try:
        public.verify(signature, message)
    except InvalidSignature:
        return False
    return True


def _name(common_name: str, org: str | None = None) -> x509.Name:
    attrs = [x509.NameAttribute(NameOID.COMMON_NAME, common_name)]
    if org:
        attrs.append(x509.NameAttribute(NameOID.ORGANIZATION_NAME, org))
    return x509.Name(attrs)


class CertificateAuthority:
    """A run-scoped, in-memory certificate authority."""

    def __init__(self, name: str, validity_days: int = 365):
        self.name = name
        self._key = new_signing_key()
        self._validity = datetime.timedelta(days=validity_days)
        now = datetime.datetime.now(datetime.timezone.utc)
        subject = _name(name)
        self.certificate = (
            x509.CertificateBuilder()
            .subject_name(subject)
            .issuer_name(subject)
            .public_key(self._key.public_key())
            .serial_number(x509.random_serial_number())
            .not_valid_before(now - datetime.timedelta(minutes=5))
            .not_valid_after(now + self._validity)
            .add_extension(x509.BasicConstraints(ca=True, path_length=0), critical=True)
            .sign(self._key, algorithm=None)
        )

    @property
    def certificate_pem(self) -> bytes:
        return self.certificate.public_bytes(serialization.Encoding.PEM)

    @property
    def public_key(self) -> Ed25519PublicKey:
        return self._key.public_key()

    def issue(self, common_name: str, public_key: Ed25519PublicKey, org: str | None = None) -> bytes:
        """Sign a leaf certificate and return it as PEM."""
        now = datetime.datetime.now(datetime.timezone.utc)
        cert = (
            x509.CertificateBuilder()
            .subject_name(_name(common_name, org))
            .issuer_name(self.certificate.subject)
            .public_key(public_key)
            .serial_number(x509.random_serial_number())
            .not_valid_before(now - datetime.timedelta(minutes=5))
            .not_valid_after(now + self._validity)
            .add_extension(x509.BasicConstraints(ca=False, path_length=None), critical=True)
            .sign(self._key, algorithm=None)
        )
        return cert.public_bytes(serialization.Encoding.PEM)


def load_certificate(pem: bytes) -> x509.Certificate:
    try:
        return x509.load_pem_x509_certificate(pem)
    except ValueError as e:
        raise BadCertificate(f"unparseable certificate: {e}") from e


def verify_certificate(pem: bytes, ca_certificate: x509.Certificate) -> x509.Certificate:
    """Check ``pem`` was issued by ``ca_certificate``; raise BadCertificate otherwise."""
    cert = load_certificate(pem)
    try:
        cert.verify_directly_issued_by(ca_certificate)
    except (ValueError, TypeError, InvalidSignature) as e:
        raise BadCertificate(
            f"certificate for {certificate_subject(cert)!r} not issued by "
            f"{ca_certificate.subject.rfc4514_string()}"
        ) from e
    now = datetime.datetime.now(datetime.timezone.utc)
    if not cert.not_valid_before_utc <= now <= cert.not_valid_after_utc:
        raise BadCertificate("certificate outside its validity window")
    return cert


def certificate_subject(cert: x509.Certificate | bytes) -> str:
    if isinstance(cert, bytes):
        cert = load_certificate(cert)
    attrs = cert.subject.get_attributes_for_oid(NameOID.COMMON_NAME)
    return str(attrs[0].value) if attrs else ""


def certificate_public_key(cert: x509.Certificate | bytes) -> Ed25519PublicKey:
    if isinstance(cert, bytes):
        cert = load_certificate(cert)
    key = cert.public_key()
    if not isinstance(key, Ed25519PublicKey):
        raise BadCertificate("certificate does not carry an Ed25519 key")
    return key
