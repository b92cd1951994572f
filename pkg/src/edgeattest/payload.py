"""The enrollment payload: credential bundle, ZIP layout, and sealing.

ZIP layout (shared by controller and agent):

    credentials.json   {"user_name", "cert", "private_key", "role_name"}
    enroll.cfg         [enroll] node_name = <worker node name>
"""

from __future__ import annotations

import configparser
import io
import json
import os
import zipfile
from dataclasses import dataclass, field

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from . import crypto
from .errors import DecryptionFailed, SchemaError

CREDENTIALS_ENTRY = "credentials.json"
CONFIG_ENTRY = "enroll.cfg"
KEY_SIZE = 32
_GCM_NONCE = 12
_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


@dataclass
class CredentialBundle:
    user_name: str
    key: Ed25519PrivateKey = field(repr=False)
    cert: bytes
    role_name: str
    rolebinding_name: str

    def credentials_json(self) -> bytes:
        return crypto.canonical_json(
            {
                "user_name": self.user_name,
                "cert": self.cert.decode(),
                "private_key": crypto.private_pem(self.key).decode(),
                "role_name": self.role_name,
            }
        )


def build_payload(bundle: CredentialBundle, node_name: str) -> bytes:
    """Deterministic in-memory ZIP: fixed entry order, zeroed timestamps."""
    cfg = f"[enroll]\nnode_name = {node_name}\n".encode()
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        for name, data in ((CREDENTIALS_ENTRY, bundle.credentials_json()), (CONFIG_ENTRY, cfg)):
            info = zipfile.ZipInfo(name, date_time=_ZIP_EPOCH)
            info.compress_type = zipfile.ZIP_DEFLATED
            info.external_attr = 0o600 << 16
            info.create_system = 3
            zf.writestr(info, data)
    return buf.getvalue()


@dataclass(frozen=True)
class UnpackedPayload:
    credentials: dict
    credentials_raw: bytes
    node_name: str


def unpack_payload(data: bytes) -> UnpackedPayload:
    try:
        with zipfile.ZipFile(io.BytesIO(data)) as zf:
            names = zf.namelist()
            if sorted(names) != sorted([CREDENTIALS_ENTRY, CONFIG_ENTRY]):
                raise SchemaError(f"unexpected payload entries {names}")
            raw = zf.read(CREDENTIALS_ENTRY)
            cfg_text = zf.read(CONFIG_ENTRY).decode()
    except zipfile.BadZipFile as e:
        raise SchemaError(f"payload is not a ZIP archive: {e}") from e
    creds = json.loads(raw)
    missing = {"user_name", "cert", "private_key", "role_name"} - set(creds)
    if missing:
        raise SchemaError(f"{CREDENTIALS_ENTRY}: missing {', '.join(sorted(missing))}")
    parser = configparser.ConfigParser()
    parser.read_string(cfg_text)
    try:
        node_name = parser["enroll"]["node_name"]
    except KeyError as e:
        raise SchemaError(f"{CONFIG_ENTRY}: missing [enroll] node_name") from e
    return UnpackedPayload(creds, raw, node_name)


def seal(key: bytes, plaintext: bytes, aad: bytes = b"") -> bytes:
    """AES-256-GCM; output is nonce || ciphertext+tag."""
    nonce = os.urandom(_GCM_NONCE)
    return nonce + AESGCM(key).encrypt(nonce, plaintext, aad)


def unseal(key: bytes, blob: bytes, aad: bytes = b"") -> bytes:
    if len(key) != KEY_SIZE:
        raise DecryptionFailed("payload key must be 32 bytes")
    if len(blob) < _GCM_NONCE + 16:
        raise DecryptionFailed("ciphertext too short")
    try:
        return AESGCM(key).decrypt(blob[:_GCM_NONCE], blob[_GCM_NONCE:], aad)
    except InvalidTag as e:
        raise DecryptionFailed("payload authentication failed") from e


def xor_bytes(a: bytes, b: bytes) -> bytes:
    if len(a) != len(b):
        raise ValueError("operands must have equal length")
    return bytes(x ^ y for x, y in zip(a, b))
