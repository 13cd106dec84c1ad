"""Certificate-authority simulation: registration, enrollment, wallets, sessions.

Identity binding uses Ed25519 signatures over canonical payloads instead of
real X.509/ASN.1; a credential is a CA-signed record of
(user_id, org, role, public_key, cert_serial). Tenants belong to Org1,
landlords and auditors to Org2.
"""

from __future__ import annotations

import hashlib
import hmac
import os
import secrets
import threading
import time
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Callable, Optional

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)

from .codec import canonical_bytes
from .config import IdentityConfig

ORG1 = "Org1"
ORG2 = "Org2"

ROLE_TENANT = "Tenant"
ROLE_LANDLORD = "Landlord"
ROLE_AUDITOR = "Auditor"

ROLE_TO_ORG = {ROLE_TENANT: ORG1, ROLE_LANDLORD: ORG2, ROLE_AUDITOR: ORG2}


class IdentityError(Exception):
    """Base class; ``code`` mirrors the machine-readable error name."""

    code = "IdentityError"

    def __init__(self, message: str = ""):
        super().__init__(message or self.code)


class AlreadyRegistered(IdentityError):
    code = "AlreadyRegistered"


class InvalidRole(IdentityError):
    code = "InvalidRole"


class NotRegistered(IdentityError):
    code = "NotRegistered"


class BadSecret(IdentityError):
    code = "BadSecret"


class SecretConsumed(IdentityError):
    code = "SecretConsumed"


class UnknownIdentity(IdentityError):
    code = "UnknownIdentity"


class BadSignature(IdentityError):
    code = "BadSignature"


class BadCertificate(IdentityError):
    code = "BadCertificate"


class ExpiredNonce(IdentityError):
    code = "ExpiredNonce"


class BadToken(IdentityError):
    code = "BadToken"


@dataclass(frozen=True)
class Credential:
    user_id: str
    org: str
    role: str
    public_key: str      # hex, Ed25519 raw public bytes
    cert_serial: int
    ca_signature: str    # hex, over the canonical certificate payload

    def payload(self) -> dict:
        return {
            "user_id": self.user_id,
            "org": self.org,
            "role": self.role,
            "public_key": self.public_key,
            "cert_serial": self.cert_serial,
        }

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(raw: dict) -> "Credential":
        return Credential(
            user_id=raw["user_id"],
            org=raw["org"],
            role=raw["role"],
            public_key=raw["public_key"],
            cert_serial=int(raw["cert_serial"]),
            ca_signature=raw["ca_signature"],
        )


@dataclass(frozen=True)
class WalletEntry:
    user_id: str
    private_key: str     # hex, Ed25519 raw private bytes
    credential: Credential

    def sign(self, message: bytes) -> str:
        key = Ed25519PrivateKey.from_private_bytes(bytes.fromhex(self.private_key))
        return key.sign(message).hex()


@dataclass(frozen=True)
class EnrollmentSecret:
    user_id: str
    secret: str


@dataclass(frozen=True)
class SessionToken:
    token: str
    user_id: str
    org: str
    role: str
    expires_at_ms: int


def _verify_ed25519(public_key_hex: str, signature_hex: str, message: bytes) -> bool:
    try:
        key = Ed25519PublicKey.from_public_bytes(bytes.fromhex(public_key_hex))
        key.verify(bytes.fromhex(signature_hex), message)
        return True
    except (InvalidSignature, ValueError):
        return False


def verify_credential(credential: Credential, root_public_key_hex: str) -> bool:
    """Check the CA signature chain and the role→org rule."""
    if ROLE_TO_ORG.get(credential.role) != credential.org:
        return False
    return _verify_ed25519(
        root_public_key_hex,
        credential.ca_signature,
        canonical_bytes(credential.payload()),
    )


def envelope_signing_bytes(envelope: dict) -> bytes:
    """Canonical bytes an envelope's signature covers (everything but itself)."""
    unsigned = {k: v for k, v in envelope.items() if k != "signature"}
    return canonical_bytes(unsigned)


def verify_envelope_offline(envelope: dict, root_public_key_hex: str) -> Credential:
    """Verify an envelope using only the CA root key (no registry access).

    The envelope embeds the creator's credential, so committed blocks plus
    the published root key are sufficient to re-check every signature.
    """
    cert_raw = envelope.get("creator_cert")
    if not isinstance(cert_raw, dict):
        raise BadCertificate("envelope carries no creator credential")
    try:
        credential = Credential.from_dict(cert_raw)
    except (KeyError, TypeError, ValueError) as exc:
        raise BadCertificate(f"malformed credential: {exc}") from exc
    if credential.user_id != envelope.get("creator"):
        raise BadCertificate("credential subject does not match envelope creator")
    if not verify_credential(credential, root_public_key_hex):
        raise BadCertificate("CA signature does not verify")
    signature = envelope.get("signature", "")
    if not isinstance(signature, str) or not _verify_ed25519(
        credential.public_key, signature, envelope_signing_bytes(envelope)
    ):
        raise BadSignature("envelope signature does not verify")
    return credential


class CertificateAuthority:
    """Registration, enrollment and verification for one deployment.

    State lives under ``ca_dir`` (root key pair, registry snapshot) and
    ``wallet_dir`` (one ``<user_id>.cred`` file per enrolled identity).
    All mutations are atomic check-and-set under a single lock.
    """

    def __init__(
        self,
        ca_dir: str | Path,
        wallet_dir: str | Path,
        config: IdentityConfig | None = None,
        clock_ms: Callable[[], int] | None = None,
    ):
        self.ca_dir = Path(ca_dir)
        self.wallet_dir = Path(wallet_dir)
        self.config = config or IdentityConfig()
        self._now_ms = clock_ms or (lambda: int(time.time() * 1000))
        self._lock = threading.Lock()
        self._nonces: dict[str, dict[str, int]] = {}  # user_id -> nonce -> expiry_ms
        self._session_key = secrets.token_bytes(32)

        self.ca_dir.mkdir(parents=True, exist_ok=True)
        self.wallet_dir.mkdir(parents=True, exist_ok=True)
        self._root_key = self._load_or_create_root()
        self._registry: dict[str, dict] = {}
        self._next_serial = 1
        self._load_registry()

    # -- root key -----------------------------------------------------------

    def _load_or_create_root(self) -> Ed25519PrivateKey:
        key_path = self.ca_dir / "root.key"
        pub_path = self.ca_dir / "root.pub"
        if key_path.exists():
            key = Ed25519PrivateKey.from_private_bytes(bytes.fromhex(key_path.read_text().strip()))
        else:
            key = Ed25519PrivateKey.generate()
            _write_private(key_path, key.private_bytes_raw().hex())
        pub_hex = key.public_key().public_bytes_raw().hex()
        if not pub_path.exists() or pub_path.read_text().strip() != pub_hex:
            pub_path.write_text(pub_hex + "\n")
        return key

    @property
    def root_public_key(self) -> str:
        return self._root_key.public_key().public_bytes_raw().hex()

    # -- registry persistence -------------------------------------------------

    def _registry_path(self) -> Path:
        return self.ca_dir / "registry.json"

    def _load_registry(self) -> None:
        path = self._registry_path()
        if not path.exists():
            return
        import json

        raw = json.loads(path.read_text())
        self._registry = raw.get("identities", {})
        self._next_serial = raw.get("next_serial", 1)

    def _save_registry_locked(self) -> None:
        import json

        path = self._registry_path()
        tmp = path.with_suffix(".tmp")
        tmp.write_text(json.dumps({"identities": self._registry, "next_serial": self._next_serial}))
        os.replace(tmp, path)

    # -- registration / enrollment -------------------------------------------

    def register_user(self, user_id: str, password: str, role: str) -> EnrollmentSecret:
        if role not in ROLE_TO_ORG:
            raise InvalidRole(f"unknown role {role!r}")
        secret = secrets.token_hex(16)
        salt = secrets.token_hex(16)
        cfg = self.config
        pw_digest = hashlib.scrypt(
            password.encode("utf-8"),
            salt=bytes.fromhex(salt),
            n=cfg.scrypt_n, r=cfg.scrypt_r, p=cfg.scrypt_p,
        ).hex()
        with self._lock:
            if user_id in self._registry:
                raise AlreadyRegistered(user_id)
            self._registry[user_id] = {
                "role": role,
                "org": ROLE_TO_ORG[role],
                "pw_salt": salt,
                "pw_digest": pw_digest,
                "secret_digest": hashlib.sha256(secret.encode()).hexdigest(),
                "secret_consumed": False,
                "credential": None,
            }
            self._save_registry_locked()
        return EnrollmentSecret(user_id=user_id, secret=secret)

    def enroll(self, user_id: str, secret: str) -> WalletEntry:
        with self._lock:
            record = self._registry.get(user_id)
            if record is None:
                raise NotRegistered(user_id)
            offered = hashlib.sha256(secret.encode()).hexdigest()
            if not hmac.compare_digest(offered, record["secret_digest"]):
                raise BadSecret(user_id)
            if record["secret_consumed"]:
                raise SecretConsumed(user_id)
            key = Ed25519PrivateKey.generate()
            serial = self._next_serial
            self._next_serial += 1
            payload = {
                "user_id": user_id,
                "org": record["org"],
                "role": record["role"],
                "public_key": key.public_key().public_bytes_raw().hex(),
                "cert_serial": serial,
            }
            signature = self._root_key.sign(canonical_bytes(payload)).hex()
            credential = Credential(ca_signature=signature, **payload)
            entry = WalletEntry(
                user_id=user_id,
                private_key=key.private_bytes_raw().hex(),
                credential=credential,
            )
            self._write_wallet(entry)
            record["secret_consumed"] = True
            record["credential"] = credential.to_dict()
            self._save_registry_locked()
        return entry

    def _write_wallet(self, entry: WalletEntry) -> None:
        import json

        path = self.wallet_dir / f"{entry.user_id}.cred"
        _write_private(path, json.dumps({
            "user_id": entry.user_id,
            "private_key": entry.private_key,
            "credential": entry.credential.to_dict(),
        }))

    def wallet_entry(self, user_id: str) -> WalletEntry:
        import json

        path = self.wallet_dir / f"{user_id}.cred"
        if not path.exists():
            raise UnknownIdentity(user_id)
        raw = json.loads(path.read_text())
        return WalletEntry(
            user_id=raw["user_id"],
            private_key=raw["private_key"],
            credential=Credential.from_dict(raw["credential"]),
        )

    def credential(self, user_id: str) -> Credential:
        with self._lock:
            record = self._registry.get(user_id)
        if record is None or record.get("credential") is None:
            raise UnknownIdentity(user_id)
        return Credential.from_dict(record["credential"])

    def registered_users(self) -> dict[str, dict]:
        """Public registry view: role and org per user (no password material)."""
        with self._lock:
            return {uid: {"role": r["role"], "org": r["org"]} for uid, r in self._registry.items()}

    # -- login ----------------------------------------------------------------

    def issue_nonce(self, user_id: str) -> str:
        nonce = secrets.token_hex(16)
        expiry = self._now_ms() + self.config.nonce_ttl_s * 1000
        with self._lock:
            if user_id not in self._registry:
                raise UnknownIdentity(user_id)
            self._nonces.setdefault(user_id, {})[nonce] = expiry
        return nonce

    def login(self, user_id: str, nonce: str, signature: str) -> SessionToken:
        credential = self.credential(user_id)
        now = self._now_ms()
        with self._lock:
            per_user = self._nonces.get(user_id, {})
            expiry = per_user.pop(nonce, None)
        if expiry is None or expiry < now:
            raise ExpiredNonce(user_id)
        if not _verify_ed25519(credential.public_key, signature, bytes.fromhex(nonce)):
            raise BadSignature(user_id)
        return self._issue_token(credential, now)

    def _issue_token(self, credential: Credential, now_ms: int) -> SessionToken:
        expires = now_ms + self.config.session_ttl_s * 1000
        payload = {
            "user_id": credential.user_id,
            "org": credential.org,
            "role": credential.role,
            "exp_ms": expires,
        }
        body = canonical_bytes(payload)
        mac = hmac.new(self._session_key, body, hashlib.sha256).hexdigest()
        return SessionToken(
            token=body.hex() + "." + mac,
            user_id=credential.user_id,
            org=credential.org,
            role=credential.role,
            expires_at_ms=expires,
        )

    def verify_token(self, token: str) -> dict:
        """Return the token payload {user_id, org, role, exp_ms} or raise BadToken."""
        import json

        try:
            body_hex, mac = token.split(".", 1)
            body = bytes.fromhex(body_hex)
        except ValueError as exc:
            raise BadToken("malformed token") from exc
        expected = hmac.new(self._session_key, body, hashlib.sha256).hexdigest()
        if not hmac.compare_digest(mac, expected):
            raise BadToken("bad token MAC")
        payload = json.loads(body)
        if payload.get("exp_ms", 0) < self._now_ms():
            raise BadToken("token expired")
        return payload

    # -- envelope verification --------------------------------------------------

    def verify_envelope(self, envelope: dict) -> Credential:
        creator = envelope.get("creator")
        with self._lock:
            known = creator in self._registry
        if not known:
            raise UnknownIdentity(str(creator))
        return verify_envelope_offline(envelope, self.root_public_key)


def _write_private(path: Path, content: str) -> None:
    """Write a secret-bearing file with owner-only permissions."""
    fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o600)
    try:
        os.write(fd, content.encode("utf-8"))
    finally:
        os.close(fd)
