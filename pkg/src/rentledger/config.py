"""Deployment configuration: file (TOML/JSON) plus environment overrides."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping

try:
    import tomllib  # Python 3.11+
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib  # type: ignore[no-redef]


class ConfigError(Exception):
    pass


@dataclass(frozen=True)
class OrderingConfig:
    max_messages: int = 50
    max_bytes: int = 1024 * 1024
    batch_timeout_ms: int = 200
    queue_bound: int = 10_000


@dataclass(frozen=True)
class BlobstoreConfig:
    root: str = "blobs"
    max_bytes: int = 25 * 1024 * 1024


@dataclass(frozen=True)
class IdentityConfig:
    nonce_ttl_s: int = 120
    session_ttl_s: int = 1800
    # scrypt cost; lowered in tests, never below the floor the stdlib accepts
    scrypt_n: int = 2**14
    scrypt_r: int = 8
    scrypt_p: int = 1


@dataclass(frozen=True)
class ApiConfig:
    org1_port: int = 8081
    org2_port: int = 8082
    host: str = "127.0.0.1"
    commit_timeout_s: float = 10.0
    cors_origins: tuple[str, ...] = ("*",)


@dataclass(frozen=True)
class Config:
    data_dir: str = "data"
    ledger_dir: str = ""   # defaults to <data_dir>/ledger
    blob_dir: str = ""     # defaults to <data_dir>/blobs
    wallet_dir: str = ""   # defaults to <data_dir>/wallet
    ca_dir: str = ""       # defaults to <data_dir>/ca
    terms_digest: str = ""  # empty: pin the digest of the bundled terms text
    ledger_fsync: bool = True
    ordering: OrderingConfig = field(default_factory=OrderingConfig)
    blobstore: BlobstoreConfig = field(default_factory=BlobstoreConfig)
    identity: IdentityConfig = field(default_factory=IdentityConfig)
    api: ApiConfig = field(default_factory=ApiConfig)

    def resolved(self) -> "Config":
        """Fill directory defaults relative to data_dir."""
        base = Path(self.data_dir)
        return replace(
            self,
            ledger_dir=self.ledger_dir or str(base / "ledger"),
            blob_dir=self.blob_dir or str(base / "blobs"),
            wallet_dir=self.wallet_dir or str(base / "wallet"),
            ca_dir=self.ca_dir or str(base / "ca"),
        )


def _section(raw: Mapping[str, Any], name: str) -> dict:
    value = raw.get(name, {})
    if not isinstance(value, Mapping):
        raise ConfigError(f"section '{name}' must be a table/object")
    return dict(value)


def _build(raw: Mapping[str, Any]) -> Config:
    known_top = {
        "data_dir", "ledger_dir", "blob_dir", "wallet_dir", "ca_dir",
        "terms_digest", "ledger_fsync", "ordering", "blobstore", "identity", "api",
    }
    unknown = set(raw) - known_top
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    try:
        api_raw = _section(raw, "api")
        if "cors_origins" in api_raw:
            api_raw["cors_origins"] = tuple(api_raw["cors_origins"])
        return Config(
            data_dir=raw.get("data_dir", "data"),
            ledger_dir=raw.get("ledger_dir", ""),
            blob_dir=raw.get("blob_dir", ""),
            wallet_dir=raw.get("wallet_dir", ""),
            ca_dir=raw.get("ca_dir", ""),
            terms_digest=raw.get("terms_digest", ""),
            ledger_fsync=bool(raw.get("ledger_fsync", True)),
            ordering=OrderingConfig(**_section(raw, "ordering")),
            blobstore=BlobstoreConfig(**_section(raw, "blobstore")),
            identity=IdentityConfig(**_section(raw, "identity")),
            api=ApiConfig(**api_raw),
        )
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str | Path | None = None, env: Mapping[str, str] | None = None) -> Config:
    """Load config from a TOML or JSON file, then apply env overrides.

    Recognized env vars: ORG1_PORT, ORG2_PORT, LEDGER_DIR, BLOB_DIR,
    WALLET_DIR, TERMS_DIGEST.
    """
    env = os.environ if env is None else env
    raw: dict[str, Any] = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        text = p.read_bytes()
        if p.suffix == ".json":
            try:
                raw = json.loads(text)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{p}: line {exc.lineno}: {exc.msg}") from exc
        else:
            try:
                raw = tomllib.loads(text.decode("utf-8"))
            except tomllib.TOMLDecodeError as exc:
                raise ConfigError(f"{p}: {exc}") from exc
    cfg = _build(raw)

    api = cfg.api
    if "ORG1_PORT" in env:
        api = replace(api, org1_port=int(env["ORG1_PORT"]))
    if "ORG2_PORT" in env:
        api = replace(api, org2_port=int(env["ORG2_PORT"]))
    cfg = replace(cfg, api=api)
    if "LEDGER_DIR" in env:
        cfg = replace(cfg, ledger_dir=env["LEDGER_DIR"])
    if "BLOB_DIR" in env:
        cfg = replace(cfg, blob_dir=env["BLOB_DIR"])
    if "WALLET_DIR" in env:
        cfg = replace(cfg, wallet_dir=env["WALLET_DIR"])
    if "TERMS_DIGEST" in env:
        cfg = replace(cfg, terms_digest=env["TERMS_DIGEST"])
    return cfg.resolved()
