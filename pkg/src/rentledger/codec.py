"""Canonical encoding and digest helpers.

Every byte sequence that gets hashed or signed anywhere in the system is
produced by :func:`canonical_bytes`, so independent implementations (and the
offline verifier) agree byte-for-byte: JSON with lexicographically sorted
keys, no insignificant whitespace, ASCII-only escapes. Binary values are
never embedded raw; they are hex strings at the JSON layer.
"""

from __future__ import annotations

import hashlib
import json
from typing import Any

# 32-byte all-zero digest, hex. Used as the genesis back-link.
ZERO_DIGEST = "0" * 64


def canonical_bytes(obj: Any) -> bytes:
    """Deterministic encoding of a JSON-compatible object."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True).encode("utf-8")


def canonical_json(obj: Any) -> str:
    return canonical_bytes(obj).decode("utf-8")


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def digest_of(obj: Any) -> str:
    """SHA-256 over the canonical encoding of ``obj``, as hex."""
    return sha256_hex(canonical_bytes(obj))


def hex_id(raw: str) -> str:
    """Hex-encode an identifier for embedding in a tilde-separated state key."""
    return raw.encode("utf-8").hex()


def unhex_id(encoded: str) -> str:
    return bytes.fromhex(encoded).decode("utf-8")


def is_hex_digest(value: str) -> bool:
    """True for a well-formed lowercase 64-char hex SHA-256 digest."""
    if not isinstance(value, str) or len(value) != 64:
        return False
    try:
        bytes.fromhex(value)
    except ValueError:
        return False
    return value == value.lower()
