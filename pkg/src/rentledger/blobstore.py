"""Content-addressed document storage with mandatory read-time verification.

Blobs live under ``blobs/<d0d1>/<digest>`` (two-hex-char shard directories),
so the storage key is the SHA-256 of the content and identical uploads
deduplicate for free. ``folders.idx`` maps logical folders to the digests
(and original filenames) stored under them. The filesystem backend is the
default; the Backend interface is the seam for a remote object store.
"""

from __future__ import annotations

import json
import os
import secrets
import threading
import time
from abc import ABC, abstractmethod
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

from .codec import sha256_hex

INTEGRITY_OK = "OK"
INTEGRITY_MISMATCH = "MISMATCH"
INTEGRITY_MISSING = "MISSING"

DEFAULT_MAX_BYTES = 25 * 1024 * 1024
INDEX_FILENAME = "folders.idx"


class BlobError(Exception):
    code = "BlobError"

    def __init__(self, message: str = ""):
        super().__init__(message or self.code)


class TooLarge(BlobError):
    code = "TooLarge"


class EmptyContent(BlobError):
    code = "EmptyContent"


class BackendUnavailable(BlobError):
    code = "BackendUnavailable"


class BlobNotFound(BlobError):
    code = "NotFound"


class CorruptBlob(BlobError):
    code = "CorruptBlob"


@dataclass(frozen=True)
class BlobRef:
    digest: str
    size_bytes: int
    folder: str
    stored_at: int  # epoch ms


class Backend(ABC):
    """Byte storage keyed by digest; implementations must be concurrency-safe."""

    @abstractmethod
    def write(self, digest: str, content: bytes) -> None: ...

    @abstractmethod
    def read(self, digest: str) -> Optional[bytes]: ...

    @abstractmethod
    def exists(self, digest: str) -> bool: ...


class FilesystemBackend(Backend):
    """Sharded on-disk layout; writes go to a temp file then atomic-rename,
    so readers never observe a torn blob."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        try:
            self.root.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise BackendUnavailable(str(exc)) from exc

    def _path(self, digest: str) -> Path:
        return self.root / digest[:2] / digest

    def write(self, digest: str, content: bytes) -> None:
        path = self._path(digest)
        if path.exists():
            return
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            tmp = path.parent / f".{digest}.{secrets.token_hex(4)}.tmp"
            with open(tmp, "wb") as fh:
                fh.write(content)
                fh.flush()
                os.fsync(fh.fileno())
            os.replace(tmp, path)
        except OSError as exc:
            raise BackendUnavailable(str(exc)) from exc

    def read(self, digest: str) -> Optional[bytes]:
        path = self._path(digest)
        try:
            return path.read_bytes()
        except FileNotFoundError:
            return None
        except OSError as exc:
            raise BackendUnavailable(str(exc)) from exc

    def exists(self, digest: str) -> bool:
        return self._path(digest).exists()


class Blobstore:
    """put/get/verify facade over a backend, plus the logical-folder index."""

    def __init__(
        self,
        root: str | Path,
        max_bytes: int = DEFAULT_MAX_BYTES,
        backend: Optional[Backend] = None,
        clock_ms: Optional[Callable[[], int]] = None,
    ):
        self.root = Path(root)
        self.max_bytes = max_bytes
        self.backend = backend or FilesystemBackend(self.root)
        self._now_ms = clock_ms or (lambda: int(time.time() * 1000))
        self._lock = threading.Lock()
        self._index_path = self.root / INDEX_FILENAME
        self._index: dict[str, list[dict]] = {}
        self._load_index()

    # -- index ------------------------------------------------------------------

    def _load_index(self) -> None:
        if self._index_path.exists():
            self._index = json.loads(self._index_path.read_text())

    def _save_index_locked(self) -> None:
        tmp = self._index_path.with_suffix(".tmp")
        tmp.write_text(json.dumps(self._index, sort_keys=True))
        os.replace(tmp, self._index_path)

    def folders(self) -> dict[str, list[dict]]:
        with self._lock:
            return json.loads(json.dumps(self._index))

    def search(self, keyword: str) -> list[dict]:
        """Entries whose folder path or filename contains the keyword."""
        needle = keyword.lower()
        hits = []
        with self._lock:
            for folder, entries in sorted(self._index.items()):
                for entry in entries:
                    if needle in folder.lower() or needle in entry.get("filename", "").lower():
                        hits.append({"folder": folder, **entry})
        return hits

    # -- storage -----------------------------------------------------------------

    def put(self, content: bytes, folder: str, filename: str = "") -> BlobRef:
        if not content:
            raise EmptyContent()
        if len(content) > self.max_bytes:
            raise TooLarge(f"{len(content)} bytes exceeds cap of {self.max_bytes}")
        digest = sha256_hex(content)
        self.backend.write(digest, content)
        now = self._now_ms()
        with self._lock:
            entries = self._index.setdefault(folder, [])
            match = next(
                (e for e in entries if e["digest"] == digest and e.get("filename", "") == filename),
                None,
            )
            if match is None:
                entries.append({"digest": digest, "filename": filename, "stored_at": now})
                self._save_index_locked()
            else:
                now = match["stored_at"]
        return BlobRef(digest=digest, size_bytes=len(content), folder=folder, stored_at=now)

    def get(self, digest: str) -> bytes:
        content = self.backend.read(digest)
        if content is None:
            raise BlobNotFound(digest)
        if sha256_hex(content) != digest:
            raise CorruptBlob(digest)
        return content

    def exists(self, digest: str) -> bool:
        return self.backend.exists(digest)

    def verify_against_ledger(self, expected_digest: str) -> str:
        """Integrity check for a committed document's on-ledger digest."""
        content = self.backend.read(expected_digest)
        if content is None:
            return INTEGRITY_MISSING
        if sha256_hex(content) != expected_digest:
            return INTEGRITY_MISMATCH
        return INTEGRITY_OK
