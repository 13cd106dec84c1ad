"""Append-only hash-chained block store with world state and history index.

Blocks are persisted to a single length-prefixed log file (see docs/wire.md);
the in-memory state and history indexes are rebuilt by replay on open, and
are therefore recoverable from the log alone. Only envelopes flagged VALID
touch state; invalid envelopes stay in their block as a record of the attempt.
"""

from __future__ import annotations

import json
import os
import struct
import threading
from bisect import bisect_left, insort
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator, Optional

from .codec import ZERO_DIGEST, canonical_bytes, digest_of

FLAG_VALID = "VALID"
FLAG_MVCC_CONFLICT = "MVCC_CONFLICT"
FLAG_ENDORSEMENT_MISMATCH = "ENDORSEMENT_MISMATCH"
FLAG_BAD_SIGNATURE = "BAD_SIGNATURE"
ALL_FLAGS = {FLAG_VALID, FLAG_MVCC_CONFLICT, FLAG_ENDORSEMENT_MISMATCH, FLAG_BAD_SIGNATURE}

Version = tuple[int, int]  # (block_number, tx_index)


class LedgerError(Exception):
    code = "LedgerError"

    def __init__(self, message: str = ""):
        super().__init__(message or self.code)


class ChainMismatch(LedgerError):
    code = "ChainMismatch"


class MalformedBlock(LedgerError):
    code = "MalformedBlock"


class BlockNotFound(LedgerError):
    code = "NotFound"


def block_header_hash(number: int, prev_hash: str, data_hash: str) -> str:
    return digest_of({"number": number, "prev_hash": prev_hash, "data_hash": data_hash})


@dataclass(frozen=True)
class Block:
    number: int
    prev_hash: str
    data_hash: str
    envelopes: tuple[dict, ...]
    validation_flags: tuple[str, ...]
    block_hash: str

    @staticmethod
    def build(number: int, prev_hash: str, envelopes: list[dict], flags: list[str]) -> "Block":
        data_hash = digest_of(envelopes)
        return Block(
            number=number,
            prev_hash=prev_hash,
            data_hash=data_hash,
            envelopes=tuple(envelopes),
            validation_flags=tuple(flags),
            block_hash=block_header_hash(number, prev_hash, data_hash),
        )

    def to_record(self) -> dict:
        return {
            "number": self.number,
            "prev_hash": self.prev_hash,
            "data_hash": self.data_hash,
            "envelopes": list(self.envelopes),
            "validation_flags": list(self.validation_flags),
            "block_hash": self.block_hash,
        }

    @staticmethod
    def from_record(raw: dict) -> "Block":
        return Block(
            number=raw["number"],
            prev_hash=raw["prev_hash"],
            data_hash=raw["data_hash"],
            envelopes=tuple(raw["envelopes"]),
            validation_flags=tuple(raw["validation_flags"]),
            block_hash=raw["block_hash"],
        )


@dataclass(frozen=True)
class HistoryEntry:
    state_key: str
    tx_id: str
    block_number: int
    tx_index: int
    timestamp: int
    creator: str
    operation: str
    value_after: Optional[bytes]  # canonical record bytes; None is a tombstone

    def to_dict(self) -> dict:
        return {
            "state_key": self.state_key,
            "tx_id": self.tx_id,
            "block_number": self.block_number,
            "tx_index": self.tx_index,
            "timestamp": self.timestamp,
            "creator": self.creator,
            "operation": self.operation,
            "value_after": None if self.value_after is None else json.loads(self.value_after),
        }


@dataclass(frozen=True)
class VerificationResult:
    ok: bool
    block_number: Optional[int] = None
    reason: Optional[str] = None  # parse | data_hash | block_hash | link | number | flags | signature
    detail: str = ""


_LEN = struct.Struct(">I")
LOG_FILENAME = "blocks.log"


class Ledger:
    """Single-writer block store; readers observe only committed blocks.

    ``lock`` is shared with the ordering pipeline so endorsement can read a
    consistent committed snapshot while commits are serialized against it.
    """

    def __init__(self, ledger_dir: str | Path, fsync: bool = True):
        self.dir = Path(ledger_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.log_path = self.dir / LOG_FILENAME
        self.fsync = fsync
        self.lock = threading.RLock()
        self._blocks: list[Block] = []
        self._state: dict[str, tuple[bytes, Version]] = {}
        self._sorted_keys: list[str] = []
        self._history: dict[str, list[HistoryEntry]] = {}
        self._committed_tx: dict[str, tuple[str, int, int]] = {}
        self._invalid: list[tuple[int, int]] = []
        self._log = open(self.log_path, "ab")
        self._replay()

    def close(self) -> None:
        self._log.close()

    # -- replay / persistence -------------------------------------------------

    def _replay(self) -> None:
        for raw in iter_block_records(self.log_path):
            block = Block.from_record(raw)
            self._check_block(block)
            self._blocks.append(block)
            self._apply(block)

    def _persist(self, block: Block) -> None:
        payload = canonical_bytes(block.to_record())
        self._log.write(_LEN.pack(len(payload)))
        self._log.write(payload)
        self._log.flush()
        if self.fsync:
            os.fsync(self._log.fileno())

    # -- append ----------------------------------------------------------------

    def _check_block(self, block: Block) -> None:
        if len(block.validation_flags) != len(block.envelopes):
            raise MalformedBlock("flag count does not match envelope count")
        if any(f not in ALL_FLAGS for f in block.validation_flags):
            raise MalformedBlock("unknown validation flag")
        if block.data_hash != digest_of(list(block.envelopes)):
            raise MalformedBlock(f"data_hash does not recompute for block {block.number}")
        if block.block_hash != block_header_hash(block.number, block.prev_hash, block.data_hash):
            raise MalformedBlock(f"block_hash does not recompute for block {block.number}")
        expected_prev = self._blocks[-1].block_hash if self._blocks else ZERO_DIGEST
        if block.prev_hash != expected_prev:
            raise ChainMismatch(f"prev_hash of block {block.number} does not match tip")
        if block.number != len(self._blocks):
            raise ChainMismatch(f"expected block number {len(self._blocks)}, got {block.number}")

    def append_block(self, block: Block) -> int:
        with self.lock:
            self._check_block(block)
            self._persist(block)
            self._blocks.append(block)
            self._apply(block)
            return block.number

    def _apply(self, block: Block) -> None:
        for index, (envelope, flag) in enumerate(zip(block.envelopes, block.validation_flags)):
            self._committed_tx[envelope["tx_id"]] = (flag, block.number, index)
            if flag != FLAG_VALID:
                self._invalid.append((block.number, index))
                continue
            for key, value in envelope["write_set"]:
                entry = HistoryEntry(
                    state_key=key,
                    tx_id=envelope["tx_id"],
                    block_number=block.number,
                    tx_index=index,
                    timestamp=envelope["timestamp"],
                    creator=envelope["creator"],
                    operation=envelope["operation"],
                    value_after=None if value is None else canonical_bytes(value),
                )
                self._history.setdefault(key, []).append(entry)
                if value is None:
                    if key in self._state:
                        del self._state[key]
                        i = bisect_left(self._sorted_keys, key)
                        if i < len(self._sorted_keys) and self._sorted_keys[i] == key:
                            self._sorted_keys.pop(i)
                else:
                    if key not in self._state:
                        insort(self._sorted_keys, key)
                    self._state[key] = (canonical_bytes(value), (block.number, index))

    # -- reads -------------------------------------------------------------------

    def read_state(self, key: str) -> Optional[tuple[bytes, Version]]:
        with self.lock:
            return self._state.get(key)

    def state_version(self, key: str) -> Optional[Version]:
        with self.lock:
            entry = self._state.get(key)
            return entry[1] if entry else None

    def scan_prefix(self, prefix: str) -> list[tuple[str, bytes, Version]]:
        """All committed (key, value, version) with the given prefix, key-ordered."""
        with self.lock:
            start = bisect_left(self._sorted_keys, prefix)
            out = []
            for i in range(start, len(self._sorted_keys)):
                key = self._sorted_keys[i]
                if not key.startswith(prefix):
                    break
                value, version = self._state[key]
                out.append((key, value, version))
            return out

    def get_history(self, key: str) -> list[HistoryEntry]:
        with self.lock:
            return list(self._history.get(key, ()))

    def get_block(self, number: int) -> Block:
        with self.lock:
            if 0 <= number < len(self._blocks):
                return self._blocks[number]
        raise BlockNotFound(f"block {number}")

    def chain_height(self) -> int:
        with self.lock:
            return len(self._blocks)

    def tip_hash(self) -> str:
        with self.lock:
            return self._blocks[-1].block_hash if self._blocks else ZERO_DIGEST

    def committed_tx(self, tx_id: str) -> Optional[tuple[str, int, int]]:
        """(flag, block_number, tx_index) for a committed transaction id."""
        with self.lock:
            return self._committed_tx.get(tx_id)

    def invalid_tx_coords(self) -> list[tuple[int, int]]:
        """(block_number, tx_index) of every non-VALID envelope, commit order."""
        with self.lock:
            return list(self._invalid)

    def iter_blocks(self, start: int = 0, stop: int | None = None) -> Iterator[Block]:
        with self.lock:
            snapshot = self._blocks[start:stop]
        return iter(snapshot)

    def state_items(self) -> list[tuple[str, bytes, Version]]:
        with self.lock:
            return [(k, v[0], v[1]) for k, v in self._state.items()]

    def export_lines(self, start: int = 0, stop: int | None = None) -> Iterator[str]:
        """Blocks as canonical JSON lines, for `ledger export`."""
        for block in self.iter_blocks(start, stop):
            yield canonical_bytes(block.to_record()).decode("utf-8")

    # -- verification ---------------------------------------------------------------

    def verify_chain(self, signature_verifier: Callable[[dict], None] | None = None) -> VerificationResult:
        """Re-read the persisted log and recompute every hash, link and signature.

        ``signature_verifier`` is called per envelope and raises on failure
        (identity.verify_envelope_offline bound to the CA root key).
        """
        return verify_chain_file(self.log_path, signature_verifier)


def iter_block_records(log_path: str | Path) -> Iterator[dict]:
    """Parse raw block records from a log file; raises MalformedBlock on garbage."""
    path = Path(log_path)
    if not path.exists():
        return
    with open(path, "rb") as fh:
        offset = 0
        while True:
            head = fh.read(_LEN.size)
            if not head:
                return
            if len(head) < _LEN.size:
                raise MalformedBlock(f"truncated length prefix at offset {offset}")
            (length,) = _LEN.unpack(head)
            payload = fh.read(length)
            if len(payload) < length:
                raise MalformedBlock(f"truncated block record at offset {offset}")
            try:
                raw = json.loads(payload)
            except json.JSONDecodeError as exc:
                raise MalformedBlock(f"unparseable block record at offset {offset}: {exc}") from exc
            yield raw
            offset += _LEN.size + length


def verify_chain_file(
    log_path: str | Path,
    signature_verifier: Callable[[dict], None] | None = None,
) -> VerificationResult:
    prev_hash = ZERO_DIGEST
    expected_number = 0
    try:
        records = iter_block_records(log_path)
        for raw in records:
            number = raw.get("number")
            try:
                block = Block.from_record(raw)
            except (KeyError, TypeError) as exc:
                return VerificationResult(False, number, "parse", f"missing field: {exc}")
            if len(block.validation_flags) != len(block.envelopes) or any(
                f not in ALL_FLAGS for f in block.validation_flags
            ):
                return VerificationResult(False, block.number, "flags", "bad validation flags")
            if digest_of(list(block.envelopes)) != block.data_hash:
                return VerificationResult(False, block.number, "data_hash", "data_hash does not recompute")
            if block_header_hash(block.number, block.prev_hash, block.data_hash) != block.block_hash:
                return VerificationResult(False, block.number, "block_hash", "block_hash does not recompute")
            if block.prev_hash != prev_hash:
                return VerificationResult(False, block.number, "link", "prev_hash does not match predecessor")
            if block.number != expected_number:
                return VerificationResult(False, block.number, "number", f"expected number {expected_number}")
            if signature_verifier is not None:
                for index, envelope in enumerate(block.envelopes):
                    try:
                        signature_verifier(envelope)
                    except Exception as exc:
                        return VerificationResult(
                            False, block.number, "signature", f"envelope {index}: {exc}"
                        )
            prev_hash = block.block_hash
            expected_number += 1
    except MalformedBlock as exc:
        return VerificationResult(False, expected_number, "parse", str(exc))
    return VerificationResult(True)
