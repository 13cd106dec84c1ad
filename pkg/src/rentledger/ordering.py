"""Endorse -> order -> validate pipeline in front of the ledger.

Endorsement executes a contract operation against the committed snapshot once
per endorsing peer (twice by default, one per org) and requires byte-identical
read/write sets and results before an envelope is signed. Ordering is a single
bounded FIFO queue; batches are cut on message count, byte size, or age of the
oldest queued envelope. Validation re-checks each envelope's signature and its
read-set versions against committed state (and against writes earlier in the
same batch), flags every envelope, and appends the block — invalid envelopes
included, so the chain records failed attempts.
"""

from __future__ import annotations

import secrets
import threading
import time
from collections import deque
from dataclasses import dataclass
from typing import Callable, Optional

from .codec import canonical_bytes, digest_of
from .contract import StateAccess, TxContext, execute
from .identity import WalletEntry, envelope_signing_bytes
from .ledger import (
    Block,
    FLAG_BAD_SIGNATURE,
    FLAG_MVCC_CONFLICT,
    FLAG_VALID,
    Ledger,
)


class OrderingError(Exception):
    code = "OrderingError"

    def __init__(self, message: str = ""):
        super().__init__(message or self.code)


class QueueFull(OrderingError):
    code = "QueueFull"


class DuplicateTransaction(OrderingError):
    code = "DuplicateTransaction"


class CommitTimeout(OrderingError):
    code = "CommitTimeout"


class UnknownTransaction(OrderingError):
    code = "UnknownTx"


class EndorsementMismatch(OrderingError):
    code = "EndorsementMismatch"


def make_tx_id(operation: str, args: list[str], creator: str, timestamp: int, nonce: str) -> str:
    """Transaction id over the proposal fields only, so ids derived from it
    (proposal/document/request ids) are computable during execution."""
    return digest_of({
        "args": args,
        "creator": creator,
        "nonce": nonce,
        "operation": operation,
        "timestamp": timestamp,
    })


@dataclass(frozen=True)
class Endorsement:
    envelope: dict
    result: object


class Endorser:
    """Simulates a transaction against committed state on N endorsing peers.

    All executions run inside one ledger-lock critical section so they see the
    same snapshot; any divergence between them (a nondeterministic contract)
    is rejected before the envelope reaches ordering.
    """

    def __init__(self, ledger: Ledger, terms_digest: str, endorsement_count: int = 2):
        self.ledger = ledger
        self.terms_digest = terms_digest
        self.endorsement_count = endorsement_count

    def _run_once(self, wallet: WalletEntry, operation: str, args: list[str],
                  timestamp: int, tx_id: str) -> tuple[StateAccess, object]:
        state = StateAccess(self.ledger.read_state, self.ledger.scan_prefix)
        ctx = TxContext(
            caller=wallet.credential,
            timestamp=timestamp,
            tx_id=tx_id,
            terms_digest=self.terms_digest,
            state=state,
        )
        result = execute(operation, args, ctx)
        return state, result

    def endorse(self, wallet: WalletEntry, operation: str, args: list[str],
                timestamp: int, nonce: Optional[str] = None) -> Endorsement:
        nonce = nonce or secrets.token_hex(16)
        tx_id = make_tx_id(operation, args, wallet.user_id, timestamp, nonce)
        with self.ledger.lock:
            runs = [
                self._run_once(wallet, operation, args, timestamp, tx_id)
                for _ in range(self.endorsement_count)
            ]
        proposals = [
            canonical_bytes({
                "read_set": state.read_set(),
                "write_set": state.write_set(),
                "result": result,
            })
            for state, result in runs
        ]
        if any(p != proposals[0] for p in proposals[1:]):
            raise EndorsementMismatch(f"{operation}: endorsing peers disagree")
        state, result = runs[0]
        envelope = {
            "tx_id": tx_id,
            "operation": operation,
            "args": list(args),
            "creator": wallet.user_id,
            "creator_cert": wallet.credential.to_dict(),
            "nonce": nonce,
            "timestamp": timestamp,
            "read_set": state.read_set(),
            "write_set": state.write_set(),
        }
        envelope["signature"] = wallet.sign(envelope_signing_bytes(envelope))
        return Endorsement(envelope=envelope, result=result)


@dataclass
class _Waiter:
    event: threading.Event
    flag: Optional[str] = None
    block_number: Optional[int] = None
    tx_index: Optional[int] = None


@dataclass(frozen=True)
class CommitReceipt:
    tx_id: str
    flag: str
    block_number: int
    tx_index: int


class Pipeline:
    """Bounded FIFO orderer with batch cutting and MVCC validation."""

    def __init__(
        self,
        ledger: Ledger,
        max_messages: int = 50,
        max_bytes: int = 1 << 20,
        batch_timeout_ms: int = 200,
        queue_bound: int = 10_000,
        verify_envelope: Optional[Callable[[dict], object]] = None,
        verify_on_submit: bool = True,
    ):
        self.ledger = ledger
        self.max_messages = max_messages
        self.max_bytes = max_bytes
        self.batch_timeout_ms = batch_timeout_ms
        self.queue_bound = queue_bound
        self._verify = verify_envelope
        self._verify_on_submit = verify_on_submit
        self._cond = threading.Condition()
        self._queue: deque[tuple[dict, float, int]] = deque()  # (envelope, enqueued_at, size)
        self._pending: set[str] = set()
        self._waiters: dict[str, _Waiter] = {}
        self._cutter: Optional[threading.Thread] = None
        self._stop = threading.Event()

    # -- submission ------------------------------------------------------------

    def submit(self, envelope: dict) -> str:
        """Enqueue a signed envelope FIFO; tampered envelopes are rejected here,
        before they consume queue capacity (they are re-checked at cut time too)."""
        tx_id = envelope["tx_id"]
        if self._verify is not None and self._verify_on_submit:
            self._verify(envelope)
        size = len(canonical_bytes(envelope))
        with self._cond:
            if len(self._queue) >= self.queue_bound:
                raise QueueFull(f"{self.queue_bound} envelopes already queued")
            if tx_id in self._pending or self.ledger.committed_tx(tx_id) is not None:
                raise DuplicateTransaction(tx_id)
            self._queue.append((envelope, time.monotonic(), size))
            self._pending.add(tx_id)
            self._waiters[tx_id] = _Waiter(event=threading.Event())
            self._cond.notify_all()
        return tx_id

    def pending_count(self) -> int:
        with self._cond:
            return len(self._queue)

    @property
    def running(self) -> bool:
        return self._cutter is not None

    # -- batching ---------------------------------------------------------------

    def _take_batch_locked(self) -> list[dict]:
        batch: list[dict] = []
        total = 0
        while self._queue and len(batch) < self.max_messages:
            _, _, size = self._queue[0]
            if batch and total + size > self.max_bytes:
                break
            envelope, _, size = self._queue.popleft()
            batch.append(envelope)
            total += size
        return batch

    def cut_block(self) -> Optional[Block]:
        """Cut one batch from the queue, validate it, and commit the block."""
        with self._cond:
            batch = self._take_batch_locked()
        if not batch:
            return None
        return self._commit_batch(batch)

    def drain(self) -> list[Block]:
        """Cut until the queue is empty (used by tests and shutdown)."""
        blocks = []
        while True:
            block = self.cut_block()
            if block is None:
                return blocks
            blocks.append(block)

    def _commit_batch(self, batch: list[dict]) -> Block:
        with self.ledger.lock:
            flags = []
            block_writes: set[str] = set()
            for envelope in batch:
                flags.append(self._validate_locked(envelope, block_writes))
            block = Block.build(
                number=self.ledger.chain_height(),
                prev_hash=self.ledger.tip_hash(),
                envelopes=batch,
                flags=flags,
            )
            self.ledger.append_block(block)
        with self._cond:
            for index, (envelope, flag) in enumerate(zip(batch, flags)):
                tx_id = envelope["tx_id"]
                self._pending.discard(tx_id)
                waiter = self._waiters.get(tx_id)
                if waiter is not None:
                    waiter.flag = flag
                    waiter.block_number = block.number
                    waiter.tx_index = index
                    waiter.event.set()
        return block

    def _validate_locked(self, envelope: dict, block_writes: set[str]) -> str:
        if self._verify is not None:
            try:
                self._verify(envelope)
            except Exception:
                return FLAG_BAD_SIGNATURE
        for key, version in envelope.get("read_set", []):
            committed = self.ledger.state_version(key)
            seen = tuple(version) if version is not None else None
            if committed != seen or key in block_writes:
                return FLAG_MVCC_CONFLICT
        for key, _ in envelope.get("write_set", []):
            block_writes.add(key)
        return FLAG_VALID

    # -- commit waiting ------------------------------------------------------------

    def await_commit(self, tx_id: str, timeout: float = 10.0) -> CommitReceipt:
        with self._cond:
            waiter = self._waiters.get(tx_id)
        if waiter is None:
            committed = self.ledger.committed_tx(tx_id)
            if committed is None:
                raise UnknownTransaction(tx_id)
            flag, block_number, tx_index = committed
            return CommitReceipt(tx_id, flag, block_number, tx_index)
        if not waiter.event.wait(timeout):
            raise CommitTimeout(tx_id)
        with self._cond:
            self._waiters.pop(tx_id, None)
        return CommitReceipt(tx_id, waiter.flag, waiter.block_number, waiter.tx_index)

    # -- background cutter ------------------------------------------------------------

    def start(self) -> None:
        if self._cutter is not None:
            return
        self._stop.clear()
        self._cutter = threading.Thread(target=self._run_cutter, name="block-cutter", daemon=True)
        self._cutter.start()

    def stop(self) -> None:
        if self._cutter is None:
            return
        self._stop.set()
        with self._cond:
            self._cond.notify_all()
        self._cutter.join(timeout=5)
        self._cutter = None
        self.drain()

    def _run_cutter(self) -> None:
        timeout_s = self.batch_timeout_ms / 1000.0
        while not self._stop.is_set():
            with self._cond:
                while not self._queue and not self._stop.is_set():
                    self._cond.wait(timeout=timeout_s)
                if self._stop.is_set():
                    return
                oldest = self._queue[0][1]
                total = sum(size for _, _, size in self._queue)
                deadline = oldest + timeout_s
                now = time.monotonic()
                ready = (
                    len(self._queue) >= self.max_messages
                    or total >= self.max_bytes
                    or now >= deadline
                )
                if not ready:
                    self._cond.wait(timeout=deadline - now)
            self.cut_block()
