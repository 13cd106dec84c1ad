"""Composition root: one ledger, one CA, one blobstore, one ordering pipeline.

Every state mutation goes endorse -> submit -> await commit; nothing else in
the process holds a writable reference to the ledger. Reads are served from
committed state only. When the background block cutter is not running (tests,
sequential tooling), ``invoke`` cuts a block inline so callers never deadlock
waiting for a timer.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from typing import Callable, Optional

from .blobstore import Blobstore
from .codec import ZERO_DIGEST
from .config import Config
from .contract import (
    ContractError,
    HOUSE_LISTED,
    OPERATIONS,
    StateAccess,
    TxContext,
    _idx_proposal,
    execute,
)
from .identity import (
    CertificateAuthority,
    EnrollmentSecret,
    ROLE_LANDLORD,
    ROLE_TENANT,
    SessionToken,
    WalletEntry,
)
from .ledger import Block, FLAG_VALID, Ledger
from .ordering import Endorser, Pipeline
from .terms import TERMS_TEXT, pinned_digest


class TxRejected(Exception):
    """A committed transaction carried a non-VALID flag."""

    def __init__(self, tx_id: str, flag: str, block_number: int, tx_index: int):
        super().__init__(f"{tx_id} flagged {flag} in block {block_number}")
        self.tx_id = tx_id
        self.code = flag
        self.block_number = block_number
        self.tx_index = tx_index


@dataclass(frozen=True)
class InvokeOutcome:
    result: object
    tx_id: str
    flag: str
    block_number: int
    tx_index: int


class RentalService:
    def __init__(self, config: Optional[Config] = None, clock_ms: Optional[Callable[[], int]] = None):
        self.config = (config or Config()).resolved()
        self._now_ms = clock_ms or (lambda: int(time.time() * 1000))
        self.ca = CertificateAuthority(
            self.config.ca_dir, self.config.wallet_dir,
            config=self.config.identity, clock_ms=self._now_ms,
        )
        self.ledger = Ledger(self.config.ledger_dir, fsync=self.config.ledger_fsync)
        self.blobstore = Blobstore(
            self.config.blob_dir,
            max_bytes=self.config.blobstore.max_bytes,
            clock_ms=self._now_ms,
        )
        self.terms_digest = pinned_digest(self.config.terms_digest)
        self.terms_text = TERMS_TEXT if self.terms_digest == pinned_digest() else ""
        self.endorser = Endorser(self.ledger, self.terms_digest)
        ordering = self.config.ordering
        self.pipeline = Pipeline(
            self.ledger,
            max_messages=ordering.max_messages,
            max_bytes=ordering.max_bytes,
            batch_timeout_ms=ordering.batch_timeout_ms,
            queue_bound=ordering.queue_bound,
            verify_envelope=self.ca.verify_envelope,
        )
        self._ensure_genesis()

    def _ensure_genesis(self) -> None:
        if self.ledger.chain_height() == 0:
            self.ledger.append_block(Block.build(0, ZERO_DIGEST, [], []))

    def start(self) -> None:
        self.pipeline.start()

    def close(self) -> None:
        self.pipeline.stop()
        self.ledger.close()

    # -- identity ---------------------------------------------------------------

    def register(self, user_id: str, password: str, role: str) -> EnrollmentSecret:
        return self.ca.register_user(user_id, password, role)

    def enroll(self, user_id: str, secret: str) -> WalletEntry:
        return self.ca.enroll(user_id, secret)

    def login(self, user_id: str) -> SessionToken:
        """Nonce-challenge login signed with the server-held wallet key."""
        wallet = self.ca.wallet_entry(user_id)
        nonce = self.ca.issue_nonce(user_id)
        return self.ca.login(user_id, nonce, wallet.sign(bytes.fromhex(nonce)))

    def verify_token(self, token: str) -> dict:
        return self.ca.verify_token(token)

    # -- write path --------------------------------------------------------------

    def invoke(self, user_id: str, operation: str, args: list[str],
               timeout: Optional[float] = None, nonce: Optional[str] = None) -> InvokeOutcome:
        wallet = self.ca.wallet_entry(user_id)
        endorsement = self.endorser.endorse(
            wallet, operation, list(args), self._now_ms(), nonce=nonce
        )
        tx_id = self.pipeline.submit(endorsement.envelope)
        if not self.pipeline.running:
            self.pipeline.cut_block()
        receipt = self.pipeline.await_commit(
            tx_id, timeout if timeout is not None else self.config.api.commit_timeout_s
        )
        if receipt.flag != FLAG_VALID:
            raise TxRejected(tx_id, receipt.flag, receipt.block_number, receipt.tx_index)
        return InvokeOutcome(
            result=endorsement.result,
            tx_id=tx_id,
            flag=receipt.flag,
            block_number=receipt.block_number,
            tx_index=receipt.tx_index,
        )

    # -- read path ----------------------------------------------------------------

    def evaluate(self, user_id: str, operation: str, args: list[str]):
        """Run a read-only contract operation against committed state."""
        spec = OPERATIONS.get(operation)
        if spec is None:
            raise ContractError("UnknownOperation", operation)
        if not spec.read_only:
            raise ContractError("Forbidden", f"{operation} mutates state; use invoke")
        credential = self.ca.credential(user_id)
        with self.ledger.lock:
            ctx = TxContext(
                caller=credential,
                timestamp=self._now_ms(),
                tx_id="",
                terms_digest=self.terms_digest,
                state=StateAccess(self.ledger.read_state, self.ledger.scan_prefix),
                history_fn=self.ledger.get_history,
            )
            return execute(operation, list(args), ctx)

    def list_houses(self, user_id: str) -> list[dict]:
        """Gateway-level browse: tenants see listed houses, landlords their own,
        auditors everything."""
        credential = self.ca.credential(user_id)
        houses = [json.loads(value) for _, value, _ in self.ledger.scan_prefix("house~")]
        if credential.role == ROLE_TENANT:
            houses = [h for h in houses if h["status"] == HOUSE_LISTED]
        elif credential.role == ROLE_LANDLORD:
            houses = [h for h in houses if h["landlord_id"] == user_id]
        houses.sort(key=lambda h: (h["created_at"], h["house_id"]))
        return houses

    # -- documents -----------------------------------------------------------------

    def upload_document(self, user_id: str, proposal_id: str, content: bytes,
                        filename: str) -> InvokeOutcome:
        ref = self.ledger.read_state(_idx_proposal(proposal_id))
        if ref is None:
            raise ContractError("ProposalNotFound", proposal_id)
        house_id = json.loads(ref[0])["house_id"]
        folder = f"houses/{house_id}/{user_id}/"
        blob = self.blobstore.put(content, folder, filename)
        return self.invoke(
            user_id, "createDocument", [proposal_id, blob.digest, blob.digest, filename]
        )

    def download_document(self, user_id: str, document_id: str) -> tuple[bytes, dict]:
        meta = self.evaluate(user_id, "getDocument", [document_id])
        return self.blobstore.get(meta["content_digest"]), meta

    # -- introspection ----------------------------------------------------------------

    def health(self) -> dict:
        return {
            "status": "ok",
            "chain_height": self.ledger.chain_height(),
            "pending": self.pipeline.pending_count(),
            "terms_digest": self.terms_digest,
        }
