"""The rental-workflow contract: role-gated state transitions over world state.

Handlers are pure with respect to the snapshot they execute against: no I/O,
no clock reads, no randomness. Timestamps and transaction ids come from the
envelope, so the two per-org endorsement executions produce byte-identical
read/write sets. Record ids are derived deterministically from parent ids
plus the transaction id.

State key scheme (ids hex-encoded, tilde-separated):
    house~{id}
    proposal~{houseId}~{proposalId}
    doc~{documentId}
    req~{requestId}
    terms~{userId}
plus composite-key indexes under ``idx~`` that keep lookups and duplicate
checks O(1) instead of full-prefix scans.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from typing import Callable, Optional

from .codec import digest_of, hex_id, is_hex_digest
from .identity import Credential, ROLE_AUDITOR, ROLE_LANDLORD, ROLE_TENANT, _verify_ed25519
from .ledger import HistoryEntry, Version

HOUSE_LISTED = "Listed"
HOUSE_RENTED = "Rented"

PROPOSAL_PENDING = "Pending"
PROPOSAL_ACCEPTED = "Accepted"
PROPOSAL_DENIED = "Denied"
PROPOSAL_SUPERSEDED = "Superseded"

REQUEST_PENDING = "Pending"
REQUEST_GRANTED = "Granted"
REQUEST_DENIED = "Denied"

ZERO_CONTENT_DIGEST = "0" * 64


class ContractError(Exception):
    """Precondition failure inside a contract operation; never committed."""

    def __init__(self, code: str, message: str = ""):
        super().__init__(message or code)
        self.code = code


# -- key scheme ---------------------------------------------------------------

def house_key(house_id: str) -> str:
    return f"house~{hex_id(house_id)}"


def proposal_key(house_id: str, proposal_id: str) -> str:
    return f"proposal~{hex_id(house_id)}~{hex_id(proposal_id)}"


def proposal_prefix(house_id: str) -> str:
    return f"proposal~{hex_id(house_id)}~"


def doc_key(document_id: str) -> str:
    return f"doc~{hex_id(document_id)}"


def req_key(request_id: str) -> str:
    return f"req~{hex_id(request_id)}"


def terms_key(user_id: str) -> str:
    return f"terms~{hex_id(user_id)}"


def _idx_proposal(proposal_id: str) -> str:
    return f"idx~proposal~{hex_id(proposal_id)}"


def _idx_house_owner(owner_id: str, house_id: str = "") -> str:
    base = f"idx~houseowner~{hex_id(owner_id)}~"
    return base + hex_id(house_id) if house_id else base


def _idx_pending_req(document_id: str, requester_id: str) -> str:
    return f"idx~pendingreq~{hex_id(document_id)}~{hex_id(requester_id)}"


def _idx_req_grantor(grantor_id: str, request_id: str = "") -> str:
    base = f"idx~reqgrantor~{hex_id(grantor_id)}~"
    return base + hex_id(request_id) if request_id else base


def _idx_req_by_doc(document_id: str, request_id: str = "") -> str:
    base = f"idx~reqbydoc~{hex_id(document_id)}~"
    return base + hex_id(request_id) if request_id else base


def _idx_grant(document_id: str, requester_id: str) -> str:
    return f"idx~grant~{hex_id(document_id)}~{hex_id(requester_id)}"


# -- execution context ----------------------------------------------------------

class StateAccess:
    """Read/write-set recording view over a committed snapshot.

    Reads hit the in-transaction write buffer first, then the snapshot;
    snapshot reads (including misses) are recorded with the version seen, so
    commit-time MVCC validation can detect stale reads. Prefix scans record
    each key they touch; keys created concurrently are not detected
    (phantom reads, as on the underlying platform).
    """

    def __init__(
        self,
        read_fn: Callable[[str], Optional[tuple[bytes, Version]]],
        scan_fn: Callable[[str], list[tuple[str, bytes, Version]]],
    ):
        self._read = read_fn
        self._scan = scan_fn
        self.reads: dict[str, Optional[Version]] = {}
        self.writes: dict[str, Optional[dict]] = {}

    def get(self, key: str) -> Optional[dict]:
        if key in self.writes:
            value = self.writes[key]
            return copy.deepcopy(value) if value is not None else None
        entry = self._read(key)
        if key not in self.reads:
            self.reads[key] = entry[1] if entry else None
        return json.loads(entry[0]) if entry else None

    def scan(self, prefix: str) -> list[tuple[str, dict]]:
        merged: dict[str, dict] = {}
        for key, value, version in self._scan(prefix):
            if key not in self.reads:
                self.reads[key] = version
            if key not in self.writes:
                merged[key] = json.loads(value)
        for key, value in self.writes.items():
            if key.startswith(prefix) and value is not None:
                merged[key] = copy.deepcopy(value)
        return sorted(merged.items())

    def put(self, key: str, value: dict) -> None:
        self.writes[key] = copy.deepcopy(value)

    def delete(self, key: str) -> None:
        self.writes[key] = None

    def read_set(self) -> list[list]:
        return [[k, list(v) if v is not None else None] for k, v in sorted(self.reads.items())]

    def write_set(self) -> list[list]:
        return [[k, v] for k, v in sorted(self.writes.items())]


@dataclass
class TxContext:
    caller: Credential
    timestamp: int
    tx_id: str
    terms_digest: str
    state: StateAccess
    history_fn: Optional[Callable[[str], list[HistoryEntry]]] = None

    @property
    def caller_id(self) -> str:
        return self.caller.user_id

    @property
    def role(self) -> str:
        return self.caller.role

    def history(self, key: str) -> list[dict]:
        if self.history_fn is None:
            raise ContractError("Forbidden", "history access is not available on the write path")
        return [h.to_dict() for h in self.history_fn(key)]


# -- operations ------------------------------------------------------------------

def _require(condition: bool, code: str, message: str = ""):
    if not condition:
        raise ContractError(code, message)


def op_accept_terms(ctx: TxContext, terms_digest: str, consent_signature: str) -> dict:
    _require(terms_digest == ctx.terms_digest, "WrongTerms",
             "digest does not match the pinned terms document")
    _require(
        _verify_ed25519(ctx.caller.public_key, consent_signature, terms_digest.encode("utf-8")),
        "BadSignature", "consent signature does not verify",
    )
    key = terms_key(ctx.caller_id)
    _require(ctx.state.get(key) is None, "AlreadyAccepted", ctx.caller_id)
    consent = {
        "user_id": ctx.caller_id,
        "terms_digest": terms_digest,
        "signature": consent_signature,
        "accepted_at": ctx.timestamp,
    }
    ctx.state.put(key, consent)
    return consent


def op_create_house(ctx: TxContext, house_id: str) -> dict:
    _require(bool(house_id), "InvalidArgument", "empty house_id")
    key = house_key(house_id)
    _require(ctx.state.get(key) is None, "HouseExists", house_id)
    house = {
        "house_id": house_id,
        "landlord_id": ctx.caller_id,
        "status": HOUSE_LISTED,
        "created_at": ctx.timestamp,
    }
    ctx.state.put(key, house)
    ctx.state.put(_idx_house_owner(ctx.caller_id, house_id), {"house_id": house_id})
    return house


def op_create_proposal(ctx: TxContext, house_id: str) -> dict:
    _require(ctx.state.get(terms_key(ctx.caller_id)) is not None, "TermsNotAccepted", ctx.caller_id)
    house = ctx.state.get(house_key(house_id))
    _require(house is not None, "HouseNotFound", house_id)
    _require(house["status"] == HOUSE_LISTED, "HouseAlreadyRented", house_id)
    for _, sibling in ctx.state.scan(proposal_prefix(house_id)):
        if sibling["tenant_id"] == ctx.caller_id and sibling["status"] in (
            PROPOSAL_PENDING, PROPOSAL_ACCEPTED,
        ):
            raise ContractError("DuplicateProposal", sibling["proposal_id"])
    proposal_id = digest_of({"house_id": house_id, "tenant_id": ctx.caller_id, "tx_id": ctx.tx_id})
    proposal = {
        "proposal_id": proposal_id,
        "house_id": house_id,
        "tenant_id": ctx.caller_id,
        "status": PROPOSAL_PENDING,
        "document_ids": [],
        "created_at": ctx.timestamp,
    }
    ctx.state.put(proposal_key(house_id, proposal_id), proposal)
    ctx.state.put(_idx_proposal(proposal_id), {"house_id": house_id})
    return proposal


def _resolve_proposal(ctx: TxContext, proposal_id: str) -> tuple[str, dict]:
    ref = ctx.state.get(_idx_proposal(proposal_id))
    _require(ref is not None, "ProposalNotFound", proposal_id)
    proposal = ctx.state.get(proposal_key(ref["house_id"], proposal_id))
    _require(proposal is not None, "ProposalNotFound", proposal_id)
    return ref["house_id"], proposal


def op_create_document(ctx: TxContext, proposal_id: str, content_digest: str,
                       storage_ref: str, filename: str) -> dict:
    house_id, proposal = _resolve_proposal(ctx, proposal_id)
    _require(proposal["tenant_id"] == ctx.caller_id, "Forbidden", "not the proposal owner")
    _require(proposal["status"] == PROPOSAL_PENDING, "ProposalClosed", proposal["status"])
    _require(
        is_hex_digest(content_digest) and content_digest != ZERO_CONTENT_DIGEST,
        "BadDigest", "content digest must be a non-zero SHA-256 hex digest",
    )
    _require(bool(storage_ref) and bool(filename), "InvalidArgument", "empty storage_ref or filename")
    document_id = digest_of({
        "proposal_id": proposal_id, "content_digest": content_digest, "tx_id": ctx.tx_id,
    })
    meta = {
        "document_id": document_id,
        "owner_id": ctx.caller_id,
        "house_id": house_id,
        "proposal_id": proposal_id,
        "content_digest": content_digest,
        "storage_ref": storage_ref,
        "filename": filename,
        "created_at": ctx.timestamp,
    }
    ctx.state.put(doc_key(document_id), meta)
    proposal["document_ids"].append(document_id)
    ctx.state.put(proposal_key(house_id, proposal_id), proposal)
    return meta


def op_request_access(ctx: TxContext, document_id: str) -> dict:
    meta = ctx.state.get(doc_key(document_id))
    _require(meta is not None, "DocumentNotFound", document_id)
    house = ctx.state.get(house_key(meta["house_id"]))
    _require(house is not None and house["landlord_id"] == ctx.caller_id,
             "Forbidden", "not the landlord of the document's house")
    _require(ctx.state.get(_idx_pending_req(document_id, ctx.caller_id)) is None,
             "DuplicateRequest", document_id)
    request_id = digest_of({
        "document_id": document_id, "requester_id": ctx.caller_id, "tx_id": ctx.tx_id,
    })
    request = {
        "request_id": request_id,
        "document_id": document_id,
        "requester_id": ctx.caller_id,
        "grantor_id": meta["owner_id"],
        "status": REQUEST_PENDING,
        "created_at": ctx.timestamp,
        "decided_at": None,
    }
    ctx.state.put(req_key(request_id), request)
    ctx.state.put(_idx_pending_req(document_id, ctx.caller_id), {"request_id": request_id})
    ctx.state.put(_idx_req_grantor(meta["owner_id"], request_id), {"request_id": request_id})
    ctx.state.put(_idx_req_by_doc(document_id, request_id), {"request_id": request_id})
    return request


def _decide_access(ctx: TxContext, request_id: str, granted: bool) -> dict:
    request = ctx.state.get(req_key(request_id))
    _require(request is not None, "RequestNotFound", request_id)
    _require(request["grantor_id"] == ctx.caller_id, "Forbidden", "not the grantor")
    _require(request["status"] == REQUEST_PENDING, "AlreadyDecided", request["status"])
    request["status"] = REQUEST_GRANTED if granted else REQUEST_DENIED
    request["decided_at"] = ctx.timestamp
    ctx.state.put(req_key(request_id), request)
    ctx.state.delete(_idx_pending_req(request["document_id"], request["requester_id"]))
    if granted:
        ctx.state.put(_idx_grant(request["document_id"], request["requester_id"]),
                      {"request_id": request_id})
    return request


def op_accept_access(ctx: TxContext, request_id: str) -> dict:
    return _decide_access(ctx, request_id, granted=True)


def op_deny_access(ctx: TxContext, request_id: str) -> dict:
    return _decide_access(ctx, request_id, granted=False)


def op_get_requests_for_tenant(ctx: TxContext) -> list[dict]:
    requests = []
    for _, ref in ctx.state.scan(_idx_req_grantor(ctx.caller_id)):
        request = ctx.state.get(req_key(ref["request_id"]))
        if request is not None:
            requests.append(request)
    requests.sort(key=lambda r: (-r["created_at"], r["request_id"]))
    return requests


def op_get_proposals_for_landlord(ctx: TxContext) -> list[dict]:
    proposals = []
    for _, ref in ctx.state.scan(_idx_house_owner(ctx.caller_id)):
        for _, proposal in ctx.state.scan(proposal_prefix(ref["house_id"])):
            proposals.append(proposal)
    proposals.sort(key=lambda p: (-p["created_at"], p["proposal_id"]))
    return proposals


def op_accept_proposal(ctx: TxContext, proposal_id: str) -> dict:
    house_id, proposal = _resolve_proposal(ctx, proposal_id)
    house = ctx.state.get(house_key(house_id))
    _require(house is not None and house["landlord_id"] == ctx.caller_id,
             "Forbidden", "not the landlord of this house")
    _require(house["status"] == HOUSE_LISTED, "HouseAlreadyRented", house_id)
    _require(proposal["status"] == PROPOSAL_PENDING, "AlreadyDecided", proposal["status"])
    superseded = []
    for key, sibling in ctx.state.scan(proposal_prefix(house_id)):
        if sibling["proposal_id"] != proposal_id and sibling["status"] == PROPOSAL_PENDING:
            sibling["status"] = PROPOSAL_SUPERSEDED
            ctx.state.put(key, sibling)
            superseded.append(sibling["proposal_id"])
    proposal["status"] = PROPOSAL_ACCEPTED
    ctx.state.put(proposal_key(house_id, proposal_id), proposal)
    house["status"] = HOUSE_RENTED
    ctx.state.put(house_key(house_id), house)
    return {**proposal, "superseded_proposal_ids": sorted(superseded)}


def op_deny_proposal(ctx: TxContext, proposal_id: str) -> dict:
    house_id, proposal = _resolve_proposal(ctx, proposal_id)
    house = ctx.state.get(house_key(house_id))
    _require(house is not None and house["landlord_id"] == ctx.caller_id,
             "Forbidden", "not the landlord of this house")
    _require(proposal["status"] == PROPOSAL_PENDING, "AlreadyDecided", proposal["status"])
    proposal["status"] = PROPOSAL_DENIED
    ctx.state.put(proposal_key(house_id, proposal_id), proposal)
    return proposal


def op_get_document(ctx: TxContext, document_id: str) -> dict:
    meta = ctx.state.get(doc_key(document_id))
    _require(meta is not None, "DocumentNotFound", document_id)
    if ctx.role == ROLE_AUDITOR or meta["owner_id"] == ctx.caller_id:
        return meta
    if ctx.role == ROLE_LANDLORD and ctx.state.get(_idx_grant(document_id, ctx.caller_id)) is not None:
        return meta
    raise ContractError("Forbidden", "no granted access request for this document")


def op_get_historic_data(ctx: TxContext, house_id: str) -> dict:
    hk = house_key(house_id)
    _require(ctx.state.get(hk) is not None, "HouseNotFound", house_id)
    bundle: dict = {
        "house_id": house_id,
        "house": ctx.history(hk),
        "proposals": {},
        "documents": {},
        "requests": {},
        "terms": {},
    }
    tenants = set()
    document_ids = []
    for key, proposal in ctx.state.scan(proposal_prefix(house_id)):
        bundle["proposals"][key] = ctx.history(key)
        tenants.add(proposal["tenant_id"])
        document_ids.extend(proposal["document_ids"])
    for document_id in document_ids:
        key = doc_key(document_id)
        bundle["documents"][key] = ctx.history(key)
        for _, ref in ctx.state.scan(_idx_req_by_doc(document_id)):
            rkey = req_key(ref["request_id"])
            bundle["requests"][rkey] = ctx.history(rkey)
    for tenant_id in sorted(tenants):
        key = terms_key(tenant_id)
        bundle["terms"][key] = ctx.history(key)
    return bundle


@dataclass(frozen=True)
class OpSpec:
    name: str
    handler: Callable
    roles: frozenset[str]
    arity: int
    read_only: bool = False


OPERATIONS: dict[str, OpSpec] = {
    spec.name: spec
    for spec in [
        OpSpec("acceptTerms", op_accept_terms, frozenset({ROLE_TENANT}), 2),
        OpSpec("createHouse", op_create_house, frozenset({ROLE_LANDLORD}), 1),
        OpSpec("createProposal", op_create_proposal, frozenset({ROLE_TENANT}), 1),
        OpSpec("createDocument", op_create_document, frozenset({ROLE_TENANT}), 4),
        OpSpec("requestAccess", op_request_access, frozenset({ROLE_LANDLORD}), 1),
        OpSpec("acceptAccess", op_accept_access, frozenset({ROLE_TENANT}), 1),
        OpSpec("denyAccess", op_deny_access, frozenset({ROLE_TENANT}), 1),
        OpSpec("getRequestsForTenant", op_get_requests_for_tenant, frozenset({ROLE_TENANT}), 0, True),
        OpSpec("getProposalsForLandlord", op_get_proposals_for_landlord,
               frozenset({ROLE_LANDLORD}), 0, True),
        OpSpec("acceptProposal", op_accept_proposal, frozenset({ROLE_LANDLORD}), 1),
        OpSpec("denyProposal", op_deny_proposal, frozenset({ROLE_LANDLORD}), 1),
        OpSpec("getDocument", op_get_document,
               frozenset({ROLE_TENANT, ROLE_LANDLORD, ROLE_AUDITOR}), 1, True),
        OpSpec("getHistoricData", op_get_historic_data, frozenset({ROLE_AUDITOR}), 1, True),
    ]
}


def execute(operation: str, args: list[str], ctx: TxContext):
    """Run one contract operation against the context's snapshot."""
    spec = OPERATIONS.get(operation)
    if spec is None:
        raise ContractError("UnknownOperation", operation)
    if len(args) != spec.arity:
        raise ContractError("InvalidArgument", f"{operation} takes {spec.arity} argument(s)")
    if ctx.role not in spec.roles:
        raise ContractError("Forbidden", f"role {ctx.role} may not call {operation}")
    return spec.handler(ctx, *args)
