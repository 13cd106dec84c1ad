"""Per-organization HTTP gateways over one shared service.

Both gateways expose the same route table; what differs is the organization
a session token must belong to (tenants on Org1, landlords and auditors on
Org2), so presenting a token to the wrong gateway is a 403 before any
contract logic runs. Write endpoints are synchronous: endorse, submit,
await commit, then answer with the transaction id and block coordinates.
"""

from __future__ import annotations

from typing import Optional

from fastapi import Depends, FastAPI, File, Header, Query, Request, UploadFile
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse, Response
from pydantic import BaseModel

from . import audit
from .blobstore import BlobError
from .contract import ContractError
from .identity import IdentityError
from .ledger import LedgerError
from .ordering import OrderingError
from .service import RentalService, TxRejected

ERROR_STATUS = {
    # caller identity / auth
    "BadSecret": 401, "BadSignature": 401, "BadCertificate": 401,
    "ExpiredNonce": 401, "BadToken": 401, "UnknownIdentity": 401,
    "OrgMismatch": 403, "Forbidden": 403,
    # missing things
    "NotRegistered": 404, "NotFound": 404, "HouseNotFound": 404,
    "ProposalNotFound": 404, "DocumentNotFound": 404, "RequestNotFound": 404,
    "UnknownTx": 404,
    # state conflicts
    "AlreadyRegistered": 409, "SecretConsumed": 409, "HouseExists": 409,
    "DuplicateProposal": 409, "DuplicateRequest": 409, "AlreadyDecided": 409,
    "AlreadyAccepted": 409, "HouseAlreadyRented": 409, "ProposalClosed": 409,
    "TermsNotAccepted": 409, "DuplicateTransaction": 409, "MVCC_CONFLICT": 409,
    # bad input
    "InvalidRole": 400, "WrongTerms": 400, "BadDigest": 400,
    "InvalidArgument": 400, "UnknownOperation": 400, "UnknownFormat": 400,
    "EmptyContent": 400, "MalformedReport": 400,
    "TooLarge": 413,
    # infrastructure
    "QueueFull": 503, "BackendUnavailable": 503,
    "CommitTimeout": 504, "CorruptBlob": 502, "EndorsementMismatch": 500,
}

_MEDIA_TYPES = {"json": "application/json", "csv": "text/csv", "text": "text/plain"}


class ApiFault(Exception):
    def __init__(self, status: int, code: str, message: str = ""):
        super().__init__(message or code)
        self.status = status
        self.code = code


class RegisterBody(BaseModel):
    user_id: str
    password: str
    role: str


class EnrollBody(BaseModel):
    user_id: str
    secret: str


class LoginBody(BaseModel):
    user_id: str


class TermsBody(BaseModel):
    terms_digest: str


class HouseBody(BaseModel):
    house_id: str


def _error_response(code: str, message: str, status: Optional[int] = None,
                    tx_id: Optional[str] = None) -> JSONResponse:
    body = {"error": {"code": code, "message": message}}
    if tx_id is not None:
        body["error"]["tx_id"] = tx_id
    return JSONResponse(status_code=status or ERROR_STATUS.get(code, 400), content=body)


def _write_response(outcome, status: int = 200) -> JSONResponse:
    return JSONResponse(status_code=status, content={
        "result": outcome.result,
        "tx_id": outcome.tx_id,
        "block_number": outcome.block_number,
        "tx_index": outcome.tx_index,
        "validation_flag": outcome.flag,
    })


def _page(rows: list, offset: int, limit: Optional[int]) -> list:
    end = offset + limit if limit is not None else None
    return rows[offset:end]


def create_app(service: RentalService, org: str) -> FastAPI:
    app = FastAPI(title=f"rentledger gateway ({org})", docs_url=None, redoc_url=None)
    app.add_middleware(
        CORSMiddleware,
        allow_origins=list(service.config.api.cors_origins),
        allow_methods=["*"],
        allow_headers=["*"],
    )

    def auth(authorization: str = Header(default="")) -> dict:
        if not authorization.startswith("Bearer "):
            raise ApiFault(401, "BadToken", "missing bearer token")
        payload = service.verify_token(authorization[len("Bearer "):])
        if payload["org"] != org:
            raise ApiFault(403, "OrgMismatch",
                           f"{payload['org']} identity on the {org} gateway")
        return payload

    # -- error mapping -----------------------------------------------------------

    @app.exception_handler(ApiFault)
    async def _api_fault(_req: Request, exc: ApiFault):
        return _error_response(exc.code, str(exc), status=exc.status)

    @app.exception_handler(TxRejected)
    async def _tx_rejected(_req: Request, exc: TxRejected):
        return _error_response(exc.code, str(exc), tx_id=exc.tx_id)

    for family in (IdentityError, ContractError, OrderingError, BlobError,
                   LedgerError, audit.AuditError):
        @app.exception_handler(family)
        async def _domain_fault(_req: Request, exc: Exception):
            return _error_response(exc.code, str(exc))

    # -- auth & terms -------------------------------------------------------------

    @app.post("/auth/register", status_code=201)
    def register(body: RegisterBody):
        secret = service.register(body.user_id, body.password, body.role)
        return {"user_id": secret.user_id, "secret": secret.secret}

    @app.post("/auth/enroll")
    def enroll(body: EnrollBody):
        entry = service.enroll(body.user_id, body.secret)
        return {"credential": entry.credential.to_dict()}

    @app.post("/auth/login")
    def login(body: LoginBody):
        token = service.login(body.user_id)
        return {
            "token": token.token,
            "user_id": token.user_id,
            "org": token.org,
            "role": token.role,
            "expires_at_ms": token.expires_at_ms,
        }

    @app.get("/terms")
    def terms():
        return {"terms_digest": service.terms_digest, "text": service.terms_text}

    @app.post("/terms/accept")
    def accept_terms(body: TermsBody, session: dict = Depends(auth)):
        wallet = service.ca.wallet_entry(session["user_id"])
        signature = wallet.sign(body.terms_digest.encode("utf-8"))
        outcome = service.invoke(
            session["user_id"], "acceptTerms", [body.terms_digest, signature]
        )
        return _write_response(outcome)

    # -- houses ---------------------------------------------------------------------

    @app.post("/houses", status_code=201)
    def create_house(body: HouseBody, session: dict = Depends(auth)):
        outcome = service.invoke(session["user_id"], "createHouse", [body.house_id])
        return _write_response(outcome, status=201)

    @app.get("/houses")
    def list_houses(session: dict = Depends(auth),
                    limit: Optional[int] = Query(default=None, ge=0),
                    offset: int = Query(default=0, ge=0)):
        return _page(service.list_houses(session["user_id"]), offset, limit)

    @app.post("/houses/{house_id}/proposals", status_code=201)
    def create_proposal(house_id: str, session: dict = Depends(auth)):
        outcome = service.invoke(session["user_id"], "createProposal", [house_id])
        return _write_response(outcome, status=201)

    # -- proposals & documents ---------------------------------------------------------

    @app.post("/proposals/{proposal_id}/documents", status_code=201)
    def upload_document(proposal_id: str, session: dict = Depends(auth),
                        file: UploadFile = File(...)):
        content = file.file.read()
        outcome = service.upload_document(
            session["user_id"], proposal_id, content, file.filename or "document"
        )
        return _write_response(outcome, status=201)

    @app.get("/proposals/landlord")
    def proposals_for_landlord(session: dict = Depends(auth),
                               limit: Optional[int] = Query(default=None, ge=0),
                               offset: int = Query(default=0, ge=0)):
        rows = service.evaluate(session["user_id"], "getProposalsForLandlord", [])
        return _page(rows, offset, limit)

    @app.post("/proposals/{proposal_id}/accept")
    def accept_proposal(proposal_id: str, session: dict = Depends(auth)):
        return _write_response(
            service.invoke(session["user_id"], "acceptProposal", [proposal_id])
        )

    @app.post("/proposals/{proposal_id}/deny")
    def deny_proposal(proposal_id: str, session: dict = Depends(auth)):
        return _write_response(
            service.invoke(session["user_id"], "denyProposal", [proposal_id])
        )

    # -- access requests -------------------------------------------------------------------

    @app.post("/documents/{document_id}/access-requests", status_code=201)
    def request_access(document_id: str, session: dict = Depends(auth)):
        return _write_response(
            service.invoke(session["user_id"], "requestAccess", [document_id]), status=201
        )

    @app.get("/access-requests/tenant")
    def requests_for_tenant(session: dict = Depends(auth),
                            limit: Optional[int] = Query(default=None, ge=0),
                            offset: int = Query(default=0, ge=0)):
        rows = service.evaluate(session["user_id"], "getRequestsForTenant", [])
        return _page(rows, offset, limit)

    @app.post("/access-requests/{request_id}/accept")
    def accept_access(request_id: str, session: dict = Depends(auth)):
        return _write_response(
            service.invoke(session["user_id"], "acceptAccess", [request_id])
        )

    @app.post("/access-requests/{request_id}/deny")
    def deny_access(request_id: str, session: dict = Depends(auth)):
        return _write_response(
            service.invoke(session["user_id"], "denyAccess", [request_id])
        )

    # -- documents ---------------------------------------------------------------------------

    @app.get("/documents/{document_id}")
    def get_document(document_id: str, session: dict = Depends(auth)):
        return service.evaluate(session["user_id"], "getDocument", [document_id])

    @app.get("/documents/{document_id}/content")
    def download_document(document_id: str, session: dict = Depends(auth)):
        content, meta = service.download_document(session["user_id"], document_id)
        return Response(
            content=content,
            media_type="application/octet-stream",
            headers={
                "X-Content-Digest": meta["content_digest"],
                "Content-Disposition": f'attachment; filename="{meta["filename"]}"',
            },
        )

    # -- audit ------------------------------------------------------------------------------------

    @app.get("/audit/houses/{house_id}/report")
    def audit_report(house_id: str, session: dict = Depends(auth),
                     format: str = Query(default="json")):
        if format not in audit.EXPORT_FORMATS:
            raise audit.UnknownFormat(format)
        report = audit.build_report(service, house_id, session["user_id"])
        payload = audit.export_report(report, format)
        return Response(content=payload, media_type=_MEDIA_TYPES[format])

    # -- operational ---------------------------------------------------------------------------------

    @app.get("/healthz")
    def healthz():
        return service.health()

    return app
