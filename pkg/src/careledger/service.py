"""Network-facing node: HTTP API over the contract and care workflows.

Authentication is key-based challenge-response: the client asks for a nonce,
signs the nonce's hex string (UTF-8 bytes) with its Ed25519 signing key, and
receives a bearer session token scoped to its registered role.  Every
state-mutating endpoint maps to exactly one ledger payload kind; nothing
mutates state around the ledger.

Responses never contain private keys except the one-time approval response,
which delivers the newly generated keypair to the admin for hand-off.
"""

from __future__ import annotations

import json
import os
import secrets
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from fastapi import Depends, FastAPI, Form, Header, Request, UploadFile
from fastapi.responses import JSONResponse, Response
from pydantic import BaseModel

from . import contract, crypto, ledger, motion
from .careflow import CareFlow
from .errors import (
    AccessDenied,
    AlreadyRegistered,
    BadStatus,
    BlobNotFound,
    CapExceeded,
    CareLedgerError,
    ContractError,
    CryptoError,
    DuplicateHash,
    DuplicatePending,
    DeviceOwnerMismatch,
    IntegrityError,
    InvalidTransaction,
    NoCap,
    NoCareRelationship,
    NotAdmin,
    NotOwner,
    StoreError,
    Unauthenticated,
    UnknownFile,
    UnknownGrantee,
    UnknownPending,
    UnknownRequest,
    ValidationError,
)
from .node import Node, now_ms

CHALLENGE_TTL_MS = 60_000

ENV_CONFIG = "CARELEDGER_CONFIG"


@dataclass
class NodeConfig:
    data_dir: str
    listen: str = "127.0.0.1:8787"
    seal_interval_ms: int = 500
    tau: float = 0.1
    session_ttl_ms: int = 3_600_000
    admin_id: str = "admin"
    admin_name: str = "Administrator"

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")

    @property
    def host(self) -> str:
        return self.listen.rsplit(":", 1)[0]

    @property
    def port(self) -> int:
        return int(self.listen.rsplit(":", 1)[1])

    @classmethod
    def load(cls, path: Optional[str] = None, **overrides) -> "NodeConfig":
        """Read the config file (arg or $CARELEDGER_CONFIG), then apply overrides."""
        values: dict = {}
        path = path or os.environ.get(ENV_CONFIG)
        if path:
            values.update(json.loads(Path(path).read_text()))
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)


@dataclass
class Session:
    session_token: str
    user_id: str
    expires_at_ms: int


@dataclass
class SessionStore:
    ttl_ms: int = 3_600_000
    _sessions: dict = field(default_factory=dict)
    _challenges: dict = field(default_factory=dict)  # nonce -> (user_id, expires)
    _lock: threading.Lock = field(default_factory=threading.Lock)

    def issue_challenge(self, user_id: str) -> str:
        nonce = secrets.token_hex(32)
        with self._lock:
            self._challenges[nonce] = (user_id, now_ms() + CHALLENGE_TTL_MS)
        return nonce

    def redeem_challenge(self, user_id: str, nonce: str) -> bool:
        """Single-use: a replayed nonce never redeems twice."""
        with self._lock:
            entry = self._challenges.pop(nonce, None)
        if entry is None:
            return False
        uid, expires = entry
        return uid == user_id and now_ms() <= expires

    def issue(self, user_id: str) -> Session:
        s = Session(
            session_token=secrets.token_hex(32),
            user_id=user_id,
            expires_at_ms=now_ms() + self.ttl_ms,
        )
        with self._lock:
            self._sessions[s.session_token] = s
        return s

    def resolve(self, token: str) -> Optional[str]:
        with self._lock:
            s = self._sessions.get(token)
            if s is None:
                return None
            if now_ms() > s.expires_at_ms:
                del self._sessions[token]
                return None
            return s.user_id


_STATUS = {
    AccessDenied: 403,
    Unauthenticated: 403,
    NotAdmin: 403,
    NotOwner: 403,
    NoCareRelationship: 403,
    AlreadyRegistered: 409,
    DuplicatePending: 409,
    DuplicateHash: 409,
    BadStatus: 409,
    CapExceeded: 409,
    NoCap: 409,
    DeviceOwnerMismatch: 409,
    UnknownFile: 404,
    UnknownGrantee: 404,
    UnknownPending: 404,
    UnknownRequest: 404,
    BlobNotFound: 404,
    ValidationError: 400,
    InvalidTransaction: 400,
    IntegrityError: 500,
    CryptoError: 500,
    StoreError: 500,
}


def _status_for(exc: CareLedgerError) -> int:
    for cls in type(exc).__mro__:
        if cls in _STATUS:
            return _STATUS[cls]
    return 400


class ApiError(Exception):
    def __init__(self, status: int, reason: str, code: str = "error"):
        self.status = status
        self.reason = reason
        self.code = code


class RegisterBody(BaseModel):
    user_id: str
    role: str
    display_name: str
    bound_patient: Optional[str] = None


class ChallengeBody(BaseModel):
    user_id: str


class RespondBody(BaseModel):
    user_id: str
    nonce: str
    signature: str


class GranteeBody(BaseModel):
    grantee: str


class PrescribeBody(BaseModel):
    dose_mg: float
    decision: str


class EmergencyBody(BaseModel):
    note: str = ""


class DecideBody(BaseModel):
    approve: bool
    dose_mg: Optional[float] = None


def create_app(flow: CareFlow, config: NodeConfig) -> FastAPI:
    node: Node = flow.node
    stop = threading.Event()

    def _flusher():
        while not stop.wait(config.seal_interval_ms / 1000.0):
            try:
                node.flush()
            except Exception:
                pass

    from contextlib import asynccontextmanager

    @asynccontextmanager
    async def lifespan(app: FastAPI):
        threading.Thread(target=_flusher, name="careledger-sealer", daemon=True).start()
        yield
        stop.set()
        try:
            node.flush()  # a clean shutdown seals whatever is still queued
        except Exception:
            pass

    app = FastAPI(title="careledger", version="0.1.0", lifespan=lifespan)
    sessions = SessionStore(ttl_ms=config.session_ttl_ms)
    app.state.flow = flow
    app.state.sessions = sessions
    app.state.config = config

    @app.exception_handler(CareLedgerError)
    def _domain_error(request: Request, exc: CareLedgerError):
        reason = getattr(exc, "reason", None) or str(exc)
        code = getattr(exc, "code", type(exc).__name__)
        return JSONResponse(
            status_code=_status_for(exc), content={"error": code, "reason": reason}
        )

    @app.exception_handler(ApiError)
    def _api_error(request: Request, exc: ApiError):
        return JSONResponse(
            status_code=exc.status, content={"error": exc.code, "reason": exc.reason}
        )

    def session_user(authorization: Optional[str] = Header(default=None)) -> str:
        if not authorization or not authorization.lower().startswith("bearer "):
            raise ApiError(401, "missing bearer session token", "NoSession")
        user_id = sessions.resolve(authorization.split(None, 1)[1].strip())
        if user_id is None:
            raise ApiError(401, "unknown or expired session", "NoSession")
        return user_id

    def require_role(user_id: str, *roles: str) -> contract.UserRecord:
        rec = node.state.active_user(user_id)
        if rec is None:
            raise ApiError(403, contract.MSG_NOT_VALID, "NotValid")
        if roles and rec.role not in roles:
            raise ApiError(403, f"requires role {' or '.join(roles)}", "WrongRole")
        return rec

    # -- registration and login -------------------------------------------------

    @app.post("/v1/register")
    def register(body: RegisterBody):
        pending_id = flow.register_request(
            body.user_id, body.role, body.display_name, body.bound_patient
        )
        return {"pending_id": pending_id}

    @app.get("/v1/pending")
    def pending(user_id: str = Depends(session_user)):
        require_role(user_id, "admin")
        out = []
        for uid in node.state.pending_registrations:
            rec = node.state.users[uid]
            out.append(
                {
                    "user_id": rec.user_id,
                    "role": rec.role,
                    "display_name": rec.display_name,
                    "requested_at_ms": rec.registered_at_ms,
                    "bound_patient": rec.bound_patient,
                }
            )
        return out

    @app.post("/v1/pending/{pending_id}/approve")
    def approve(pending_id: str, user_id: str = Depends(session_user)):
        require_role(user_id, "admin")
        result = flow.approve_registration(user_id, pending_id)
        # The single response that ever carries private key halves.
        return {
            "user_id": result.user_id,
            "role": result.role,
            "tx_id": result.tx_id,
            "keyfile": result.keypair.to_dict(),
        }

    @app.post("/v1/login/challenge")
    def login_challenge(body: ChallengeBody):
        rec = node.state.active_user(body.user_id)
        if rec is None:
            raise ApiError(403, contract.MSG_NOT_VALID, "NotValid")
        return {"nonce": sessions.issue_challenge(body.user_id)}

    @app.post("/v1/login/respond")
    def login_respond(body: RespondBody):
        rec = node.state.active_user(body.user_id)
        if rec is None:
            raise ApiError(403, contract.MSG_NOT_VALID, "NotValid")
        if not sessions.redeem_challenge(body.user_id, body.nonce):
            raise ApiError(403, "unknown, expired, or replayed nonce", "BadChallenge")
        try:
            ok = crypto.verify(
                bytes.fromhex(rec.sign_public),
                body.nonce.encode("utf-8"),
                bytes.fromhex(body.signature),
            )
        except CareLedgerError:
            ok = False
        if not ok:
            raise ApiError(403, "signature does not verify", "BadSignature")
        s = sessions.issue(body.user_id)
        return {
            "session_token": s.session_token,
            "user_id": s.user_id,
            "role": rec.role,
            "expires_at_ms": s.expires_at_ms,
        }

    # -- directory ------------------------------------------------------------------

    @app.get("/v1/physicians")
    def physicians(user_id: str = Depends(session_user)):
        require_role(user_id)
        return [
            {"user_id": u.user_id, "display_name": u.display_name}
            for u in contract.list_physicians(node.state)
        ]

    # -- files -------------------------------------------------------------------------

    @app.post("/v1/files")
    def upload(
        file: UploadFile,
        kind: str = Form(...),
        owner: str = Form(...),
        user_id: str = Depends(session_user),
    ):
        data = file.file.read()
        content = flow.upload_file(user_id, data, kind, owner)
        return {"content_hash": content.hex}

    @app.get("/v1/files/{content_hash}")
    def fetch(content_hash: str, user_id: str = Depends(session_user)):
        plaintext = flow.fetch_file(user_id, content_hash)
        return Response(content=plaintext, media_type="application/octet-stream")

    @app.post("/v1/files/{content_hash}/share")
    def share(content_hash: str, body: GranteeBody, user_id: str = Depends(session_user)):
        tx_id = flow.share_file(user_id, content_hash, body.grantee)
        return {"tx_id": tx_id, "grantee": body.grantee}

    @app.post("/v1/files/{content_hash}/revoke")
    def revoke(content_hash: str, body: GranteeBody, user_id: str = Depends(session_user)):
        tx_id = flow.revoke_access(user_id, content_hash, body.grantee)
        return {"tx_id": tx_id, "grantee": body.grantee}

    @app.get("/v1/files/{content_hash}/integrity")
    def integrity(content_hash: str, user_id: str = Depends(session_user)):
        return flow.integrity_report(user_id, content_hash).to_dict()

    # -- device telemetry ---------------------------------------------------------------

    @app.post("/v1/motion")
    async def ingest(request: Request, user_id: str = Depends(session_user)):
        require_role(user_id, "iot_device")
        raw = await request.body()
        mc = motion.parse(raw)
        receipt = flow.ingest_motion(user_id, mc)
        return {
            "motion_file": receipt.motion_file,
            "request_tx": receipt.assessment.request_tx,
            "request_file": receipt.assessment.request_file,
            "status": receipt.assessment.status,
            "suggestion": receipt.assessment.suggestion.to_dict(),
            "prescription_file": receipt.assessment.prescription_file,
        }

    # -- dosing ---------------------------------------------------------------------------

    @app.get("/v1/dose-requests")
    def dose_requests(patient: Optional[str] = None, user_id: str = Depends(session_user)):
        return flow.list_dose_requests(user_id, patient)

    @app.post("/v1/dose-requests/{request_tx}/prescribe")
    def prescribe(request_tx: str, body: PrescribeBody, user_id: str = Depends(session_user)):
        require_role(user_id, "physician")
        receipt = flow.prescribe(user_id, request_tx, body.dose_mg, body.decision)
        return {
            "request_tx": receipt.request_tx,
            "prescription_file": receipt.prescription_file,
            "dose_mg": receipt.dose_mg,
            "status": receipt.status,
        }

    @app.post("/v1/emergency")
    def emergency(body: EmergencyBody, user_id: str = Depends(session_user)):
        require_role(user_id, "patient")
        receipt = flow.emergency_request(user_id, body.note)
        return {
            "request_tx": receipt.request_tx,
            "request_file": receipt.request_file,
            "status": receipt.status,
            "escalated": receipt.escalated,
            "cap_mg": receipt.cap_mg,
            "reason": receipt.reason,
        }

    @app.post("/v1/emergency/{request_tx}/decide")
    def decide(request_tx: str, body: DecideBody, user_id: str = Depends(session_user)):
        require_role(user_id, "nurse")
        receipt = flow.emergency_decide(user_id, request_tx, body.approve, body.dose_mg)
        return {
            "request_tx": receipt.request_tx,
            "approved": receipt.approved,
            "dose_mg": receipt.dose_mg,
            "status": receipt.status,
        }

    # -- chain -------------------------------------------------------------------------------

    @app.get("/v1/chain/verify")
    def chain_verify():
        return node.verify().to_dict()

    return app


def build_node(config: NodeConfig) -> tuple[Node, CareFlow]:
    node = Node(config.data_dir, admin_id=config.admin_id, admin_name=config.admin_name)
    return node, CareFlow(node, tau=config.tau)


def serve(config: NodeConfig) -> None:
    """Run the node until interrupted; refuses to start on a corrupt chain."""
    import uvicorn

    node, flow = build_node(config)
    app = create_app(flow, config)
    uvicorn.run(app, host=config.host, port=config.port, log_level="info")
