"""Deterministic contract state machine.

State changes only through :func:`apply`, a pure transition over ledger
transactions, so replaying ``chain.log`` from genesis always reconstructs the
live state bit-for-bit (canonical-serialization equality).  Nothing is ever
deleted: revocation and status changes are additive flags.

Access matrix enforced by :func:`authorize_fetch` (read) and
``store_file_hash`` validation (write):

==========  =======================================================  ==========================
role        read                                                     write
==========  =======================================================  ==========================
patient     own files, all kinds                                     own files, all kinds
physician   all kinds, for patients with a care relationship*        prescriptions for those
nurse       dose_request/prescription kinds, only while the owner    emergency decisions
            has an open emergency request
iot_device  nothing                                                  motion_capture, bound
                                                                     patient only
admin       nothing (no wrapped keys ever exist for admin)           registration approvals
==========  =======================================================  ==========================

* care relationship: the patient granted the physician at least one file
  that has not been revoked.  Reads additionally require an unrevoked
  wrapped key for the specific file being fetched.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

from . import crypto, ledger
from .errors import (
    AlreadyRegistered,
    BadStatus,
    CapExceeded,
    DeviceOwnerMismatch,
    DuplicateHash,
    DuplicatePending,
    NoCap,
    NoCareRelationship,
    NotAdmin,
    NotOwner,
    Unauthenticated,
    UnknownFile,
    UnknownGrantee,
    UnknownPending,
    UnknownRequest,
    ValidationError,
)

# Paper-mandated reason strings; tests match them verbatim.
MSG_NOT_AUTHENTICATED = "User is not authenticated"
MSG_NOT_VALID = "User is not valid"
MSG_INTEGRITY_OK = "Integrity completed"
MSG_INTEGRITY_FAIL = "Integrity does not complete"

PENDING = "pending"
ACTIVE = "active"

PENDING_PHYSICIAN = "pending_physician"
AUTO_APPROVED = "auto_approved"
PHYSICIAN_CONFIRMED = "physician_confirmed"
PHYSICIAN_OVERRIDDEN = "physician_overridden"
EMERGENCY_PENDING = "emergency_pending"
EMERGENCY_DECIDED = "emergency_decided"

APPROVED_STATUSES = (AUTO_APPROVED, PHYSICIAN_CONFIRMED, PHYSICIAN_OVERRIDDEN)


@dataclass(frozen=True)
class UserRecord:
    user_id: str
    role: str
    display_name: str
    status: str
    registered_at_ms: int
    sign_public: Optional[str] = None
    enc_public: Optional[str] = None
    bound_patient: Optional[str] = None

    def to_dict(self) -> dict:
        return {
            "user_id": self.user_id,
            "role": self.role,
            "display_name": self.display_name,
            "status": self.status,
            "registered_at_ms": self.registered_at_ms,
            "sign_public": self.sign_public,
            "enc_public": self.enc_public,
            "bound_patient": self.bound_patient,
        }


@dataclass(frozen=True)
class FileRecord:
    content_hash: str
    plaintext_hash: str
    owner_patient: str
    uploader: str
    kind: str
    created_at_ms: int
    wrapped_keys: dict = field(default_factory=dict)  # recipient_id -> wrapped hex
    revoked: frozenset = frozenset()

    def holds_key(self, user_id: str) -> bool:
        return user_id in self.wrapped_keys and user_id not in self.revoked

    def to_dict(self) -> dict:
        return {
            "content_hash": self.content_hash,
            "plaintext_hash": self.plaintext_hash,
            "owner_patient": self.owner_patient,
            "uploader": self.uploader,
            "kind": self.kind,
            "created_at_ms": self.created_at_ms,
            "wrapped_keys": dict(sorted(self.wrapped_keys.items())),
            "revoked": sorted(self.revoked),
        }


@dataclass(frozen=True)
class DoseRequestEntry:
    patient_id: str
    request_file: str
    status: str
    created_at_ms: int
    decided_dose_mg: Optional[float] = None
    decided_by: Optional[str] = None
    decision: Optional[str] = None
    approved: Optional[bool] = None

    def to_dict(self) -> dict:
        return {
            "patient_id": self.patient_id,
            "request_file": self.request_file,
            "status": self.status,
            "created_at_ms": self.created_at_ms,
            "decided_dose_mg": self.decided_dose_mg,
            "decided_by": self.decided_by,
            "decision": self.decision,
            "approved": self.approved,
        }


@dataclass(frozen=True)
class ContractState:
    users: dict = field(default_factory=dict)
    pending_registrations: tuple = ()
    files: dict = field(default_factory=dict)
    dose_requests: dict = field(default_factory=dict)
    last_approved_dose: dict = field(default_factory=dict)

    @classmethod
    def empty(cls) -> "ContractState":
        return cls()

    def to_dict(self) -> dict:
        return {
            "users": {k: v.to_dict() for k, v in self.users.items()},
            "pending_registrations": list(self.pending_registrations),
            "files": {k: v.to_dict() for k, v in self.files.items()},
            "dose_requests": {k: v.to_dict() for k, v in self.dose_requests.items()},
            "last_approved_dose": dict(self.last_approved_dose),
        }

    # -- queries ---------------------------------------------------------

    def active_user(self, user_id: str) -> Optional[UserRecord]:
        rec = self.users.get(user_id)
        return rec if rec is not None and rec.status == ACTIVE else None

    def require_active(self, user_id: str) -> UserRecord:
        rec = self.active_user(user_id)
        if rec is None:
            raise Unauthenticated(MSG_NOT_AUTHENTICATED)
        return rec


def care_relationship(state: ContractState, physician_id: str, patient_id: str) -> bool:
    """True iff the patient currently shares at least one file with the physician."""
    for f in state.files.values():
        if f.owner_patient == patient_id and f.holds_key(physician_id):
            return True
    return False


def open_emergency(state: ContractState, patient_id: str) -> bool:
    return any(
        e.patient_id == patient_id and e.status == EMERGENCY_PENDING
        for e in state.dose_requests.values()
    )


# --- transitions -----------------------------------------------------------


def _apply_request_registration(state: ContractState, tx, p) -> ContractState:
    if tx.author != p.user_id:
        raise ValidationError("registration requests must be self-authored")
    if not p.user_id:
        raise ValidationError("user_id must be non-empty")
    if p.role not in ledger.ROLES:
        raise ValidationError(f"unknown role {p.role!r}")
    existing = state.users.get(p.user_id)
    if existing is not None:
        if existing.status == ACTIVE:
            raise AlreadyRegistered(f"user {p.user_id!r} is already registered")
        raise DuplicatePending(f"user {p.user_id!r} already awaits approval")
    if p.role == "iot_device":
        if not p.bound_patient:
            raise ValidationError("iot_device registration requires bound_patient")
    elif p.bound_patient:
        raise ValidationError("bound_patient is only valid for iot_device")
    rec = UserRecord(
        user_id=p.user_id,
        role=p.role,
        display_name=p.display_name,
        status=PENDING,
        registered_at_ms=tx.timestamp_ms,
        bound_patient=p.bound_patient,
    )
    return replace(
        state,
        users={**state.users, p.user_id: rec},
        pending_registrations=state.pending_registrations + (p.user_id,),
    )


def _apply_register_user(state: ContractState, tx, p) -> ContractState:
    bootstrap = not state.users and tx.author == p.user_id and p.role == "admin"
    if not bootstrap:
        author = state.active_user(tx.author)
        if author is None or author.role != "admin":
            raise NotAdmin("only the admin approves registrations")
        pending = state.users.get(p.user_id)
        if pending is None or pending.status != PENDING:
            if pending is not None and pending.status == ACTIVE:
                raise AlreadyRegistered(f"user {p.user_id!r} is already registered")
            raise UnknownPending(f"no pending registration for {p.user_id!r}")
        if (p.role, p.bound_patient) != (pending.role, pending.bound_patient):
            raise ValidationError("approval does not match the pending request")
    if p.role not in ledger.ROLES:
        raise ValidationError(f"unknown role {p.role!r}")
    if p.role == "iot_device":
        bound = state.active_user(p.bound_patient or "")
        if bound is None or bound.role != "patient":
            raise ValidationError("iot_device must be bound to an active patient")
    rec = UserRecord(
        user_id=p.user_id,
        role=p.role,
        display_name=p.display_name,
        status=ACTIVE,
        registered_at_ms=tx.timestamp_ms,
        sign_public=p.sign_public,
        enc_public=p.enc_public,
        bound_patient=p.bound_patient,
    )
    return replace(
        state,
        users={**state.users, p.user_id: rec},
        pending_registrations=tuple(
            u for u in state.pending_registrations if u != p.user_id
        ),
    )


def _apply_store_file_hash(state: ContractState, tx, p) -> ContractState:
    uploader = state.require_active(tx.author)
    if p.kind not in ledger.FILE_KINDS:
        raise ValidationError(f"unknown file kind {p.kind!r}")
    owner = state.active_user(p.owner_patient)
    if owner is None or owner.role != "patient":
        raise ValidationError("owner_patient must be an active patient")
    if uploader.role == "patient":
        if p.owner_patient != uploader.user_id:
            raise NotOwner("patients may only store their own files")
    elif uploader.role == "iot_device":
        if p.owner_patient != uploader.bound_patient:
            raise DeviceOwnerMismatch(
                f"device {uploader.user_id!r} is bound to {uploader.bound_patient!r}"
            )
        if p.kind != "motion_capture":
            raise ValidationError("devices may only store motion_capture files")
    elif uploader.role == "physician":
        if p.kind != "prescription":
            raise ValidationError("physicians may only store prescription files")
        if not care_relationship(state, uploader.user_id, p.owner_patient):
            raise NoCareRelationship(
                f"patient {p.owner_patient!r} has not shared with {uploader.user_id!r}"
            )
    else:
        raise ValidationError(f"role {uploader.role!r} cannot store files")
    if p.content_hash in state.files:
        raise DuplicateHash(f"content {p.content_hash} already recorded")
    if p.content_hash == p.plaintext_hash:
        raise ValidationError("ciphertext hash must differ from plaintext hash")
    wrapped: dict[str, str] = {}
    for w in p.wrapped_keys:
        recipient = state.active_user(w.recipient_id)
        if recipient is None:
            raise UnknownGrantee(f"wrapped-key recipient {w.recipient_id!r} unknown")
        if recipient.role == "admin":
            raise ValidationError("no wrapped keys may be created for admin")
        wrapped[w.recipient_id] = w.wrapped_bytes.hex()
    if p.owner_patient not in wrapped:
        raise ValidationError("owner must hold a wrapped key")
    rec = FileRecord(
        content_hash=p.content_hash,
        plaintext_hash=p.plaintext_hash,
        owner_patient=p.owner_patient,
        uploader=tx.author,
        kind=p.kind,
        created_at_ms=tx.timestamp_ms,
        wrapped_keys=wrapped,
    )
    new = replace(state, files={**state.files, p.content_hash: rec})
    if p.kind == "dose_request":
        entry = DoseRequestEntry(
            patient_id=p.owner_patient,
            request_file=p.content_hash,
            status=PENDING_PHYSICIAN,
            created_at_ms=tx.timestamp_ms,
        )
        new = replace(new, dose_requests={**new.dose_requests, tx.tx_id: entry})
    return new


def _apply_grant_access(state: ContractState, tx, p) -> ContractState:
    f = state.files.get(p.content_hash)
    if f is None:
        raise UnknownFile(f"no file record for {p.content_hash}")
    if tx.author != f.owner_patient:
        raise NotOwner("only the owner patient may grant access")
    state.require_active(tx.author)
    grantee = state.active_user(p.grantee)
    if grantee is None:
        raise UnknownGrantee(f"grantee {p.grantee!r} unknown or not active")
    if grantee.role == "admin":
        raise ValidationError("no wrapped keys may be created for admin")
    if p.wrapped_key.recipient_id != p.grantee:
        raise ValidationError("wrapped key recipient does not match grantee")
    nf = replace(
        f,
        wrapped_keys={**f.wrapped_keys, p.grantee: p.wrapped_key.wrapped_bytes.hex()},
        revoked=f.revoked - {p.grantee},
    )
    return replace(state, files={**state.files, p.content_hash: nf})


def _apply_revoke_access(state: ContractState, tx, p) -> ContractState:
    f = state.files.get(p.content_hash)
    if f is None:
        raise UnknownFile(f"no file record for {p.content_hash}")
    if tx.author != f.owner_patient:
        raise NotOwner("only the owner patient may revoke access")
    if p.grantee == f.owner_patient:
        raise ValidationError("the owner's own key cannot be revoked")
    if p.grantee not in f.wrapped_keys:
        raise UnknownGrantee(f"{p.grantee!r} holds no key for this file")
    nf = replace(f, revoked=f.revoked | {p.grantee})
    return replace(state, files={**state.files, p.content_hash: nf})


def _apply_record_prescription(state: ContractState, tx, p) -> ContractState:
    entry = state.dose_requests.get(p.request_tx)
    if entry is None:
        raise UnknownRequest(f"no dose request {p.request_tx}")
    if entry.patient_id != p.patient:
        raise ValidationError("prescription patient does not match the request")
    if entry.status != PENDING_PHYSICIAN:
        raise BadStatus(f"request is {entry.status}, expected {PENDING_PHYSICIAN}")
    if p.decision not in ledger.DECISIONS:
        raise ValidationError(f"unknown decision {p.decision!r}")
    if not (p.dose_mg >= 0.0 and p.dose_mg == p.dose_mg):
        raise ValidationError("dose_mg must be a non-negative number")
    doc = state.files.get(p.prescription_file)
    if doc is None:
        raise UnknownFile(f"no file record for {p.prescription_file}")
    if doc.kind != "prescription" or doc.owner_patient != p.patient:
        raise ValidationError("prescription_file must be a prescription owned by the patient")
    if p.decision == "auto":
        # Decision support files the suggestion under the patient's identity.
        if tx.author != p.patient:
            raise ValidationError("auto prescriptions must be authored by the patient")
        state.require_active(tx.author)
    else:
        author = state.require_active(tx.author)
        if author.role != "physician":
            raise ValidationError("only physicians confirm or override doses")
        if not care_relationship(state, tx.author, p.patient):
            raise NoCareRelationship(
                f"patient {p.patient!r} has not shared with {tx.author!r}"
            )
    status = {
        "auto": AUTO_APPROVED,
        "confirmed": PHYSICIAN_CONFIRMED,
        "overridden": PHYSICIAN_OVERRIDDEN,
    }[p.decision]
    ne = replace(
        entry,
        status=status,
        decided_dose_mg=float(p.dose_mg),
        decided_by=tx.author,
        decision=p.decision,
        approved=True,
    )
    return replace(
        state,
        dose_requests={**state.dose_requests, p.request_tx: ne},
        last_approved_dose={**state.last_approved_dose, p.patient: float(p.dose_mg)},
    )


def _find_request_by_file(state: ContractState, request_file: str) -> Optional[str]:
    for tx_id, e in state.dose_requests.items():
        if e.request_file == request_file:
            return tx_id
    return None


def _apply_emergency_dose_request(state: ContractState, tx, p) -> ContractState:
    author = state.require_active(tx.author)
    if tx.author != p.patient or author.role != "patient":
        raise ValidationError("emergency requests must be authored by the patient")
    f = state.files.get(p.request_file)
    if f is None:
        raise UnknownFile(f"no file record for {p.request_file}")
    if f.kind != "dose_request" or f.owner_patient != p.patient:
        raise ValidationError("request_file must be a dose_request owned by the patient")
    key = _find_request_by_file(state, p.request_file)
    if key is None:
        raise UnknownRequest(f"no dose request entry for file {p.request_file}")
    entry = state.dose_requests[key]
    if entry.status != PENDING_PHYSICIAN:
        raise BadStatus(f"request is {entry.status}, expected {PENDING_PHYSICIAN}")
    if p.patient not in state.last_approved_dose:
        raise NoCap(f"patient {p.patient!r} has no prior approved dose")
    ne = replace(entry, status=EMERGENCY_PENDING)
    return replace(state, dose_requests={**state.dose_requests, key: ne})


def _apply_emergency_decision(state: ContractState, tx, p) -> ContractState:
    author = state.require_active(tx.author)
    if tx.author != p.nurse or author.role != "nurse":
        raise ValidationError("emergency decisions must be authored by a nurse")
    entry = state.dose_requests.get(p.request_tx)
    if entry is None:
        raise UnknownRequest(f"no dose request {p.request_tx}")
    if entry.status != EMERGENCY_PENDING:
        raise BadStatus(f"request is {entry.status}, expected {EMERGENCY_PENDING}")
    if p.approved:
        if p.dose_mg is None or not (p.dose_mg >= 0.0):
            raise ValidationError("an approval must carry a non-negative dose_mg")
        cap = state.last_approved_dose.get(entry.patient_id)
        if cap is None:
            raise NoCap(f"patient {entry.patient_id!r} has no prior approved dose")
        if p.dose_mg > cap:
            raise CapExceeded(
                f"dose {p.dose_mg:g} mg exceeds the last approved dose {cap:g} mg"
            )
        ne = replace(
            entry,
            status=EMERGENCY_DECIDED,
            decided_dose_mg=float(p.dose_mg),
            decided_by=tx.author,
            decision="emergency",
            approved=True,
        )
        return replace(
            state,
            dose_requests={**state.dose_requests, p.request_tx: ne},
            last_approved_dose={
                **state.last_approved_dose,
                entry.patient_id: float(p.dose_mg),
            },
        )
    ne = replace(
        entry,
        status=EMERGENCY_DECIDED,
        decided_by=tx.author,
        decision="emergency",
        approved=False,
    )
    return replace(state, dose_requests={**state.dose_requests, p.request_tx: ne})


_HANDLERS = {
    ledger.RequestRegistration: _apply_request_registration,
    ledger.RegisterUser: _apply_register_user,
    ledger.StoreFileHash: _apply_store_file_hash,
    ledger.GrantAccess: _apply_grant_access,
    ledger.RevokeAccess: _apply_revoke_access,
    ledger.RecordPrescription: _apply_record_prescription,
    ledger.EmergencyDoseRequest: _apply_emergency_dose_request,
    ledger.EmergencyDecision: _apply_emergency_decision,
}


def apply(state: ContractState, tx: ledger.Transaction) -> ContractState:
    """Pure transition; returns the successor state or raises ContractError."""
    handler = _HANDLERS.get(type(tx.payload))
    if handler is None:
        raise ValidationError(f"no handler for payload {type(tx.payload).__name__}")
    return handler(state, tx, tx.payload)


def replay(blocks: list[ledger.Block]) -> ContractState:
    """Left-fold of apply over every transaction in ledger order."""
    state = ContractState.empty()
    for b in blocks:
        for tx in b.transactions:
            state = apply(state, tx)
    return state


# --- queries ----------------------------------------------------------------


@dataclass(frozen=True)
class Decision:
    allowed: bool
    reason: Optional[str] = None
    wrapped_key: Optional[crypto.WrappedKey] = None


def authorize_fetch(state: ContractState, user_id: str, content_hash: str) -> Decision:
    """Pure access-matrix check; Deny is a value, never an exception."""
    user = state.active_user(user_id)
    if user is None:
        return Decision(False, MSG_NOT_VALID)
    f = state.files.get(content_hash)
    if f is None:
        return Decision(False, f"no file record for {content_hash}")

    def allow() -> Decision:
        if not f.holds_key(user_id):
            return Decision(False, "no wrapped key for this file")
        raw = bytes.fromhex(f.wrapped_keys[user_id])
        return Decision(True, None, crypto.WrappedKey(user_id, raw))

    if user.role == "patient":
        if f.owner_patient == user_id:
            return allow()
        return Decision(False, "patients may only read their own files")
    if user.role == "physician":
        if not care_relationship(state, user_id, f.owner_patient):
            return Decision(False, "no care relationship with the file's owner")
        return allow()
    if user.role == "nurse":
        if f.kind not in ("dose_request", "prescription"):
            return Decision(False, "nurses may not read this file kind")
        if not open_emergency(state, f.owner_patient):
            return Decision(False, "no open emergency request for this patient")
        return allow()
    if user.role == "iot_device":
        return Decision(False, "devices cannot read files")
    return Decision(False, "admin cannot access file content")


@dataclass(frozen=True)
class IntegrityReport:
    store_level: bool
    end_to_end: Optional[bool]
    message: str

    @property
    def ok(self) -> bool:
        return self.store_level and self.end_to_end is not False

    def to_dict(self) -> dict:
        return {
            "store_level": self.store_level,
            "end_to_end": self.end_to_end,
            "ok": self.ok,
            "message": self.message,
        }


def check_integrity(
    state: ContractState,
    content_hash: str,
    fetched_ciphertext: bytes,
    decrypted_plaintext: Optional[bytes] = None,
) -> IntegrityReport:
    """Recompute hashes of fetched bytes against the recorded ones.

    ``store_level`` compares the ciphertext to its address; ``end_to_end``
    compares the decrypted plaintext to the pre-encryption hash when the
    caller supplies it.  The two checks are independent.
    """
    f = state.files.get(content_hash)
    if f is None:
        raise UnknownFile(f"no file record for {content_hash}")
    store_level = crypto.content_hash_hex(fetched_ciphertext) == f.content_hash
    end_to_end = None
    if decrypted_plaintext is not None:
        end_to_end = crypto.content_hash_hex(decrypted_plaintext) == f.plaintext_hash
    ok = store_level and end_to_end is not False
    return IntegrityReport(
        store_level=store_level,
        end_to_end=end_to_end,
        message=MSG_INTEGRITY_OK if ok else MSG_INTEGRITY_FAIL,
    )


def list_physicians(state: ContractState) -> list[UserRecord]:
    """Active physicians, sorted by user_id."""
    return sorted(
        (u for u in state.users.values() if u.role == "physician" and u.status == ACTIVE),
        key=lambda u: u.user_id,
    )
