"""End-to-end care workflows: upload, share, fetch, prescribe, emergency
dosing, device ingestion, and the dose-suggestion decision support.

Plaintext never touches the ledger or the blob store: every document is
AEAD-sealed under a fresh per-file key (associated data = owner patient id),
pushed to the content-addressed store, and anchored on-chain as hashes plus
wrapped keys.  Dose-request and prescription documents produced here are
canonical-JSON payloads of the shapes::

    {"doc": "dose-request", "patient_id", "created_at_ms", "motion_file",
     "features": {"joints": [...], "values": [...]} | null,
     "suggestion": {...} | null, "emergency": bool, "note": str}

    {"doc": "prescription", "patient_id", "dose_mg", "decision",
     "request_tx", "prescribed_by", "created_at_ms"}

Decision support compares the current feature vector against the most recent
approved episode; a relative distance at or under the threshold suggests the
last dose without waiting for physician review (it is still recorded on the
ledger as an auto decision).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import canonical, contract, crypto, ledger
from .castore import ContentHash
from .errors import (
    AccessDenied,
    BadStatus,
    ContractError,
    CorruptBlob,
    DeviceOwnerMismatch,
    IntegrityError,
    InvalidTransaction,
    LengthMismatch,
    NoCareRelationship,
    NotOwner,
    Unauthenticated,
    UnknownFile,
    UnknownGrantee,
    UnknownPending,
    UnknownRequest,
    ValidationError,
)
from .motion import MotionCapture
from .node import Node, now_ms

SIMILARITY_EPS = 1e-9
DEFAULT_TAU = 0.1


# --- decision-support primitives ---------------------------------------------


@dataclass(frozen=True)
class FeatureVector:
    """Per-joint (mean_deg, std_deg, mean_abs_delta_deg) triples, joint order."""

    joints: tuple
    values: tuple

    def __post_init__(self):
        if len(self.values) != 3 * len(self.joints):
            raise ValidationError("feature vector must hold 3 values per joint")
        if not all(math.isfinite(v) for v in self.values):
            raise ValidationError("feature values must be finite")

    def to_dict(self) -> dict:
        return {"joints": list(self.joints), "values": [float(v) for v in self.values]}

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureVector":
        return cls(tuple(d["joints"]), tuple(float(v) for v in d["values"]))


def extract_features(mc: MotionCapture) -> FeatureVector:
    """Mean, population std, and mean |first difference| per joint."""
    a = mc.angles
    mean = a.mean(axis=0)
    std = a.std(axis=0)
    mad = np.abs(np.diff(a, axis=0)).mean(axis=0)
    values = []
    for j in range(a.shape[1]):
        values.extend((float(mean[j]), float(std[j]), float(mad[j])))
    return FeatureVector(joints=tuple(mc.joint_names), values=tuple(values))


def similarity(a, b) -> float:
    """Normalized relative distance in [0, 1]: 0 means identical; symmetric.

    sqrt((1/n) * sum(((a_i - b_i) / (|a_i| + |b_i| + eps))^2))
    """
    va = a.values if isinstance(a, FeatureVector) else tuple(a)
    vb = b.values if isinstance(b, FeatureVector) else tuple(b)
    if len(va) != len(vb):
        raise LengthMismatch(f"feature lengths differ: {len(va)} vs {len(vb)}")
    if not va:
        raise LengthMismatch("empty feature vectors cannot be compared")
    acc = 0.0
    for x, y in zip(va, vb):
        acc += ((x - y) / (abs(x) + abs(y) + SIMILARITY_EPS)) ** 2
    return math.sqrt(acc / len(va))


@dataclass(frozen=True)
class HistoryEpisode:
    features: FeatureVector
    dose_mg: float
    approved: bool
    file_hash: Optional[str] = None


@dataclass(frozen=True)
class DoseSuggestion:
    dose_mg: Optional[float]
    similarity: Optional[float]
    auto: bool
    basis: Optional[str]

    def to_dict(self) -> dict:
        return {
            "dose_mg": self.dose_mg,
            "similarity": self.similarity,
            "auto": self.auto,
            "basis": self.basis,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DoseSuggestion":
        return cls(d.get("dose_mg"), d.get("similarity"), bool(d.get("auto")), d.get("basis"))


def suggest_dose(
    history: Sequence[HistoryEpisode],
    current: FeatureVector,
    tau: float = DEFAULT_TAU,
) -> DoseSuggestion:
    """Compare against the most recent approved episode.

    At or under ``tau`` the last dose is suggested automatically; above it the
    same dose is only a draft for the physician.  An empty history yields no
    dose at all (cold start).
    """
    approved = [h for h in history if h.approved]
    if not approved:
        return DoseSuggestion(dose_mg=None, similarity=None, auto=False, basis=None)
    last = approved[-1]
    sim = similarity(current, last.features)
    return DoseSuggestion(
        dose_mg=float(last.dose_mg),
        similarity=sim,
        auto=sim <= tau,
        basis=last.file_hash,
    )


# --- receipts ------------------------------------------------------------------


@dataclass(frozen=True)
class ApprovalResult:
    user_id: str
    role: str
    keypair: crypto.KeyPair  # private halves; returned once, never in state
    tx_id: str


@dataclass(frozen=True)
class AssessmentReceipt:
    request_tx: str
    request_file: str
    suggestion: DoseSuggestion
    status: str
    prescription_file: Optional[str] = None


@dataclass(frozen=True)
class IngestReceipt:
    motion_file: str
    assessment: AssessmentReceipt


@dataclass(frozen=True)
class EmergencyReceipt:
    request_tx: str
    request_file: str
    status: str
    escalated: bool
    cap_mg: Optional[float]
    reason: Optional[str] = None


@dataclass(frozen=True)
class PrescriptionReceipt:
    request_tx: str
    prescription_file: str
    dose_mg: float
    status: str


@dataclass(frozen=True)
class DecisionReceipt:
    request_tx: str
    approved: bool
    dose_mg: Optional[float]
    status: str


# --- orchestration ---------------------------------------------------------------


class CareFlow:
    """Workflow layer over a :class:`~careledger.node.Node`.

    Every mutation serializes through the node's appender; dose-request
    status transitions are validated at apply time, so racing decisions lose
    deterministically with BadStatus.
    """

    def __init__(self, node: Node, tau: float = DEFAULT_TAU, max_consecutive_auto: Optional[int] = None):
        self.node = node
        self.tau = float(tau)
        # None = unlimited, matching the source model's silence on repeats.
        self.max_consecutive_auto = max_consecutive_auto

    @property
    def state(self) -> contract.ContractState:
        return self.node.state

    # -- plumbing -------------------------------------------------------------

    def _commit(self, txs: list[ledger.Transaction]) -> ledger.Block:
        try:
            return self.node.commit_txs(txs)
        except InvalidTransaction as exc:
            if isinstance(exc.__cause__, ContractError):
                raise exc.__cause__
            raise

    def _wrap_for(self, recipients, file_key: bytes) -> list[crypto.WrappedKey]:
        out = []
        for rid in sorted(set(recipients)):
            rec = self.state.active_user(rid)
            if rec is None or rec.enc_public is None:
                raise UnknownGrantee(f"recipient {rid!r} unknown or not active")
            out.append(crypto.wrap_file_key(bytes.fromhex(rec.enc_public), file_key, rid))
        return out

    def _build_store(
        self,
        uploader: str,
        plaintext: bytes,
        kind: str,
        owner_patient: str,
        extra_recipients=(),
    ) -> tuple[ledger.StoreFileHash, ContentHash]:
        """Seal, push to the store, and assemble the StoreFileHash payload.

        A storage or wrapping failure here leaves no ledger trace; an
        orphaned blob in the castore is acceptable and unreferenced.
        """
        self.state.require_active(uploader)
        plaintext_hash = crypto.content_hash_hex(plaintext)
        file_key = crypto.new_file_key()
        blob = crypto.aead_seal(file_key, plaintext, owner_patient.encode("utf-8"))
        content = self.node.store.put(blob.to_bytes())
        recipients = {owner_patient}
        uprec = self.state.users.get(uploader)
        if uprec is not None and uploader != owner_patient and uprec.role in ("patient", "physician"):
            recipients.add(uploader)
        recipients.update(extra_recipients)
        wrapped = self._wrap_for(recipients, file_key)
        payload = ledger.StoreFileHash(
            content_hash=content.hex,
            plaintext_hash=plaintext_hash,
            kind=kind,
            owner_patient=owner_patient,
            wrapped_keys=tuple(wrapped),
        )
        return payload, content

    def _care_physicians(self, patient_id: str) -> list[str]:
        return [
            u.user_id
            for u in self.state.users.values()
            if u.role == "physician"
            and u.status == contract.ACTIVE
            and contract.care_relationship(self.state, u.user_id, patient_id)
        ]

    def _active_nurses(self) -> list[str]:
        return [
            u.user_id
            for u in self.state.users.values()
            if u.role == "nurse" and u.status == contract.ACTIVE
        ]

    # -- registration ------------------------------------------------------------

    def register_request(
        self, user_id: str, role: str, display_name: str, bound_patient: Optional[str] = None
    ) -> str:
        payload = ledger.RequestRegistration(user_id, role, display_name, bound_patient)
        tx = self.node.build_tx(user_id, payload)
        self._commit([tx])
        return user_id

    def approve_registration(self, admin_id: str, pending_id: str) -> ApprovalResult:
        rec = self.state.users.get(pending_id)
        if rec is None or rec.status != contract.PENDING:
            if rec is not None and rec.status == contract.ACTIVE:
                raise ContractError(f"user {pending_id!r} is already registered")
            raise UnknownPending(f"no pending registration for {pending_id!r}")
        kp = crypto.generate_keypair(pending_id)
        payload = ledger.RegisterUser(
            user_id=pending_id,
            role=rec.role,
            display_name=rec.display_name,
            sign_public=kp.sign_public.hex(),
            enc_public=kp.enc_public.hex(),
            bound_patient=rec.bound_patient,
        )
        tx = self.node.build_tx(admin_id, payload)
        self._commit([tx])
        self.node.keyring.put(kp)
        return ApprovalResult(user_id=pending_id, role=rec.role, keypair=kp, tx_id=tx.tx_id)

    # -- files ----------------------------------------------------------------------

    def upload_file(self, user_id: str, plaintext: bytes, kind: str, owner_patient: str) -> ContentHash:
        payload, content = self._build_store(user_id, plaintext, kind, owner_patient)
        tx = self.node.build_tx(user_id, payload)
        self._commit([tx])
        return content

    def fetch_file(self, user_id: str, content_hash: str | ContentHash) -> bytes:
        hx = content_hash.hex if isinstance(content_hash, ContentHash) else content_hash
        decision = contract.authorize_fetch(self.state, user_id, hx)
        if not decision.allowed:
            raise AccessDenied(decision.reason)
        record = self.state.files[hx]
        try:
            raw = self.node.store.get(ContentHash.from_hex(hx))
        except CorruptBlob as exc:
            raise IntegrityError(f"{contract.MSG_INTEGRITY_FAIL}: {exc}") from exc
        report = contract.check_integrity(self.state, hx, raw)
        if not report.store_level:
            raise IntegrityError(contract.MSG_INTEGRITY_FAIL)
        kp = self.node.keyring.require(user_id)
        file_key = crypto.unwrap_file_key(kp.enc_private, decision.wrapped_key)
        plaintext = crypto.aead_open(
            file_key,
            crypto.SealedBlob.from_bytes(raw),
            record.owner_patient.encode("utf-8"),
        )
        report = contract.check_integrity(self.state, hx, raw, plaintext)
        if not report.ok:
            raise IntegrityError(contract.MSG_INTEGRITY_FAIL)
        return plaintext

    def integrity_report(self, user_id: str, content_hash: str) -> contract.IntegrityReport:
        """Store-level check always; end-to-end when the caller may decrypt."""
        record = self.state.files.get(content_hash)
        if record is None:
            raise UnknownFile(f"no file record for {content_hash}")
        raw = self.node.store.read_unverified(ContentHash.from_hex(content_hash))
        report = contract.check_integrity(self.state, content_hash, raw)
        decision = contract.authorize_fetch(self.state, user_id, content_hash)
        if not (report.store_level and decision.allowed):
            return report
        kp = self.node.keyring.require(user_id)
        try:
            file_key = crypto.unwrap_file_key(kp.enc_private, decision.wrapped_key)
            plaintext = crypto.aead_open(
                file_key,
                crypto.SealedBlob.from_bytes(raw),
                record.owner_patient.encode("utf-8"),
            )
        except Exception:
            return contract.IntegrityReport(
                store_level=True, end_to_end=False, message=contract.MSG_INTEGRITY_FAIL
            )
        return contract.check_integrity(self.state, content_hash, raw, plaintext)

    def share_file(self, owner_id: str, content_hash: str | ContentHash, grantee: str) -> str:
        hx = content_hash.hex if isinstance(content_hash, ContentHash) else content_hash
        record = self.state.files.get(hx)
        if record is None:
            raise UnknownFile(f"no file record for {hx}")
        if record.owner_patient != owner_id:
            raise NotOwner("only the owner patient may grant access")
        grantee_rec = self.state.active_user(grantee)
        if grantee_rec is None or grantee_rec.enc_public is None:
            raise UnknownGrantee(f"grantee {grantee!r} unknown or not active")
        decision = contract.authorize_fetch(self.state, owner_id, hx)
        if not decision.allowed:
            raise AccessDenied(decision.reason)
        kp = self.node.keyring.require(owner_id)
        file_key = crypto.unwrap_file_key(kp.enc_private, decision.wrapped_key)
        wrapped = crypto.wrap_file_key(bytes.fromhex(grantee_rec.enc_public), file_key, grantee)
        tx = self.node.build_tx(owner_id, ledger.GrantAccess(hx, grantee, wrapped))
        self._commit([tx])
        return tx.tx_id

    def revoke_access(self, owner_id: str, content_hash: str | ContentHash, grantee: str) -> str:
        self.state.require_active(owner_id)
        hx = content_hash.hex if isinstance(content_hash, ContentHash) else content_hash
        tx = self.node.build_tx(owner_id, ledger.RevokeAccess(hx, grantee))
        self._commit([tx])
        return tx.tx_id

    # -- device ingestion and decision support ------------------------------------

    def ingest_motion(self, device_id: str, mc: MotionCapture) -> IngestReceipt:
        device = self.state.active_user(device_id)
        if device is None:
            raise Unauthenticated(contract.MSG_NOT_AUTHENTICATED)
        if device.role != "iot_device":
            raise ValidationError(f"{device_id!r} is not an iot_device")
        if mc.device_id != device_id:
            raise ValidationError("capture device_id does not match the session device")
        if mc.patient_id != device.bound_patient:
            raise DeviceOwnerMismatch(
                f"device {device_id!r} is bound to {device.bound_patient!r}"
            )
        from . import motion as motion_mod

        payload, content = self._build_store(
            device_id,
            motion_mod.encode(mc),
            "motion_capture",
            mc.patient_id,
            extra_recipients=self._care_physicians(mc.patient_id),
        )
        tx = self.node.build_tx(device_id, payload)
        self._commit([tx])
        assessment = self.run_assessment(mc.patient_id, mc, motion_file=content.hex)
        return IngestReceipt(motion_file=content.hex, assessment=assessment)

    def _consecutive_autos(self, patient_id: str) -> int:
        n = 0
        for e in reversed(list(self.state.dose_requests.values())):
            if e.patient_id != patient_id or e.status == contract.PENDING_PHYSICIAN:
                continue
            if e.status == contract.AUTO_APPROVED:
                n += 1
            else:
                break
        return n

    def run_assessment(
        self, patient_id: str, mc: MotionCapture, motion_file: Optional[str] = None
    ) -> AssessmentReceipt:
        """Extract features, suggest a dose, and file the request on-ledger.

        Auto-approved suggestions additionally record a prescription with
        decision=auto in the same block, so the ledger audits every dose even
        when no physician acts.
        """
        features = extract_features(mc)
        history = self._history(patient_id)
        suggestion = suggest_dose(history, features, self.tau)
        if (
            suggestion.auto
            and self.max_consecutive_auto is not None
            and self._consecutive_autos(patient_id) >= self.max_consecutive_auto
        ):
            suggestion = DoseSuggestion(
                dose_mg=suggestion.dose_mg,
                similarity=suggestion.similarity,
                auto=False,
                basis=suggestion.basis,
            )
        created = now_ms()
        doc = {
            "doc": "dose-request",
            "patient_id": patient_id,
            "created_at_ms": created,
            "motion_file": motion_file,
            "features": features.to_dict(),
            "suggestion": suggestion.to_dict(),
            "emergency": False,
            "note": "",
        }
        store_payload, content = self._build_store(
            patient_id,
            canonical.dumps(doc),
            "dose_request",
            patient_id,
            extra_recipients=self._care_physicians(patient_id),
        )
        request_tx = self.node.build_tx(patient_id, store_payload)
        txs = [request_tx]
        prescription_file = None
        if suggestion.auto:
            rx_doc = {
                "doc": "prescription",
                "patient_id": patient_id,
                "dose_mg": suggestion.dose_mg,
                "decision": "auto",
                "request_tx": request_tx.tx_id,
                "prescribed_by": patient_id,
                "created_at_ms": created,
            }
            rx_payload, rx_content = self._build_store(
                patient_id,
                canonical.dumps(rx_doc),
                "prescription",
                patient_id,
                extra_recipients=self._care_physicians(patient_id),
            )
            prescription_file = rx_content.hex
            txs.append(self.node.build_tx(patient_id, rx_payload))
            txs.append(
                self.node.build_tx(
                    patient_id,
                    ledger.RecordPrescription(
                        patient=patient_id,
                        dose_mg=float(suggestion.dose_mg),
                        prescription_file=rx_content.hex,
                        decision="auto",
                        request_tx=request_tx.tx_id,
                    ),
                )
            )
        self._commit(txs)
        entry = self.state.dose_requests[request_tx.tx_id]
        return AssessmentReceipt(
            request_tx=request_tx.tx_id,
            request_file=content.hex,
            suggestion=suggestion,
            status=entry.status,
            prescription_file=prescription_file,
        )

    def _history(self, patient_id: str) -> list[HistoryEpisode]:
        """Approved feature-bearing episodes in ledger order."""
        episodes = []
        for e in self.state.dose_requests.values():
            if e.patient_id != patient_id or e.approved is not True:
                continue
            try:
                doc = canonical.loads(self.fetch_file(patient_id, e.request_file))
            except Exception:
                continue
            feats = doc.get("features")
            if not feats:
                continue
            episodes.append(
                HistoryEpisode(
                    features=FeatureVector.from_dict(feats),
                    dose_mg=float(e.decided_dose_mg),
                    approved=True,
                    file_hash=e.request_file,
                )
            )
        return episodes

    # -- prescribing --------------------------------------------------------------

    def prescribe(
        self, physician_id: str, request_tx: str, dose_mg: float, decision: str
    ) -> PrescriptionReceipt:
        decision = {"confirm": "confirmed", "override": "overridden"}.get(decision, decision)
        if decision not in ("confirmed", "overridden"):
            raise ValidationError(f"decision must be confirm or override, got {decision!r}")
        entry = self.state.dose_requests.get(request_tx)
        if entry is None:
            raise UnknownRequest(f"no dose request {request_tx}")
        if entry.status != contract.PENDING_PHYSICIAN:
            raise BadStatus(f"request is {entry.status}, expected {contract.PENDING_PHYSICIAN}")
        physician = self.state.active_user(physician_id)
        if physician is None:
            raise Unauthenticated(contract.MSG_NOT_AUTHENTICATED)
        if physician.role != "physician":
            raise ValidationError("only physicians confirm or override doses")
        if not contract.care_relationship(self.state, physician_id, entry.patient_id):
            raise NoCareRelationship(
                f"patient {entry.patient_id!r} has not shared with {physician_id!r}"
            )
        doc = {
            "doc": "prescription",
            "patient_id": entry.patient_id,
            "dose_mg": float(dose_mg),
            "decision": decision,
            "request_tx": request_tx,
            "prescribed_by": physician_id,
            "created_at_ms": now_ms(),
        }
        rx_payload, rx_content = self._build_store(
            physician_id, canonical.dumps(doc), "prescription", entry.patient_id
        )
        txs = [
            self.node.build_tx(physician_id, rx_payload),
            self.node.build_tx(
                physician_id,
                ledger.RecordPrescription(
                    patient=entry.patient_id,
                    dose_mg=float(dose_mg),
                    prescription_file=rx_content.hex,
                    decision=decision,
                    request_tx=request_tx,
                ),
            ),
        ]
        self._commit(txs)
        return PrescriptionReceipt(
            request_tx=request_tx,
            prescription_file=rx_content.hex,
            dose_mg=float(dose_mg),
            status=self.state.dose_requests[request_tx].status,
        )

    # -- emergencies ------------------------------------------------------------------

    def emergency_request(self, patient_id: str, note: str = "") -> EmergencyReceipt:
        patient = self.state.active_user(patient_id)
        if patient is None or patient.role != "patient":
            raise Unauthenticated(contract.MSG_NOT_AUTHENTICATED)
        cap = self.state.last_approved_dose.get(patient_id)
        doc = {
            "doc": "dose-request",
            "patient_id": patient_id,
            "created_at_ms": now_ms(),
            "motion_file": None,
            "features": None,
            "suggestion": None,
            "emergency": True,
            "note": note,
        }
        recipients = set(self._active_nurses()) | set(self._care_physicians(patient_id))
        store_payload, content = self._build_store(
            patient_id, canonical.dumps(doc), "dose_request", patient_id,
            extra_recipients=recipients,
        )
        request_tx = self.node.build_tx(patient_id, store_payload)
        txs = [request_tx]
        if cap is not None:
            txs.append(
                self.node.build_tx(
                    patient_id,
                    ledger.EmergencyDoseRequest(patient=patient_id, request_file=content.hex),
                )
            )
        self._commit(txs)
        entry = self.state.dose_requests[request_tx.tx_id]
        return EmergencyReceipt(
            request_tx=request_tx.tx_id,
            request_file=content.hex,
            status=entry.status,
            escalated=cap is not None,
            cap_mg=cap,
            reason=None if cap is not None else "NoCap: no prior approved dose; routed to physician",
        )

    def emergency_decide(
        self, nurse_id: str, request_tx: str, approve: bool, dose_mg: Optional[float] = None
    ) -> DecisionReceipt:
        self.state.require_active(nurse_id)
        payload = ledger.EmergencyDecision(
            request_tx=request_tx,
            nurse=nurse_id,
            approved=bool(approve),
            dose_mg=None if dose_mg is None else float(dose_mg),
        )
        tx = self.node.build_tx(nurse_id, payload)
        self._commit([tx])
        entry = self.state.dose_requests[request_tx]
        return DecisionReceipt(
            request_tx=request_tx,
            approved=bool(approve),
            dose_mg=entry.decided_dose_mg if approve else None,
            status=entry.status,
        )

    # -- views ---------------------------------------------------------------------------

    def list_dose_requests(self, viewer_id: str, patient_id: Optional[str] = None) -> list[dict]:
        """Entries visible to ``viewer_id``, with the decrypted suggestion when readable."""
        viewer = self.state.active_user(viewer_id)
        if viewer is None:
            raise AccessDenied(contract.MSG_NOT_VALID)
        out = []
        for tx_id, e in self.state.dose_requests.items():
            if patient_id is not None and e.patient_id != patient_id:
                continue
            if viewer.role == "patient":
                visible = e.patient_id == viewer_id
            elif viewer.role == "physician":
                visible = contract.care_relationship(self.state, viewer_id, e.patient_id)
            elif viewer.role == "nurse":
                visible = contract.open_emergency(self.state, e.patient_id)
            else:
                visible = False
            if not visible:
                continue
            item = {
                "request_tx": tx_id,
                "patient_id": e.patient_id,
                "status": e.status,
                "created_at_ms": e.created_at_ms,
                "request_file": e.request_file,
                "decided_dose_mg": e.decided_dose_mg,
                "decided_by": e.decided_by,
                "decision": e.decision,
                "approved": e.approved,
            }
            try:
                doc = canonical.loads(self.fetch_file(viewer_id, e.request_file))
                item["suggestion"] = doc.get("suggestion")
                item["emergency"] = doc.get("emergency", False)
                item["note"] = doc.get("note", "")
            except Exception:
                item["suggestion"] = None
            out.append(item)
        return out
