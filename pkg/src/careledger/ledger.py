"""Append-only hash-chained block log of signed transactions.

Wire format
-----------
Everything that is hashed or signed goes through :mod:`careledger.canonical`.
A transaction's signing form is ``{"author", "payload", "timestamp_ms"}``;
``tx_id`` is the SHA-256 of that form and the Ed25519 signature covers the
same bytes.  A block hashes as::

    block_hash = SHA256(LE64(height) || prev_hash || LE64(timestamp_ms)
                        || SHA256(canonical([tx.to_dict() ...])))

The persisted log is one canonical-JSON block per line in ``chain.log``,
append-only.  Two transaction kinds are exempt from author-signature checks:
the admin's self-registration in the genesis block (verified against the key
it registers) and registration requests (their authors hold no keys yet, by
construction).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from . import canonical, crypto
from .errors import LedgerError

ZERO_HASH = b"\x00" * 32

ROLES = ("patient", "physician", "nurse", "iot_device", "admin")
FILE_KINDS = ("medical_history", "motion_capture", "prescription", "dose_request")
DECISIONS = ("confirmed", "overridden", "auto")


_HEX_DIGITS = set("0123456789abcdef")


def _require(d: dict, keys: tuple[str, ...], op: str, extra: tuple[str, ...] = ()) -> None:
    """Exact-schema check: every listed key present, nothing else allowed."""
    missing = [k for k in keys if k not in d]
    if missing:
        raise LedgerError(f"payload {op} missing fields: {missing}")
    allowed = set(keys) | set(extra) | {"op"}
    unknown = [k for k in d if k not in allowed]
    if unknown:
        raise LedgerError(f"payload {op} has unknown fields: {unknown}")


def _hex(value: str, what: str) -> str:
    """Canonical hex only: lowercase, even length."""
    if not isinstance(value, str) or len(value) % 2 or any(c not in _HEX_DIGITS for c in value):
        raise LedgerError(f"{what} must be lowercase hex")
    return value


def _hex32(value: str, what: str) -> str:
    if not isinstance(value, str) or len(value) != 64:
        raise LedgerError(f"{what} must be 64 hex chars")
    return _hex(value, what)


# --- payload variants --------------------------------------------------------


@dataclass(frozen=True)
class RequestRegistration:
    """Public registration request; recorded unsigned (requester has no keys)."""

    op = "request_registration"
    user_id: str
    role: str
    display_name: str
    bound_patient: Optional[str] = None

    def to_dict(self) -> dict:
        return {
            "op": self.op,
            "user_id": self.user_id,
            "role": self.role,
            "display_name": self.display_name,
            "bound_patient": self.bound_patient,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RequestRegistration":
        _require(d, ("user_id", "role", "display_name", "bound_patient"), cls.op)
        return cls(d["user_id"], d["role"], d["display_name"], d["bound_patient"])


@dataclass(frozen=True)
class RegisterUser:
    """Admin approval: activates a user and records their public keys."""

    op = "register_user"
    user_id: str
    role: str
    display_name: str
    sign_public: str
    enc_public: str
    bound_patient: Optional[str] = None

    def to_dict(self) -> dict:
        return {
            "op": self.op,
            "user_id": self.user_id,
            "role": self.role,
            "display_name": self.display_name,
            "sign_public": self.sign_public,
            "enc_public": self.enc_public,
            "bound_patient": self.bound_patient,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RegisterUser":
        _require(d, ("user_id", "role", "display_name", "sign_public", "enc_public", "bound_patient"), cls.op)
        return cls(
            d["user_id"],
            d["role"],
            d["display_name"],
            _hex32(d["sign_public"], "sign_public"),
            _hex32(d["enc_public"], "enc_public"),
            d["bound_patient"],
        )


@dataclass(frozen=True)
class StoreFileHash:
    """On-ledger record of a stored file; hashes and wrapped keys only."""

    op = "store_file_hash"
    content_hash: str
    plaintext_hash: str
    kind: str
    owner_patient: str
    wrapped_keys: tuple = ()

    def to_dict(self) -> dict:
        return {
            "op": self.op,
            "content_hash": self.content_hash,
            "plaintext_hash": self.plaintext_hash,
            "kind": self.kind,
            "owner_patient": self.owner_patient,
            "wrapped_keys": [w.to_dict() for w in self.wrapped_keys],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StoreFileHash":
        _require(d, ("content_hash", "plaintext_hash", "kind", "owner_patient", "wrapped_keys"), cls.op)
        return cls(
            _hex32(d["content_hash"], "content_hash"),
            _hex32(d["plaintext_hash"], "plaintext_hash"),
            d["kind"],
            d["owner_patient"],
            tuple(crypto.WrappedKey.from_dict(w) for w in d["wrapped_keys"]),
        )


@dataclass(frozen=True)
class GrantAccess:
    op = "grant_access"
    content_hash: str
    grantee: str
    wrapped_key: crypto.WrappedKey = None

    def to_dict(self) -> dict:
        return {
            "op": self.op,
            "content_hash": self.content_hash,
            "grantee": self.grantee,
            "wrapped_key": self.wrapped_key.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GrantAccess":
        _require(d, ("content_hash", "grantee", "wrapped_key"), cls.op)
        return cls(
            _hex32(d["content_hash"], "content_hash"),
            d["grantee"],
            crypto.WrappedKey.from_dict(d["wrapped_key"]),
        )


@dataclass(frozen=True)
class RevokeAccess:
    op = "revoke_access"
    content_hash: str
    grantee: str

    def to_dict(self) -> dict:
        return {"op": self.op, "content_hash": self.content_hash, "grantee": self.grantee}

    @classmethod
    def from_dict(cls, d: dict) -> "RevokeAccess":
        _require(d, ("content_hash", "grantee"), cls.op)
        return cls(_hex32(d["content_hash"], "content_hash"), d["grantee"])


@dataclass(frozen=True)
class RecordPrescription:
    """A dose decision: physician confirm/override, or decision-support auto.

    ``request_tx`` links the prescription to the dose request it decides so
    state transitions replay deterministically.
    """

    op = "record_prescription"
    patient: str
    dose_mg: float
    prescription_file: str
    decision: str
    request_tx: str

    def to_dict(self) -> dict:
        return {
            "op": self.op,
            "patient": self.patient,
            "dose_mg": float(self.dose_mg),
            "prescription_file": self.prescription_file,
            "decision": self.decision,
            "request_tx": self.request_tx,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RecordPrescription":
        _require(d, ("patient", "dose_mg", "prescription_file", "decision", "request_tx"), cls.op)
        return cls(
            d["patient"],
            float(d["dose_mg"]),
            _hex32(d["prescription_file"], "prescription_file"),
            d["decision"],
            _hex32(d["request_tx"], "request_tx"),
        )


@dataclass(frozen=True)
class EmergencyDoseRequest:
    op = "emergency_dose_request"
    patient: str
    request_file: str

    def to_dict(self) -> dict:
        return {"op": self.op, "patient": self.patient, "request_file": self.request_file}

    @classmethod
    def from_dict(cls, d: dict) -> "EmergencyDoseRequest":
        _require(d, ("patient", "request_file"), cls.op)
        return cls(d["patient"], _hex32(d["request_file"], "request_file"))


@dataclass(frozen=True)
class EmergencyDecision:
    op = "emergency_decision"
    request_tx: str
    nurse: str
    approved: bool
    dose_mg: Optional[float] = None

    def to_dict(self) -> dict:
        return {
            "op": self.op,
            "request_tx": self.request_tx,
            "nurse": self.nurse,
            "approved": bool(self.approved),
            "dose_mg": None if self.dose_mg is None else float(self.dose_mg),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EmergencyDecision":
        _require(d, ("request_tx", "nurse", "approved", "dose_mg"), cls.op)
        dose = d["dose_mg"]
        return cls(
            _hex32(d["request_tx"], "request_tx"),
            d["nurse"],
            bool(d["approved"]),
            None if dose is None else float(dose),
        )


PAYLOAD_TYPES = {
    cls.op: cls
    for cls in (
        RequestRegistration,
        RegisterUser,
        StoreFileHash,
        GrantAccess,
        RevokeAccess,
        RecordPrescription,
        EmergencyDoseRequest,
        EmergencyDecision,
    )
}


def payload_from_dict(d: dict):
    if not isinstance(d, dict) or "op" not in d:
        raise LedgerError("payload missing op tag")
    cls = PAYLOAD_TYPES.get(d["op"])
    if cls is None:
        raise LedgerError(f"unknown payload op: {d['op']!r}")
    return cls.from_dict(d)


# --- transactions -------------------------------------------------------------


@dataclass(frozen=True)
class Transaction:
    author: str
    timestamp_ms: int
    payload: object
    signature: bytes
    tx_id: str

    def signing_bytes(self) -> bytes:
        return canonical.dumps(
            {
                "author": self.author,
                "payload": self.payload.to_dict(),
                "timestamp_ms": self.timestamp_ms,
            }
        )

    def to_dict(self) -> dict:
        return {
            "author": self.author,
            "payload": self.payload.to_dict(),
            "signature": self.signature.hex(),
            "timestamp_ms": self.timestamp_ms,
            "tx_id": self.tx_id,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Transaction":
        _require(d, ("author", "payload", "signature", "timestamp_ms", "tx_id"), "transaction")
        if not isinstance(d["timestamp_ms"], int) or d["timestamp_ms"] < 0:
            raise LedgerError("timestamp_ms must be a non-negative integer")
        return cls(
            author=d["author"],
            timestamp_ms=d["timestamp_ms"],
            payload=payload_from_dict(d["payload"]),
            signature=bytes.fromhex(_hex(d["signature"], "signature")),
            tx_id=_hex32(d["tx_id"], "tx_id"),
        )


def build_transaction(
    author: str,
    payload,
    timestamp_ms: int,
    sign_private: Optional[bytes] = None,
) -> Transaction:
    """Assemble a transaction; sign unless the payload kind is unsigned."""
    form = canonical.dumps(
        {"author": author, "payload": payload.to_dict(), "timestamp_ms": timestamp_ms}
    )
    tx_id = crypto.content_hash(form).hex()
    signature = crypto.sign(sign_private, form) if sign_private is not None else b""
    return Transaction(
        author=author,
        timestamp_ms=timestamp_ms,
        payload=payload,
        signature=signature,
        tx_id=tx_id,
    )


def is_signature_exempt(tx: Transaction, height: int) -> bool:
    """Registration requests are unsigned; genesis self-registration is special."""
    if isinstance(tx.payload, RequestRegistration):
        return True
    return False


# --- blocks --------------------------------------------------------------------


def _le64(value: int) -> bytes:
    return struct.pack("<Q", value)


def compute_block_hash(height: int, prev_hash: bytes, timestamp_ms: int, txs: list[Transaction]) -> bytes:
    tx_digest = crypto.content_hash(canonical.dumps([t.to_dict() for t in txs]))
    return crypto.content_hash(_le64(height) + prev_hash + _le64(timestamp_ms) + tx_digest)


@dataclass(frozen=True)
class Block:
    height: int
    prev_hash: bytes
    timestamp_ms: int
    transactions: tuple
    block_hash: bytes = field(default=b"")

    def to_dict(self) -> dict:
        return {
            "block_hash": self.block_hash.hex(),
            "height": self.height,
            "prev_hash": self.prev_hash.hex(),
            "timestamp_ms": self.timestamp_ms,
            "transactions": [t.to_dict() for t in self.transactions],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Block":
        _require(d, ("block_hash", "height", "prev_hash", "timestamp_ms", "transactions"), "block")
        if not isinstance(d["height"], int) or d["height"] < 0:
            raise LedgerError("height must be a non-negative integer")
        if not isinstance(d["timestamp_ms"], int) or d["timestamp_ms"] < 0:
            raise LedgerError("timestamp_ms must be a non-negative integer")
        prev = bytes.fromhex(_hex32(d["prev_hash"], "prev_hash"))
        bh = bytes.fromhex(_hex32(d["block_hash"], "block_hash"))
        txs = tuple(Transaction.from_dict(t) for t in d["transactions"])
        return cls(
            height=d["height"],
            prev_hash=prev,
            timestamp_ms=d["timestamp_ms"],
            transactions=txs,
            block_hash=bh,
        )


def build_block(height: int, prev_hash: bytes, timestamp_ms: int, txs: list[Transaction]) -> Block:
    if not txs:
        raise LedgerError("a block must contain at least one transaction")
    return Block(
        height=height,
        prev_hash=prev_hash,
        timestamp_ms=timestamp_ms,
        transactions=tuple(txs),
        block_hash=compute_block_hash(height, prev_hash, timestamp_ms, txs),
    )


def make_genesis(admin_tx: Transaction, timestamp_ms: int) -> Block:
    """Height-0 block holding exactly the admin's self-registration."""
    p = admin_tx.payload
    if not isinstance(p, RegisterUser) or p.role != "admin":
        raise LedgerError("genesis transaction must register an admin")
    return build_block(0, ZERO_HASH, timestamp_ms, [admin_tx])


# --- verification ----------------------------------------------------------------


@dataclass
class ChainReport:
    valid: bool
    first_bad_height: Optional[int] = None
    reason: Optional[str] = None
    height: int = 0

    def to_dict(self) -> dict:
        return {
            "valid": self.valid,
            "first_bad_height": self.first_bad_height,
            "reason": self.reason,
            "height": self.height,
        }


def _verify_tx(tx: Transaction, height: int, registry: dict[str, str]) -> Optional[str]:
    """Return a failure reason, or None.  ``registry`` maps user_id -> sign_public hex."""
    expected_id = crypto.content_hash(tx.signing_bytes()).hex()
    if tx.tx_id != expected_id:
        return f"tx_id mismatch for {tx.tx_id}"
    if is_signature_exempt(tx, height):
        if tx.signature:
            return "registration request must be unsigned"
        return None
    p = tx.payload
    if height == 0 and isinstance(p, RegisterUser) and p.role == "admin" and tx.author == p.user_id:
        # Genesis bootstrap: the admin signs with the key being registered.
        key_hex = p.sign_public
    else:
        key_hex = registry.get(tx.author)
        if key_hex is None:
            return f"author {tx.author!r} has no registered key"
    try:
        ok = crypto.verify(bytes.fromhex(key_hex), tx.signing_bytes(), tx.signature)
    except Exception:
        return "malformed signature"
    if not ok:
        return f"bad signature on {tx.tx_id}"
    return None


def verify_chain(blocks: list[Block]) -> ChainReport:
    """Recompute every hash, linkage, and signature; pure, never raises.

    Signatures are checked against the registry replayed from RegisterUser
    transactions, so a forged registration invalidates everything after it.
    """
    registry: dict[str, str] = {}
    prev: Optional[Block] = None
    for i, b in enumerate(blocks):
        if b.height != i:
            return ChainReport(False, i, f"expected height {i}, found {b.height}", len(blocks))
        if i == 0:
            if b.prev_hash != ZERO_HASH:
                return ChainReport(False, 0, "genesis prev_hash not zero", len(blocks))
        elif b.prev_hash != prev.block_hash:
            return ChainReport(False, i, "prev_hash does not match predecessor", len(blocks))
        if not b.transactions:
            return ChainReport(False, i, "empty block", len(blocks))
        expected = compute_block_hash(b.height, b.prev_hash, b.timestamp_ms, list(b.transactions))
        if b.block_hash != expected:
            return ChainReport(False, i, "block_hash mismatch", len(blocks))
        for tx in b.transactions:
            why = _verify_tx(tx, i, registry)
            if why is not None:
                return ChainReport(False, i, why, len(blocks))
            if isinstance(tx.payload, RegisterUser):
                registry[tx.payload.user_id] = tx.payload.sign_public
        prev = b
    return ChainReport(True, None, None, len(blocks))


# --- persistence ------------------------------------------------------------------


class ChainLog:
    """Append-only ``chain.log`` file: one canonical-JSON block per line."""

    def __init__(self, path: str | Path):
        self.path = Path(path)

    def exists(self) -> bool:
        return self.path.exists()

    def append(self, block: Block) -> None:
        line = canonical.dumps(block.to_dict()) + b"\n"
        with open(self.path, "ab") as f:
            f.write(line)
            f.flush()

    def load(self) -> list[Block]:
        """Parse every line; raises LedgerError naming the first bad height."""
        blocks = []
        if not self.path.exists():
            return blocks
        with open(self.path, "rb") as f:
            for i, line in enumerate(f):
                line = line.strip()
                if not line:
                    continue
                try:
                    blocks.append(Block.from_dict(canonical.loads(line)))
                except Exception as exc:
                    raise LedgerError(f"chain.log line {i} unparseable: {exc}") from exc
        return blocks


def verify_chain_file(path: str | Path) -> ChainReport:
    """Verify a persisted log, reporting parse failures at their line height.

    Beyond the structural checks, every line must be byte-identical to the
    canonical re-serialization of the block it parses to, so any mutation the
    parser would silently normalize (key renames against null values, hex
    case changes, number re-encodings) is still flagged.
    """
    blocks = []
    p = Path(path)
    if not p.exists():
        return ChainReport(False, 0, "chain.log does not exist", 0)
    with open(p, "rb") as f:
        lines = [ln for ln in f.read().split(b"\n") if ln.strip()]
    for i, line in enumerate(lines):
        try:
            block = Block.from_dict(canonical.loads(line))
        except Exception:
            return ChainReport(False, i, f"line {i} unparseable", len(lines))
        if canonical.dumps(block.to_dict()) != line:
            return ChainReport(False, i, f"line {i} is not canonical", len(lines))
        blocks.append(block)
    return verify_chain(blocks)
