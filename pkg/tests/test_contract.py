"""State-machine transitions, the access matrix, and the integrity oracle."""

import pytest

from careledger import canonical, contract, crypto, ledger
from careledger.errors import (
    AlreadyRegistered,
    BadStatus,
    CapExceeded,
    DeviceOwnerMismatch,
    DuplicateHash,
    DuplicatePending,
    NotAdmin,
    NotOwner,
    Unauthenticated,
    UnknownFile,
    UnknownGrantee,
    UnknownPending,
    ValidationError,
)

TS = 1_700_000_000_000


def tx(author, payload, ts=TS):
    # apply() never inspects signatures (the sealer does), so unsigned is fine here.
    return ledger.build_transaction(author, payload, ts, None)


def register_payload(uid, role, bound=None):
    kp = crypto.generate_keypair(uid)
    payload = ledger.RegisterUser(
        uid, role, f"Test {uid}", kp.sign_public.hex(), kp.enc_public.hex(), bound
    )
    return payload, kp


@pytest.fixture
def base():
    """State with an active admin, plus keypairs for later wrapping."""
    state = contract.ContractState.empty()
    payload, kp = register_payload("admin", "admin")
    state = contract.apply(state, tx("admin", payload))
    return state, {"admin": kp}


def activate(state, keys, uid, role, bound=None):
    state = contract.apply(state, tx(uid, ledger.RequestRegistration(uid, role, f"Test {uid}", bound)))
    payload, kp = register_payload(uid, role, bound)
    keys[uid] = kp
    return contract.apply(state, tx("admin", payload))


def store_file(state, keys, uploader, owner, kind, data=b"payload", recipients=()):
    file_key = crypto.new_file_key()
    blob = crypto.aead_seal(file_key, data, owner.encode())
    wrapped = tuple(
        crypto.wrap_file_key(keys[r].enc_public, file_key, r)
        for r in sorted({owner, *recipients})
    )
    payload = ledger.StoreFileHash(
        content_hash=crypto.content_hash_hex(blob.to_bytes()),
        plaintext_hash=crypto.content_hash_hex(data),
        kind=kind,
        owner_patient=owner,
        wrapped_keys=wrapped,
    )
    t = tx(uploader, payload)
    return contract.apply(state, t), payload, file_key, blob, t


class TestRegistration:
    def test_fresh_request_queues(self, base):
        state, _ = base
        state = contract.apply(state, tx("p1", ledger.RequestRegistration("p1", "patient", "P")))
        assert state.pending_registrations == ("p1",)
        assert state.users["p1"].status == contract.PENDING

    def test_already_registered_rejected(self, base):
        state, keys = base
        state = activate(state, keys, "p1", "patient")
        with pytest.raises(AlreadyRegistered):
            contract.apply(state, tx("p1", ledger.RequestRegistration("p1", "patient", "P")))

    def test_duplicate_pending_rejected(self, base):
        state, _ = base
        state = contract.apply(state, tx("p1", ledger.RequestRegistration("p1", "patient", "P")))
        with pytest.raises(DuplicatePending):
            contract.apply(state, tx("p1", ledger.RequestRegistration("p1", "patient", "P")))

    def test_admin_approval_activates(self, base):
        state, keys = base
        state = activate(state, keys, "p1", "patient")
        rec = state.users["p1"]
        assert rec.status == contract.ACTIVE
        assert rec.sign_public and rec.enc_public
        assert state.pending_registrations == ()

    def test_non_admin_approval_rejected(self, base):
        state, keys = base
        state = activate(state, keys, "doc1", "physician")
        state = contract.apply(state, tx("p1", ledger.RequestRegistration("p1", "patient", "P")))
        payload, _ = register_payload("p1", "patient")
        with pytest.raises(NotAdmin):
            contract.apply(state, tx("doc1", payload))

    def test_unknown_pending_rejected(self, base):
        state, _ = base
        payload, _ = register_payload("ghost", "patient")
        with pytest.raises(UnknownPending):
            contract.apply(state, tx("admin", payload))

    def test_device_requires_bound_patient(self, base):
        state, _ = base
        with pytest.raises(ValidationError):
            contract.apply(state, tx("d1", ledger.RequestRegistration("d1", "iot_device", "D")))

    def test_second_admin_bootstrap_rejected(self, base):
        state, _ = base
        payload, _ = register_payload("admin2", "admin")
        with pytest.raises(NotAdmin):
            contract.apply(state, tx("admin2", payload))


class TestStoreFileHash:
    def test_patient_stores_own_file(self, base):
        state, keys = base
        state = activate(state, keys, "p1", "patient")
        state, payload, *_ = store_file(state, keys, "p1", "p1", "medical_history")
        rec = state.files[payload.content_hash]
        assert rec.owner_patient == "p1" and rec.kind == "medical_history"
        assert "p1" in rec.wrapped_keys

    def test_pending_user_unauthenticated(self, base):
        state, keys = base
        state = activate(state, keys, "p1", "patient")
        state = contract.apply(state, tx("p9", ledger.RequestRegistration("p9", "patient", "P9")))
        keys["p9"] = crypto.generate_keypair("p9")
        with pytest.raises(Unauthenticated, match="User is not authenticated"):
            store_file(state, keys, "p9", "p1", "medical_history")

    def test_device_owner_mismatch(self, base):
        state, keys = base
        state = activate(state, keys, "p1", "patient")
        state = activate(state, keys, "p2", "patient")
        state = activate(state, keys, "dev1", "iot_device", bound="p1")
        with pytest.raises(DeviceOwnerMismatch):
            store_file(state, keys, "dev1", "p2", "motion_capture")

    def test_duplicate_hash_rejected(self, base):
        state, keys = base
        state = activate(state, keys, "p1", "patient")
        state, payload, *_ = store_file(state, keys, "p1", "p1", "medical_history")
        with pytest.raises(DuplicateHash):
            contract.apply(state, tx("p1", payload))

    def test_nurse_cannot_store(self, base):
        state, keys = base
        state = activate(state, keys, "p1", "patient")
        state = activate(state, keys, "n1", "nurse")
        with pytest.raises(ValidationError):
            store_file(state, keys, "n1", "p1", "prescription")

    def test_dose_request_kind_opens_entry(self, base):
        state, keys = base
        state = activate(state, keys, "p1", "patient")
        state, payload, _, _, t = store_file(state, keys, "p1", "p1", "dose_request")
        entry = state.dose_requests[t.tx_id]
        assert entry.status == contract.PENDING_PHYSICIAN
        assert entry.request_file == payload.content_hash


class TestGrantRevoke:
    @pytest.fixture
    def shared(self, base):
        state, keys = base
        state = activate(state, keys, "p1", "patient")
        state = activate(state, keys, "doc1", "physician")
        state, payload, file_key, _, _ = store_file(state, keys, "p1", "p1", "medical_history")
        return state, keys, payload.content_hash, file_key

    def grant(self, state, keys, h, grantee, file_key, grantor="p1"):
        wrapped = crypto.wrap_file_key(keys[grantee].enc_public, file_key, grantee)
        return contract.apply(state, tx(grantor, ledger.GrantAccess(h, grantee, wrapped)))

    def test_owner_grants_physician(self, shared):
        state, keys, h, fk = shared
        state = self.grant(state, keys, h, "doc1", fk)
        assert "doc1" in state.files[h].wrapped_keys
        assert contract.authorize_fetch(state, "doc1", h).allowed

    def test_non_owner_cannot_grant(self, shared):
        state, keys, h, fk = shared
        wrapped = crypto.wrap_file_key(keys["doc1"].enc_public, fk, "doc1")
        with pytest.raises(NotOwner):
            contract.apply(state, tx("doc1", ledger.GrantAccess(h, "doc1", wrapped)))

    def test_grant_unknown_file(self, shared):
        state, keys, _, fk = shared
        wrapped = crypto.wrap_file_key(keys["doc1"].enc_public, fk, "doc1")
        with pytest.raises(UnknownFile):
            contract.apply(state, tx("p1", ledger.GrantAccess("0" * 64, "doc1", wrapped)))

    def test_grant_to_pending_user(self, shared):
        state, keys, h, fk = shared
        state = contract.apply(state, tx("x", ledger.RequestRegistration("x", "nurse", "X")))
        keys["x"] = crypto.generate_keypair("x")
        wrapped = crypto.wrap_file_key(keys["x"].enc_public, fk, "x")
        with pytest.raises(UnknownGrantee):
            contract.apply(state, tx("p1", ledger.GrantAccess(h, "x", wrapped)))

    def test_revoke_then_fetch_denied(self, shared):
        state, keys, h, fk = shared
        state = self.grant(state, keys, h, "doc1", fk)
        state = contract.apply(state, tx("p1", ledger.RevokeAccess(h, "doc1")))
        decision = contract.authorize_fetch(state, "doc1", h)
        assert not decision.allowed
        # Revocation is an additive flag; the record keeps its history.
        assert "doc1" in state.files[h].wrapped_keys
        assert "doc1" in state.files[h].revoked

    def test_grant_after_revoke_reenables(self, shared):
        state, keys, h, fk = shared
        state = self.grant(state, keys, h, "doc1", fk)
        state = contract.apply(state, tx("p1", ledger.RevokeAccess(h, "doc1")))
        state = self.grant(state, keys, h, "doc1", fk)
        assert contract.authorize_fetch(state, "doc1", h).allowed

    def test_no_wrapped_keys_for_admin(self, shared):
        state, keys, h, fk = shared
        wrapped = crypto.wrap_file_key(keys["admin"].enc_public, fk, "admin")
        with pytest.raises(ValidationError):
            contract.apply(state, tx("p1", ledger.GrantAccess(h, "admin", wrapped)))


class TestAuthorizeFetch:
    @pytest.fixture
    def world(self, base):
        state, keys = base
        for uid, role, bound in [
            ("p1", "patient", None),
            ("p2", "patient", None),
            ("doc1", "physician", None),
            ("n1", "nurse", None),
            ("dev1", "iot_device", "p1"),
        ]:
            state = activate(state, keys, uid, role, bound)
        state, payload, fk, _, _ = store_file(state, keys, "p1", "p1", "medical_history")
        return state, keys, payload.content_hash, fk

    def test_owner_allowed(self, world):
        state, _, h, _ = world
        decision = contract.authorize_fetch(state, "p1", h)
        assert decision.allowed and decision.wrapped_key is not None

    def test_unknown_user_is_not_valid(self, world):
        state, _, h, _ = world
        decision = contract.authorize_fetch(state, "ghost", h)
        assert not decision.allowed
        assert decision.reason == "User is not valid"

    def test_pending_user_is_not_valid(self, world):
        state, keys, h, _ = world
        state = contract.apply(state, tx("q", ledger.RequestRegistration("q", "patient", "Q")))
        decision = contract.authorize_fetch(state, "q", h)
        assert not decision.allowed
        assert decision.reason == "User is not valid"

    def test_nurse_never_reads_medical_history(self, world):
        state, keys, h, fk = world
        wrapped = crypto.wrap_file_key(keys["n1"].enc_public, fk, "n1")
        state = contract.apply(state, tx("p1", ledger.GrantAccess(h, "n1", wrapped)))
        decision = contract.authorize_fetch(state, "n1", h)
        assert not decision.allowed

    def test_other_patient_denied_even_with_grant(self, world):
        state, keys, h, fk = world
        wrapped = crypto.wrap_file_key(keys["p2"].enc_public, fk, "p2")
        state = contract.apply(state, tx("p1", ledger.GrantAccess(h, "p2", wrapped)))
        assert not contract.authorize_fetch(state, "p2", h).allowed

    def test_device_never_reads(self, world):
        state, _, h, _ = world
        assert not contract.authorize_fetch(state, "dev1", h).allowed

    def test_unknown_file(self, world):
        state, _, _, _ = world
        decision = contract.authorize_fetch(state, "p1", "f" * 64)
        assert not decision.allowed


class TestCheckIntegrity:
    @pytest.fixture
    def stored(self, base):
        state, keys = base
        state = activate(state, keys, "p1", "patient")
        data = b"some medical notes, long enough to matter"
        state, payload, fk, blob, _ = store_file(state, keys, "p1", "p1", "medical_history", data)
        return state, payload.content_hash, blob.to_bytes(), data

    def test_untampered_passes_both(self, stored):
        state, h, ct, pt = stored
        report = contract.check_integrity(state, h, ct, pt)
        assert report.store_level and report.end_to_end and report.ok
        assert report.message == "Integrity completed"

    def test_flipped_ciphertext_fails_store_level(self, stored):
        state, h, ct, _ = stored
        bad = bytearray(ct)
        bad[5] ^= 0x01
        report = contract.check_integrity(state, h, bytes(bad))
        assert not report.store_level and not report.ok
        assert report.message == "Integrity does not complete"

    def test_wrong_plaintext_fails_end_to_end_only(self, stored):
        state, h, ct, _ = stored
        report = contract.check_integrity(state, h, ct, b"substituted plaintext")
        assert report.store_level
        assert report.end_to_end is False
        assert not report.ok

    def test_plaintext_optional(self, stored):
        state, h, ct, _ = stored
        report = contract.check_integrity(state, h, ct)
        assert report.store_level and report.end_to_end is None and report.ok

    def test_unknown_file_raises(self, stored):
        state, _, ct, _ = stored
        with pytest.raises(UnknownFile):
            contract.check_integrity(state, "a" * 64, ct)


class TestQueries:
    def test_list_physicians_empty(self, base):
        state, _ = base
        assert contract.list_physicians(state) == []

    def test_list_physicians_sorted_active_only(self, base):
        state, keys = base
        state = activate(state, keys, "zdoc", "physician")
        state = activate(state, keys, "adoc", "physician")
        state = contract.apply(
            state, tx("pdoc", ledger.RequestRegistration("pdoc", "physician", "P"))
        )
        names = [u.user_id for u in contract.list_physicians(state)]
        assert names == ["adoc", "zdoc"]


class TestDeterminism:
    def test_apply_is_pure(self, base):
        state, _ = base
        before = canonical.dumps(state.to_dict())
        t = tx("p1", ledger.RequestRegistration("p1", "patient", "P"))
        s1 = contract.apply(state, t)
        s2 = contract.apply(state, t)
        assert canonical.dumps(s1.to_dict()) == canonical.dumps(s2.to_dict())
        assert canonical.dumps(state.to_dict()) == before

    def test_nothing_is_ever_removed(self, base):
        state, keys = base
        state = activate(state, keys, "p1", "patient")
        state = activate(state, keys, "doc1", "physician")
        state, payload, fk, _, _ = store_file(state, keys, "p1", "p1", "prescription")
        wrapped = crypto.wrap_file_key(keys["doc1"].enc_public, fk, "doc1")
        state = contract.apply(state, tx("p1", ledger.GrantAccess(payload.content_hash, "doc1", wrapped)))
        state = contract.apply(state, tx("p1", ledger.RevokeAccess(payload.content_hash, "doc1")))
        assert set(state.users) == {"admin", "p1", "doc1"}
        assert payload.content_hash in state.files
