"""Primitives: hashing, signatures, AEAD sealing, key wrapping."""

import hashlib

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from careledger import crypto
from careledger.errors import CryptoDecodeError, DecryptionError

# Independent SHA-256 oracle value for the empty input.
SHA256_EMPTY = "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"

# RFC 8032 section 7.1, TEST 1: empty message.
RFC8032_SK = "9d61b19deffd5a60ba844af492ec2cc44449c5697b326919703bac031cae7f60"
RFC8032_PK = "d75a980182b10ab7d54bfed3c964073a0ee172f3daa62325af021a68f707511a"
RFC8032_SIG = (
    "e5564300c360ac729086e2cc806e828a84877f1eb8e5d974d873e06522490155"
    "5fb8821590a33bacc61e39701cf9b46bd25bf5f0595bbe24655141438e7a100b"
)


class TestContentHash:
    def test_deterministic(self):
        assert crypto.content_hash(b"abc") == crypto.content_hash(b"abc")

    def test_bit_flip_changes_digest(self):
        a = bytearray(b"some bytes here")
        b = bytearray(a)
        b[3] ^= 0x01
        assert crypto.content_hash(bytes(a)) != crypto.content_hash(bytes(b))

    def test_empty_input_matches_oracle(self):
        assert crypto.content_hash_hex(b"") == SHA256_EMPTY

    def test_hex_form(self):
        h = crypto.content_hash_hex(b"x")
        assert len(h) == 64 and h == h.lower()
        assert h == hashlib.sha256(b"x").hexdigest()

    def test_no_duplicates_at_scale(self):
        import os

        inputs = {os.urandom(24) for _ in range(10_000)}
        digests = {crypto.content_hash(b) for b in inputs}
        assert len(digests) == len(inputs)


class TestSignatures:
    def test_rfc8032_vector(self):
        sk = bytes.fromhex(RFC8032_SK)
        assert crypto.sign(sk, b"").hex() == RFC8032_SIG
        assert crypto.verify(bytes.fromhex(RFC8032_PK), b"", bytes.fromhex(RFC8032_SIG))

    def test_round_trip(self):
        kp = crypto.generate_keypair("u1")
        sig = crypto.sign(kp.sign_private, b"message")
        assert crypto.verify(kp.sign_public, b"message", sig)

    def test_cross_pair_rejected(self):
        kp1 = crypto.generate_keypair("u1")
        kp2 = crypto.generate_keypair("u2")
        sig = crypto.sign(kp1.sign_private, b"message")
        assert not crypto.verify(kp2.sign_public, b"message", sig)

    def test_tampered_message_rejected(self):
        kp = crypto.generate_keypair("u1")
        sig = crypto.sign(kp.sign_private, b"message")
        assert not crypto.verify(kp.sign_public, b"messagE", sig)

    def test_truncated_signature_is_decode_error(self):
        kp = crypto.generate_keypair("u1")
        sig = crypto.sign(kp.sign_private, b"m")
        with pytest.raises(CryptoDecodeError):
            crypto.verify(kp.sign_public, b"m", sig[:-1])

    def test_bad_key_length_is_decode_error(self):
        with pytest.raises(CryptoDecodeError):
            crypto.verify(b"\x00" * 31, b"m", b"\x00" * 64)

    def test_distinct_keypairs(self):
        a = crypto.generate_keypair("u")
        b = crypto.generate_keypair("u")
        assert a.sign_public != b.sign_public

    def test_keypair_hex_round_trip(self):
        kp = crypto.generate_keypair("u1")
        again = crypto.KeyPair.from_dict(kp.to_dict())
        assert again == kp
        sig = crypto.sign(again.sign_private, b"payload")
        assert crypto.verify(
            bytes.fromhex(kp.to_dict()["sign_public"]), b"payload", sig
        )

    def test_empty_user_id_rejected(self):
        with pytest.raises(ValueError):
            crypto.generate_keypair("")


class TestAead:
    def test_round_trip(self):
        key = crypto.new_file_key()
        blob = crypto.aead_seal(key, b"plaintext", b"aad")
        assert crypto.aead_open(key, blob, b"aad") == b"plaintext"

    def test_empty_plaintext_round_trips(self):
        key = crypto.new_file_key()
        blob = crypto.aead_seal(key, b"", b"aad")
        assert crypto.aead_open(key, blob, b"aad") == b""

    def test_wrong_aad_fails(self):
        key = crypto.new_file_key()
        blob = crypto.aead_seal(key, b"p", b"aad")
        with pytest.raises(DecryptionError):
            crypto.aead_open(key, blob, b"other")

    def test_wrong_key_fails(self):
        blob = crypto.aead_seal(crypto.new_file_key(), b"p", b"a")
        with pytest.raises(DecryptionError):
            crypto.aead_open(crypto.new_file_key(), blob, b"a")

    def test_short_key_rejected(self):
        with pytest.raises(CryptoDecodeError):
            crypto.aead_seal(b"short", b"p", b"a")

    def test_serialized_layout(self):
        key = crypto.new_file_key()
        blob = crypto.aead_seal(key, b"payload", b"")
        raw = blob.to_bytes()
        assert raw[: crypto.NONCE_LEN] == blob.nonce
        assert raw[-crypto.TAG_LEN :] == blob.tag
        assert crypto.SealedBlob.from_bytes(raw) == blob

    @given(
        plaintext=st.binary(min_size=0, max_size=512),
        aad=st.binary(min_size=0, max_size=64),
        data=st.data(),
    )
    @settings(max_examples=60, deadline=None)
    def test_any_single_bit_flip_fails(self, plaintext, aad, data):
        key = crypto.new_file_key()
        raw = bytearray(crypto.aead_seal(key, plaintext, aad).to_bytes())
        flip_aad = bool(aad) and data.draw(st.booleans(), label="flip_aad")
        if flip_aad:
            pos = data.draw(st.integers(0, len(aad) - 1), label="aad_pos")
            bit = data.draw(st.integers(0, 7), label="aad_bit")
            bad_aad = bytearray(aad)
            bad_aad[pos] ^= 1 << bit
            with pytest.raises(DecryptionError):
                crypto.aead_open(key, crypto.SealedBlob.from_bytes(bytes(raw)), bytes(bad_aad))
        else:
            pos = data.draw(st.integers(0, len(raw) - 1), label="pos")
            bit = data.draw(st.integers(0, 7), label="bit")
            raw[pos] ^= 1 << bit
            with pytest.raises(DecryptionError):
                crypto.aead_open(key, crypto.SealedBlob.from_bytes(bytes(raw)), aad)

    @given(plaintext=st.binary(min_size=0, max_size=2048), aad=st.binary(max_size=32))
    @settings(max_examples=40, deadline=None)
    def test_seal_open_identity(self, plaintext, aad):
        key = crypto.new_file_key()
        assert crypto.aead_open(key, crypto.aead_seal(key, plaintext, aad), aad) == plaintext


class TestKeyWrapping:
    def test_round_trip(self):
        kp = crypto.generate_keypair("u1")
        fk = crypto.new_file_key()
        wrapped = crypto.wrap_file_key(kp.enc_public, fk, "u1")
        assert crypto.unwrap_file_key(kp.enc_private, wrapped) == fk

    def test_wrong_private_key_fails(self):
        kp1 = crypto.generate_keypair("u1")
        kp2 = crypto.generate_keypair("u2")
        wrapped = crypto.wrap_file_key(kp1.enc_public, crypto.new_file_key(), "u1")
        with pytest.raises(DecryptionError):
            crypto.unwrap_file_key(kp2.enc_private, wrapped)

    def test_fresh_ephemeral_randomness(self):
        kp = crypto.generate_keypair("u1")
        fk = crypto.new_file_key()
        w1 = crypto.wrap_file_key(kp.enc_public, fk, "u1")
        w2 = crypto.wrap_file_key(kp.enc_public, fk, "u1")
        assert w1.wrapped_bytes != w2.wrapped_bytes
        assert crypto.unwrap_file_key(kp.enc_private, w1) == fk
        assert crypto.unwrap_file_key(kp.enc_private, w2) == fk

    def test_recipient_id_is_bound(self):
        kp = crypto.generate_keypair("u1")
        fk = crypto.new_file_key()
        wrapped = crypto.wrap_file_key(kp.enc_public, fk, "u1")
        forged = crypto.WrappedKey("u2", wrapped.wrapped_bytes)
        with pytest.raises(DecryptionError):
            crypto.unwrap_file_key(kp.enc_private, forged)
