"""Content-addressed store: addressing, idempotence, tamper detection."""

import hashlib
import os

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from careledger.castore import CAStore, ContentHash
from careledger.errors import BlobNotFound, CorruptBlob, StoreError


@pytest.fixture
def store(tmp_path):
    return CAStore(tmp_path / "cas")


def test_round_trip(store):
    h = store.put(b"hello blob")
    assert store.get(h) == b"hello blob"


def test_put_is_idempotent(store):
    h1 = store.put(b"same bytes")
    files_before = sum(len(fs) for _, _, fs in os.walk(store.root))
    h2 = store.put(b"same bytes")
    files_after = sum(len(fs) for _, _, fs in os.walk(store.root))
    assert h1 == h2
    assert files_before == files_after


def test_different_blobs_different_hashes(store):
    assert store.put(b"one") != store.put(b"two")


def test_address_matches_external_sha256_of_disk_file(store):
    blob = os.urandom(1024)
    h = store.put(blob)
    # Independent oracle: hash the file on disk with hashlib directly.
    path = store.root / h.hex[:2] / h.hex[2:]
    assert hashlib.sha256(path.read_bytes()).hexdigest() == h.hex


def test_empty_blob_rejected(store):
    with pytest.raises(StoreError):
        store.put(b"")


def test_get_unknown_hash(store):
    with pytest.raises(BlobNotFound):
        store.get(ContentHash.of(b"never stored"))


def test_corrupt_blob_detected_on_get(store):
    h = store.put(b"will be tampered")
    path = store.root / h.hex[:2] / h.hex[2:]
    raw = bytearray(path.read_bytes())
    raw[0] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(CorruptBlob):
        store.get(h)


def test_has(store):
    h = store.put(b"present")
    assert store.has(h)
    assert not store.has(ContentHash.of(b"absent"))


def test_has_after_backing_file_deleted(store):
    h = store.put(b"to be removed")
    (store.root / h.hex[:2] / h.hex[2:]).unlink()
    assert not store.has(h)


def test_fsck_reports_mismatches(store):
    good = store.put(b"good blob")
    bad = store.put(b"bad blob")
    path = store.root / bad.hex[:2] / bad.hex[2:]
    path.write_bytes(b"overwritten out-of-band")
    mismatches = store.fsck()
    assert mismatches == [bad.hex]
    assert store.get(good) == b"good blob"


def test_content_hash_parsing():
    h = ContentHash.of(b"x")
    assert ContentHash.from_hex(h.hex) == h
    with pytest.raises(ValueError):
        ContentHash.from_hex("zz" * 32)
    with pytest.raises(ValueError):
        ContentHash.from_hex("ab")
    with pytest.raises(ValueError):
        ContentHash.from_hex(h.hex.upper())


@given(blob=st.binary(min_size=1, max_size=65536))
@settings(max_examples=50, deadline=None)
def test_round_trip_property(tmp_path_factory, blob):
    store = CAStore(tmp_path_factory.mktemp("cas"))
    assert store.get(store.put(blob)) == blob


def test_large_blob_round_trip(store):
    blob = os.urandom(10 * 1024 * 1024)
    assert store.get(store.put(blob)) == blob
