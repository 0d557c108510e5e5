"""Local content-addressed blob store.

The address of a blob is the SHA-256 of its bytes, exactly as pushed; the
store only ever sees ciphertext.  Layout is one file per blob at
``<root>/<first 2 hex chars>/<remaining 62 chars>``, written via temp file +
atomic rename for crash safety.  There is no garbage collection: the ledger
is the source of truth for which addresses matter.
"""

from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

from . import crypto
from .errors import BlobNotFound, CorruptBlob, StoreError

_HEX_DIGITS = set("0123456789abcdef")


@dataclass(frozen=True, order=True)
class ContentHash:
    """A 32-byte SHA-256 address; canonical form is lowercase 64-char hex."""

    digest: bytes

    def __post_init__(self):
        if not isinstance(self.digest, bytes) or len(self.digest) != 32:
            raise ValueError("content hash must be exactly 32 bytes")

    @classmethod
    def of(cls, data: bytes) -> "ContentHash":
        return cls(crypto.content_hash(data))

    @classmethod
    def from_hex(cls, text: str) -> "ContentHash":
        if len(text) != 64 or any(c not in _HEX_DIGITS for c in text):
            raise ValueError(f"not a 64-char lowercase hex digest: {text!r}")
        return cls(bytes.fromhex(text))

    @property
    def hex(self) -> str:
        return self.digest.hex()

    def __str__(self) -> str:
        return self.hex


class CAStore:
    """Content-addressed blob store rooted at a directory.

    Concurrent reads are unrestricted, and concurrent puts of identical
    content are safe because the final rename is atomic and idempotent.
    """

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def _path(self, h: ContentHash) -> Path:
        hx = h.hex
        return self.root / hx[:2] / hx[2:]

    def put(self, blob: bytes) -> ContentHash:
        """Persist ``blob`` under its own hash; re-putting is a no-op.

        Empty blobs are rejected: a sealed file is never zero bytes.
        """
        if not blob:
            raise StoreError("refusing to store an empty blob")
        h = ContentHash.of(blob)
        path = self._path(h)
        if path.exists():
            return h
        path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd, tmp = tempfile.mkstemp(dir=self.root, prefix=".put-")
            try:
                with os.fdopen(fd, "wb") as f:
                    f.write(blob)
                    f.flush()
                    os.fsync(f.fileno())
                os.replace(tmp, path)
            finally:
                if os.path.exists(tmp):
                    os.unlink(tmp)
        except OSError as exc:
            raise StoreError(f"failed to store blob {h.hex}: {exc}") from exc
        return h

    def get(self, h: ContentHash) -> bytes:
        """Return the stored bytes, re-verifying the address before returning.

        Raises BlobNotFound for unknown hashes and CorruptBlob if the on-disk
        bytes no longer match the address.
        """
        path = self._path(h)
        try:
            data = path.read_bytes()
        except FileNotFoundError:
            raise BlobNotFound(h.hex) from None
        if crypto.content_hash(data) != h.digest:
            raise CorruptBlob(f"blob {h.hex} failed re-hash on read")
        return data

    def read_unverified(self, h: ContentHash) -> bytes:
        """Raw bytes without the re-hash check, for integrity auditing."""
        path = self._path(h)
        try:
            return path.read_bytes()
        except FileNotFoundError:
            raise BlobNotFound(h.hex) from None

    def has(self, h: ContentHash) -> bool:
        """Pure existence check; no integrity verification.

        A blob whose backing file was deleted out-of-band reports False here
        (and would raise BlobNotFound on get).
        """
        return self._path(h).is_file()

    def fsck(self) -> list[str]:
        """Re-hash every blob; return the hex addresses that no longer match."""
        bad = []
        for sub in sorted(self.root.iterdir()):
            if not sub.is_dir() or len(sub.name) != 2:
                continue
            for f in sorted(sub.iterdir()):
                addr = sub.name + f.name
                try:
                    h = ContentHash.from_hex(addr)
                except ValueError:
                    bad.append(addr)
                    continue
                if crypto.content_hash(f.read_bytes()) != h.digest:
                    bad.append(addr)
        return bad
