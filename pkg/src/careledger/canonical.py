"""Canonical JSON serialization.

Every byte string that gets hashed or signed in this system is produced by
``dumps``: UTF-8 JSON, lexicographically sorted keys, no whitespace, base-10
integers, byte fields pre-encoded as lowercase hex by the caller.  The format
is language-neutral and bit-exact, so independent implementations can verify
hashes from the wire representation alone.
"""

from __future__ import annotations

import json
from typing import Any


def dumps(obj: Any) -> bytes:
    """Serialize ``obj`` to canonical JSON bytes."""
    return json.dumps(
        obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False
    ).encode("utf-8")


def loads(data: bytes | str) -> Any:
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    return json.loads(data)
