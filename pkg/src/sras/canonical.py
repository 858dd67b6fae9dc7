"""Canonical JSON encoding shared by the policy and every signed record.

Rules (byte-level description in docs/wire-formats.md):
object keys sorted by code point, no whitespace, ASCII-only output with
``\\uXXXX`` escapes, integers in plain decimal, no floats, lists kept in
document order.
"""

from __future__ import annotations

import json
import re
from typing import Any

_HEX_RE = re.compile(r"(?:[0-9a-f]{2})*")


def dumps(obj: Any) -> bytes:
    return json.dumps(
        obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True, allow_nan=False
    ).encode("ascii")


def _no_duplicates(pairs):
    out = {}
    for key, value in pairs:
        if key in out:
            raise ValueError(f"duplicate key {key!r}")
        out[key] = value
    return out


def _reject_float(text):
    raise ValueError(f"floating point value {text!r} not allowed")


def loads(data: bytes | str) -> Any:
    """Strict decode: duplicate keys, floats and NaN are errors."""
    if isinstance(data, (bytes, bytearray)):
        data = bytes(data).decode("utf-8")
    return json.loads(
        data,
        object_pairs_hook=_no_duplicates,
        parse_float=_reject_float,
        parse_constant=_reject_float,
    )


def to_hex(data: bytes) -> str:
    return bytes(data).hex()


def from_hex(text: Any, size: int | None = None) -> bytes:
    """Lowercase, even-length hex only; ``bytes.fromhex`` is too forgiving."""
    if not isinstance(text, str) or not _HEX_RE.fullmatch(text):
        raise ValueError(f"not canonical hex: {text!r:.40}")
    raw = bytes.fromhex(text)
    if size is not None and len(raw) != size:
        raise ValueError(f"expected {size} bytes, got {len(raw)}")
    return raw
