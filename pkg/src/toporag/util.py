"""Small shared helpers: stable seeding, deterministic JSON, token counting."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path


def stable_seed(*parts) -> int:
    """Derive a reproducible 63-bit seed from arbitrary string/int parts.

    Python's builtin hash() is salted per process, so it must never feed an
    RNG that has to replay across runs.
    """
    blob = "\x1f".join(str(p) for p in parts).encode("utf-8")
    return int.from_bytes(hashlib.sha256(blob).digest()[:8], "big") >> 1


def dump_json(obj, path: str | Path) -> None:
    Path(path).write_text(to_json(obj), encoding="utf-8")


def to_json(obj) -> str:
    """Canonical JSON: sorted keys, 2-space indent, trailing newline.

    Floats go through repr (shortest round-trip), so identical values always
    serialize to identical bytes.
    """
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def count_tokens(text: str) -> int:
    """Whitespace token count, the unit used for per-call token caps."""
    return len(text.split())
