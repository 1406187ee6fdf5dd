"""Canonical JSON serialization and content digests.

Every persisted artifact (compiled states, workflows, traces, dataset
rows) is hashed over the same canonical form so digests are stable
across processes and machines: UTF-8, sorted keys, no insignificant
whitespace, shortest round-trip float repr.
"""

from __future__ import annotations

import hashlib
import json
from typing import Any


def canonical_json(obj: Any) -> str:
    """Serialize ``obj`` to its canonical JSON text."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def digest(obj: Any) -> str:
    """Lowercase hex SHA-256 of the canonical serialization of ``obj``."""
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


def digest_text(text: str) -> str:
    """Lowercase hex SHA-256 of a raw string."""
    return hashlib.sha256(text.encode("utf-8")).hexdigest()
