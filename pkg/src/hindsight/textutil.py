"""Small text helpers shared across the package."""

from __future__ import annotations

import hashlib

ELISION_MARKER = "…[output elided]…"


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def truncate_middle(text: str, budget: int, marker: str = ELISION_MARKER) -> str:
    """Clamp text to at most ``budget + len(marker)`` characters.

    Keeps the head and the tail of the text and marks the elided middle.
    Text at or under the budget is returned unchanged.
    """
    if budget < 0:
        raise ValueError("budget must be >= 0")
    if len(text) <= budget:
        return text
    head = budget // 2
    tail = budget - head
    return text[:head] + marker + (text[len(text) - tail:] if tail else "")
