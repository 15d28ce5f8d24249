"""Atomic file writes: nothing appears at the final path until it is complete.

In-progress data lives at ``<path>.partial`` and is renamed into place, so an
interrupted run leaves only explicitly suffixed debris.
"""
from __future__ import annotations

import os


def write_bytes_atomic(path: str, payload: bytes) -> None:
    tmp = f"{path}.partial"
    with open(tmp, "wb") as f:
        f.write(payload)
    os.replace(tmp, path)


def write_text_atomic(path: str, text: str) -> None:
    write_bytes_atomic(path, text.encode("utf-8"))
