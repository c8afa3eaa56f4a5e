"""File-writing helpers shared by dataset, model, and CLI output code."""

from __future__ import annotations

import contextlib
import os
import tempfile


def atomic_write_text(path, text: str) -> None:
    """Write ``text`` to ``path`` atomically.

    The content goes to a temporary file in the target directory and is
    moved into place with ``os.replace``, so readers never observe a
    partially written file.
    """
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix="~")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(OSError):
            os.unlink(tmp)
        raise


def format_float(value) -> str:
    """Shortest decimal string that round-trips to the same float."""
    return repr(float(value))
