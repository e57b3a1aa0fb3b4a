"""Small shared helpers: atomic file output and flat key=value blocks."""

import os
import tempfile


def atomic_write_text(path, text):
    """Write `text` to `path` atomically (temp file + rename)."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix="~")
    try:
        with os.fdopen(fd, "w", newline="\n") as handle:
            handle.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def kv_block(title, items):
    """Format a flat key=value text block used in run logs."""
    lines = ["[%s]" % title]
    for key, value in items:
        lines.append("%s=%s" % (key, value))
    return "\n".join(lines) + "\n"


def fmt(value):
    """Deterministic float/number formatting for logs and CSV output."""
    if isinstance(value, float):
        return "%.16e" % value
    return str(value)
