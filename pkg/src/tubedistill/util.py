"""Seed derivation, config hashing, and CSV output helpers."""

from __future__ import annotations

import csv
import io
import zlib
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np


def _as_entropy(part: Any) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    raise TypeError(f"Unsupported seed-derivation key: {part!r}")


def derive_rng(seed: int, *parts: Any) -> np.random.Generator:
    """Independent, reproducible RNG stream for (seed, *parts).

    SeedSequence guarantees stable streams across platforms and numpy versions,
    so every stochastic choice in the pipeline is a pure function of its keys.
    """
    entropy = [_as_entropy(seed)] + [_as_entropy(p) for p in parts]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def derive_seed(seed: int, *parts: Any) -> int:
    """Scalar seed derived from (seed, *parts); feedable back into derive_rng."""
    entropy = [_as_entropy(seed)] + [_as_entropy(p) for p in parts]
    return int(np.random.SeedSequence(entropy).generate_state(1)[0])


def config_hash(items: Mapping[str, Any]) -> str:
    """Short stable hash over key=value pairs, used to stamp emitted files."""
    import hashlib

    canon = "\n".join(f"{k}={items[k]!r}" for k in sorted(items))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:12]


def format_value(value: Any) -> str:
    """Round-trippable, deterministic text form for CSV cells."""
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (np.floating,)):
        return repr(float(value))
    if isinstance(value, (np.integer,)):
        return str(int(value))
    return str(value)


def write_csv(
    path: str | Path,
    header: Sequence[str],
    rows: Sequence[Sequence[Any]],
    *,
    comment: str | None = None,
) -> None:
    """Write rows to CSV; an optional '# ...' comment line precedes the header."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    if comment is not None:
        buf.write(f"# {comment}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([format_value(v) for v in row])
    path.write_text(buf.getvalue(), encoding="utf-8")


def read_csv(path: str | Path) -> tuple[list[str], list[list[str]], str | None]:
    """Read a CSV written by write_csv; returns (header, rows, comment)."""
    text = Path(path).read_text(encoding="utf-8")
    lines = text.splitlines()
    comment = None
    if lines and lines[0].startswith("#"):
        comment = lines[0][1:].strip()
        lines = lines[1:]
    reader = csv.reader(lines)
    parsed = list(reader)
    if not parsed:
        return [], [], comment
    return parsed[0], parsed[1:], comment
