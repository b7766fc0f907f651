"""Checkpoint files.

Layout::

    LMCKPT v1\\n
    %key value\\n                 (zero or more metadata lines)
    name dim0 dim1 ... offset\\n   (one line per tensor)
    \\n
    <payload: little-endian float32 tensors>

Offsets are relative to the start of the payload and are authoritative, so
the order of tensor lines does not matter.  Metadata carries the step
counters, optimizer step counts, the counter-based RNG position and the
config echo.
"""

from __future__ import annotations

import os
import tempfile
from pathlib import Path

import numpy as np

MAGIC = "LMCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


class CheckpointHeaderError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointOffsetError(CheckpointError):
    pass


class CheckpointTrailingBytesError(CheckpointError):
    pass


def encode_checkpoint(tensors: dict[str, np.ndarray], meta: dict[str, str] | None = None) -> bytes:
    lines = [f"{MAGIC} v{VERSION}"]
    for key, value in (meta or {}).items():
        if any(c.isspace() for c in key) or "\n" in str(value):
            raise CheckpointHeaderError(f"metadata key {key!r} or its value is not header-safe")
        lines.append(f"%{key} {value}")
    payload = bytearray()
    for name, arr in tensors.items():
        if not name or any(c.isspace() for c in name) or name.startswith("%"):
            raise CheckpointHeaderError(f"tensor name {name!r} is not header-safe")
        data = np.asarray(arr, dtype="<f4")  # tobytes below is C order; keeps 0-d shapes
        lines.append(" ".join([name, *(str(d) for d in data.shape), str(len(payload))]))
        payload += data.tobytes()
    header = ("\n".join(lines) + "\n\n").encode("ascii")
    return header + bytes(payload)


def decode_checkpoint(buf: bytes) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    end = buf.find(b"\n\n")
    if end < 0:
        raise CheckpointHeaderError("header terminator (blank line) not found")
    try:
        lines = buf[:end].decode("ascii").split("\n")
    except UnicodeDecodeError as exc:
        raise CheckpointHeaderError(f"header is not ASCII: {exc}") from None
    first = lines[0].split(" ")
    if len(first) != 2 or first[0] != MAGIC or not first[1].startswith("v"):
        raise CheckpointHeaderError(f"bad magic line {lines[0]!r}")
    try:
        version = int(first[1][1:])
    except ValueError:
        raise CheckpointHeaderError(f"bad version field {first[1]!r}") from None
    if version != VERSION:
        raise CheckpointVersionError(f"checkpoint version {version}, this reader supports {VERSION}")

    payload = buf[end + 2 :]
    meta: dict[str, str] = {}
    tensors: dict[str, np.ndarray] = {}
    furthest = 0
    for lineno, line in enumerate(lines[1:], start=2):
        if line.startswith("%"):
            key, _, value = line[1:].partition(" ")
            meta[key] = value
            continue
        parts = line.split(" ")
        if len(parts) < 2:
            raise CheckpointHeaderError(f"header line {lineno}: expected 'name dims... offset', got {line!r}")
        name = parts[0]
        try:
            shape = tuple(int(p) for p in parts[1:-1])
            offset = int(parts[-1])
        except ValueError:
            raise CheckpointHeaderError(f"header line {lineno}: non-integer field in {line!r}") from None
        if name in tensors:
            raise CheckpointHeaderError(f"header line {lineno}: duplicate tensor {name!r}")
        if offset < 0 or any(d < 0 for d in shape):
            raise CheckpointHeaderError(f"header line {lineno}: negative size or offset")
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        if offset + nbytes > len(payload):
            raise CheckpointOffsetError(
                f"tensor {name!r} needs payload bytes [{offset}, {offset + nbytes}),"
                f" expected payload size at least {offset + nbytes}, found {len(payload)}"
            )
        arr = np.frombuffer(payload, dtype="<f4", count=nbytes // 4, offset=offset)
        tensors[name] = arr.reshape(shape).astype(np.float32)
        furthest = max(furthest, offset + nbytes)
    if len(payload) > furthest:
        raise CheckpointTrailingBytesError(
            f"{len(payload) - furthest} trailing bytes after the last tensor"
            f" (expected payload size {furthest}, found {len(payload)})"
        )
    return tensors, meta


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict[str, str] | None = None):
    """Write atomically: temp file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = encode_checkpoint(tensors, meta)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    return decode_checkpoint(Path(path).read_bytes())
