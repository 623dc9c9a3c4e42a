"""Binary container used for interaction matrices, splits and similarity models.

Layout (all integers little-endian)::

    bytes 0..7     magic  b"IPSLAE\\x00\\x01"
    bytes 8..15    uint64 header length H
    bytes 16..16+H UTF-8 JSON header, keys sorted
    remainder      array payloads, C order, concatenated

The header always carries ``format_version``, ``kind`` and an ``arrays``
list of ``{name, dtype, shape, offset, nbytes}`` records; offsets are
relative to the start of the payload. Everything else in the header is
kind-specific metadata (dimensions, lambda, id maps, provenance).

Writing is deterministic: the same header and arrays always produce the
same bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any

import numpy as np

from ipslae.errors import DataError

MAGIC = b"IPSLAE\x00\x01"
FORMAT_VERSION = 1

_ALLOWED_DTYPES = {"<f8", "<i8", "<i4", "|u1", "|b1"}


def _canonical_dtype(arr: np.ndarray) -> np.ndarray:
    if arr.dtype == np.bool_:
        return arr.astype("|b1")
    if arr.dtype.kind == "f":
        return arr.astype("<f8")
    if arr.dtype.kind in "iu":
        return arr.astype("<i8")
    raise DataError(f"unsupported array dtype {arr.dtype}")


def write_container(path: str | Path, kind: str, meta: dict[str, Any],
                    arrays: dict[str, np.ndarray]) -> Path:
    path = Path(path)
    records = []
    blobs = []
    offset = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(_canonical_dtype(np.asarray(arrays[name])))
        raw = arr.tobytes(order="C")
        records.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = dict(meta)
    header.update({"format_version": FORMAT_VERSION, "kind": kind, "arrays": records})
    head = json.dumps(header, sort_keys=True, separators=(",", ":"),
                      allow_nan=False).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for raw in blobs:
            fh.write(raw)
    return path


def read_container(path: str | Path, kind: str | None = None
                   ) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    """Read a container, returning ``(header, arrays)``.

    Raises DataError on a bad magic, unknown version, kind mismatch or a
    truncated payload.
    """
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read container {path}: {exc}") from exc
    if len(data) < 16 or data[:8] != MAGIC:
        raise DataError(f"{path} is not an ipslae container")
    (hlen,) = struct.unpack("<Q", data[8:16])
    try:
        header = json.loads(data[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: corrupt header") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported format_version {header.get('format_version')}")
    if kind is not None and header.get("kind") != kind:
        raise DataError(f"{path}: expected kind {kind!r}, found {header.get('kind')!r}")
    payload = memoryview(data)[16 + hlen:]
    arrays = {}
    for rec in header["arrays"]:
        if rec["dtype"] not in _ALLOWED_DTYPES:
            raise DataError(f"{path}: unsupported dtype {rec['dtype']}")
        start, stop = rec["offset"], rec["offset"] + rec["nbytes"]
        if stop > len(payload):
            raise DataError(f"{path}: truncated payload for array {rec['name']!r}")
        arr = np.frombuffer(payload[start:stop], dtype=np.dtype(rec["dtype"]))
        arrays[rec["name"]] = arr.reshape(rec["shape"]).copy()
    return header, arrays
