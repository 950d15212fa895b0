"""On-disk container for datasets and checkpoints.

Layout: 8 magic bytes, a little-endian u32 format version, a u64-length-
prefixed UTF-8 JSON header, then the payload of concatenated float64
little-endian arrays in row-major order.  The header lists every array
(name, dims, byte offset into the payload) plus free-form metadata.
Writes are canonical (arrays sorted by name, JSON with sorted keys), so
write -> read -> write reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"ACMFD1\x00\x00"
VERSION = 1


class ContainerError(ValueError):
    pass


def write_container(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries = []
    offset = 0
    payload = []
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        entries.append({"name": name, "dims": list(arr.shape), "offset": offset})
        payload.append(arr.tobytes())
        offset += arr.nbytes
    header = {"arrays": entries, "meta": meta or {}}
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for chunk in payload:
            fh.write(chunk)


def read_container(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ContainerError(f"{path}: not a container file (bad magic)")
    (version,) = struct.unpack_from("<I", raw, 8)
    if version != VERSION:
        raise ContainerError(f"{path}: unsupported format version {version}")
    (header_len,) = struct.unpack_from("<Q", raw, 12)
    header_end = 20 + header_len
    try:
        header = json.loads(raw[20:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"{path}: corrupt header ({exc})") from exc

    payload = raw[header_end:]
    arrays = {}
    expected_offset = 0
    for entry in header["arrays"]:
        dims = tuple(entry["dims"])
        count = int(np.prod(dims)) if dims else 1
        start = entry["offset"]
        if start != expected_offset:
            raise ContainerError(
                f"{path}: array {entry['name']!r} at offset {start}, expected "
                f"{expected_offset}"
            )
        stop = start + 8 * count
        if stop > len(payload):
            raise ContainerError(f"{path}: payload truncated at {entry['name']!r}")
        arrays[entry["name"]] = np.frombuffer(
            payload[start:stop], dtype="<f8"
        ).reshape(dims).copy()
        expected_offset = stop
    if expected_offset != len(payload):
        raise ContainerError(
            f"{path}: {len(payload) - expected_offset} trailing payload bytes"
        )
    return arrays, header["meta"]
