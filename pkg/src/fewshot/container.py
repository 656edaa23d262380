"""Binary container for checkpoints and cached datasets.

Layout (all multi-byte integers little-endian):

    bytes 0..7    magic ``FSCT0001`` (format version folded into the magic)
    bytes 8..11   uint32 header length H
    bytes 12..12+H-1  UTF-8 JSON header
    remainder     array payloads, concatenated in header order

The JSON header is ``{"kind": ..., "meta": {...}, "arrays": [{"name",
"shape"}, ...]}`` serialized with sorted keys and no whitespace, so a given
content always produces identical bytes.  Every payload is row-major
float64, little-endian, of exactly prod(shape) elements.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import DataError

MAGIC = b"FSCT0001"


def write_container(path, kind: str, meta: dict, arrays) -> None:
    """Write named float64 arrays plus a JSON meta block."""
    arrays = list(arrays)
    header = {
        "kind": kind,
        "meta": meta,
        "arrays": [{"name": n, "shape": list(a.shape)} for n, a in arrays],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for _, a in arrays:
            f.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def read_container(path, expect_kind: str | None = None):
    """Read back (kind, meta, ordered dict of name -> array)."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 12 or raw[:8] != MAGIC:
        raise DataError(f"{path} is not a container file (bad magic)")
    (hlen,) = struct.unpack("<I", raw[8:12])
    try:
        header = json.loads(raw[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"{path} has a corrupt header: {exc}") from exc
    kind = header.get("kind")
    if expect_kind is not None and kind != expect_kind:
        raise DataError(f"{path} holds a '{kind}' container, expected '{expect_kind}'")
    offset = 12 + hlen
    out = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        chunk = raw[offset : offset + nbytes]
        if len(chunk) != nbytes:
            raise DataError(f"{path} is truncated at array '{entry['name']}'")
        out[entry["name"]] = np.frombuffer(chunk, dtype="<f8").reshape(shape).copy()
        offset += nbytes
    return kind, header.get("meta", {}), out
