"""Checkpoint container: JSON header + flat little-endian float64 payload.

Layout: 8-byte magic, uint64 little-endian header length, UTF-8 JSON
header, then the concatenated array payload. The header records the kind
of checkpoint, a schema version, and the name/shape of every array in
payload order, so files are self-describing and diffable with a one-line
reader.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"VTEXCKPT"
SCHEMA_VERSION = 1


def write_checkpoint(path: str | Path, kind: str, meta: dict,
                     arrays: list[tuple[str, np.ndarray]]) -> None:
    header = {
        "magic": "vtexit",
        "schema_version": SCHEMA_VERSION,
        "kind": kind,
        "byte_order": "little",
        "dtype": "float64",
        "arrays": [{"name": n, "shape": list(a.shape)} for n, a in arrays],
        "meta": meta,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for _, a in arrays:
            f.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def read_checkpoint(path: str | Path, expect_kind: str | None = None
                    ) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != MAGIC:
            raise ValueError(f"{path}: not a vtexit checkpoint (bad magic)")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode("utf-8"))
        if header.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"{path}: unsupported schema_version {header.get('schema_version')}")
        if expect_kind is not None and header.get("kind") != expect_kind:
            raise ValueError(f"{path}: expected kind={expect_kind!r}, found {header.get('kind')!r}")
        arrays: dict[str, np.ndarray] = {}
        for spec in header["arrays"]:
            shape = tuple(spec["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = f.read(count * 8)
            if len(buf) != count * 8:
                raise ValueError(f"{path}: truncated payload for array {spec['name']!r}")
            arrays[spec["name"]] = np.frombuffer(buf, dtype="<f8").astype(
                np.float64).reshape(shape)
    return header, arrays
