"""Versioned binary container for named float64 arrays plus JSON metadata.

Layout (all little-endian):

    magic line   b"CCID-BIN 1\\n"
    header line  ASCII decimal byte length of the JSON header, then b"\\n"
    header       UTF-8 JSON: {"kind": ..., "meta": {...},
                              "arrays": [{"name", "shape"}, ...]}
    payload      raw C-order float64 buffers, concatenated in header order

A dedicated format instead of ``.npz`` because zip members carry wall-clock
timestamps, which would break byte-identical re-writes of identical content.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

MAGIC = b"CCID-BIN 1\n"


class ContainerError(ValueError):
    pass


def save(path: str | Path, kind: str, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    """Write arrays and metadata to ``path``. Arrays are stored as float64."""
    index = []
    buffers = []
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype=np.float64)
        index.append({"name": name, "shape": list(a.shape)})
        buffers.append(a.tobytes())
    header = json.dumps(
        {"kind": kind, "meta": meta, "arrays": index}, sort_keys=True
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(str(len(header)).encode("ascii") + b"\n")
        fh.write(header)
        for buf in buffers:
            fh.write(buf)


def load(path: str | Path, expect_kind: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    """Read a container, returning ``(meta, arrays)``."""
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise ContainerError(f"{path}: not a ccid container (bad magic)")
        length_line = fh.readline()
        try:
            header_len = int(length_line.strip())
        except ValueError:
            raise ContainerError(f"{path}: corrupt header length") from None
        header = json.loads(fh.read(header_len).decode("utf-8"))
        if expect_kind is not None and header.get("kind") != expect_kind:
            raise ContainerError(
                f"{path}: expected kind {expect_kind!r}, found {header.get('kind')!r}"
            )
        arrays = {}
        for entry in header["arrays"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * 8)
            if len(buf) != count * 8:
                raise ContainerError(f"{path}: truncated payload for {entry['name']!r}")
            arrays[entry["name"]] = np.frombuffer(buf, dtype=np.float64).reshape(shape).copy()
    return header["meta"], arrays
