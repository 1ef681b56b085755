"""Deterministic binary containers for feature matrices and checkpoints.

Two formats live here, both little-endian and fully specified so that
write -> read -> write is byte-identical on any platform.

Feature file (``.fea``)::

    bytes 0..3   magic b"FEA1"
    bytes 4..7   uint32 T (rows)
    bytes 8..11  uint32 D (columns)
    bytes 12..   T*D float32 values, row-major

Blob file (checkpoints, normalization stats; ``.ckpt`` / ``.stats``)::

    bytes 0..3   magic b"BLB1"
    bytes 4..11  uint64 header length H
    bytes 12..   H bytes of UTF-8 JSON (sorted keys), then raw array bytes

The JSON header holds ``format_version``, a free-form ``meta`` dict and an
``arrays`` list of ``{name, dtype, shape, offset, nbytes}`` records with
offsets relative to the end of the header. Loading fails loudly on a bad
magic, a version mismatch or a truncated payload.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import DataError

FEATURE_MAGIC = b"FEA1"
BLOB_MAGIC = b"BLB1"
BLOB_FORMAT_VERSION = 1


def write_feature_file(path, frames: np.ndarray) -> None:
    frames = np.ascontiguousarray(frames, dtype="<f4")
    if frames.ndim != 2:
        raise DataError(f"feature matrix must be 2-D, got shape {frames.shape}")
    t, d = frames.shape
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC)
        f.write(struct.pack("<II", t, d))
        f.write(frames.tobytes())


def read_feature_file(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != FEATURE_MAGIC:
        raise DataError(f"{path}: not a feature file (bad magic)")
    t, d = struct.unpack("<II", raw[4:12])
    expect = 12 + 4 * t * d
    if len(raw) != expect:
        raise DataError(f"{path}: truncated feature file ({len(raw)} bytes, expected {expect})")
    return np.frombuffer(raw[12:], dtype="<f4").reshape(t, d).copy()


def save_blob(path, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    records = []
    payload = []
    offset = 0
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        if arr.ndim > 0 and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        data = arr.tobytes()
        records.append(
            {
                "name": name,
                "dtype": arr.dtype.str,
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(data),
            }
        )
        payload.append(data)
        offset += len(data)
    header = json.dumps(
        {"format_version": BLOB_FORMAT_VERSION, "meta": meta, "arrays": records},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    with open(path, "wb") as f:
        f.write(BLOB_MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for data in payload:
            f.write(data)


def load_blob(path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:4] != BLOB_MAGIC:
        raise DataError(f"{path}: not a blob file (bad magic)")
    if len(raw) < 12:
        raise DataError(f"{path}: truncated blob header")
    (hlen,) = struct.unpack("<Q", raw[4:12])
    if len(raw) < 12 + hlen:
        raise DataError(f"{path}: truncated blob header")
    header = json.loads(raw[12 : 12 + hlen].decode("utf-8"))
    version = header.get("format_version")
    if version != BLOB_FORMAT_VERSION:
        raise DataError(f"{path}: format version {version}, expected {BLOB_FORMAT_VERSION}")
    base = 12 + hlen
    arrays = {}
    for rec in header["arrays"]:
        start = base + rec["offset"]
        end = start + rec["nbytes"]
        if end > len(raw):
            raise DataError(f"{path}: truncated array payload for {rec['name']!r}")
        arrays[rec["name"]] = (
            np.frombuffer(raw[start:end], dtype=np.dtype(rec["dtype"]))
            .reshape(rec["shape"])
            .copy()
        )
    return header["meta"], arrays
