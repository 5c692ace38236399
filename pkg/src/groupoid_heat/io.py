"""Serialization of kernels and reports.

Binary kernel grids: the magic ``GHKG``, a little-endian ``uint32`` format
version, a ``uint32`` header length, a UTF-8 JSON header and then the
values as little-endian 64-bit floats in C order.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"GHKG"
VERSION = 1


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=True) + "\n"


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def encode_grid(values, header: dict) -> bytes:
    values = np.ascontiguousarray(values, dtype="<f8")
    head = dict(header)
    head["shape"] = list(values.shape)
    hb = json.dumps(head, sort_keys=True).encode()
    return MAGIC + struct.pack("<II", VERSION, len(hb)) + hb + values.tobytes()


def decode_grid(data: bytes):
    if data[:4] != MAGIC:
        raise ValueError("not a kernel grid file")
    version, n = struct.unpack("<II", data[4:12])
    if version != VERSION:
        raise ValueError(f"unsupported grid format version {version}")
    header = json.loads(data[12 : 12 + n].decode())
    values = np.frombuffer(data[12 + n :], dtype="<f8").reshape(header["shape"])
    return values.astype(float), header


def kernel_header(kernel, model_hash: str, config_hash: str = "") -> dict:
    u = kernel.u
    return {
        "model_hash": model_hash,
        "config_hash": config_hash,
        "t": kernel.t,
        "grid": {"u0": float(u[0]), "du": float(u[1] - u[0]), "n": int(u.size)},
        "cutoff": kernel.cutoff,
        "order": kernel.order,
    }


def write_kernel(path, kernel, model_hash, config_hash=""):
    """Write the final-time radial profile as a binary grid plus a JSON
    sidecar (``.json`` next to it).  Returns the two paths."""
    path = Path(path)
    header = kernel_header(kernel, model_hash, config_hash)
    path.write_bytes(encode_grid(kernel.row(), header))
    side = path.with_suffix(".json")
    side.write_text(canonical_json({**header, **kernel.to_dict()}))
    return path, side


def read_kernel(path):
    return decode_grid(Path(path).read_bytes())


def kernel_csv(kernel) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["u", "Q"])
    for u, q in zip(kernel.u, kernel.row()):
        w.writerow([repr(float(u)), repr(float(q))])
    return buf.getvalue()


def to_jsonable(obj):
    """Convert numpy scalars and arrays (recursively) to plain Python."""
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    if hasattr(obj, "to_dict"):
        return to_jsonable(obj.to_dict())
    return obj
