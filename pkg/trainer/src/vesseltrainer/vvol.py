"""Minimal VVOL reader/writer implementing the published byte spec.

Deliberately self-contained: the trainer talks to the synthesis toolchain
only through files and the patch protocol, never through its Python API.
Arrays are indexed [x, y, z]; the on-disk flat order is x-fastest.
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"VVOL0001"


def read_vvol(path):
    """Returns (values, meta): float32 or uint8 array plus the header dict."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:8] != MAGIC:
        raise ValueError(f"bad magic {raw[:8]!r}")
    (hlen,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12 : 12 + hlen].decode("utf-8"))
    nx, ny, nz = (int(n) for n in header["dims"])
    dtype = header["dtype"]
    payload = raw[12 + hlen :]
    if dtype == "f32le":
        expected = 4 * nx * ny * nz
        if len(payload) != expected:
            raise ValueError(f"payload length {len(payload)} != {expected}")
        arr = np.frombuffer(payload, dtype="<f4").reshape((nx, ny, nz), order="F").astype(np.float32)
    elif dtype == "u8":
        if len(payload) != nx * ny * nz:
            raise ValueError(f"payload length {len(payload)} != {nx * ny * nz}")
        arr = np.frombuffer(payload, dtype=np.uint8).reshape((nx, ny, nz), order="F").copy()
    else:
        raise ValueError(f"unsupported dtype {dtype!r}")
    return arr, header


def write_vvol(path, values: np.ndarray, spacing_mm=(1.0, 1.0, 1.0), origin_mm=(0.0, 0.0, 0.0)):
    if values.dtype == np.uint8:
        dtype = "u8"
        payload = values.ravel(order="F").tobytes()
    else:
        dtype = "f32le"
        payload = np.ascontiguousarray(values.ravel(order="F"), dtype="<f4").tobytes()
    header = json.dumps({
        "dims": [int(n) for n in values.shape],
        "spacing_mm": [float(s) for s in spacing_mm],
        "origin_mm": [float(o) for o in origin_mm],
        "dtype": dtype,
        "order": "x-fastest",
    }, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        f.write(payload)
