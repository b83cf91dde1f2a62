"""PSP/1 patch server: one request in flight, answered in arrival order.

Patches arrive in raw HU; the server normalizes, runs the generator, maps
back to HU and replies with a payload of identical byte length. Semantic
failures produce a status "error" response and the loop continues; any
non-finite model output is clamped to the valid range and counted on stderr
rather than ever leaving the process.
"""

from __future__ import annotations

import json
import struct
import sys

import numpy as np
import torch

from .networks import HU_SCALE, hu_to_norm, norm_to_hu
from .train import load_generator

REQUEST_MAGIC = b"PSPQ"
RESPONSE_MAGIC = b"PSPR"


def _read_exact(stream, n: int) -> bytes | None:
    buf = b""
    while len(buf) < n:
        chunk = stream.read(n - len(buf))
        if not chunk:
            return None
        buf += chunk
    return buf


def _respond(stream, req_id: int, payload: bytes | None, message: str | None = None) -> None:
    if message is None:
        header = json.dumps({"id": int(req_id), "status": "ok"}, separators=(",", ":")).encode()
        stream.write(RESPONSE_MAGIC + struct.pack("<I", len(header)) + header + payload)
    else:
        header = json.dumps(
            {"id": int(req_id), "status": "error", "message": message},
            separators=(",", ":"),
        ).encode()
        stream.write(RESPONSE_MAGIC + struct.pack("<I", len(header)) + header)
    stream.flush()


def _run_model(gen, payload: bytes, dims) -> tuple[bytes, int]:
    nx, ny, nz = dims
    arr = np.frombuffer(payload, dtype="<f4").reshape((nx, ny, nz), order="F")
    with torch.no_grad():
        x = hu_to_norm(torch.from_numpy(arr.astype(np.float32))[None, None])
        out = norm_to_hu(gen(x))[0, 0].numpy()
    bad = int(np.count_nonzero(~np.isfinite(out)))
    if bad:
        out = np.nan_to_num(out, nan=0.0, posinf=HU_SCALE, neginf=-HU_SCALE)
    return np.ascontiguousarray(out.ravel(order="F"), dtype="<f4").tobytes(), bad


def serve(checkpoint=None, stage: int | None = None, echo: bool = False,
          stdin=None, stdout=None) -> int:
    stdin = stdin if stdin is not None else sys.stdin.buffer
    stdout = stdout if stdout is not None else sys.stdout.buffer
    gen = None
    if not echo:
        if checkpoint is None:
            raise ValueError("serve needs a checkpoint unless echo mode is set")
        gen, blob = load_generator(checkpoint)
        if stage is not None and int(blob.get("stage", stage)) != stage:
            print(f"warning: checkpoint is stage {blob.get('stage')}, serving as stage {stage}",
                  file=sys.stderr)
    clamped_total = 0
    while True:
        magic = _read_exact(stdin, 4)
        if magic is None:
            break
        if magic != REQUEST_MAGIC:
            _respond(stdout, 0, None, f"bad request magic {magic!r}")
            return 1  # stream is desynchronized, cannot recover
        raw_len = _read_exact(stdin, 4)
        if raw_len is None:
            break
        (hlen,) = struct.unpack("<I", raw_len)
        raw_header = _read_exact(stdin, hlen)
        if raw_header is None:
            break
        try:
            header = json.loads(raw_header.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            _respond(stdout, 0, None, f"request header is not valid JSON: {e}")
            return 1
        req_id = int(header.get("id", 0))
        try:
            dims = tuple(int(n) for n in header["dims"])
            if len(dims) != 3 or any(d < 1 for d in dims):
                raise ValueError(f"bad dims {dims}")
            payload = _read_exact(stdin, 4 * dims[0] * dims[1] * dims[2])
            if payload is None:
                break
            if echo:
                _respond(stdout, req_id, payload)
                continue
            out_payload, clamped = _run_model(gen, payload, dims)
            clamped_total += clamped
            if clamped:
                print(f"warning: clamped {clamped} non-finite voxels in request {req_id}",
                      file=sys.stderr)
            _respond(stdout, req_id, out_payload)
        except Exception as e:  # semantic failure: report and keep serving
            _respond(stdout, req_id, None, str(e))
    if clamped_total:
        print(f"served with {clamped_total} clamped voxels total", file=sys.stderr)
    return 0
