"""PSP/1: framed patch request/response protocol over child stdin/stdout.

Request frame:  magic "PSPQ" + u32 LE JSON length + JSON header + payload of
px*py*pz little-endian f32. Header keys: id, stage, dims, spacing_mm.
Response frame: magic "PSPR" + u32 LE JSON length + JSON header (id, status,
optional message) + payload of the same byte length when status is "ok".
Requests are answered in order; exactly one request is in flight per child.
"""

from __future__ import annotations

import json
import struct
import subprocess
import threading

import numpy as np

from .volume import Volume

REQUEST_MAGIC = b"PSPQ"
RESPONSE_MAGIC = b"PSPR"


class ProtocolError(RuntimeError):
    """Malformed frame, unexpected id/length, or a closed child stream."""


def encode_request(req_id: int, stage: int, vol: Volume) -> bytes:
    header = {
        "id": int(req_id),
        "stage": int(stage),
        "dims": [int(n) for n in vol.dims],
        "spacing_mm": [float(s) for s in vol.spacing_mm],
    }
    hjson = json.dumps(header, separators=(",", ":")).encode("utf-8")
    payload = np.ascontiguousarray(vol.values.ravel(order="F"), dtype="<f4").tobytes()
    return REQUEST_MAGIC + struct.pack("<I", len(hjson)) + hjson + payload


def encode_response_ok(req_id: int, payload: bytes) -> bytes:
    hjson = json.dumps({"id": int(req_id), "status": "ok"}, separators=(",", ":")).encode()
    return RESPONSE_MAGIC + struct.pack("<I", len(hjson)) + hjson + payload


def encode_response_error(req_id: int, message: str) -> bytes:
    hjson = json.dumps(
        {"id": int(req_id), "status": "error", "message": str(message)},
        separators=(",", ":"),
    ).encode()
    return RESPONSE_MAGIC + struct.pack("<I", len(hjson)) + hjson


def _read_exact(stream, n: int, what: str) -> bytes:
    buf = b""
    while len(buf) < n:
        chunk = stream.read(n - len(buf))
        if not chunk:
            raise ProtocolError(f"stream closed while reading {what} ({len(buf)}/{n} bytes)")
        buf += chunk
    return buf


def read_request(stream):
    """Read one request frame; returns None on clean EOF at a frame boundary."""
    magic = stream.read(4)
    if magic == b"":
        return None
    if len(magic) < 4:
        magic += stream.read(4 - len(magic)) or b""
    if magic != REQUEST_MAGIC:
        raise ProtocolError(f"bad request magic {magic!r}")
    (hlen,) = struct.unpack("<I", _read_exact(stream, 4, "request header length"))
    try:
        header = json.loads(_read_exact(stream, hlen, "request header").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ProtocolError(f"request header is not valid JSON: {e}") from e
    for key in ("id", "stage", "dims", "spacing_mm"):
        if key not in header:
            raise ProtocolError(f"request header missing key {key!r}")
    dims = tuple(int(n) for n in header["dims"])
    n_bytes = 4 * dims[0] * dims[1] * dims[2]
    payload = _read_exact(stream, n_bytes, "request payload")
    return header, payload


def read_response(stream, expected_payload_bytes: int):
    """Read one response frame; returns (id, status, message, payload|None)."""
    magic = _read_exact(stream, 4, "response magic")
    if magic != RESPONSE_MAGIC:
        raise ProtocolError(f"bad response magic {magic!r}")
    (hlen,) = struct.unpack("<I", _read_exact(stream, 4, "response header length"))
    try:
        header = json.loads(_read_exact(stream, hlen, "response header").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ProtocolError(f"response header is not valid JSON: {e}") from e
    status = header.get("status")
    if status not in ("ok", "error"):
        raise ProtocolError(f"response status must be ok or error, got {status!r}")
    if status == "error":
        return header.get("id"), status, header.get("message", ""), None
    payload = _read_exact(stream, expected_payload_bytes, "response payload")
    return header.get("id"), status, header.get("message"), payload


class ProcessBackend:
    """Synthesis backend hosted in a child process speaking PSP/1.

    One request is in flight at a time; concurrent callers are serialized
    with a lock so the engine may still fan out other work.
    """

    def __init__(self, command: list[str]):
        self.command = list(command)
        self._lock = threading.Lock()
        self._next_id = 0
        try:
            self._proc = subprocess.Popen(
                self.command, stdin=subprocess.PIPE, stdout=subprocess.PIPE
            )
        except OSError as e:
            raise ProtocolError(f"failed to spawn backend {self.command!r}: {e}") from e

    def apply(self, patch: Volume, stage: int) -> Volume:
        with self._lock:
            req_id = self._next_id
            self._next_id += 1
            expected = 4 * patch.values.size
            if self._proc.poll() is not None:
                raise ProtocolError(
                    f"backend child exited with code {self._proc.returncode} before request {req_id}"
                )
            try:
                self._proc.stdin.write(encode_request(req_id, stage, patch))
                self._proc.stdin.flush()
            except (BrokenPipeError, OSError) as e:
                raise ProtocolError(f"backend child closed stdin at request {req_id}: {e}") from e
            try:
                resp_id, status, message, payload = read_response(self._proc.stdout, expected)
            except ProtocolError as e:
                raise ProtocolError(f"request {req_id}: {e}") from e
            if resp_id != req_id:
                raise ProtocolError(f"response id {resp_id} does not match request id {req_id}")
            if status == "error":
                raise ProtocolError(f"backend reported error for request {req_id}: {message}")
            if len(payload) != expected:
                raise ProtocolError(
                    f"request {req_id}: payload length mismatch, expected {expected} bytes, "
                    f"got {len(payload)}"
                )
            values = np.frombuffer(payload, dtype="<f4").reshape(patch.dims, order="F")
            return Volume(values.astype(np.float32), patch.spacing_mm, patch.origin_mm)

    def close(self) -> None:
        proc = getattr(self, "_proc", None)
        if proc is None:
            return
        if proc.stdin:
            try:
                proc.stdin.close()
            except OSError:
                pass
        try:
            proc.wait(timeout=5)
        except subprocess.TimeoutExpired:
            proc.kill()
            proc.wait()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
