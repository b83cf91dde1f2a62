import io
import struct
import sys
from pathlib import Path

import numpy as np
import pytest

from vesselforge.psp import (
    ProcessBackend,
    ProtocolError,
    encode_request,
    encode_response_error,
    encode_response_ok,
    read_request,
    read_response,
)
from vesselforge.volume import LabelMask, Volume, read_vvol, write_vvol

DATA = Path(__file__).parent / "data"


# --- golden bytes ----------------------------------------------------------

def test_golden_vvol_roundtrip_bit_exact(tmp_path):
    golden = (DATA / "golden.vvol").read_bytes()
    v = read_vvol(DATA / "golden.vvol")
    assert isinstance(v, Volume)
    assert v.dims == (2, 2, 1)
    assert v.spacing_mm == (0.5, 1.0, 2.0)
    assert v.origin_mm == (1.0, 0.0, -3.5)
    # x-fastest payload order: (0,0,0),(1,0,0),(0,1,0),(1,1,0)
    assert v.values[0, 0, 0] == -850.0
    assert v.values[1, 0, 0] == 40.0
    assert v.values[0, 1, 0] == 350.0
    assert v.values[1, 1, 0] == 0.25
    out = tmp_path / "re.vvol"
    write_vvol(v, out)
    assert out.read_bytes() == golden


def test_golden_mask_roundtrip_bit_exact(tmp_path):
    golden = (DATA / "golden_mask.vvol").read_bytes()
    m = read_vvol(DATA / "golden_mask.vvol")
    assert isinstance(m, LabelMask)
    assert m.labels[0, 0, 0] == 0
    assert m.labels[1, 0, 0] == 1
    assert m.labels[0, 0, 1] == 2
    assert m.labels[1, 0, 1] == 255
    out = tmp_path / "re.vvol"
    write_vvol(m, out)
    assert out.read_bytes() == golden


def golden_request_volume():
    vals = np.array([1.5, -2.0], dtype=np.float32).reshape((2, 1, 1), order="F")
    return Volume(vals, (0.5, 1.0, 2.0))


def test_golden_request_frame_bytes():
    frame = encode_request(7, 2, golden_request_volume())
    assert frame == (DATA / "golden_pspq.bin").read_bytes()


def test_golden_response_frames():
    ok = encode_response_ok(7, struct.pack("<2f", 3.25, 4.0))
    assert ok == (DATA / "golden_pspr_ok.bin").read_bytes()
    err = encode_response_error(9, "boom")
    assert err == (DATA / "golden_pspr_err.bin").read_bytes()


def test_golden_frames_parse_back():
    header, payload = read_request(io.BytesIO((DATA / "golden_pspq.bin").read_bytes()))
    assert header["id"] == 7 and header["stage"] == 2
    assert header["dims"] == [2, 1, 1]
    assert struct.unpack("<2f", payload) == (1.5, -2.0)
    rid, status, message, rp = read_response(
        io.BytesIO((DATA / "golden_pspr_ok.bin").read_bytes()), 8
    )
    assert (rid, status) == (7, "ok")
    assert struct.unpack("<2f", rp) == (3.25, 4.0)
    rid, status, message, rp = read_response(
        io.BytesIO((DATA / "golden_pspr_err.bin").read_bytes()), 8
    )
    assert (rid, status, message, rp) == (9, "error", "boom", None)


def test_read_request_eof_returns_none():
    assert read_request(io.BytesIO(b"")) is None


def test_bad_magic_rejected():
    with pytest.raises(ProtocolError, match="magic"):
        read_request(io.BytesIO(b"XXXX" + b"\x00" * 8))
    with pytest.raises(ProtocolError, match="magic"):
        read_response(io.BytesIO(b"YYYY" + b"\x00" * 8), 0)


# --- child-process backends -------------------------------------------------
# The children below implement the byte protocol from scratch so they double
# as independent conformance peers.

ECHO_CHILD = r"""
import json, struct, sys

def read_exact(n):
    buf = b""
    while len(buf) < n:
        chunk = sys.stdin.buffer.read(n - len(buf))
        if not chunk:
            raise SystemExit(0)
        buf += chunk
    return buf

while True:
    magic = sys.stdin.buffer.read(4)
    if not magic:
        break
    assert magic == b"PSPQ", magic
    (hlen,) = struct.unpack("<I", read_exact(4))
    header = json.loads(read_exact(hlen))
    nx, ny, nz = header["dims"]
    payload = read_exact(4 * nx * ny * nz)
    resp = json.dumps({"id": header["id"], "status": "ok"}, separators=(",", ":")).encode()
    sys.stdout.buffer.write(b"PSPR" + struct.pack("<I", len(resp)) + resp + payload)
    sys.stdout.buffer.flush()
"""

ERROR_CHILD = r"""
import json, struct, sys

def read_exact(n):
    buf = b""
    while len(buf) < n:
        chunk = sys.stdin.buffer.read(n - len(buf))
        if not chunk:
            raise SystemExit(0)
        buf += chunk
    return buf

magic = sys.stdin.buffer.read(4)
(hlen,) = struct.unpack("<I", read_exact(4))
header = json.loads(read_exact(hlen))
nx, ny, nz = header["dims"]
read_exact(4 * nx * ny * nz)
resp = json.dumps({"id": header["id"], "status": "error", "message": "synthetic failure"},
                  separators=(",", ":")).encode()
sys.stdout.buffer.write(b"PSPR" + struct.pack("<I", len(resp)) + resp)
sys.stdout.buffer.flush()
"""

SHORT_CHILD = r"""
import json, struct, sys

def read_exact(n):
    buf = b""
    while len(buf) < n:
        chunk = sys.stdin.buffer.read(n - len(buf))
        if not chunk:
            raise SystemExit(0)
        buf += chunk
    return buf

magic = sys.stdin.buffer.read(4)
(hlen,) = struct.unpack("<I", read_exact(4))
header = json.loads(read_exact(hlen))
nx, ny, nz = header["dims"]
payload = read_exact(4 * nx * ny * nz)
resp = json.dumps({"id": header["id"], "status": "ok"}, separators=(",", ":")).encode()
sys.stdout.buffer.write(b"PSPR" + struct.pack("<I", len(resp)) + resp + payload[:-4])
sys.stdout.buffer.flush()
sys.stdout.buffer.close()
"""


def child(script):
    return [sys.executable, "-c", script]


def test_echo_child_is_identity():
    rng = np.random.default_rng(5)
    patch = Volume(rng.normal(0, 100, (4, 3, 2)).astype(np.float32), (1.0, 1.0, 1.0))
    with ProcessBackend(child(ECHO_CHILD)) as backend:
        out = backend.apply(patch, 1)
        assert np.array_equal(out.values, patch.values)
        again = backend.apply(patch, 2)
        assert np.array_equal(again.values, patch.values)


def test_echo_child_many_sequential_ids():
    patch = Volume(np.zeros((2, 2, 2), dtype=np.float32))
    with ProcessBackend(child(ECHO_CHILD)) as backend:
        for _ in range(100):
            out = backend.apply(patch, 1)
            assert out.dims == (2, 2, 2)


def test_error_child_propagates_message():
    patch = Volume(np.zeros((2, 2, 2), dtype=np.float32))
    with ProcessBackend(child(ERROR_CHILD)) as backend:
        with pytest.raises(ProtocolError, match="synthetic failure"):
            backend.apply(patch, 1)


def test_short_payload_names_byte_counts():
    patch = Volume(np.zeros((2, 2, 2), dtype=np.float32))
    with ProcessBackend(child(SHORT_CHILD)) as backend:
        with pytest.raises(ProtocolError, match=r"(28/32|expected 32)"):
            backend.apply(patch, 1)


def test_spawn_failure():
    with pytest.raises(ProtocolError, match="spawn"):
        ProcessBackend(["/definitely/not/a/real/binary"])
