import json
import struct

import numpy as np
import pytest

from vesselforge.volume import (
    LabelMask,
    Volume,
    VvolError,
    extract_patch,
    paste_accumulate,
    read_vvol,
    subtract,
    volume_stats,
    write_vvol,
)


def ramp_volume(dims, spacing=(1.0, 1.0, 1.0)):
    nx, ny, nz = dims
    flat = np.arange(nx * ny * nz, dtype=np.float32)
    return Volume(flat.reshape(dims, order="F"), spacing)


def test_roundtrip_identity(tmp_path):
    v = ramp_volume((3, 4, 5), spacing=(0.5, 1.0, 2.0))
    p = tmp_path / "v.vvol"
    write_vvol(v, p)
    r = read_vvol(p)
    assert isinstance(r, Volume)
    assert r.dims == v.dims
    assert r.spacing_mm == v.spacing_mm
    assert r.origin_mm == v.origin_mm
    assert np.array_equal(r.values, v.values)


def test_roundtrip_labelmask_full_u8_range(tmp_path):
    labels = np.arange(256, dtype=np.uint8).reshape((4, 8, 8), order="F")
    m = LabelMask(labels, (1.0, 1.0, 1.0))
    p = tmp_path / "m.vvol"
    write_vvol(m, p)
    r = read_vvol(p)
    assert isinstance(r, LabelMask)
    assert np.array_equal(r.labels, labels)
    assert labels.max() == 255


def test_write_deterministic(tmp_path):
    v = ramp_volume((2, 2, 2))
    p1, p2 = tmp_path / "a.vvol", tmp_path / "b.vvol"
    write_vvol(v, p1)
    write_vvol(v, p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_file_layout_single_voxel(tmp_path):
    # 8 magic + 4 length + header + 4 payload bytes, header is canonical JSON.
    v = Volume(np.zeros((1, 1, 1), dtype=np.float32), (1.0, 1.0, 1.0))
    p = tmp_path / "one.vvol"
    write_vvol(v, p)
    raw = p.read_bytes()
    header = (
        '{"dims":[1,1,1],"spacing_mm":[1.0,1.0,1.0],'
        '"origin_mm":[0.0,0.0,0.0],"dtype":"f32le","order":"x-fastest"}'
    ).encode()
    assert len(raw) == 8 + 4 + len(header) + 4
    assert raw[:8] == b"VVOL0001"
    assert struct.unpack("<I", raw[8:12])[0] == len(header)
    assert raw[12 : 12 + len(header)] == header


def test_bad_magic(tmp_path):
    p = tmp_path / "bad.vvol"
    p.write_bytes(b"XXXX0001" + b"\x00" * 16)
    with pytest.raises(VvolError, match="bad magic"):
        read_vvol(p)


def test_header_not_json(tmp_path):
    body = b"not json!!"
    p = tmp_path / "bad.vvol"
    p.write_bytes(b"VVOL0001" + struct.pack("<I", len(body)) + body)
    with pytest.raises(VvolError, match="not valid UTF-8 JSON"):
        read_vvol(p)


def test_payload_length_mismatch(tmp_path):
    v = ramp_volume((2, 2, 2))
    p = tmp_path / "t.vvol"
    write_vvol(v, p)
    raw = p.read_bytes()
    p.write_bytes(raw[:-1])  # 31 payload bytes instead of 32
    with pytest.raises(VvolError, match="payload length mismatch"):
        read_vvol(p)


def test_nonfinite_payload_rejected(tmp_path):
    v = ramp_volume((2, 2, 2))
    p = tmp_path / "t.vvol"
    write_vvol(v, p)
    raw = bytearray(p.read_bytes())
    raw[-4:] = struct.pack("<f", float("nan"))
    p.write_bytes(bytes(raw))
    with pytest.raises(VvolError, match="non-finite"):
        read_vvol(p)


def test_wrong_header_keys(tmp_path):
    header = json.dumps({"dims": [1, 1, 1]}).encode()
    p = tmp_path / "t.vvol"
    p.write_bytes(b"VVOL0001" + struct.pack("<I", len(header)) + header + b"\x00" * 4)
    with pytest.raises(VvolError, match="header keys"):
        read_vvol(p)


def test_flat_order_is_x_fastest(tmp_path):
    # value at (x,y,z) must live at flat offset x + nx*y + nx*ny*z
    v = ramp_volume((3, 2, 2))
    p = tmp_path / "v.vvol"
    write_vvol(v, p)
    raw = p.read_bytes()
    header_len = struct.unpack("<I", raw[8:12])[0]
    flat = np.frombuffer(raw[12 + header_len :], dtype="<f4")
    nx, ny, nz = v.dims
    for x in range(nx):
        for y in range(ny):
            for z in range(nz):
                assert flat[x + nx * y + nx * ny * z] == v.values[x, y, z]


def test_extract_patch_identity_window():
    v = ramp_volume((4, 3, 2))
    p = extract_patch(v, (0, 0, 0), v.dims)
    assert np.array_equal(p.values, v.values)
    assert p.origin_mm == v.origin_mm


def test_extract_patch_ramp_values():
    # 4x4x4 ramp, patch origin (1,1,1), size (2,2,2): enumerate by the
    # x-fastest flat formula.
    v = ramp_volume((4, 4, 4))
    p = extract_patch(v, (1, 1, 1), (2, 2, 2))
    expected = np.empty((2, 2, 2), dtype=np.float32)
    for dx in range(2):
        for dy in range(2):
            for dz in range(2):
                expected[dx, dy, dz] = (1 + dx) + 4 * (1 + dy) + 16 * (1 + dz)
    assert np.array_equal(p.values, expected)
    assert p.origin_mm == (1.0, 1.0, 1.0)


def test_extract_patch_out_of_bounds_names_axis():
    v = ramp_volume((4, 1, 1))
    with pytest.raises(ValueError, match="axis x"):
        extract_patch(v, (3, 0, 0), (2, 1, 1))


def test_paste_zero_weight_no_change():
    num = Volume(np.zeros((3, 3, 3), dtype=np.float32))
    den = Volume(np.zeros((3, 3, 3), dtype=np.float32))
    patch = Volume(np.full((2, 2, 2), 7.0, dtype=np.float32))
    w = Volume(np.zeros((2, 2, 2), dtype=np.float32))
    paste_accumulate(num, den, patch, w, (0, 0, 0))
    assert not num.values.any()
    assert not den.values.any()


def test_paste_unit_partition_recovers_patch():
    num = Volume(np.zeros((2, 2, 2), dtype=np.float32))
    den = Volume(np.zeros((2, 2, 2), dtype=np.float32))
    patch = Volume(np.arange(8, dtype=np.float32).reshape((2, 2, 2), order="F"))
    w = Volume(np.ones((2, 2, 2), dtype=np.float32))
    paste_accumulate(num, den, patch, w, (0, 0, 0))
    assert np.array_equal(num.values / den.values, patch.values)


def test_paste_overlap_averages():
    # two overlapping unit-weight pastes of 10 and 30 average to 20
    num = Volume(np.zeros((3, 1, 1), dtype=np.float32))
    den = Volume(np.zeros((3, 1, 1), dtype=np.float32))
    w = Volume(np.ones((2, 1, 1), dtype=np.float32))
    paste_accumulate(num, den, Volume(np.full((2, 1, 1), 10.0, np.float32)), w, (0, 0, 0))
    paste_accumulate(num, den, Volume(np.full((2, 1, 1), 30.0, np.float32)), w, (1, 0, 0))
    fused = num.values / den.values
    assert fused[0, 0, 0] == 10.0
    assert fused[1, 0, 0] == 20.0
    assert fused[2, 0, 0] == 30.0


def test_paste_dimension_mismatch():
    num = Volume(np.zeros((3, 3, 3), dtype=np.float32))
    den = Volume(np.zeros((3, 3, 3), dtype=np.float32))
    patch = Volume(np.zeros((2, 2, 2), dtype=np.float32))
    w = Volume(np.zeros((2, 2, 1), dtype=np.float32))
    with pytest.raises(ValueError, match="dims"):
        paste_accumulate(num, den, patch, w, (0, 0, 0))


def test_subtract_basic():
    a = Volume(np.array([[[100.0]], [[50.0]]], dtype=np.float32))
    b = Volume(np.array([[[40.0]], [[60.0]]], dtype=np.float32))
    d = subtract(a, b)
    assert d.values[0, 0, 0] == 60.0
    assert d.values[1, 0, 0] == -10.0
    assert not subtract(a, a).values.any()
    z = Volume(np.zeros_like(a.values))
    assert np.array_equal(subtract(a, z).values, a.values)


def test_subtract_geometry_mismatch():
    a = Volume(np.zeros((2, 2, 2), dtype=np.float32), (1.0, 1.0, 1.0))
    b = Volume(np.zeros((2, 2, 2), dtype=np.float32), (1.0, 1.0, 2.0))
    with pytest.raises(ValueError, match="geometry mismatch"):
        subtract(a, b)


def test_subtract_add_back_exact_for_integral_f32():
    rng = np.random.default_rng(3)
    a = Volume(rng.integers(-1000, 1000, (5, 4, 3)).astype(np.float32))
    b = Volume(rng.integers(-1000, 1000, (5, 4, 3)).astype(np.float32))
    d = subtract(a, b)
    assert np.array_equal(d.values + b.values, a.values)


def test_extract_paste_roundtrip_property():
    rng = np.random.default_rng(11)
    v = Volume(rng.normal(0, 100, (6, 5, 4)).astype(np.float32))
    num = Volume(np.zeros(v.dims, dtype=np.float32))
    den = Volume(np.zeros(v.dims, dtype=np.float32))
    origin, size = (1, 2, 0), (3, 2, 4)
    patch = extract_patch(v, origin, size)
    w = Volume(np.ones(size, dtype=np.float32))
    paste_accumulate(num, den, patch, w, origin)
    region = num.values[1:4, 2:4, 0:4] / den.values[1:4, 2:4, 0:4]
    assert np.array_equal(region, v.values[1:4, 2:4, 0:4])


def test_volume_stats_invariant():
    v = ramp_volume((3, 3, 3))
    s = volume_stats(v)
    assert s.min_hu <= s.mean_hu <= s.max_hu
    assert s.voxel_count == 27
