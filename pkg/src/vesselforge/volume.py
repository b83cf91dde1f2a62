"""Volumetric data model, the VVOL on-disk container, and patch primitives.

Index convention (fixed globally): the value at voxel (x, y, z) sits at flat
offset x + nx*y + nx*ny*z, i.e. x varies fastest. In memory we hold a numpy
array of shape (nx, ny, nz) indexed as values[x, y, z]; serialization uses a
Fortran-order ravel so the flat layout matches the convention bit for bit.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

VVOL_MAGIC = b"VVOL0001"
_HEADER_KEYS = ("dims", "spacing_mm", "origin_mm", "dtype", "order")


class VvolError(ValueError):
    """Raised for any malformed or inconsistent VVOL container."""


@dataclass(eq=False)
class Volume:
    """A 3D scalar field in Hounsfield units with physical geometry.

    values has shape (nx, ny, nz), dtype float32, and is indexed [x, y, z].
    """

    values: np.ndarray
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin_mm: tuple[float, float, float] = (0.0, 0.0, 0.0)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.values.shape)

    def copy(self) -> "Volume":
        return Volume(self.values.copy(), self.spacing_mm, self.origin_mm)


@dataclass(eq=False)
class LabelMask:
    """A 3D uint8 label field sharing Volume geometry.

    Label vocabulary is declared per use: vessel masks use
    {0=background, 1=artery, 2=vein}; CSA maps use
    {0=none, 1=small, 2=medium, 3=large}.
    """

    labels: np.ndarray
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin_mm: tuple[float, float, float] = (0.0, 0.0, 0.0)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.labels.shape)

    def copy(self) -> "LabelMask":
        return LabelMask(self.labels.copy(), self.spacing_mm, self.origin_mm)


@dataclass(frozen=True)
class VolumeStats:
    min_hu: float
    max_hu: float
    mean_hu: float
    voxel_count: int


def volume_stats(v: Volume) -> VolumeStats:
    return VolumeStats(
        min_hu=float(v.values.min()),
        max_hu=float(v.values.max()),
        mean_hu=float(v.values.mean(dtype=np.float64)),
        voxel_count=int(v.values.size),
    )


def validate_geometry(dims, spacing_mm) -> None:
    if len(dims) != 3 or any(int(n) < 1 for n in dims):
        raise VvolError(f"dims must be three counts >= 1, got {tuple(dims)}")
    if len(spacing_mm) != 3 or any(not (float(s) > 0.0) for s in spacing_mm):
        raise VvolError(f"spacing_mm must be three positive floats, got {tuple(spacing_mm)}")


def validate(obj: Volume | LabelMask) -> None:
    """Check the type invariants; raises VvolError on violation."""
    arr = obj.values if isinstance(obj, Volume) else obj.labels
    if arr.ndim != 3:
        raise VvolError(f"expected a 3D array, got ndim={arr.ndim}")
    validate_geometry(arr.shape, obj.spacing_mm)
    if isinstance(obj, Volume):
        if arr.dtype != np.float32:
            raise VvolError(f"Volume values must be float32, got {arr.dtype}")
        bad = int(np.count_nonzero(~np.isfinite(arr)))
        if bad:
            raise VvolError(f"payload contains {bad} non-finite values")
    else:
        if arr.dtype != np.uint8:
            raise VvolError(f"LabelMask labels must be uint8, got {arr.dtype}")


def same_geometry(a: Volume | LabelMask, b: Volume | LabelMask) -> bool:
    return (
        a.dims == b.dims
        and tuple(map(float, a.spacing_mm)) == tuple(map(float, b.spacing_mm))
        and tuple(map(float, a.origin_mm)) == tuple(map(float, b.origin_mm))
    )


def _canonical_header(obj: Volume | LabelMask) -> bytes:
    # Key order and float formatting are part of the byte-exact contract.
    header = {
        "dims": [int(n) for n in obj.dims],
        "spacing_mm": [float(s) for s in obj.spacing_mm],
        "origin_mm": [float(o) for o in obj.origin_mm],
        "dtype": "f32le" if isinstance(obj, Volume) else "u8",
        "order": "x-fastest",
    }
    return json.dumps(header, separators=(",", ":")).encode("utf-8")


def write_vvol(obj: Volume | LabelMask, path) -> None:
    """Serialize a Volume or LabelMask to the VVOL container, byte-exact."""
    validate(obj)
    arr = obj.values if isinstance(obj, Volume) else obj.labels
    header = _canonical_header(obj)
    if isinstance(obj, Volume):
        payload = np.ascontiguousarray(arr.ravel(order="F"), dtype="<f4").tobytes()
    else:
        payload = arr.ravel(order="F").tobytes()
    with open(path, "wb") as f:
        f.write(VVOL_MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        f.write(payload)


def read_vvol(path) -> Volume | LabelMask:
    """Decode a VVOL file; returns Volume (f32le) or LabelMask (u8)."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 12 or raw[:8] != VVOL_MAGIC:
        raise VvolError(f"bad magic {raw[:8]!r}, expected {VVOL_MAGIC!r}")
    (header_len,) = struct.unpack("<I", raw[8:12])
    if 12 + header_len > len(raw):
        raise VvolError(
            f"header length {header_len} exceeds file size {len(raw)}"
        )
    try:
        header = json.loads(raw[12 : 12 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise VvolError(f"header is not valid UTF-8 JSON: {e}") from e
    if not isinstance(header, dict) or tuple(sorted(header)) != tuple(sorted(_HEADER_KEYS)):
        raise VvolError(
            f"header keys must be exactly {list(_HEADER_KEYS)}, got {sorted(header) if isinstance(header, dict) else type(header).__name__}"
        )
    dims = header["dims"]
    spacing = header["spacing_mm"]
    origin = header["origin_mm"]
    dtype = header["dtype"]
    order = header["order"]
    if order != "x-fastest":
        raise VvolError(f"unsupported order {order!r}")
    if dtype not in ("f32le", "u8"):
        raise VvolError(f"unsupported dtype {dtype!r}")
    validate_geometry(dims, spacing)
    nx, ny, nz = (int(n) for n in dims)
    n_voxels = nx * ny * nz
    itemsize = 4 if dtype == "f32le" else 1
    payload = raw[12 + header_len :]
    if len(payload) != n_voxels * itemsize:
        raise VvolError(
            f"payload length mismatch: expected {n_voxels * itemsize} bytes, got {len(payload)}"
        )
    if dtype == "f32le":
        flat = np.frombuffer(payload, dtype="<f4")
        arr = flat.reshape((nx, ny, nz), order="F").astype(np.float32)
        obj = Volume(arr, tuple(float(s) for s in spacing), tuple(float(o) for o in origin))
    else:
        flat = np.frombuffer(payload, dtype=np.uint8)
        arr = flat.reshape((nx, ny, nz), order="F").copy()
        obj = LabelMask(arr, tuple(float(s) for s in spacing), tuple(float(o) for o in origin))
    validate(obj)
    return obj


def _check_window(dims, origin, size) -> None:
    for axis, name in enumerate("xyz"):
        if origin[axis] < 0 or origin[axis] + size[axis] > dims[axis]:
            raise ValueError(
                f"window out of bounds on axis {name}: origin {origin[axis]}, "
                f"size {size[axis]}, extent {dims[axis]}"
            )
        if size[axis] < 1:
            raise ValueError(f"window size must be >= 1 on axis {name}, got {size[axis]}")


def extract_patch(v: Volume, origin: tuple[int, int, int], size: tuple[int, int, int]) -> Volume:
    """Copy a sub-window; the patch origin_mm is shifted by origin*spacing."""
    _check_window(v.dims, origin, size)
    ix, iy, iz = origin
    px, py, pz = size
    vals = v.values[ix : ix + px, iy : iy + py, iz : iz + pz].copy()
    new_origin = tuple(v.origin_mm[a] + origin[a] * v.spacing_mm[a] for a in range(3))
    return Volume(vals, v.spacing_mm, new_origin)


def paste_accumulate(num: Volume, den: Volume, patch: Volume, weight: Volume, origin) -> None:
    """Accumulate weight*patch into num and weight into den over the window.

    Mutates num and den in place. Callers sharing buffers must serialize
    writes; the cascade engine accumulates in ascending tile order.
    """
    if patch.dims != weight.dims:
        raise ValueError(f"patch dims {patch.dims} != weight dims {weight.dims}")
    if float(weight.values.min()) < 0.0:
        raise ValueError("weights must be >= 0")
    _check_window(num.dims, origin, patch.dims)
    if num.dims != den.dims:
        raise ValueError(f"num dims {num.dims} != den dims {den.dims}")
    paste_into(num.values, den.values, patch.values, weight.values, origin)


def paste_into(num_arr: np.ndarray, den_arr: np.ndarray, patch_arr: np.ndarray,
               weight_arr: np.ndarray, origin) -> None:
    """dtype-agnostic core of paste_accumulate (accumulators may be float64)."""
    ix, iy, iz = origin
    px, py, pz = patch_arr.shape
    sl = (slice(ix, ix + px), slice(iy, iy + py), slice(iz, iz + pz))
    num_arr[sl] += weight_arr * patch_arr
    den_arr[sl] += weight_arr


def subtract(a: Volume, b: Volume) -> Volume:
    """Elementwise a - b; requires identical dims and spacing."""
    if a.dims != b.dims or tuple(map(float, a.spacing_mm)) != tuple(map(float, b.spacing_mm)):
        raise ValueError(
            f"geometry mismatch: dims {a.dims} vs {b.dims}, "
            f"spacing {a.spacing_mm} vs {b.spacing_mm}"
        )
    return Volume(a.values - b.values, a.spacing_mm, a.origin_mm)
