"""Deterministic paired NCCT/CTPA vascular phantoms with analytic ground truth.

Each case carries a non-contrast volume, a contrast-enhanced volume, a vessel
label mask (1=artery, 2=vein) and the analytic tube table the mask was
rasterized from. All randomness comes from a splitmix64 counter stream feeding
a Box-Muller transform; the exact stream is documented in docs/FORMATS.md so
the noise is reproducible bit for bit from the seed alone.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .volume import LabelMask, Volume, validate_geometry

MASK64 = np.uint64(0xFFFFFFFFFFFFFFFF)
GOLDEN = np.uint64(0x9E3779B97F4A7C15)

# derived-stream tags (ASCII "GEOM", "NCCT", "CTPA")
_TAG_GEOMETRY = 0x47454F4D
_TAG_NCCT = 0x4E434354
_TAG_CTPA = 0x43545041

# default HU palette: parenchyma, non-contrast lumen, contrast artery/vein
DEFAULT_PARENCHYMA_HU = -850.0
DEFAULT_VESSEL_HU_NCCT = 40.0
DEFAULT_ARTERY_HU_CTPA = 350.0
DEFAULT_VEIN_HU_CTPA = 250.0

BRANCH_RADIUS_SHRINK = 0.7


def mix64(z: int) -> int:
    z = z & 0xFFFFFFFFFFFFFFFF
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9 & 0xFFFFFFFFFFFFFFFF
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB & 0xFFFFFFFFFFFFFFFF
    return z ^ (z >> 31)


def splitmix_outputs(seed: int, start: int, count: int) -> np.ndarray:
    """Outputs k = start .. start+count-1 of the splitmix64 stream for seed."""
    k = np.arange(start, start + count, dtype=np.uint64)
    state = (np.uint64(seed & 0xFFFFFFFFFFFFFFFF) + (k + np.uint64(1)) * GOLDEN) & MASK64
    z = state
    z = ((z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)) & MASK64
    z = ((z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)) & MASK64
    return z ^ (z >> np.uint64(31))


def gaussian_stream(seed: int, count: int) -> np.ndarray:
    """First `count` standard normals of the documented Box-Muller stream."""
    pairs = (count + 1) // 2
    raw = splitmix_outputs(seed, 0, 2 * pairs)
    u = (raw >> np.uint64(11)).astype(np.float64) * 2.0**-53  # in [0, 1)
    u1, u2 = u[0::2], u[1::2]
    r = np.sqrt(-2.0 * np.log(1.0 - u1))  # 1-u1 in (0,1] avoids log(0)
    theta = 2.0 * np.pi * u2
    out = np.empty(2 * pairs, dtype=np.float64)
    out[0::2] = r * np.cos(theta)
    out[1::2] = r * np.sin(theta)
    return out[:count]


class ScalarStream:
    """Sequential splitmix64 stream for the geometry draws."""

    def __init__(self, seed: int):
        self._seed = seed & 0xFFFFFFFFFFFFFFFF
        self._k = 0

    def next_uniform(self) -> float:
        state = (self._seed + (self._k + 1) * 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF
        self._k += 1
        return (mix64(state) >> 11) * 2.0**-53

    def uniform(self, lo: float, hi: float) -> float:
        return lo + self.next_uniform() * (hi - lo)

    def randint(self, n: int) -> int:
        return min(n - 1, int(self.next_uniform() * n))


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int]
    spacing_mm: tuple[float, float, float]
    parenchyma_hu: float = DEFAULT_PARENCHYMA_HU
    vessel_hu_ncct: float = DEFAULT_VESSEL_HU_NCCT
    artery_hu_ctpa: float = DEFAULT_ARTERY_HU_CTPA
    vein_hu_ctpa: float = DEFAULT_VEIN_HU_CTPA
    noise_sigma_hu: float = 0.0
    tube_count: int = 14
    radius_range_mm: tuple[float, float] = (0.5, 2.2)
    seed: int = 0

    def validate(self) -> None:
        validate_geometry(self.dims, self.spacing_mm)
        rmin, rmax = self.radius_range_mm
        if not (0.0 < rmin <= rmax):
            raise ValueError(f"radius range must satisfy 0 < rmin <= rmax, got {self.radius_range_mm}")
        if rmin < max(self.spacing_mm):
            raise ValueError(
                f"rmin {rmin} mm is not expressible at spacing {self.spacing_mm} "
                f"(needs rmin >= {max(self.spacing_mm)})"
            )
        if self.noise_sigma_hu < 0.0:
            raise ValueError("noise_sigma_hu must be >= 0")
        if self.tube_count < 1:
            raise ValueError("tube_count must be >= 1")
        if not (self.artery_hu_ctpa > self.vessel_hu_ncct and self.vein_hu_ctpa > self.vessel_hu_ncct):
            raise ValueError("contrast enhancement must raise lumen HU above the NCCT lumen value")


@dataclass(frozen=True)
class Tube:
    """One constant-radius branch: a polyline of (x,y,z) points in mm."""

    polyline_mm: tuple[tuple[float, float, float], ...]
    radius_mm: float
    label: int  # 1=artery, 2=vein


@dataclass
class PhantomCase:
    ncct: Volume
    ctpa: Volume
    vessel_mask: LabelMask
    tube_table: list[Tube] = field(default_factory=list)


def _unit(v):
    n = math.sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2])
    return (v[0] / n, v[1] / n, v[2] / n)


def _perturbed(d, rng: ScalarStream, tilt: float):
    return _unit((
        d[0] + rng.uniform(-tilt, tilt),
        d[1] + rng.uniform(-tilt, tilt),
        d[2] + rng.uniform(-tilt, tilt),
    ))


def _grow_tubes(spec: PhantomSpec, rng: ScalarStream) -> list[Tube]:
    """Grow trees (trunk plus 0-2 children per branch, two child generations,
    radii shrinking by a fixed factor and clamped to rmin) until exactly
    tube_count branch records exist. Labels alternate artery/vein per tree."""
    extent = tuple(spec.dims[a] * spec.spacing_mm[a] for a in range(3))
    rmin, rmax = spec.radius_range_mm
    margin = min(rmax + 2.0 * max(spec.spacing_mm), 0.25 * min(extent))
    tubes: list[Tube] = []
    tree = 0
    while len(tubes) < spec.tube_count:
        label = 1 + (tree % 2)
        # reserve one record for a second tree so both labels occur
        budget = spec.tube_count - 1 if (tree == 0 and spec.tube_count >= 2) else spec.tube_count
        trunk_r = rng.uniform(rmin, rmax)
        start = (
            rng.uniform(margin, margin + 0.25 * extent[0]),
            rng.uniform(margin, extent[1] - margin),
            rng.uniform(margin, extent[2] - margin),
        )
        direction = _unit((1.0, rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5)))
        trunk_len = 0.7 * extent[0]
        seg = trunk_len / 3.0
        pts = [start]
        d = direction
        for _ in range(3):
            d = _perturbed(d, rng, 0.25)
            last = pts[-1]
            pts.append((last[0] + d[0] * seg, last[1] + d[1] * seg, last[2] + d[2] * seg))
        tubes.append(Tube(tuple(pts), trunk_r, label))

        # two generations of children off each parent branch tip
        parents = [(pts[-1], d, trunk_r, 1)]
        while parents and len(tubes) < budget:
            tip, pdir, pr, gen = parents.pop(0)
            if gen > 2:
                continue
            for _ in range(rng.randint(3)):  # 0-2 children
                if len(tubes) >= budget:
                    break
                cdir = _perturbed(pdir, rng, 0.9)
                cr = max(rmin, BRANCH_RADIUS_SHRINK * pr)
                clen = 0.5 * trunk_len * (0.8 ** gen)
                cend = (tip[0] + cdir[0] * clen, tip[1] + cdir[1] * clen, tip[2] + cdir[2] * clen)
                tubes.append(Tube((tip, cend), cr, label))
                parents.append((cend, cdir, cr, gen + 1))
        tree += 1
    return tubes


def _segment_distances(points_mm: np.ndarray, a, b) -> np.ndarray:
    """Distance from each point to the segment a-b (all in mm)."""
    a = np.asarray(a, dtype=np.float64)
    ab = np.asarray(b, dtype=np.float64) - a
    denom = float(ab @ ab)
    diff = points_mm - a
    if denom == 0.0:
        return np.sqrt(np.einsum("ij,ij->i", diff, diff))
    t = np.clip(diff @ ab / denom, 0.0, 1.0)
    closest = a + t[:, None] * ab
    d = points_mm - closest
    return np.sqrt(np.einsum("ij,ij->i", d, d))


def rasterize_tubes(tubes, dims, spacing_mm) -> np.ndarray:
    """Label volume from the tube table: a voxel belongs to a tube when its
    center lies within the tube radius of the polyline. Tubes are painted in
    table order; the last tube covering a voxel decides the label."""
    labels = np.zeros(dims, dtype=np.uint8)
    sx, sy, sz = spacing_mm
    for tube in tubes:
        pts = tube.polyline_mm
        for a, b in zip(pts[:-1], pts[1:]):
            lo = [min(a[i], b[i]) - tube.radius_mm for i in range(3)]
            hi = [max(a[i], b[i]) + tube.radius_mm for i in range(3)]
            i0 = [max(0, int(math.floor(lo[i] / spacing_mm[i]))) for i in range(3)]
            i1 = [min(dims[i] - 1, int(math.ceil(hi[i] / spacing_mm[i]))) for i in range(3)]
            if any(i0[i] > i1[i] for i in range(3)):
                continue
            xs = np.arange(i0[0], i1[0] + 1) * sx
            ys = np.arange(i0[1], i1[1] + 1) * sy
            zs = np.arange(i0[2], i1[2] + 1) * sz
            gx, gy, gz = np.meshgrid(xs, ys, zs, indexing="ij")
            pts_mm = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
            dist = _segment_distances(pts_mm, a, b)
            inside = (dist <= tube.radius_mm).reshape(gx.shape)
            sub = labels[i0[0] : i1[0] + 1, i0[1] : i1[1] + 1, i0[2] : i1[2] + 1]
            sub[inside] = tube.label
    return labels


def generate_case(spec: PhantomSpec) -> PhantomCase:
    """Deterministic paired phantom: identical spec gives a bit-identical case."""
    spec.validate()
    rng = ScalarStream(mix64(spec.seed ^ _TAG_GEOMETRY))
    tubes = _grow_tubes(spec, rng)
    labels = rasterize_tubes(tubes, spec.dims, spec.spacing_mm)

    ncct = np.full(spec.dims, spec.parenchyma_hu, dtype=np.float32)
    ctpa = np.full(spec.dims, spec.parenchyma_hu, dtype=np.float32)
    ncct[labels > 0] = spec.vessel_hu_ncct
    ctpa[labels == 1] = spec.artery_hu_ctpa
    ctpa[labels == 2] = spec.vein_hu_ctpa

    if spec.noise_sigma_hu > 0.0:
        n = int(np.prod(spec.dims))
        noise_n = gaussian_stream(mix64(spec.seed ^ _TAG_NCCT), n)
        noise_c = gaussian_stream(mix64(spec.seed ^ _TAG_CTPA), n)
        ncct = (ncct + spec.noise_sigma_hu * noise_n.reshape(spec.dims, order="F")).astype(np.float32)
        ctpa = (ctpa + spec.noise_sigma_hu * noise_c.reshape(spec.dims, order="F")).astype(np.float32)

    geom = dict(spacing_mm=tuple(float(s) for s in spec.spacing_mm))
    return PhantomCase(
        ncct=Volume(ncct, **geom),
        ctpa=Volume(ctpa, **geom),
        vessel_mask=LabelMask(labels, **geom),
        tube_table=tubes,
    )


def generate_cohort(base: PhantomSpec, n_cases: int, seed_stride: int = 1) -> list[PhantomCase]:
    """Case k uses seed base.seed + k*seed_stride; cases are independent."""
    if n_cases < 1:
        raise ValueError("n_cases must be >= 1")
    cases = []
    for k in range(n_cases):
        spec_k = PhantomSpec(
            dims=base.dims,
            spacing_mm=base.spacing_mm,
            parenchyma_hu=base.parenchyma_hu,
            vessel_hu_ncct=base.vessel_hu_ncct,
            artery_hu_ctpa=base.artery_hu_ctpa,
            vein_hu_ctpa=base.vein_hu_ctpa,
            noise_sigma_hu=base.noise_sigma_hu,
            tube_count=base.tube_count,
            radius_range_mm=base.radius_range_mm,
            seed=(base.seed + k * seed_stride) & 0xFFFFFFFFFFFFFFFF,
        )
        cases.append(generate_case(spec_k))
    return cases


def write_cohort_manifest(path, entries) -> None:
    """entries: list of dicts with keys id, ncct, ctpa, vessel_mask. Paths are
    stored relative to the manifest so cohorts relocate (and hash) cleanly."""
    base = os.path.dirname(os.path.abspath(path))
    doc = {"cases": [
        {
            "id": e["id"],
            "ncct": os.path.relpath(str(e["ncct"]), base),
            "ctpa": os.path.relpath(str(e["ctpa"]), base),
            "vessel_mask": os.path.relpath(str(e["vessel_mask"]), base),
        }
        for e in entries
    ]}
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=2)
        f.write("\n")


def read_cohort_manifest(path) -> list[dict]:
    """Cases with the path fields resolved against the manifest location."""
    base = os.path.dirname(os.path.abspath(path))
    with open(path, encoding="utf-8") as f:
        doc = json.load(f)
    cases = []
    for entry in doc["cases"]:
        resolved = dict(entry)
        for key in ("ncct", "ctpa", "vessel_mask"):
            resolved[key] = os.path.join(base, entry[key])
        cases.append(resolved)
    return cases
