"""Skeletonization, distance transforms, and cross-sectional-area stratification.

Vessel voxels are stratified into three caliber classes from the medial-axis
radius: the cross-sectional area estimate at a skeleton point is pi*r^2 with r
the euclidean distance (mm) from that point to the nearest background voxel.
Class boundaries: small below 5 mm^2, large above 10 mm^2, medium between
(values exactly on a boundary count as medium).
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass
from enum import IntEnum

import numpy as np
from scipy import ndimage

from .volume import LabelMask, Volume

CSA_SMALL_MAX_MM2 = 5.0
CSA_LARGE_MIN_MM2 = 10.0


class CsaClass(IntEnum):
    Small = 1
    Medium = 2
    Large = 3


def classify_area(csa_mm2: float, small_max: float = CSA_SMALL_MAX_MM2,
                  large_min: float = CSA_LARGE_MIN_MM2) -> CsaClass:
    if csa_mm2 < small_max:
        return CsaClass.Small
    if csa_mm2 > large_min:
        return CsaClass.Large
    return CsaClass.Medium


@dataclass
class Skeleton:
    """Centerline voxels with per-point medial radius in mm."""

    points: np.ndarray      # (n, 3) int32 voxel indices
    radius_mm: np.ndarray   # (n,) float64
    source_dims: tuple[int, int, int]
    source_spacing_mm: tuple[float, float, float]

    def __len__(self) -> int:
        return int(self.points.shape[0])

    def as_bool_volume(self) -> np.ndarray:
        vol = np.zeros(self.source_dims, dtype=bool)
        if len(self):
            vol[self.points[:, 0], self.points[:, 1], self.points[:, 2]] = True
        return vol


def _foreground(mask: LabelMask, foreground_label: int | None) -> np.ndarray:
    if foreground_label is None:
        return mask.labels != 0
    return mask.labels == foreground_label


def volume_diagonal_mm(dims, spacing_mm) -> float:
    return math.sqrt(sum((dims[a] * spacing_mm[a]) ** 2 for a in range(3)))


def distance_field(fg: np.ndarray, spacing_mm) -> np.ndarray:
    """Exact anisotropic EDT (mm) from foreground voxel centers to the nearest
    background voxel center; background maps to 0. With no background at all,
    every foreground voxel gets the volume-diagonal sentinel."""
    if fg.all():
        return np.full(fg.shape, volume_diagonal_mm(fg.shape, spacing_mm), dtype=np.float64)
    return ndimage.distance_transform_edt(fg, sampling=spacing_mm)


def euclidean_distance_transform(mask: LabelMask, foreground_label: int | None = None) -> Volume:
    fg = _foreground(mask, foreground_label)
    if not fg.any():
        raise ValueError("empty foreground: nothing to measure distances from")
    dist = distance_field(fg, mask.spacing_mm)
    return Volume(dist.astype(np.float32), mask.spacing_mm, mask.origin_mm)


# ---------------------------------------------------------------------------
# 3D simple-point machinery for topology-preserving thinning.
#
# Positions inside the 3x3x3 neighborhood are flat-indexed p = a + 3b + 9c for
# offset (a-1, b-1, c-1); the center is p = 13. A foreground voxel is simple
# (deletable without topology change) when the 26-connected foreground of the
# punctured neighborhood forms one component and exactly one 6-connected
# background component in the 18-neighborhood touches a face neighbor.
# ---------------------------------------------------------------------------

def _build_neighborhood_tables():
    offsets = [(p % 3 - 1, (p // 3) % 3 - 1, p // 9 - 1) for p in range(27)]
    adj26 = []
    for p in range(27):
        row = []
        for q in range(27):
            if q in (p, 13) or p == 13:
                continue
            d = max(abs(offsets[p][i] - offsets[q][i]) for i in range(3))
            if d == 1:
                row.append(q)
        adj26.append(tuple(row))
    n18 = tuple(p for p in range(27)
                if p != 13 and sum(1 for i in range(3) if offsets[p][i] != 0) <= 2)
    in18 = [p in n18 for p in range(27)]
    adj6_18 = []
    for p in range(27):
        row = []
        if in18[p]:
            for q in n18:
                if q != p and sum(abs(offsets[p][i] - offsets[q][i]) for i in range(3)) == 1:
                    row.append(q)
        adj6_18.append(tuple(row))
    faces = frozenset(p for p in range(27)
                      if sum(1 for i in range(3) if offsets[p][i] != 0) == 1)
    neigh26_offsets = tuple(offsets[p] for p in range(27) if p != 13)
    return tuple(adj26), n18, tuple(adj6_18), faces, tuple(offsets), neigh26_offsets


_ADJ26, _N18, _ADJ6_18, _FACES, _OFFSETS, _NEIGH26 = _build_neighborhood_tables()


def _is_simple(nb: list) -> bool:
    """nb: 27 neighborhood booleans (p = a + 3b + 9c); nb[13] is the voxel."""
    fg_nodes = [p for p in range(27) if p != 13 and nb[p]]
    if not fg_nodes:
        return False  # isolated voxel: deletion removes a component
    # one 26-connected foreground component in the punctured neighborhood
    seen = {fg_nodes[0]}
    stack = [fg_nodes[0]]
    while stack:
        p = stack.pop()
        for q in _ADJ26[p]:
            if nb[q] and q not in seen:
                seen.add(q)
                stack.append(q)
    if len(seen) != len(fg_nodes):
        return False
    # one 6-connected background component in N18 touching a face neighbor
    bg18 = [p for p in _N18 if not nb[p]]
    if not bg18:
        return False
    unvisited = set(bg18)
    touching = 0
    while unvisited:
        start = unvisited.pop()
        comp_touches = start in _FACES
        stack = [start]
        while stack:
            p = stack.pop()
            for q in _ADJ6_18[p]:
                if q in unvisited:
                    unvisited.discard(q)
                    comp_touches = comp_touches or q in _FACES
                    stack.append(q)
        if comp_touches:
            touching += 1
            if touching > 1:
                return False
    return touching == 1


def skeletonize(mask: LabelMask, foreground_label: int | None = None) -> Skeleton:
    """Medial-axis thinning: delete simple points in ascending EDT order (ties
    by x-fastest linear index), never deleting endpoints (<= 1 neighbor). Each
    surviving point is annotated with its EDT radius in mm."""
    fg = _foreground(mask, foreground_label)
    nx, ny, nz = fg.shape
    if not fg.any():
        return Skeleton(np.empty((0, 3), np.int32), np.empty(0), tuple(fg.shape), tuple(mask.spacing_mm))
    edt = distance_field(fg, mask.spacing_mm)

    padded = np.zeros((nx + 2, ny + 2, nz + 2), dtype=bool)
    padded[1:-1, 1:-1, 1:-1] = fg

    coords = np.argwhere(fg)
    order_key = coords[:, 0] + nx * coords[:, 1] + nx * ny * coords[:, 2]
    heap = [
        (float(edt[x, y, z]), int(k), int(x), int(y), int(z))
        for (x, y, z), k in zip(coords.tolist(), order_key.tolist())
    ]
    heapq.heapify(heap)

    while heap:
        _, _, x, y, z = heapq.heappop(heap)
        if not padded[x + 1, y + 1, z + 1]:
            continue
        nb = padded[x : x + 3, y : y + 3, z : z + 3].ravel(order="F").tolist()
        n_neighbors = sum(nb) - 1
        if n_neighbors <= 1:
            continue  # endpoint: keep so centerlines do not erode to points
        if not _is_simple(nb):
            continue
        padded[x + 1, y + 1, z + 1] = False
        for dx, dy, dz in _NEIGH26:
            qx, qy, qz = x + dx, y + dy, z + dz
            if 0 <= qx < nx and 0 <= qy < ny and 0 <= qz < nz and padded[qx + 1, qy + 1, qz + 1]:
                heapq.heappush(
                    heap,
                    (float(edt[qx, qy, qz]), int(qx + nx * qy + nx * ny * qz), qx, qy, qz),
                )

    kept = np.argwhere(padded[1:-1, 1:-1, 1:-1])
    # deterministic point order: ascending x-fastest linear index
    lin = kept[:, 0] + nx * kept[:, 1] + nx * ny * kept[:, 2]
    kept = kept[np.argsort(lin, kind="stable")]
    radii = edt[kept[:, 0], kept[:, 1], kept[:, 2]]
    return Skeleton(kept.astype(np.int32), radii.astype(np.float64),
                    tuple(fg.shape), tuple(mask.spacing_mm))


def classify_csa(mask: LabelMask, foreground_label: int | None = None,
                 small_max_mm2: float = CSA_SMALL_MAX_MM2,
                 large_min_mm2: float = CSA_LARGE_MIN_MM2) -> LabelMask:
    """Per-voxel caliber map {0=none, 1=small, 2=medium, 3=large}: every
    foreground voxel takes the class of its nearest skeleton point."""
    fg = _foreground(mask, foreground_label)
    out = np.zeros(mask.dims, dtype=np.uint8)
    if not fg.any():
        return LabelMask(out, mask.spacing_mm, mask.origin_mm)
    skel = skeletonize(mask, foreground_label)
    csa = np.pi * skel.radius_mm**2
    point_class = np.where(csa < small_max_mm2, np.uint8(CsaClass.Small),
                           np.where(csa > large_min_mm2, np.uint8(CsaClass.Large),
                                    np.uint8(CsaClass.Medium)))
    class_vol = np.zeros(mask.dims, dtype=np.uint8)
    class_vol[skel.points[:, 0], skel.points[:, 1], skel.points[:, 2]] = point_class
    _, indices = ndimage.distance_transform_edt(
        ~skel.as_bool_volume(), sampling=mask.spacing_mm, return_indices=True
    )
    nearest = class_vol[indices[0], indices[1], indices[2]]
    out[fg] = nearest[fg]
    return LabelMask(out, mask.spacing_mm, mask.origin_mm)


def stratified_volume(mask: LabelMask, csa_map: LabelMask,
                      foreground_label: int | None = None) -> tuple[float, float, float]:
    """Physical volume (mm^3) of the mask foreground per caliber class."""
    if mask.dims != csa_map.dims or tuple(mask.spacing_mm) != tuple(csa_map.spacing_mm):
        raise ValueError(
            f"geometry mismatch: dims {mask.dims} vs {csa_map.dims}, "
            f"spacing {mask.spacing_mm} vs {csa_map.spacing_mm}"
        )
    fg = _foreground(mask, foreground_label)
    voxel_mm3 = float(np.prod(np.asarray(mask.spacing_mm, dtype=np.float64)))
    return tuple(
        float(np.count_nonzero(fg & (csa_map.labels == cls))) * voxel_mm3
        for cls in (CsaClass.Small, CsaClass.Medium, CsaClass.Large)
    )
