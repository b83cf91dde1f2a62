"""Two-stage synthesis engine: global pass, caliber-routed refinement, fusion.

Stage 1 slides a window over the whole volume and fuses overlapping backend
outputs with center-peaked Gaussian weights. Stage 2 re-runs only windows
whose central region touches the small-caliber stratum, again on patches cut
from the original input, and blends the refined aggregate over the stage-1
result with alpha = min(1, summed weight): refinement dominates at window
centers, seams stay continuous, untouched regions keep the stage-1 values.

Accumulation always happens in ascending tile order no matter how many
threads evaluate backends, so outputs are bit-reproducible for a fixed
configuration (VESSELFORGE_THREADS caps backend fan-out).
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Protocol

import numpy as np

from .geometry import CsaClass, classify_csa
from .psp import ProcessBackend
from .volume import LabelMask, Volume, extract_patch, paste_into

THREADS_ENV = "VESSELFORGE_THREADS"

CONFIG_KEYS = (
    "g1_patch", "g2_patch", "overlap", "gaussian_sigma_frac",
    "central_frac", "csa_small_mm2", "g2_blend_floor",
)

# default per-label HU increments for the analytic backend, matching the
# phantom palette (artery 350-40, vein 250-40)
DEFAULT_ANALYTIC_DELTAS = {1: 310.0, 2: 210.0}


class BackendError(RuntimeError):
    """A backend failed or broke its output contract for some patch."""


@dataclass(frozen=True)
class CascadeConfig:
    g1_patch: tuple[int, int, int] = (96, 96, 96)
    g2_patch: tuple[int, int, int] = (64, 64, 64)
    overlap: float = 0.5
    gaussian_sigma_frac: float = 0.125
    central_frac: float = 0.5
    csa_small_mm2: float = 5.0
    g2_blend_floor: float = 0.0

    def validate(self) -> None:
        for name, patch in (("g1_patch", self.g1_patch), ("g2_patch", self.g2_patch)):
            if len(patch) != 3 or any(int(p) < 1 for p in patch):
                raise ValueError(f"{name} must be three sizes >= 1, got {patch}")
        if any(self.g2_patch[a] > self.g1_patch[a] for a in range(3)):
            raise ValueError(
                f"g2_patch {self.g2_patch} must not exceed g1_patch {self.g1_patch}"
            )
        if not (0.0 <= self.overlap < 1.0):
            raise ValueError(f"overlap must be in [0, 1), got {self.overlap}")
        if not (self.gaussian_sigma_frac > 0.0):
            raise ValueError("gaussian_sigma_frac must be > 0")
        if not (0.0 < self.central_frac <= 1.0):
            raise ValueError(f"central_frac must be in (0, 1], got {self.central_frac}")
        if self.csa_small_mm2 < 0.0 or self.g2_blend_floor < 0.0:
            raise ValueError("csa_small_mm2 and g2_blend_floor must be >= 0")


def config_from_dict(doc: dict) -> CascadeConfig:
    unknown = set(doc) - set(CONFIG_KEYS)
    if unknown:
        raise ValueError(f"unknown cascade config keys: {sorted(unknown)}")
    kwargs = {}
    for key in ("g1_patch", "g2_patch"):
        if key in doc:
            kwargs[key] = tuple(int(v) for v in doc[key])
    for key in ("overlap", "gaussian_sigma_frac", "central_frac", "csa_small_mm2", "g2_blend_floor"):
        if key in doc:
            kwargs[key] = float(doc[key])
    cfg = CascadeConfig(**kwargs)
    cfg.validate()
    return cfg


def load_config(path) -> CascadeConfig:
    with open(path, encoding="utf-8") as f:
        return config_from_dict(json.load(f))


class SynthBackend(Protocol):
    def apply(self, patch: Volume, stage: int) -> Volume: ...


class IdentityBackend:
    def apply(self, patch: Volume, stage: int) -> Volume:
        return patch


class AnalyticBackend:
    """Adds a per-label HU increment inside the vessel mask, emulating a
    perfectly calibrated enhancer; voxels outside the mask pass through."""

    def __init__(self, mask: LabelMask, deltas: dict[int, float] | None = None):
        self.mask = mask
        self.deltas = dict(DEFAULT_ANALYTIC_DELTAS if deltas is None else deltas)

    def _window_origin(self, patch: Volume) -> tuple[int, int, int]:
        origin = []
        for a in range(3):
            rel = (patch.origin_mm[a] - self.mask.origin_mm[a]) / self.mask.spacing_mm[a]
            idx = round(rel)
            if abs(rel - idx) > 1e-6:
                raise BackendError(
                    f"patch origin {patch.origin_mm} is not on the mask voxel grid"
                )
            origin.append(int(idx))
        return tuple(origin)

    def apply(self, patch: Volume, stage: int) -> Volume:
        ix, iy, iz = self._window_origin(patch)
        px, py, pz = patch.dims
        if ix < 0 or iy < 0 or iz < 0 or ix + px > self.mask.dims[0] \
                or iy + py > self.mask.dims[1] or iz + pz > self.mask.dims[2]:
            raise BackendError(f"patch window at {(ix, iy, iz)} falls outside the mask")
        window = self.mask.labels[ix : ix + px, iy : iy + py, iz : iz + pz]
        delta = np.zeros(patch.dims, dtype=np.float32)
        for label, hu in self.deltas.items():
            delta[window == label] = np.float32(hu)
        return Volume(patch.values + delta, patch.spacing_mm, patch.origin_mm)


def builtin_backend(kind: str, mask: LabelMask | None = None,
                    deltas: dict[int, float] | None = None) -> SynthBackend:
    if kind == "identity":
        return IdentityBackend()
    if kind == "analytic":
        if mask is None:
            raise ValueError("analytic backend requires a vessel mask")
        return AnalyticBackend(mask, deltas)
    raise ValueError(f"unknown builtin backend {kind!r}")


@dataclass(frozen=True)
class RoutingDecision:
    patch_origin: tuple[int, int, int]
    routed: bool
    small_voxels_in_center: int


def gaussian_weights(size, sigma_frac: float) -> np.ndarray:
    """Separable center-peaked weights, float64, strictly positive."""
    axes = []
    for p in size:
        center = (p - 1) / 2.0
        sigma = p * sigma_frac
        d = np.arange(p, dtype=np.float64) - center
        axes.append(np.exp(-(d * d) / (2.0 * sigma * sigma)))
    w = axes[0][:, None, None] * axes[1][None, :, None] * axes[2][None, None, :]
    return np.maximum(w, np.finfo(np.float64).tiny)


def gaussian_weight_map(size, sigma_frac: float) -> Volume:
    if any(int(p) < 1 for p in size):
        raise ValueError(f"patch size must be >= 1 per axis, got {tuple(size)}")
    w = gaussian_weights(size, sigma_frac).astype(np.float32)
    return Volume(np.maximum(w, np.finfo(np.float32).tiny))


def tile_origins(dims, patch, overlap: float) -> list[tuple[int, int, int]]:
    """Sliding-window origins covering every voxel, x varying fastest. The
    final origin per axis is clamped flush with the far boundary."""
    per_axis = []
    for a, name in enumerate("xyz"):
        if patch[a] > dims[a]:
            raise ValueError(
                f"patch {tuple(patch)} larger than volume {tuple(dims)} on axis {name}"
            )
        stride = max(1, int(patch[a] * (1.0 - overlap)))
        last = dims[a] - patch[a]
        origins = list(range(0, last + 1, stride))
        if origins[-1] != last:
            origins.append(last)
        per_axis.append(origins)
    return [
        (x, y, z)
        for z in per_axis[2]
        for y in per_axis[1]
        for x in per_axis[0]
    ]


def central_box(origin, patch, central_frac: float):
    """Axis-aligned central sub-box: edge ceil(patch*frac), centered."""
    lo, hi = [], []
    for a in range(3):
        edge = int(np.ceil(patch[a] * central_frac))
        start = origin[a] + (patch[a] - edge) // 2
        lo.append(start)
        hi.append(start + edge)
    return tuple(lo), tuple(hi)


def route_patch(csa_map: LabelMask, origin, patch, central_frac: float) -> RoutingDecision:
    for a, name in enumerate("xyz"):
        if origin[a] < 0 or origin[a] + patch[a] > csa_map.dims[a]:
            raise ValueError(f"routing window out of bounds on axis {name}")
    lo, hi = central_box(origin, patch, central_frac)
    region = csa_map.labels[lo[0] : hi[0], lo[1] : hi[1], lo[2] : hi[2]]
    count = int(np.count_nonzero(region == int(CsaClass.Small)))
    return RoutingDecision(tuple(origin), count >= 1, count)


def thread_count() -> int:
    raw = os.environ.get(THREADS_ENV, "")
    try:
        n = int(raw)
    except ValueError:
        return 1
    return max(1, n)


def _apply_backend(backend: SynthBackend, patch: Volume, stage: int, index: int, origin) -> Volume:
    try:
        out = backend.apply(patch, stage)
    except BackendError:
        raise
    except Exception as e:
        raise BackendError(
            f"stage {stage} backend failed at patch {index} origin {tuple(origin)}: {e}"
        ) from e
    if out.dims != patch.dims:
        raise BackendError(
            f"stage {stage} patch {index}: backend returned dims {out.dims}, expected {patch.dims}"
        )
    if not np.isfinite(out.values).all():
        raise BackendError(f"stage {stage} patch {index}: backend returned non-finite values")
    return out


def _accumulate_windows(source: Volume, backend: SynthBackend, stage: int, origins,
                        patch, sigma_frac: float):
    """Run the backend over the windows and fuse with Gaussian weights.

    Backend calls may fan out over threads, but accumulation follows the
    origin order exactly, keeping the result independent of thread count.
    """
    weights = gaussian_weights(patch, sigma_frac)
    num = np.zeros(source.dims, dtype=np.float64)
    den = np.zeros(source.dims, dtype=np.float64)
    workers = thread_count()

    def produce(item):
        index, origin = item
        cut = extract_patch(source, origin, patch)
        return _apply_backend(backend, cut, stage, index, origin)

    items = list(enumerate(origins))
    if workers <= 1:
        outputs = map(produce, items)
        for (index, origin), out in zip(items, outputs):
            paste_into(num, den, out.values.astype(np.float64), weights, origin)
    else:
        chunk = max(1, 4 * workers)
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for start in range(0, len(items), chunk):
                batch = items[start : start + chunk]
                for (index, origin), out in zip(batch, pool.map(produce, batch)):
                    paste_into(num, den, out.values.astype(np.float64), weights, origin)
    return num, den


def run_stage(source: Volume, backend: SynthBackend, stage: int, patch,
              overlap: float, sigma_frac: float) -> Volume:
    """Sliding-window pass: weighted average of backend outputs everywhere."""
    origins = tile_origins(source.dims, patch, overlap)
    num, den = _accumulate_windows(source, backend, stage, origins, patch, sigma_frac)
    # coverage guarantees den > 0 at every voxel
    fused = num / den
    return Volume(fused.astype(np.float32), source.spacing_mm, source.origin_mm)


def fuse_refined_over_global(global_out: Volume, source: Volume, backend: SynthBackend,
                             routed_origins, cfg: CascadeConfig) -> Volume:
    """Blend stage-2 outputs over the stage-1 result at routed windows only.

    Stage-2 patches are cut from the original source volume. Where the summed
    stage-2 weight w is positive, the result is alpha*refined + (1-alpha)*
    global with alpha = min(1, w); elsewhere the stage-1 value is untouched.
    Voxels with w <= g2_blend_floor are treated as uncovered.
    """
    routed = list(routed_origins)
    if not routed:
        return global_out.copy()
    num, den = _accumulate_windows(
        source, backend, 2, routed, cfg.g2_patch, cfg.gaussian_sigma_frac
    )
    covered = den > cfg.g2_blend_floor
    refined = np.where(covered, num / np.where(covered, den, 1.0), 0.0)
    alpha = np.where(covered, np.minimum(1.0, den), 0.0)
    fused = alpha * refined + (1.0 - alpha) * global_out.values.astype(np.float64)
    return Volume(fused.astype(np.float32), global_out.spacing_mm, global_out.origin_mm)


def run_cascade(ncct: Volume, vessel_mask: LabelMask, backend1: SynthBackend,
                backend2: SynthBackend, cfg: CascadeConfig | None = None) -> Volume:
    """Full pipeline: global stage, caliber routing, refined fusion."""
    cfg = cfg or CascadeConfig()
    cfg.validate()
    if ncct.dims != vessel_mask.dims or tuple(ncct.spacing_mm) != tuple(vessel_mask.spacing_mm):
        raise ValueError(
            f"geometry mismatch: volume {ncct.dims}/{ncct.spacing_mm} vs "
            f"mask {vessel_mask.dims}/{vessel_mask.spacing_mm}"
        )
    csa_map = classify_csa(vessel_mask, None, small_max_mm2=cfg.csa_small_mm2)
    global_out = run_stage(ncct, backend1, 1, cfg.g1_patch, cfg.overlap, cfg.gaussian_sigma_frac)
    routed = [
        origin
        for origin in tile_origins(ncct.dims, cfg.g2_patch, cfg.overlap)
        if route_patch(csa_map, origin, cfg.g2_patch, cfg.central_frac).routed
    ]
    return fuse_refined_over_global(global_out, ncct, backend2, routed, cfg)


def process_backend(command: list[str]) -> ProcessBackend:
    """Backend hosted by a child process speaking PSP/1 on stdin/stdout."""
    return ProcessBackend(command)
