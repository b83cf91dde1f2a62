"""Patch sampling over phantom cohorts.

Stage 1 draws patch origins uniformly over the volume interior. Stage 2
restricts centers to voxels of the small-caliber stratum (label 1 in the
caliber map), so every stage-2 patch carries a small vessel at its center.
Sampling is a pure function of the seed; the two image domains are drawn
independently, mirroring unpaired training.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .vvol import read_vvol

SMALL_LABEL = 1


@dataclass
class TrainingCase:
    case_id: str
    ncct: np.ndarray
    ctpa: np.ndarray
    csa: np.ndarray | None  # caliber map, present when stage-2 sampling is wanted


def load_cases(manifest_path) -> list[TrainingCase]:
    """Cohort manifest with optional per-case "csa_map" entries; paths are
    relative to the manifest file."""
    base = os.path.dirname(os.path.abspath(manifest_path))
    with open(manifest_path, encoding="utf-8") as f:
        doc = json.load(f)
    cases = []
    for entry in doc["cases"]:
        ncct, _ = read_vvol(os.path.join(base, entry["ncct"]))
        ctpa, _ = read_vvol(os.path.join(base, entry["ctpa"]))
        csa = None
        if entry.get("csa_map"):
            csa, _ = read_vvol(os.path.join(base, entry["csa_map"]))
        cases.append(TrainingCase(entry["id"], ncct, ctpa, csa))
    if not cases:
        raise ValueError("manifest lists no cases")
    return cases


def _small_centers(case: TrainingCase, patch: int) -> np.ndarray:
    """Small-stratum voxels that admit an in-bounds patch centered on them."""
    if case.csa is None:
        raise ValueError(f"case {case.case_id} has no caliber map for stage-2 sampling")
    centers = np.argwhere(case.csa == SMALL_LABEL)
    if centers.size == 0:
        return centers.reshape(0, 3)
    half = patch // 2
    dims = np.asarray(case.csa.shape)
    ok = np.all((centers - half >= 0) & (centers - half + patch <= dims), axis=1)
    return centers[ok]


def sample_patch_origins(cases, stage: int, patch: int, count: int, seed: int):
    """Deterministic list of (case_index, (ox, oy, oz)) draws."""
    rng = np.random.default_rng(seed)
    picks = []
    if stage == 1:
        for _ in range(count):
            ci = int(rng.integers(len(cases)))
            dims = cases[ci].ncct.shape
            origin = tuple(int(rng.integers(0, dims[a] - patch + 1)) for a in range(3))
            picks.append((ci, origin))
        return picks
    if stage != 2:
        raise ValueError(f"stage must be 1 or 2, got {stage}")
    centers_per_case = [_small_centers(c, patch) for c in cases]
    eligible = [i for i, c in enumerate(centers_per_case) if len(c)]
    if not eligible:
        raise ValueError("no small-caliber voxels available for stage-2 sampling")
    half = patch // 2
    for _ in range(count):
        ci = eligible[int(rng.integers(len(eligible)))]
        centers = centers_per_case[ci]
        center = centers[int(rng.integers(len(centers)))]
        origin = tuple(int(v) - half for v in center)
        picks.append((ci, origin))
    return picks


def cut_patch(volume: np.ndarray, origin, patch: int) -> np.ndarray:
    ox, oy, oz = origin
    return volume[ox : ox + patch, oy : oy + patch, oz : oz + patch]


def sample_training_patches(cases, stage: int, patch: int, count: int, seed: int):
    """Unpaired (ncct_patch, ctpa_patch) pairs; the two sides use independent
    draws from per-domain substreams."""
    picks_x = sample_patch_origins(cases, stage, patch, count, seed)
    picks_y = sample_patch_origins(cases, stage, patch, count, seed + 0x5EED)
    pairs = []
    for (cx, ox), (cy, oy) in zip(picks_x, picks_y):
        pairs.append((cut_patch(cases[cx].ncct, ox, patch),
                      cut_patch(cases[cy].ctpa, oy, patch)))
    return pairs
