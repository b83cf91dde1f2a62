"""Image-similarity and segmentation metrics, optionally region-restricted.

MAE is the mean absolute voxel difference. PSNR is 10*log10(MAX^2/MSE) with
inputs clipped to the 12-bit HU window [-1024, 3071] before the MSE (a fixed
dynamic range keeps values comparable across cases); zero MSE reports +inf.
SSIM is evaluated per voxel over a cubic uniform window (clipped at borders,
population statistics) and averaged over the selection. Dice, clDice,
clPrecision and clRecall compare label masks; the centerline family uses the
medial-axis skeletons from the geometry module.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .geometry import skeletonize
from .volume import LabelMask, Volume

HU_CLIP_LO = -1024.0
HU_CLIP_HI = 3071.0
DEFAULT_MAX_VALUE = 4095.0

REGION_ARTERY = "Artery"
REGION_VEIN = "Vein"
REGION_AVERAGE = "Average"


@dataclass(frozen=True)
class SsimParams:
    k1: float = 0.01
    k2: float = 0.03
    dynamic_range: float = DEFAULT_MAX_VALUE
    window_edge: int = 7

    @property
    def c1(self) -> float:
        return (self.k1 * self.dynamic_range) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.dynamic_range) ** 2

    def validate(self) -> None:
        if self.window_edge < 3 or self.window_edge % 2 == 0:
            raise ValueError(f"window_edge must be odd and >= 3, got {self.window_edge}")
        if not (self.dynamic_range > 0):
            raise ValueError("dynamic_range must be > 0")


@dataclass(frozen=True)
class SimilarityRecord:
    region: str
    mae_hu: float
    psnr_db: float
    ssim: float


@dataclass(frozen=True)
class SegRecord:
    region: str
    dice: float
    cl_dice: float
    cl_precision: float
    cl_recall: float


def _check_pair(a: Volume, b: Volume) -> None:
    if a.dims != b.dims or tuple(map(float, a.spacing_mm)) != tuple(map(float, b.spacing_mm)):
        raise ValueError(
            f"geometry mismatch: dims {a.dims} vs {b.dims}, spacing "
            f"{a.spacing_mm} vs {b.spacing_mm}"
        )


def _selection(dims, mask: LabelMask | None, label: int | None) -> np.ndarray:
    if mask is None:
        return np.ones(dims, dtype=bool)
    if mask.dims != tuple(dims):
        raise ValueError(f"mask dims {mask.dims} do not match volume dims {tuple(dims)}")
    sel = (mask.labels != 0) if label is None else (mask.labels == label)
    if not sel.any():
        raise ValueError("empty selection: no voxels match the mask/label")
    return sel


def mae(a: Volume, b: Volume, mask: LabelMask | None = None, label: int | None = None) -> float:
    _check_pair(a, b)
    sel = _selection(a.dims, mask, label)
    diff = a.values.astype(np.float64) - b.values.astype(np.float64)
    return float(np.abs(diff[sel]).mean())


def psnr(a: Volume, b: Volume, mask: LabelMask | None = None, label: int | None = None,
         max_value: float = DEFAULT_MAX_VALUE) -> float:
    if not (max_value > 0):
        raise ValueError("max_value must be > 0")
    _check_pair(a, b)
    sel = _selection(a.dims, mask, label)
    av = np.clip(a.values[sel].astype(np.float64), HU_CLIP_LO, HU_CLIP_HI)
    bv = np.clip(b.values[sel].astype(np.float64), HU_CLIP_LO, HU_CLIP_HI)
    mse = float(((av - bv) ** 2).mean())
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(max_value**2 / mse)


def _box_sums(arr: np.ndarray, edge: int) -> np.ndarray:
    """Per-voxel sum over the cubic window of the given edge, clipped at
    borders, via padded cumulative sums."""
    h = edge // 2
    c = arr.astype(np.float64)
    for ax in range(3):
        c = np.cumsum(c, axis=ax)
        pad = list(c.shape)
        pad[ax] = 1
        c = np.concatenate([np.zeros(pad), c], axis=ax)
    dims = arr.shape
    lo = [np.clip(np.arange(n) - h, 0, None) for n in dims]
    hi = [np.minimum(np.arange(n) + h + 1, n) for n in dims]
    total = np.zeros(dims, dtype=np.float64)
    for sx, ex in ((1, hi[0]), (-1, lo[0])):
        for sy, ey in ((1, hi[1]), (-1, lo[1])):
            for sz, ez in ((1, hi[2]), (-1, lo[2])):
                total += (sx * sy * sz) * c[np.ix_(ex, ey, ez)]
    return total


def _window_counts(dims, edge: int) -> np.ndarray:
    h = edge // 2
    per_axis = [
        np.minimum(np.arange(n) + h + 1, n) - np.clip(np.arange(n) - h, 0, None)
        for n in dims
    ]
    return (
        per_axis[0][:, None, None]
        * per_axis[1][None, :, None]
        * per_axis[2][None, None, :]
    ).astype(np.float64)


def ssim(a: Volume, b: Volume, mask: LabelMask | None = None, label: int | None = None,
         params: SsimParams | None = None) -> float:
    params = params or SsimParams()
    params.validate()
    _check_pair(a, b)
    if min(a.dims) < params.window_edge:
        raise ValueError(
            f"volume dims {a.dims} smaller than ssim window edge {params.window_edge}"
        )
    sel = _selection(a.dims, mask, label)
    x = a.values.astype(np.float64)
    y = b.values.astype(np.float64)
    edge = params.window_edge
    n = _window_counts(a.dims, edge)
    mu_x = _box_sums(x, edge) / n
    mu_y = _box_sums(y, edge) / n
    var_x = _box_sums(x * x, edge) / n - mu_x * mu_x
    var_y = _box_sums(y * y, edge) / n - mu_y * mu_y
    cov = _box_sums(x * y, edge) / n - mu_x * mu_y
    c1, c2 = params.c1, params.c2
    local = ((2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)) / (
        (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    )
    return float(local[sel].mean())


def dice(p: LabelMask, g: LabelMask, label: int | None = None) -> float:
    if p.dims != g.dims or tuple(map(float, p.spacing_mm)) != tuple(map(float, g.spacing_mm)):
        raise ValueError(f"geometry mismatch: dims {p.dims} vs {g.dims}")
    a = (p.labels != 0) if label is None else (p.labels == label)
    b = (g.labels != 0) if label is None else (g.labels == label)
    na, nb = int(a.sum()), int(b.sum())
    if na + nb == 0:
        return 1.0  # both empty: perfect agreement by convention
    inter = int(np.count_nonzero(a & b))
    return 2.0 * inter / (na + nb)


def cl_stats(p: LabelMask, g: LabelMask, label: int | None = None) -> tuple[float, float, float]:
    """(clPrecision, clRecall, clDice); 0/0 ratios are defined as 0."""
    if p.dims != g.dims or tuple(map(float, p.spacing_mm)) != tuple(map(float, g.spacing_mm)):
        raise ValueError(f"geometry mismatch: dims {p.dims} vs {g.dims}")
    p_sel = (p.labels != 0) if label is None else (p.labels == label)
    g_sel = (g.labels != 0) if label is None else (g.labels == label)
    sp = skeletonize(p, label)
    sg = skeletonize(g, label)
    if len(sp):
        in_g = g_sel[sp.points[:, 0], sp.points[:, 1], sp.points[:, 2]]
        precision = float(np.count_nonzero(in_g)) / len(sp)
    else:
        precision = 0.0
    if len(sg):
        in_p = p_sel[sg.points[:, 0], sg.points[:, 1], sg.points[:, 2]]
        recall = float(np.count_nonzero(in_p)) / len(sg)
    else:
        recall = 0.0
    if precision + recall == 0.0:
        return precision, recall, 0.0
    return precision, recall, 2.0 * precision * recall / (precision + recall)


def _average_row(values) -> float:
    return float(np.mean(np.asarray(values, dtype=np.float64)))


def similarity_report(pred: Volume, ref: Volume, artery: LabelMask, vein: LabelMask,
                      params: SsimParams | None = None,
                      max_value: float = DEFAULT_MAX_VALUE,
                      artery_label: int = 1, vein_label: int = 2) -> list[SimilarityRecord]:
    """Artery / Vein / Average rows; the average row is the arithmetic mean of
    the artery and vein values."""
    rows = []
    for region, m, lbl in ((REGION_ARTERY, artery, artery_label), (REGION_VEIN, vein, vein_label)):
        rows.append(SimilarityRecord(
            region=region,
            mae_hu=mae(pred, ref, m, lbl),
            psnr_db=psnr(pred, ref, m, lbl, max_value),
            ssim=ssim(pred, ref, m, lbl, params),
        ))
    rows.append(SimilarityRecord(
        region=REGION_AVERAGE,
        mae_hu=_average_row([r.mae_hu for r in rows]),
        psnr_db=_average_row([r.psnr_db for r in rows]),
        ssim=_average_row([r.ssim for r in rows]),
    ))
    return rows


def segmentation_report(pred: LabelMask, gt: LabelMask,
                        labels: tuple[tuple[str, int], ...] = ((REGION_ARTERY, 1), (REGION_VEIN, 2)),
                        ) -> list[SegRecord]:
    rows = []
    for region, lbl in labels:
        p_cl, r_cl, cl_d = cl_stats(pred, gt, lbl)
        rows.append(SegRecord(region=region, dice=dice(pred, gt, lbl),
                              cl_dice=cl_d, cl_precision=p_cl, cl_recall=r_cl))
    if len(rows) > 1:
        rows.append(SegRecord(
            region=REGION_AVERAGE,
            dice=_average_row([r.dice for r in rows]),
            cl_dice=_average_row([r.cl_dice for r in rows]),
            cl_precision=_average_row([r.cl_precision for r in rows]),
            cl_recall=_average_row([r.cl_recall for r in rows]),
        ))
    return rows


def _fmt(x: float) -> str:
    return "inf" if math.isinf(x) else repr(float(x))


def similarity_to_json(records: list[SimilarityRecord]) -> str:
    rows = [
        {"region": r.region, "mae_hu": r.mae_hu,
         "psnr_db": ("inf" if math.isinf(r.psnr_db) else r.psnr_db), "ssim": r.ssim}
        for r in records
    ]
    return json.dumps({"records": rows}, indent=2) + "\n"


def similarity_to_csv(records: list[SimilarityRecord]) -> str:
    lines = ["region,mae_hu,psnr_db,ssim"]
    for r in records:
        lines.append(f"{r.region},{_fmt(r.mae_hu)},{_fmt(r.psnr_db)},{_fmt(r.ssim)}")
    return "\n".join(lines) + "\n"


def segmentation_to_json(records: list[SegRecord]) -> str:
    rows = [
        {"region": r.region, "dice": r.dice, "cl_dice": r.cl_dice,
         "cl_precision": r.cl_precision, "cl_recall": r.cl_recall}
        for r in records
    ]
    return json.dumps({"records": rows}, indent=2) + "\n"


def segmentation_to_csv(records: list[SegRecord]) -> str:
    lines = ["region,dice,cl_dice,cl_precision,cl_recall"]
    for r in records:
        lines.append(
            f"{r.region},{_fmt(r.dice)},{_fmt(r.cl_dice)},{_fmt(r.cl_precision)},{_fmt(r.cl_recall)}"
        )
    return "\n".join(lines) + "\n"
