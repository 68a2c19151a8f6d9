"""Volumetric segmentation metrics: overlap, surface distances and volume.

Surface distances are centre-to-centre between surface voxels, scaled by the
voxel spacing. They are exact: a KD-tree proposes nearest neighbours, and
every candidate within rounding distance of the best is re-scored with
:func:`pair_distance` so results agree bit-for-bit with an all-pairs search.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .volume import MaskVolume

REPORT_FIELDS = (
    "structure", "dice", "miou", "hdd_mm", "asd_mm", "precision", "recall",
    "vol_pred_mm3", "vol_gt_mm3", "vol_err_pct",
)


class UndefinedDistanceError(ValueError):
    """Surface distance requested with an empty mask."""

    def __init__(self, which: str = "mask"):
        super().__init__(f"undefined surface distance: {which} is empty")


def _data(mask) -> np.ndarray:
    arr = np.asarray(mask.data if isinstance(mask, MaskVolume) else mask)
    if arr.dtype != bool:
        if not np.all((arr == 0) | (arr == 1)):
            raise ValueError("mask not binary")
        arr = arr.astype(bool)
    return arr


def _spacing(spacing, *masks, ndim: int) -> np.ndarray:
    if spacing is None:
        for m in masks:
            if isinstance(m, MaskVolume):
                spacing = m.spacing
                break
        else:
            spacing = (1.0,) * ndim
    spacing = np.asarray(spacing, dtype=np.float64)
    if spacing.shape != (ndim,) or np.any(spacing <= 0):
        raise ValueError(f"spacing must be {ndim} positive values, got {spacing.tolist()}")
    return spacing


def _pair(pred, gt):
    p, g = _data(pred), _data(gt)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {g.shape}")
    return p, g


# ------------------------------------------------------------ overlap


def confusion_counts(pred, gt) -> tuple[int, int, int, int]:
    p, g = _pair(pred, gt)
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return tp, fp, fn, p.size - tp - fp - fn


def precision_recall(pred, gt) -> tuple[float, float]:
    """An empty prediction has precision 1; an empty target has recall 1."""
    tp, fp, fn, _ = confusion_counts(pred, gt)
    precision = tp / (tp + fp) if tp + fp else 1.0
    recall = tp / (tp + fn) if tp + fn else 1.0
    return precision, recall


def dice_score(pred, gt) -> float:
    tp, fp, fn, _ = confusion_counts(pred, gt)
    return 2 * tp / (2 * tp + fp + fn) if tp + fp + fn else 1.0


def iou_score(pred, gt) -> float:
    """Foreground IoU; 1 when both masks are empty."""
    tp, fp, fn, _ = confusion_counts(pred, gt)
    return tp / (tp + fp + fn) if tp + fp + fn else 1.0


# ------------------------------------------------------------ surfaces


def surface_mask(mask) -> np.ndarray:
    """Foreground voxels with a face neighbour in background or outside the array."""
    m = _data(mask)
    if not m.any():
        return np.zeros_like(m)
    structure = ndimage.generate_binary_structure(m.ndim, 1)
    return m & ~ndimage.binary_erosion(m, structure=structure, border_value=0)


def surface_voxels(mask) -> np.ndarray:
    """``(N, ndim)`` integer coordinates of surface voxels, lexicographic order."""
    return np.argwhere(surface_mask(mask))


def pair_distance(a: np.ndarray, b: np.ndarray, spacing: np.ndarray) -> np.ndarray:
    """Canonical spacing-scaled Euclidean distance, broadcast over leading axes."""
    d = (np.asarray(a, np.float64) - np.asarray(b, np.float64)) * spacing
    return np.sqrt(np.sum(d * d, axis=-1))


def nearest_surface_distance(src: np.ndarray, dst: np.ndarray, spacing: np.ndarray) -> np.ndarray:
    """For each point of ``src``, the exact distance to the closest point of ``dst``."""
    if len(src) == 0:
        return np.zeros(0)
    if len(dst) == 0:
        raise UndefinedDistanceError("target surface")
    tree = cKDTree(dst * spacing)
    approx, _ = tree.query(src * spacing)
    out = np.empty(len(src))
    # anything within rounding of the KD-tree's answer might be the true minimum
    radius = approx * (1 + 1e-9) + 1e-9
    candidates = tree.query_ball_point(src * spacing, radius)
    for i, idx in enumerate(candidates):
        out[i] = pair_distance(src[i], dst[idx], spacing).min()
    return out


def _directed(pred, gt, spacing):
    p, g = _pair(pred, gt)
    if not p.any():
        raise UndefinedDistanceError("prediction")
    if not g.any():
        raise UndefinedDistanceError("ground truth")
    sp = _spacing(spacing, pred, gt, ndim=p.ndim)
    sp_pts, sg_pts = surface_voxels(p), surface_voxels(g)
    return nearest_surface_distance(sp_pts, sg_pts, sp), nearest_surface_distance(sg_pts, sp_pts, sp)


def hausdorff_asd(pred, gt, spacing=None) -> tuple[float, float]:
    """Symmetric Hausdorff distance and average surface distance in mm.

    HDD is the larger directed maximum; ASD the mean of the two directed
    means. Both masks must be non-empty.
    """
    d_pg, d_gp = _directed(pred, gt, spacing)
    hdd = max(d_pg.max(), d_gp.max())
    asd = (d_pg.mean() + d_gp.mean()) / 2
    return float(hdd), float(asd)


def surface_error_map(pred, gt, spacing=None) -> np.ndarray:
    """Array shaped like the masks: distance to the nearest GT surface voxel
    on every predicted surface voxel, NaN elsewhere."""
    d_pg, _ = _directed(pred, gt, spacing)
    p = _data(pred)
    out = np.full(p.shape, np.nan)
    out[tuple(surface_voxels(p).T)] = d_pg
    return out


# -------------------------------------------------------------- volume


def volume_mm3(mask, spacing=None) -> float:
    m = _data(mask)
    sp = _spacing(spacing, mask, ndim=m.ndim)
    return float(np.count_nonzero(m) * np.prod(sp))


def volume_error_pct(pred, gt, spacing=None) -> float:
    vg = volume_mm3(gt, spacing)
    if vg == 0:
        raise ValueError("volume error undefined: ground-truth volume is zero")
    return abs(volume_mm3(pred, spacing) - vg) / vg * 100


# -------------------------------------------------------------- report


@dataclass(frozen=True)
class MetricsReport:
    dice: float
    miou: float
    hdd_mm: float
    asd_mm: float
    precision: float
    recall: float
    vol_pred_mm3: float
    vol_gt_mm3: float
    vol_err_pct: float
    distance_defined: bool = True
    structure: str = "0"

    def row(self) -> dict:
        d = asdict(self)
        return {k: d[k] for k in REPORT_FIELDS}


@dataclass(frozen=True)
class SliceSeries:
    dice: np.ndarray
    hdd_mm: np.ndarray
    asd_mm: np.ndarray


def per_slice_series(pred, gt, spacing=None) -> SliceSeries:
    """Per-slice Dice and in-plane HDD/ASD (NaN where either slice is empty)."""
    p, g = _pair(pred, gt)
    sp = _spacing(spacing, pred, gt, ndim=3)[1:]
    T = p.shape[0]
    dice, hdd, asd = np.empty(T), np.full(T, np.nan), np.full(T, np.nan)
    for t in range(T):
        dice[t] = dice_score(p[t], g[t])
        if p[t].any() and g[t].any():
            hdd[t], asd[t] = hausdorff_asd(p[t], g[t], sp)
    return SliceSeries(dice, hdd, asd)


def evaluate(pred, gt, spacing=None, structure: str = "0", per_slice: bool = False):
    """All metrics for one structure.

    An empty prediction or ground truth leaves HDD/ASD as NaN with
    ``distance_defined=False``. Returns the report, plus a
    :class:`SliceSeries` when ``per_slice`` is set.
    """
    p, g = _pair(pred, gt)
    sp = _spacing(spacing, pred, gt, ndim=p.ndim)
    precision, recall = precision_recall(p, g)
    try:
        hdd, asd = hausdorff_asd(p, g, sp)
        defined = True
    except UndefinedDistanceError:
        hdd = asd = math.nan
        defined = False
    report = MetricsReport(
        dice=dice_score(p, g),
        miou=iou_score(p, g),
        hdd_mm=hdd,
        asd_mm=asd,
        precision=precision,
        recall=recall,
        vol_pred_mm3=volume_mm3(p, sp),
        vol_gt_mm3=volume_mm3(g, sp),
        vol_err_pct=volume_error_pct(p, g, sp),
        distance_defined=defined,
        structure=str(structure),
    )
    if per_slice:
        return report, per_slice_series(p, g, sp)
    return report


def mean_iou(reports: Sequence[MetricsReport]) -> float:
    """Foreground IoU averaged over structures."""
    if not reports:
        raise ValueError("no reports to average")
    return float(np.mean([r.miou for r in reports]))


def write_report(reports: Sequence[MetricsReport], path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=REPORT_FIELDS)
        writer.writeheader()
        for r in reports:
            writer.writerow(r.row())


def write_series(series: SliceSeries, path: str | os.PathLike, structure: str = "0") -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["structure", "slice", "dice", "hdd_mm", "asd_mm"])
        for t, (d, h, a) in enumerate(zip(series.dice, series.hdd_mm, series.asd_mm)):
            writer.writerow([structure, t, d, h, a])
