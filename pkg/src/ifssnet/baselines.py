"""Non-learning propagation baselines.

``zero_order_propagate`` copies the nearest annotated slice.
``fill_between_slices`` interpolates signed distance transforms between
consecutive annotated slices, a simple stand-in for morphological contour
interpolation.
"""

from __future__ import annotations

import logging

import numpy as np
from scipy import ndimage

from .volume import AnnotationSchedule, MaskVolume

logger = logging.getLogger(__name__)


def _sparse_inputs(sparse, annotated):
    data = np.asarray(sparse.data if isinstance(sparse, MaskVolume) else sparse)
    if data.ndim != 3:
        raise ValueError(f"expected a (T, H, W) stack, got shape {data.shape}")
    if isinstance(annotated, AnnotationSchedule):
        annotated = annotated.annotated_indices
    idx = np.array(sorted(set(int(i) for i in annotated)), dtype=np.int64)
    if idx.size == 0:
        raise ValueError("no annotated slices")
    if idx[0] < 0 or idx[-1] >= data.shape[0]:
        raise ValueError(f"annotated indices must lie in [0, {data.shape[0]})")
    if not np.all((data[idx] == 0) | (data[idx] == 1)):
        raise ValueError("mask not binary")
    spacing = sparse.spacing if isinstance(sparse, MaskVolume) else (1.0, 1.0, 1.0)
    return data.astype(np.uint8), idx, spacing


def nearest_annotation(T: int, idx: np.ndarray) -> np.ndarray:
    """For every slice, the closest annotated index; ties go to the lower one."""
    t = np.arange(T)
    pos = np.searchsorted(idx, t)
    lo = idx[np.clip(pos - 1, 0, len(idx) - 1)]
    hi = idx[np.clip(pos, 0, len(idx) - 1)]
    # exact hits land in hi via searchsorted's left side
    return np.where(np.abs(t - lo) <= np.abs(hi - t), lo, hi)


def zero_order_propagate(sparse, annotated) -> MaskVolume:
    """Copy each slice from its nearest annotated slice.

    ``sparse`` is a ``(T, H, W)`` stack (MaskVolume or array) whose slices at
    ``annotated`` hold labels; other slices are ignored.
    """
    data, idx, spacing = _sparse_inputs(sparse, annotated)
    return MaskVolume(data[nearest_annotation(data.shape[0], idx)], spacing)


def signed_distance(mask: np.ndarray) -> np.ndarray:
    """Positive inside, negative outside, zero level halfway across the boundary."""
    m = np.asarray(mask, dtype=bool)
    if not m.any():
        return np.full(m.shape, -np.inf)
    if m.all():
        return np.full(m.shape, np.inf)
    inside = ndimage.distance_transform_edt(m)
    outside = ndimage.distance_transform_edt(~m)
    return np.where(m, inside - 0.5, -(outside - 0.5))


def _blend(phi_a, phi_b, weight):
    # keep infinities of empty/full slices from producing nan
    with np.errstate(invalid="ignore"):
        out = (1 - weight) * phi_a + weight * phi_b
    both_inf = np.isinf(phi_a) & np.isinf(phi_b)
    out[both_inf & (phi_a != phi_b)] = -np.inf
    return out


def fill_between_slices(sparse, annotated) -> MaskVolume:
    """Interpolate masks between annotated slices via signed distances.

    Slice ``j`` between annotated ``k < m`` is ``(1-s)*phi_k + s*phi_m > 0``
    with ``s = (j-k)/(m-k)``. Outside the annotated range the nearest
    annotation is copied. With fewer than two annotations this falls back to
    zero-order copying and sets ``fallback=True`` on the result.
    """
    data, idx, spacing = _sparse_inputs(sparse, annotated)
    T = data.shape[0]
    if len(idx) < 2:
        logger.warning("fill_between_slices needs two annotations; using zero-order copy")
        out = zero_order_propagate(data, idx)
        out = MaskVolume(out.data, spacing)
        object.__setattr__(out, "fallback", True)
        return out
    out = data[nearest_annotation(T, idx)].copy()
    phis = {int(k): signed_distance(data[k]) for k in idx}
    for k, m in zip(idx[:-1], idx[1:]):
        for j in range(k + 1, m):
            s = (j - k) / (m - k)
            out[j] = _blend(phis[int(k)], phis[int(m)], s) > 0
    out[idx] = data[idx]
    result = MaskVolume(out, spacing)
    object.__setattr__(result, "fallback", False)
    return result

