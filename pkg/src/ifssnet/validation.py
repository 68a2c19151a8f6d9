"""Input coercion helpers shared by the estimator and the CLI."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .volume import MaskVolume, Volume


def check_volume(X, spacing=None) -> Volume:
    if isinstance(X, Volume):
        return X
    arr = np.asarray(X)
    if arr.ndim == 4 and arr.shape[-1] == 1:
        arr = arr[..., 0]
    return Volume(arr, spacing if spacing is not None else (1.0, 1.0, 1.0))


def check_mask(y, like: Volume | None = None) -> MaskVolume:
    if not isinstance(y, MaskVolume):
        y = MaskVolume(np.asarray(y), like.spacing if like is not None else (1.0, 1.0, 1.0))
    if like is not None and y.shape != like.shape:
        raise ValueError(f"mask shape {y.shape} does not match volume shape {like.shape}")
    return y


def check_volume_list(X) -> list[Volume]:
    if isinstance(X, (Volume, np.ndarray)):
        X = [X]
    X = [check_volume(x) for x in X]
    if not X:
        raise ValueError("need at least one volume")
    return X


def check_pairs(X, y) -> list[tuple[Volume, MaskVolume]]:
    X = check_volume_list(X)
    if isinstance(y, (MaskVolume, np.ndarray)):
        y = [y]
    y = list(y)
    if len(X) != len(y):
        raise ValueError(f"{len(X)} volumes but {len(y)} masks")
    return [(v, check_mask(m, v)) for v, m in zip(X, y)]


def check_seeds(seeds, volumes: Sequence[Volume], w: int) -> list[np.ndarray]:
    if isinstance(seeds, (MaskVolume, np.ndarray)) and len(volumes) == 1:
        seeds = [seeds]
    seeds = list(seeds)
    if len(seeds) != len(volumes):
        raise ValueError(f"{len(volumes)} volumes but {len(seeds)} seed stacks")
    out = []
    for s, v in zip(seeds, volumes):
        arr = np.asarray(s.data if isinstance(s, MaskVolume) else s)
        if arr.ndim != 3 or arr.shape[0] < w or arr.shape[1:] != v.shape[1:]:
            raise ValueError(f"seeds must be ({w}, {v.shape[1]}, {v.shape[2]}) or longer, got {arr.shape}")
        out.append(arr[:w])
    return out
