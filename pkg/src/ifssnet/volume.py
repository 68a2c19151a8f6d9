"""Volumes, masks, sliding windows and annotation schedules.

Everything here is plain numpy. Arrays are slice-major ``(T, H, W)`` and
spacing is ``(sz, sy, sx)`` in millimetres per voxel.
"""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

MVOL_MAGIC = "MVOL1"
_DTYPES = {"u8": np.dtype("<u1"), "f32": np.dtype("<f4")}


class MVOLError(ValueError):
    """Raised when an MVOL file cannot be decoded."""


def _check_spacing(spacing) -> tuple[float, float, float]:
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 3:
        raise ValueError(f"spacing must have 3 entries, got {len(spacing)}")
    if not all(s > 0 and math.isfinite(s) for s in spacing):
        raise ValueError(f"spacing must be positive and finite, got {spacing}")
    return spacing


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class Volume:
    """Grayscale image stack with intensities in [0, 1]."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 3:
            raise ValueError(f"volume must be 3D (T, H, W), got shape {data.shape}")
        if data.shape[0] < 1:
            raise ValueError("volume needs at least one slice")
        if not np.all(np.isfinite(data)):
            raise ValueError("volume contains non-finite values")
        if data.size and (data.min() < 0.0 or data.max() > 1.0):
            raise ValueError("volume intensities must lie in [0, 1]")
        object.__setattr__(self, "data", _freeze(data))
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def depth(self) -> int:
        return self.data.shape[0]


@dataclass(frozen=True, eq=False)
class MaskVolume:
    """Binary label stack; 1 is foreground."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValueError(f"mask must be 3D (T, H, W), got shape {data.shape}")
        if data.dtype == bool:
            data = data.astype(np.uint8)
        elif not np.all((data == 0) | (data == 1)):
            raise ValueError("mask not binary")
        object.__setattr__(self, "data", _freeze(data.astype(np.uint8)))
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def depth(self) -> int:
        return self.data.shape[0]

    def two_channel(self) -> np.ndarray:
        return two_channel(self.data)


def two_channel(mask: np.ndarray) -> np.ndarray:
    """Encode a binary mask as ``(..., 2)`` with channel 0 foreground, 1 background."""
    fg = np.asarray(mask, dtype=np.float32)
    return np.stack([fg, 1.0 - fg], axis=-1)


# ---------------------------------------------------------------- windows


@dataclass(frozen=True)
class SubVolumeWindow:
    start: int
    width: int

    @property
    def stop(self) -> int:
        return self.start + self.width

    @property
    def slices(self) -> range:
        return range(self.start, self.start + self.width)

    def previous_mask_slices(self) -> list[int]:
        """Slices of the mask window fed alongside this one, clamped at 0."""
        return [max(s - 1, 0) for s in self.slices]


def make_windows(T: int, w: int) -> list[SubVolumeWindow]:
    """All width-``w`` windows with step 1 over ``T`` slices."""
    if w < 1:
        raise ValueError(f"window width must be >= 1, got {w}")
    if w > T:
        raise ValueError(f"window width {w} exceeds slice count {T}")
    return [SubVolumeWindow(k, w) for k in range(T - w + 1)]


# -------------------------------------------------------------- schedules


@dataclass(frozen=True)
class AnnotationSchedule:
    """Slice indices carrying expert labels in a stack of depth ``T``."""

    T: int
    annotated_indices: tuple[int, ...] = field(default_factory=tuple)

    def __post_init__(self):
        idx = tuple(sorted(set(int(i) for i in self.annotated_indices)))
        if idx and (idx[0] < 0 or idx[-1] >= self.T):
            raise ValueError(f"annotated indices must lie in [0, {self.T})")
        object.__setattr__(self, "annotated_indices", idx)
        object.__setattr__(self, "_lookup", frozenset(idx))

    def __len__(self) -> int:
        return len(self.annotated_indices)

    def __contains__(self, t) -> bool:
        return t in self._lookup

    @property
    def fraction(self) -> float:
        return len(self) / self.T

    def as_mask(self) -> np.ndarray:
        out = np.zeros(self.T, dtype=bool)
        out[list(self.annotated_indices)] = True
        return out

    def check_seeds(self, w: int) -> None:
        missing = [s for s in range(w) if s not in self]
        if missing:
            raise ValueError(f"schedule must annotate the first {w} slices; missing {missing}")


def fixed_interval_schedule(T: int, period: int, k_consecutive: int) -> AnnotationSchedule:
    if not period >= k_consecutive >= 1:
        raise ValueError("need period >= k_consecutive >= 1")
    idx = [b + j for b in range(0, T, period) for j in range(k_consecutive) if b + j < T]
    return AnnotationSchedule(T, tuple(idx))


def _spread_groups(T: int, count: int, lead: int, group: int) -> list[int]:
    # first group at 0 with `lead` slices, rest in `group`-sized runs spread evenly
    if count >= T:
        return list(range(T))
    sizes = [lead]
    rest = count - lead
    while rest > 0:
        sizes.append(min(group, rest))
        rest -= sizes[-1]
    n = len(sizes)
    starts = [0] * n
    if n > 1:
        span = T - sizes[-1]
        ideal = [round(i * span / (n - 1)) for i in range(n)]
        prev_end = 0
        for i in range(n):
            starts[i] = max(ideal[i], prev_end)
            prev_end = starts[i] + sizes[i]
        # pull back anything pushed past the end
        nxt = T
        for i in reversed(range(n)):
            starts[i] = min(starts[i], nxt - sizes[i])
            nxt = starts[i]
    return [s + j for s, n_s in zip(starts, sizes) for j in range(n_s)]


def decremental_schedule(
    T_list: Sequence[int],
    budget_frac: float = 0.035,
    floor_frac: float = 0.03,
    init_frac: float = 0.164,
    w: int = 3,
    group: int = 3,
) -> list[AnnotationSchedule]:
    """Exponentially decaying annotation counts across patients.

    Patient ``i`` gets ``max(round(init_frac * T_i / 2**i), round(floor_frac * T_i))``
    labelled slices, laid out as consecutive runs of ``group`` slices spread
    evenly along the stack, the first run always covering slices ``[0, w)``.
    """
    for name, val in (("budget_frac", budget_frac), ("floor_frac", floor_frac), ("init_frac", init_frac)):
        if not 0.0 < val < 1.0:
            raise ValueError(f"{name} must lie in (0, 1), got {val}")
    if not T_list:
        raise ValueError("need at least one patient")
    schedules = []
    for i, T in enumerate(T_list):
        count = max(round(init_frac * T * 2.0 ** (-i)), round(floor_frac * T))
        count = min(count, T)
        if count < w:
            raise ValueError(
                f"patient {i}: {count} annotations cannot cover the {w} seed slices (T={T})"
            )
        schedules.append(AnnotationSchedule(T, tuple(_spread_groups(T, count, min(max(w, group), count), group))))
    total = sum(len(s) for s in schedules) / sum(T_list)
    if abs(total - budget_frac) > 0.005:
        logger.warning(
            "decremental schedule uses %.2f%% of slices, budget is %.2f%%", 100 * total, 100 * budget_frac
        )
    return schedules


def format_schedules(schedules: Iterable[AnnotationSchedule]) -> str:
    return "".join(" ".join(str(i) for i in s.annotated_indices) + "\n" for s in schedules)


def parse_schedules(text: str, T_list: Sequence[int] | None = None) -> list[AnnotationSchedule]:
    lines = [ln for ln in text.splitlines() if ln.strip() or T_list is not None]
    out = []
    for i, ln in enumerate(lines):
        idx = [int(tok) for tok in ln.split()]
        T = T_list[i] if T_list is not None else (max(idx) + 1 if idx else 0)
        out.append(AnnotationSchedule(T, tuple(idx)))
    return out


# ------------------------------------------------------------------- MVOL


def write_mvol(obj: Volume | MaskVolume, path: str | os.PathLike) -> None:
    if isinstance(obj, MaskVolume):
        tag = "u8"
    elif isinstance(obj, Volume):
        tag = "f32"
    else:
        raise TypeError(f"cannot write {type(obj).__name__} as MVOL")
    T, H, W = obj.shape
    sz, sy, sx = obj.spacing
    header = f"{MVOL_MAGIC} {tag} {T} {H} {W} {sz!r} {sy!r} {sx!r}\n"
    payload = np.ascontiguousarray(obj.data, dtype=_DTYPES[tag]).tobytes()
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(payload)


def read_mvol(path: str | os.PathLike) -> Volume | MaskVolume:
    with open(path, "rb") as fh:
        raw = fh.read()
    nl = raw.find(b"\n")
    if nl < 0:
        raise MVOLError("bad magic: no header line")
    try:
        fields = raw[:nl].decode("ascii").split()
    except UnicodeDecodeError as exc:
        raise MVOLError("bad magic: header is not ASCII") from exc
    if not fields or fields[0] != MVOL_MAGIC:
        raise MVOLError("bad magic")
    if len(fields) != 8:
        raise MVOLError(f"malformed header: expected 8 fields, got {len(fields)}")
    tag = fields[1]
    if tag not in _DTYPES:
        raise MVOLError(f"unknown dtype {tag!r}")
    try:
        T, H, W = (int(v) for v in fields[2:5])
        spacing = tuple(float(v) for v in fields[5:8])
    except ValueError as exc:
        raise MVOLError(f"malformed header: {exc}") from exc
    dtype = _DTYPES[tag]
    payload = raw[nl + 1 :]
    if len(payload) != T * H * W * dtype.itemsize:
        raise MVOLError(
            f"payload size mismatch: header implies {T * H * W * dtype.itemsize} bytes, found {len(payload)}"
        )
    data = np.frombuffer(payload, dtype=dtype).reshape(T, H, W)
    if tag == "u8":
        if not np.all(data <= 1):
            raise MVOLError("mask not binary")
        return MaskVolume(data.copy(), spacing)
    return Volume(data.astype(np.float32), spacing)
