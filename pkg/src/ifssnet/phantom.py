"""Synthetic "muscle-like" volumes with exact ground truth.

Each structure is a star-convex blob whose radius is modulated by a few
low-order harmonics in the polar angle. Centre, base radius and harmonic
coefficients drift sinusoidally along depth, so cross-sections deform smoothly
from slice to slice. Intensities get multiplicative Rayleigh speckle and a
light in-plane blur.

Randomness comes from numpy's ``PCG64`` bit generator seeded with
``PhantomSpec.seed``; numpy guarantees that stream is stable across versions,
so equal specs give equal bytes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
from scipy import ndimage

from .volume import MaskVolume, Volume

_HARMONICS = (2, 3, 4)
_MARGIN = 2


@dataclass(frozen=True)
class PhantomSpec:
    seed: int = 0
    depth_T: int = 80
    height: int = 64
    width: int = 64
    n_structures: int = 1
    spacing: tuple[float, float, float] = (0.5, 0.5, 0.5)
    noise_level: float = 0.5
    deform_smoothness: float = 12.0

    def validate(self) -> None:
        if self.depth_T < 8:
            raise ValueError(f"depth_T must be >= 8, got {self.depth_T}")
        if self.height % 32 or self.width % 32 or self.height <= 0 or self.width <= 0:
            raise ValueError(
                f"height and width must be positive multiples of 32, got {self.height}x{self.width}"
            )
        if not 1 <= self.n_structures <= 3:
            raise ValueError(f"n_structures must be in 1..3, got {self.n_structures}")
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be three positive values, got {self.spacing}")
        if self.noise_level < 0:
            raise ValueError("noise_level must be non-negative")
        if self.deform_smoothness <= 0:
            raise ValueError("deform_smoothness must be positive")

    def with_seed(self, seed: int) -> "PhantomSpec":
        return replace(self, seed=seed)


def _drift(rng: np.random.Generator, t: np.ndarray, amplitude: float, period: float) -> np.ndarray:
    # two incommensurate sinusoids so shapes do not repeat exactly
    phase = rng.uniform(0, 2 * np.pi, size=2)
    ratio = rng.uniform(1.3, 1.9)
    return amplitude * (
        0.7 * np.sin(2 * np.pi * t / period + phase[0])
        + 0.3 * np.sin(2 * np.pi * t / (period * ratio) + phase[1])
    )


def _slots(rng: np.random.Generator, n: int, H: int, W: int) -> tuple[np.ndarray, float]:
    """Structure centres and the largest radius each may occupy."""
    cy, cx = (H - 1) / 2, (W - 1) / 2
    half = min(H, W) / 2
    if n == 1:
        centres = np.array([[cy, cx]]) + rng.uniform(-0.08, 0.08, size=(1, 2)) * half
        room = half - _MARGIN - 1
    else:
        ring = 0.45 * half
        theta0 = rng.uniform(0, 2 * np.pi)
        ang = theta0 + 2 * np.pi * np.arange(n) / n
        centres = np.stack([cy + ring * np.sin(ang), cx + ring * np.cos(ang)], axis=1)
        neighbour = 2 * ring * math.sin(math.pi / n)
        room = min(neighbour / 2 - 1, half - ring - _MARGIN - 1)
    return centres, room


def _structure_track(rng, T: int, centre, room: float, smooth: float):
    t = np.arange(T, dtype=np.float64)
    wander = 0.12 * room
    harm_amp = {k: rng.uniform(0.04, 0.12) / (k - 1) for k in _HARMONICS}
    # worst-case outward extent relative to the base radius
    shape_max = 1 + sum(harm_amp.values())
    base_mod = 0.15
    r0 = (room - wander) / (shape_max * (1 + base_mod)) * rng.uniform(0.7, 0.92)
    period = 2 * np.pi * smooth
    cy = centre[0] + _drift(rng, t, wander / math.sqrt(2), period)
    cx = centre[1] + _drift(rng, t, wander / math.sqrt(2), period)
    base = r0 * (1 + _drift(rng, t, base_mod, period))
    coeffs = {}
    for k, amp in harm_amp.items():
        coeffs[k] = (_drift(rng, t, amp, period), _drift(rng, t, amp, period))
    return cy, cx, base, coeffs


def _rasterize(H: int, W: int, cy: float, cx: float, base: float, coeffs, t: int) -> np.ndarray:
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    theta = np.arctan2(dy, dx)
    radius = np.ones_like(theta)
    for k, (a, b) in coeffs.items():
        radius += a[t] * np.cos(k * theta) + b[t] * np.sin(k * theta)
    return np.hypot(dy, dx) <= base * radius


def generate_phantom(spec: PhantomSpec) -> tuple[Volume, list[MaskVolume]]:
    """Render an image stack and one binary mask per structure."""
    spec.validate()
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    T, H, W = spec.depth_T, spec.height, spec.width

    centres, room = _slots(rng, spec.n_structures, H, W)
    masks = np.zeros((spec.n_structures, T, H, W), dtype=bool)
    taken = np.zeros((T, H, W), dtype=bool)
    for s in range(spec.n_structures):
        cy, cx, base, coeffs = _structure_track(rng, T, centres[s], room, spec.deform_smoothness)
        for t in range(T):
            masks[s, t] = _rasterize(H, W, cy[t], cx[t], base[t], coeffs, t) & ~taken[t]
        taken |= masks[s]

    # clean image: textured background, per-structure interior level, bright rim
    texture = ndimage.gaussian_filter(rng.standard_normal((T, H, W)), sigma=(2.0, 6.0, 6.0))
    texture /= max(np.abs(texture).max(), 1e-12)
    clean = 0.3 + 0.06 * texture
    levels = rng.permutation(np.array([0.62, 0.72, 0.52]))[: spec.n_structures]
    for s in range(spec.n_structures):
        clean[masks[s]] = levels[s] + 0.04 * texture[masks[s]]
        rim = masks[s] & ~ndimage.binary_erosion(masks[s], structure=np.ones((1, 3, 3), bool))
        clean[rim] = 0.85

    # mean-one Rayleigh speckle, mixed in by noise_level
    speckle = rng.rayleigh(scale=1.0, size=(T, H, W)) / math.sqrt(math.pi / 2)
    image = clean * ((1 - spec.noise_level) + spec.noise_level * speckle)
    image = ndimage.gaussian_filter(image, sigma=(0.0, 0.6, 0.6))
    image = np.clip(image, 0.0, 1.0).astype(np.float32)

    spacing = tuple(float(v) for v in spec.spacing)
    return Volume(image, spacing), [MaskVolume(m.astype(np.uint8), spacing) for m in masks]


def split_dataset(specs: Sequence, ratios: Sequence[float]) -> tuple[list, list, list]:
    """Patient-wise train/val/test partition.

    ``ratios`` is either fractions summing to 1, or three non-negative
    integers summing to ``len(specs)`` (absolute counts). Whole phantoms are
    assigned in input order; slices are never split across sets.
    """
    specs = list(specs)
    if not specs:
        raise ValueError("cannot split an empty list")
    if len(ratios) != 3:
        raise ValueError("ratios must have three entries (train, val, test)")
    n = len(specs)
    if all(isinstance(r, (int, np.integer)) and not isinstance(r, bool) for r in ratios) and sum(ratios) == n:
        counts = [int(r) for r in ratios]
    else:
        ratios = [float(r) for r in ratios]
        if any(r < 0 for r in ratios) or not math.isclose(sum(ratios), 1.0, abs_tol=1e-9):
            raise ValueError(f"ratios must be non-negative and sum to 1, got {ratios}")
        # largest-remainder rounding
        exact = [r * n for r in ratios]
        counts = [math.floor(e) for e in exact]
        order = sorted(range(3), key=lambda i: (-(exact[i] - counts[i]), i))
        for i in order[: n - sum(counts)]:
            counts[i] += 1
        for r, c, name in zip(ratios, counts, ("train", "val", "test")):
            if r > 0 and c == 0:
                raise ValueError(f"{name} split is empty for ratio {r} with {n} items")
    a, b = counts[0], counts[0] + counts[1]
    return specs[:a], specs[a:b], specs[b:]
