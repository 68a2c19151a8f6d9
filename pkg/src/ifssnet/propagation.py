"""Sequential mask propagation through a whole stack from ``w`` seed slices."""

from __future__ import annotations

from typing import Iterable, Optional, Sequence

import numpy as np
import torch

from .net import IFSSNet, ModelState, load_checkpoint, model_step
from .training import previous_mask_window
from .volume import MaskVolume, Volume, make_windows, two_channel

FUSE_POLICIES = ("last", "mean")


class OverlapFuser:
    """Streaming combination of per-window foreground probabilities.

    ``last`` gives slice ``t`` the value from the window whose final (newest)
    slice is ``t``; the leading ``w - 1`` slices, which end no window, keep
    the first window's values. ``mean`` averages every window covering the
    slice.
    """

    def __init__(self, T: int, shape: tuple[int, int], policy: str = "last"):
        if policy not in FUSE_POLICIES:
            raise ValueError(f"fuse policy must be one of {FUSE_POLICIES}, got {policy!r}")
        self.policy = policy
        self.total = np.zeros((T,) + tuple(shape), dtype=np.float64)
        self.count = np.zeros(T, dtype=np.int64)

    def add(self, start: int, probs: np.ndarray) -> None:
        stop = start + len(probs)
        if start < 0 or stop > len(self.count):
            raise ValueError(f"window [{start}, {stop}) outside the stack")
        if self.policy == "last":
            fresh = self.count[start:stop] == 0
            self.total[start:stop][fresh] = probs[fresh]
            self.total[stop - 1] = probs[-1]
            self.count[start:stop] = 1
        else:
            self.total[start:stop] += probs
            self.count[start:stop] += 1

    def result(self) -> np.ndarray:
        missing = np.flatnonzero(self.count == 0)
        if missing.size:
            raise ValueError(f"slices not covered by any window: {missing.tolist()[:10]}")
        return self.total / self.count[:, None, None]


def fuse_overlaps(
    windows: Iterable[tuple[int, np.ndarray]], T: int, policy: str = "last"
) -> tuple[np.ndarray, dict]:
    """Combine ``(start, (w, H, W) fg-probabilities)`` pairs into a ``(T, H, W)`` map.

    Returns the map and a metadata dict recording the policy.
    """
    fuser = None
    for start, probs in windows:
        probs = np.asarray(probs, dtype=np.float64)
        if fuser is None:
            fuser = OverlapFuser(T, probs.shape[1:], policy)
        fuser.add(start, probs)
    if fuser is None:
        if policy not in FUSE_POLICIES:
            raise ValueError(f"fuse policy must be one of {FUSE_POLICIES}, got {policy!r}")
        raise ValueError("no windows to fuse")
    return fuser.result(), {"fuse_policy": policy}


def binarize(prob: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Strictly above the threshold is foreground; a tie goes to background."""
    return (np.asarray(prob) > threshold).astype(np.uint8)


def _as_net(checkpoint) -> IFSSNet:
    if isinstance(checkpoint, IFSSNet):
        return checkpoint
    return load_checkpoint(checkpoint)


def propagate(
    checkpoint,
    volume: Volume,
    seeds,
    fuse: str = "last",
    threshold: float = 0.5,
    return_details: bool = False,
):
    """Segment every slice of ``volume`` starting from ``w`` seed masks.

    ``checkpoint`` is a network or a checkpoint path. ``seeds`` is a
    ``(w, H, W)`` binary array (or a MaskVolume whose first ``w`` slices are
    used). Each window's prediction feeds the next window's mask stream.
    Output slices ``0..w-1`` are the seeds verbatim.
    """
    net = _as_net(checkpoint)
    cfg = net.config
    w = cfg.w
    if fuse not in FUSE_POLICIES:
        raise ValueError(f"fuse policy must be one of {FUSE_POLICIES}, got {fuse!r}")
    seeds = np.asarray(seeds.data if isinstance(seeds, MaskVolume) else seeds)
    if seeds.ndim != 3 or seeds.shape[0] < w:
        raise ValueError(f"need {w} seed slices, got array of shape {seeds.shape}")
    seeds = seeds[:w]
    if not np.all((seeds == 0) | (seeds == 1)):
        raise ValueError("seed masks must be binary")
    if volume.shape[1:] != (cfg.in_hw, cfg.in_hw):
        raise ValueError(f"checkpoint expects {cfg.in_hw}x{cfg.in_hw} slices, volume has {volume.shape[1:]}")
    if seeds.shape[1:] != volume.shape[1:]:
        raise ValueError(f"seed slices {seeds.shape[1:]} do not match volume slices {volume.shape[1:]}")
    if volume.depth < w:
        raise ValueError(f"volume has {volume.depth} slices, fewer than the window {w}")

    state = ModelState(net, training=False)
    fuser = OverlapFuser(volume.depth, volume.shape[1:], fuse)
    image = volume.data
    prev_fg: Optional[np.ndarray] = None
    with torch.no_grad():
        for win in make_windows(volume.depth, w):
            t = win.start
            m_prev = previous_mask_window(t, w, seeds, lambda s: prev_fg[s - (t - 1)])
            v = torch.from_numpy(np.array(image[t : t + w, :, :, None]))
            probs, state = model_step(v, torch.from_numpy(two_channel(m_prev)), state)
            fg = probs[..., 0].double().numpy()
            fuser.add(t, fg)
            prev_fg = binarize(fg, threshold)
    prob = fuser.result()
    mask = binarize(prob, threshold)
    mask[:w] = seeds
    out = MaskVolume(mask, volume.spacing)
    if return_details:
        return out, prob, {"fuse_policy": fuse, "threshold": threshold}
    return out


def propagate_many(checkpoint, volumes: Sequence[Volume], seeds: Sequence, **kwargs) -> list[MaskVolume]:
    net = _as_net(checkpoint)
    return [propagate(net, v, s, **kwargs) for v, s in zip(volumes, seeds)]
