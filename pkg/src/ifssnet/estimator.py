"""scikit-learn style wrapper around training and propagation."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .metrics import dice_score
from .net import NetConfig
from .propagation import propagate
from .training import TrainConfig, train
from .validation import check_pairs, check_seeds, check_volume_list


class IFSSNetSegmenter(BaseEstimator):
    """Mask-propagation segmenter for one structure.

    ``fit`` takes a list of volumes and their full masks (plus annotation
    schedules in few-shot mode). ``predict`` needs the first ``w`` slices of
    each volume's mask as seeds; ``score`` takes them from the given masks.
    """

    def __init__(
        self,
        mode="full",
        epochs=10,
        lr_init=1e-4,
        lr_final=1e-5,
        final_lr_epochs=2,
        tbptt_chunk=8,
        w=3,
        channels=(8, 8, 16, 16, 32),
        atrous_rates=(1, 6, 12, 18),
        window_factor="literal",
        teacher_forcing=False,
        warmup_epochs=0,
        fuse="last",
        seed=0,
    ):
        self.mode = mode
        self.epochs = epochs
        self.lr_init = lr_init
        self.lr_final = lr_final
        self.final_lr_epochs = final_lr_epochs
        self.tbptt_chunk = tbptt_chunk
        self.w = w
        self.channels = channels
        self.atrous_rates = atrous_rates
        self.window_factor = window_factor
        self.teacher_forcing = teacher_forcing
        self.warmup_epochs = warmup_epochs
        self.fuse = fuse
        self.seed = seed

    def _configs(self, in_hw):
        net_cfg = NetConfig(w=self.w, in_hw=in_hw, channels=tuple(self.channels), atrous_rates=tuple(self.atrous_rates))
        train_cfg = TrainConfig(
            mode=self.mode,
            epochs=self.epochs,
            lr_init=self.lr_init,
            lr_final=self.lr_final,
            final_lr_epochs=self.final_lr_epochs,
            tbptt_chunk=self.tbptt_chunk,
            seed=self.seed,
            window_factor=self.window_factor,
            teacher_forcing=self.teacher_forcing,
            warmup_epochs=self.warmup_epochs,
        )
        return net_cfg, train_cfg

    def fit(self, X, y, schedules=None):
        pairs = check_pairs(X, y)
        H, W = pairs[0][0].shape[1:]
        if H != W or any(v.shape[1:] != (H, W) for v, _ in pairs):
            raise ValueError("all volumes need the same square slice size")
        net_cfg, train_cfg = self._configs(H)
        self.net_, self.log_ = train(pairs, schedules, net_cfg, train_cfg)
        self.in_hw_ = H
        return self

    def predict(self, X, seeds):
        """Binary ``(T, H, W)`` arrays, one per volume (a single array for a single volume)."""
        check_is_fitted(self, "net_")
        single = not isinstance(X, (list, tuple))
        volumes = check_volume_list(X)
        seeds = check_seeds(seeds, volumes, self.w)
        out = [propagate(self.net_, v, s, fuse=self.fuse).data for v, s in zip(volumes, seeds)]
        return out[0] if single else out

    def predict_proba(self, X, seeds):
        """Fused foreground probabilities, seeds slices included as 0/1."""
        check_is_fitted(self, "net_")
        single = not isinstance(X, (list, tuple))
        volumes = check_volume_list(X)
        seeds = check_seeds(seeds, volumes, self.w)
        out = []
        for v, s in zip(volumes, seeds):
            _, prob, _ = propagate(self.net_, v, s, fuse=self.fuse, return_details=True)
            prob[: self.w] = s
            out.append(prob)
        return out[0] if single else out

    def score(self, X, y):
        """Mean volumetric Dice, seeding each volume from its own mask."""
        pairs = check_pairs(X, y)
        preds = self.predict([v for v, _ in pairs], [m.data for _, m in pairs])
        return float(np.mean([dice_score(p, m.data) for p, (_, m) in zip(preds, pairs)]))
