"""Full- and few-shot-supervision training with truncated BPTT.

A patient volume is processed as the ordered sequence of its width-``w``
windows. Each window is fed with the previous window's mask estimate (the
feedback loop), the per-window Tversky indices are accumulated, and the
optimizer steps at every TBPTT chunk boundary and at the end of each half of
the step range. The recurrent carry is detached at every update so no
gradient crosses a boundary.
"""

from __future__ import annotations

import csv
import logging
import math
import os
import tempfile
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np
import torch

from .losses import tversky_index_window, total_loss
from .net import IFSSNet, ModelState, NetConfig, build_model, model_step
from .volume import AnnotationSchedule, MaskVolume, Volume, make_windows, two_channel

logger = logging.getLogger(__name__)

LOG_FIELDS = ("epoch", "patient", "step_range", "loss", "alpha", "beta", "lr")


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite; ``dump_path`` holds the state at failure."""

    def __init__(self, message: str, dump_path: str):
        super().__init__(f"{message} (state dumped to {dump_path})")
        self.dump_path = dump_path


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "full"
    epochs: int = 10
    lr_init: float = 1e-4
    lr_final: float = 1e-5
    final_lr_epochs: int = 2
    tbptt_chunk: int = 8
    loss_halves: int = 2
    seed: int = 0
    lam: float = 1e-5
    window_factor: str = "literal"
    teacher_forcing: bool = False
    threshold: float = 0.5
    # few-shot only: passes over the fully annotated windows before any pseudo-label is used
    warmup_epochs: int = 0
    dump_dir: Optional[str] = None

    def __post_init__(self):
        if self.mode not in ("full", "few_shot"):
            raise ValueError(f"mode must be 'full' or 'few_shot', got {self.mode!r}")
        if not self.lr_final < self.lr_init:
            raise ValueError("lr_final must be smaller than lr_init")
        if self.tbptt_chunk < 1:
            raise ValueError("tbptt_chunk must be >= 1")
        if self.loss_halves < 1:
            raise ValueError("loss_halves must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.warmup_epochs < 0:
            raise ValueError("warmup_epochs must be >= 0")
        if self.window_factor not in ("literal", "off"):
            raise ValueError("window_factor must be 'literal' or 'off'")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for a 0-based epoch; the last ``final_lr_epochs`` use ``lr_final``."""
        return self.lr_final if epoch >= self.epochs - self.final_lr_epochs else self.lr_init


class PseudoLabelBuffer:
    """Current best label for every slice of one patient.

    Annotated slices hold ground truth and are never overwritten; the rest
    hold the latest binarized model estimate. A slice with no estimate yet
    borrows the nearest earlier slice that has one.
    """

    def __init__(self, gt: np.ndarray, schedule: AnnotationSchedule):
        gt = np.asarray(gt)
        if gt.shape[0] != schedule.T:
            raise ValueError(f"schedule covers {schedule.T} slices, mask has {gt.shape[0]}")
        self.annotated = schedule.as_mask()
        self.labels = np.zeros(gt.shape, dtype=np.uint8)
        self.labels[self.annotated] = gt[self.annotated]
        self.valid = self.annotated.copy()

    def _resolve(self, s: int) -> int:
        for j in range(s, -1, -1):
            if self.valid[j]:
                return j
        for j in range(s + 1, len(self.valid)):
            if self.valid[j]:
                return j
        raise ValueError("buffer holds no labels at all")

    def window(self, slices: Sequence[int]) -> np.ndarray:
        return np.stack([self.labels[self._resolve(s)] for s in slices])

    def refresh(self, slices: Sequence[int], fg: np.ndarray) -> None:
        for s, lab in zip(slices, fg):
            if not self.annotated[s]:
                self.labels[s] = lab
                self.valid[s] = True


def few_shot_step_targets(t: int, schedule: AnnotationSchedule, buffer: PseudoLabelBuffer, w: int) -> np.ndarray:
    """Two-channel target for window ``t``: GT where annotated, pseudo-labels elsewhere."""
    slices = range(t, t + w)
    # the buffer already pins annotated slices to GT; this is just the read
    target = buffer.window(slices)
    for j, s in enumerate(slices):
        if s in schedule and not np.array_equal(target[j], buffer.labels[s]):
            raise AssertionError("annotated slice lost its ground truth")
    return two_channel(target)


def decremental_curriculum(patients: Sequence, schedules: Sequence[AnnotationSchedule]) -> list[int]:
    """Visiting order: most-annotated patient first, ties kept in input order."""
    if len(patients) != len(schedules):
        raise ValueError(f"{len(patients)} patients but {len(schedules)} schedules")
    return sorted(range(len(patients)), key=lambda i: -len(schedules[i]))


def previous_mask_window(t: int, w: int, seeds: np.ndarray, feedback) -> np.ndarray:
    """Binary ``(w, H, W)`` mask window paired with image window ``t``.

    Covers slices ``t-1 .. t+w-2`` (clamped at 0). Seed slices ``< w`` always
    come from ``seeds``; later slices come from ``feedback(slice_index)``.
    """
    out = []
    for s in range(t - 1, t + w - 1):
        s = max(s, 0)
        out.append(seeds[s] if s < w else feedback(s))
    return np.stack(out)


def update_points(n_steps: int, chunk: int, halves: int) -> set[int]:
    """Step counts after which the optimizer steps."""
    points = {k for k in range(chunk, n_steps + 1, chunk)}
    points |= {math.ceil(n_steps * h / halves) for h in range(1, halves + 1)}
    return points


def _dump_state(net, cfg: TrainConfig, info: dict) -> str:
    directory = cfg.dump_dir or tempfile.mkdtemp(prefix="ifssnet-diverged-")
    os.makedirs(directory, exist_ok=True)
    path = os.path.join(directory, "diverged_state.pt")
    torch.save({"state_dict": net.state_dict(), "info": info, "train_config": asdict(cfg)}, path)
    return path


def _run_patient(net, opt, volume: Volume, gt: MaskVolume, schedule, buffer, cfg: TrainConfig, generator, epoch, patient, lr):
    w = net.config.w
    T = volume.depth
    windows = make_windows(T, w)
    n_steps = len(windows)
    updates = update_points(n_steps, cfg.tbptt_chunk, cfg.loss_halves)
    stage_ends = sorted({math.ceil(n_steps * h / cfg.loss_halves) for h in range(1, cfg.loss_halves + 1)})
    image = volume.data
    truth = gt.data
    state = ModelState(net, training=True, generator=generator)
    prev_fg = None
    pending = []
    stage_tis, stage_start, rows = [], 0, []

    for i, win in enumerate(windows):
        t = win.start
        if cfg.mode == "few_shot":
            m_prev = previous_mask_window(t, w, truth, lambda s: buffer.labels[buffer._resolve(s)])
            target = few_shot_step_targets(t, schedule, buffer, w)
        else:
            if cfg.teacher_forcing:
                m_prev = previous_mask_window(t, w, truth, lambda s: truth[s])
            else:
                m_prev = previous_mask_window(t, w, truth, lambda s: prev_fg[s - (t - 1)])
            target = two_channel(truth[t : t + w])

        v = torch.from_numpy(np.array(image[t : t + w, :, :, None]))
        y_hat, state = model_step(v, torch.from_numpy(two_channel(m_prev)), state)
        alpha, beta = net.tversky()
        ti = tversky_index_window(y_hat, torch.from_numpy(target).to(y_hat.dtype), alpha, beta)
        pending.append(ti)
        stage_tis.append(ti.item())

        prev_fg = (y_hat[..., 0] > cfg.threshold).detach().numpy().astype(np.uint8)
        if cfg.mode == "few_shot":
            buffer.refresh(win.slices, prev_fg)

        if i + 1 in updates:
            loss = total_loss(pending, w, net.l2_norm_sq(), cfg.lam, cfg.window_factor)
            if not torch.isfinite(loss):
                info = {"epoch": epoch, "patient": patient, "step": i, "loss": float(loss.detach())}
                path = _dump_state(net, cfg, info)
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}, patient {patient}, step {i}", path)
            opt.zero_grad()
            loss.backward()
            opt.step()
            state = state.detach()
            pending = []
        if i + 1 in stage_ends:
            with torch.no_grad():
                a = net.tversky()[0].item()
                reg = cfg.lam * net.l2_norm_sq().item()
            scale = 1.0 / w if cfg.window_factor == "literal" else 1.0
            rows.append(
                {
                    "epoch": epoch,
                    "patient": patient,
                    "step_range": f"{stage_start}-{i}",
                    "loss": 1.0 - scale * float(np.mean(stage_tis)) + reg,
                    "alpha": a,
                    # computed in double so the logged pair sums to exactly 1
                    "beta": 1.0 - a,
                    "lr": lr,
                }
            )
            stage_tis, stage_start = [], i + 1
    return rows


def _warmup_patient(net, opt, volume: Volume, gt: MaskVolume, schedule, buffer, cfg: TrainConfig, generator, epoch, patient):
    """One optimizer step per window whose slices are all annotated.

    The recurrent carry runs through consecutive annotated windows and is
    reset at gaps. No pseudo-label enters the loss or the buffer.
    """
    w = net.config.w
    annotated = set(schedule.annotated_indices)
    starts = [t for t in range(volume.depth - w + 1) if all(s in annotated for s in range(t, t + w))]
    truth = gt.data
    state, last, tis = None, None, []
    for t in starts:
        if last is None or t != last + 1:
            state = ModelState(net, training=True, generator=generator)
        m_prev = previous_mask_window(t, w, truth, lambda s: buffer.labels[buffer._resolve(s)])
        v = torch.from_numpy(np.array(volume.data[t : t + w, :, :, None]))
        y_hat, state = model_step(v, torch.from_numpy(two_channel(m_prev)), state)
        alpha, beta = net.tversky()
        ti = tversky_index_window(y_hat, torch.from_numpy(two_channel(truth[t : t + w])).to(y_hat.dtype), alpha, beta)
        loss = total_loss([ti], w, net.l2_norm_sq(), cfg.lam, cfg.window_factor)
        if not torch.isfinite(loss):
            info = {"epoch": epoch, "patient": patient, "step": t, "loss": float(loss.detach())}
            path = _dump_state(net, cfg, info)
            raise TrainingDivergedError(f"non-finite warm-up loss at patient {patient}, window {t}", path)
        opt.zero_grad()
        loss.backward()
        opt.step()
        state = state.detach()
        tis.append(ti.item())
        last = t
    return tis


def _check_dataset(dataset, schedules, net_cfg: NetConfig, cfg: TrainConfig):
    if not dataset:
        raise ValueError("training set is empty")
    if schedules is None:
        if cfg.mode == "few_shot":
            raise ValueError("few-shot training needs annotation schedules")
        schedules = [AnnotationSchedule(v.depth, tuple(range(v.depth))) for v, _ in dataset]
    if len(schedules) != len(dataset):
        raise ValueError(f"{len(dataset)} volumes but {len(schedules)} schedules")
    for i, ((vol, mask), sched) in enumerate(zip(dataset, schedules)):
        if vol.shape != mask.shape:
            raise ValueError(f"patient {i}: volume {vol.shape} and mask {mask.shape} differ")
        if vol.shape[1:] != (net_cfg.in_hw, net_cfg.in_hw):
            raise ValueError(f"patient {i}: slices are {vol.shape[1:]}, network expects {net_cfg.in_hw}")
        if vol.depth < net_cfg.w:
            raise ValueError(f"patient {i}: depth {vol.depth} is shorter than the window")
        if sched.T != vol.depth:
            raise ValueError(f"patient {i}: schedule is for {sched.T} slices, volume has {vol.depth}")
        sched.check_seeds(net_cfg.w)
    return list(schedules)


def train(
    dataset: Sequence[tuple[Volume, MaskVolume]],
    schedules: Optional[Sequence[AnnotationSchedule]] = None,
    net_cfg: NetConfig = NetConfig(),
    train_cfg: TrainConfig = TrainConfig(),
    net: Optional[IFSSNet] = None,
) -> tuple[IFSSNet, list[dict]]:
    """Train on ``(volume, mask)`` pairs for one structure.

    Returns the trained network and the log rows (one per loss stage).
    """
    schedules = _check_dataset(dataset, schedules, net_cfg, train_cfg)
    torch.manual_seed(train_cfg.seed)
    if net is None:
        net = build_model(net_cfg, seed=train_cfg.seed)
    generator = torch.Generator().manual_seed(train_cfg.seed + 1)
    opt = torch.optim.Adam(net.parameters(), lr=train_cfg.lr_init)

    if train_cfg.mode == "few_shot":
        order = decremental_curriculum(dataset, schedules)
        buffers = {i: PseudoLabelBuffer(dataset[i][1].data, schedules[i]) for i in order}
    else:
        order = list(range(len(dataset)))
        buffers = {i: None for i in order}

    log: list[dict] = []
    if train_cfg.mode == "few_shot" and train_cfg.warmup_epochs:
        for group in opt.param_groups:
            group["lr"] = train_cfg.lr_init
        for k in range(train_cfg.warmup_epochs):
            tis = []
            for i in order:
                vol, mask = dataset[i]
                tis += _warmup_patient(net, opt, vol, mask, schedules[i], buffers[i], train_cfg, generator, k, i)
            logger.debug("warm-up %d mean TI %.5f over %d windows", k, float(np.mean(tis)) if tis else float("nan"), len(tis))
    for epoch in range(train_cfg.epochs):
        lr = train_cfg.lr_at(epoch)
        for group in opt.param_groups:
            group["lr"] = lr
        for i in order:
            vol, mask = dataset[i]
            log.extend(_run_patient(net, opt, vol, mask, schedules[i], buffers[i], train_cfg, generator, epoch, i, lr))
        epoch_rows = [r for r in log if r["epoch"] == epoch]
        logger.info(
            "epoch %d lr %.1e loss %.5f alpha %.4f",
            epoch, lr, float(np.mean([r["loss"] for r in epoch_rows])), epoch_rows[-1]["alpha"],
        )
    net.eval()
    net.pseudo_label_buffers = buffers
    return net, log


def epoch_losses(log: Sequence[dict]) -> list[float]:
    """Mean logged loss per epoch."""
    epochs = sorted({r["epoch"] for r in log})
    return [float(np.mean([r["loss"] for r in log if r["epoch"] == e])) for e in epochs]


def write_log(log: Sequence[dict], path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        writer.writeheader()
        for row in log:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
