import csv
import math

import numpy as np
import pytest
import torch

import ifssnet.training as training
from ifssnet.net import ModelState, NetConfig, build_model, model_step
from ifssnet.phantom import PhantomSpec, generate_phantom
from ifssnet.training import (
    LOG_FIELDS,
    PseudoLabelBuffer,
    TrainConfig,
    TrainingDivergedError,
    decremental_curriculum,
    epoch_losses,
    few_shot_step_targets,
    previous_mask_window,
    train,
    update_points,
    write_log,
)
from ifssnet.volume import AnnotationSchedule, decremental_schedule, fixed_interval_schedule


@pytest.fixture(scope="module")
def tiny_data():
    out = []
    for s in range(2):
        v, m = generate_phantom(PhantomSpec(seed=40 + s, depth_T=10, height=32, width=32))
        out.append((v, m[0]))
    return out


def test_config_validation_and_lr():
    cfg = TrainConfig(epochs=6)
    assert [cfg.lr_at(e) for e in range(6)] == [1e-4] * 4 + [1e-5] * 2
    with pytest.raises(ValueError):
        TrainConfig(lr_init=1e-5, lr_final=1e-4)
    with pytest.raises(ValueError):
        TrainConfig(tbptt_chunk=0)
    with pytest.raises(ValueError):
        TrainConfig(mode="weak")
    with pytest.raises(ValueError):
        TrainConfig(warmup_epochs=-1)


def test_update_points_include_halves_and_chunks():
    pts = update_points(78, 8, 2)
    assert {39, 78} <= pts
    assert {8, 16, 72} <= pts
    assert max(pts) == 78


def _gt(T=6, hw=4, seed=0):
    return (np.random.default_rng(seed).random((T, hw, hw)) > 0.5).astype(np.uint8)


def test_buffer_keeps_ground_truth():
    gt = _gt()
    buf = PseudoLabelBuffer(gt, AnnotationSchedule(6, (0, 1, 2, 4)))
    buf.refresh(range(2, 5), np.ones((3, 4, 4), np.uint8))
    np.testing.assert_array_equal(buf.labels[[0, 1, 2, 4]], gt[[0, 1, 2, 4]])
    np.testing.assert_array_equal(buf.labels[3], 1)


def test_buffer_falls_back_to_nearest_earlier():
    gt = _gt()
    buf = PseudoLabelBuffer(gt, AnnotationSchedule(6, (0, 1, 2)))
    np.testing.assert_array_equal(buf.window([3, 4, 5]), gt[[2, 2, 2]])


def test_targets_all_annotated_equal_gt():
    gt = _gt()
    sched = AnnotationSchedule(6, tuple(range(6)))
    buf = PseudoLabelBuffer(gt, sched)
    tgt = few_shot_step_targets(2, sched, buf, 3)
    np.testing.assert_array_equal(tgt[..., 0], gt[2:5])
    np.testing.assert_array_equal(tgt.sum(-1), 1)


def test_targets_unannotated_use_pseudo_labels():
    gt = _gt()
    sched = AnnotationSchedule(6, (0, 1, 2))
    buf = PseudoLabelBuffer(gt, sched)
    pseudo = _gt(3, seed=9)
    buf.refresh([3, 4, 5], pseudo)
    np.testing.assert_array_equal(few_shot_step_targets(3, sched, buf, 3)[..., 0], pseudo)


def test_targets_mixed_window_keep_gt():
    gt = _gt()
    sched = AnnotationSchedule(6, (0, 1, 2, 4))
    buf = PseudoLabelBuffer(gt, sched)
    buf.refresh([3, 4, 5], 1 - gt[3:6])
    tgt = few_shot_step_targets(3, sched, buf, 3)[..., 0]
    np.testing.assert_array_equal(tgt[1], gt[4])
    np.testing.assert_array_equal(tgt[0], 1 - gt[3])


def test_curriculum_orders_by_annotation_count():
    scheds = decremental_schedule([1400] * 29)
    plan = decremental_curriculum(list(range(29)), scheds)
    assert len(scheds[plan[0]]) == 230 and len(scheds[plan[1]]) == 115
    rng = np.random.default_rng(0)
    perm = rng.permutation(29)
    shuffled = [scheds[i] for i in perm]
    plan = decremental_curriculum(list(range(29)), shuffled)
    counts = [len(shuffled[i]) for i in plan]
    assert counts == sorted(counts, reverse=True)
    assert decremental_curriculum(["a"], scheds[:1]) == [0]
    with pytest.raises(ValueError):
        decremental_curriculum([1, 2], scheds[:1])


def test_previous_mask_window_uses_seeds_then_feedback():
    seeds = np.stack([np.full((2, 2), i, np.uint8) for i in range(3)]) % 2
    fb = {3: np.full((2, 2), 7), 4: np.full((2, 2), 8)}
    first = previous_mask_window(0, 3, seeds, fb.__getitem__)
    np.testing.assert_array_equal(first[:, 0, 0], [0, 0, 1])
    later = previous_mask_window(3, 3, seeds, fb.__getitem__)
    np.testing.assert_array_equal(later[:, 0, 0], [0, 7, 8])


def test_tbptt_detach_blocks_gradient(tiny_cfg):
    net = build_model(tiny_cfg)
    rng = np.random.default_rng(0)

    def run(detach):
        v1 = torch.from_numpy(rng.random((3, 32, 32, 1)).astype(np.float32)).requires_grad_()
        m = torch.from_numpy(rng.random((3, 32, 32, 2)).astype(np.float32))
        state = ModelState(net)
        _, state = model_step(v1, m, state)
        if detach:
            state = state.detach()
        y, _ = model_step(m[..., :1], m, state)
        y[..., 0].sum().backward()
        return v1.grad

    assert run(detach=True) is None
    assert run(detach=False).abs().sum() > 0


def _cfgs(mode="full", epochs=2, **kw):
    net_cfg = NetConfig(in_hw=32, channels=(2, 2, 2, 2, 4), atrous_rates=(1, 2))
    return net_cfg, TrainConfig(mode=mode, epochs=epochs, lr_init=1e-3, lr_final=1e-4, final_lr_epochs=1,
                                tbptt_chunk=3, **kw)


def test_full_training_log_and_constraint(tiny_data, tmp_path):
    net_cfg, train_cfg = _cfgs()
    net, log = train(tiny_data, None, net_cfg, train_cfg)
    # two halves per patient per epoch
    assert len(log) == 2 * 2 * 2
    assert [r["step_range"] for r in log[:2]] == ["0-3", "4-7"]
    for row in log:
        assert row["alpha"] + row["beta"] == 1.0
        assert 0 < row["alpha"] < 1
    assert [r["lr"] for r in log] == [1e-3] * 4 + [1e-4] * 4
    path = tmp_path / "log.csv"
    write_log(log, path)
    with open(path) as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == LOG_FIELDS and len(rows) == 9


def test_training_is_reproducible(tiny_data):
    net_cfg, train_cfg = _cfgs()
    _, log1 = train(tiny_data, None, net_cfg, train_cfg)
    _, log2 = train(tiny_data, None, net_cfg, train_cfg)
    assert log1 == log2


def test_few_shot_degenerate_schedule(tiny_data):
    net_cfg, train_cfg = _cfgs(mode="few_shot", epochs=1)
    scheds = [fixed_interval_schedule(v.depth, v.depth, 3) for v, _ in tiny_data]
    net, log = train(tiny_data, scheds, net_cfg, train_cfg)
    assert len(log) == 4
    for i, (v, m) in enumerate(tiny_data):
        buf = net.pseudo_label_buffers[i]
        np.testing.assert_array_equal(buf.labels[:3], m.data[:3])
        assert buf.valid.all()


def test_few_shot_gt_survives_training(tiny_data):
    net_cfg, train_cfg = _cfgs(mode="few_shot", epochs=2)
    scheds = [AnnotationSchedule(10, (0, 1, 2, 6, 7)), AnnotationSchedule(10, (0, 1, 2))]
    net, _ = train(tiny_data, scheds, net_cfg, train_cfg)
    for i, (_, m) in enumerate(tiny_data):
        idx = list(scheds[i].annotated_indices)
        assert net.pseudo_label_buffers[i].labels[idx].tobytes() == m.data[idx].tobytes()


def test_warmup_runs_only_fully_annotated_windows(tiny_data, monkeypatch):
    scheds = [AnnotationSchedule(10, (0, 1, 2, 3, 6, 7)), AnnotationSchedule(10, (0, 1, 2))]
    calls = []
    real = training.model_step

    def counting(v, m, state):
        calls.append(1)
        return real(v, m, state)

    monkeypatch.setattr(training, "model_step", counting)
    net_cfg, _ = _cfgs()
    seen = {}
    for k in (0, 3):
        calls.clear()
        train(tiny_data, scheds, net_cfg, _cfgs(mode="few_shot", epochs=1, warmup_epochs=k)[1])
        seen[k] = len(calls)
    # windows starting at 0 and 1 for the first patient, 0 for the second
    assert seen[3] - seen[0] == 3 * 3


def test_training_input_errors(tiny_data):
    net_cfg, train_cfg = _cfgs(mode="few_shot")
    with pytest.raises(ValueError):
        train(tiny_data, None, net_cfg, train_cfg)
    with pytest.raises(ValueError, match="first 3"):
        train(tiny_data, [AnnotationSchedule(10, (0, 5))] * 2, net_cfg, train_cfg)
    with pytest.raises(ValueError):
        train([], None, net_cfg, _cfgs()[1])


def test_nan_loss_dumps_state(tiny_data, tmp_path, monkeypatch):
    def broken(per_step, w, *args, **kwargs):
        return torch.stack([t.reshape(()) for t in per_step]).sum() * float("nan")

    monkeypatch.setattr(training, "total_loss", broken)
    net_cfg, train_cfg = _cfgs(dump_dir=str(tmp_path))
    with pytest.raises(TrainingDivergedError) as info:
        train(tiny_data, None, net_cfg, train_cfg)
    dump = torch.load(info.value.dump_path, weights_only=False)
    assert dump["info"]["epoch"] == 0 and math.isnan(dump["info"]["loss"])


def test_epoch_loss_non_increasing_first_epochs():
    data = []
    for s in range(2):
        v, m = generate_phantom(PhantomSpec(seed=60 + s, depth_T=24))
        data.append((v, m[0]))
    train_cfg = TrainConfig(epochs=3, lr_init=1e-3, lr_final=1e-4, final_lr_epochs=0, tbptt_chunk=8)
    _, log = train(data, None, NetConfig(), train_cfg)
    losses = epoch_losses(log)
    assert losses[0] >= losses[1] >= losses[2]
