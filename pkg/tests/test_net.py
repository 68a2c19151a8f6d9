import warnings

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from ifssnet.net import (
    BiConvLSTM,
    ConvLSTMCell,
    GlobalMatch,
    ModelState,
    NetConfig,
    SliceConv3d,
    biclstm_forward,
    build_model,
    count_parameters,
    decoder_forward,
    encoder_forward,
    global_match,
    load_checkpoint,
    model_step,
    parameter_groups,
    save_checkpoint,
)


def _window(rng, w, hw, c):
    return torch.from_numpy(rng.random((w, hw, hw, c)).astype(np.float32))


@pytest.mark.parametrize(
    "kernel, padding, dilation, groups",
    [
        (3, 1, 1, 1),
        ((3, 3, 3), (1, 4, 4), (1, 4, 4), 4),
        ((1, 1, 1), 0, 1, 1),
        ((3, 1, 1), "same", 1, 1),
        ((1, 2, 1), "same", 1, 1),
        ((1, 1, 5), "same", 1, 2),
    ],
)
def test_sliceconv_matches_conv3d(kernel, padding, dilation, groups):
    torch.manual_seed(0)
    conv = SliceConv3d(4, 8, kernel, padding=padding, dilation=dilation, groups=groups).double()
    x = torch.randn(2, 4, 3, 9, 9, dtype=torch.float64)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        ref = F.conv3d(x, conv.weight, conv.bias, 1, conv.padding, conv.dilation, conv.groups)
    assert torch.allclose(conv(x), ref, atol=1e-12)


def test_config_validation():
    with pytest.raises(ValueError):
        NetConfig(in_hw=48)
    with pytest.raises(ValueError):
        NetConfig(w=2)
    with pytest.raises(ValueError):
        NetConfig(channels=(1, 2, 3))
    assert NetConfig(in_hw=64).bottleneck_hw == 2


def test_paper_scale_bottleneck():
    cfg = NetConfig(in_hw=512, channels=(30, 30, 60, 60, 120))
    net = build_model(cfg).eval()
    with torch.no_grad():
        fv, pyramid = encoder_forward(net, torch.rand(3, 512, 512, 1))
    assert tuple(fv.shape) == (3, 16, 16, 120)
    assert [p.shape[-1] for p in pyramid] == [512, 256, 128, 64, 32]


def test_desk_bottleneck_and_decoder_shape(rng):
    net = build_model(NetConfig()).eval()
    with torch.no_grad():
        fv, img_pyr = encoder_forward(net, _window(rng, 3, 64, 1))
        fm, mask_pyr = encoder_forward(net, _window(rng, 3, 64, 2), img_pyr)
        g = global_match(net, fv, fm)
        z, carry = biclstm_forward(net, g)
        y = decoder_forward(net, z, mask_pyr)
    assert tuple(fv.shape) == (3, 2, 2, 32)
    assert tuple(g.shape) == (3, 2, 2, 32)
    assert tuple(y.shape) == (3, 64, 64, 2)
    assert torch.all((y > 0) & (y < 1))
    assert torch.max(torch.abs(y.sum(-1) - 1)) <= 1e-6


def test_twin_encoder_is_shared(rng):
    net = build_model(NetConfig()).eval()
    x = _window(rng, 3, 64, 2)
    with torch.no_grad():
        a, _ = encoder_forward(net, x)
        b, _ = encoder_forward(net, x)
    assert torch.equal(a, b)
    keys = list(net.state_dict())
    # one encoder copy: block 0 depthwise weights appear exactly once
    assert sum(k.endswith("blocks.0.depthwise.0.weight") for k in keys) == 1
    assert not any(k.startswith(("encoder_v", "encoder_m", "encoder2")) for k in keys)


def test_recurrent_has_one_cell():
    net = build_model(NetConfig())
    k = net.config.channels[-1]
    assert count_parameters(net.recurrent) == count_parameters(ConvLSTMCell(k, k))
    assert count_parameters(net.recurrent) == 4 * k * (2 * k * 9 + 1)


def test_global_match_zero_input_finite():
    gm = GlobalMatch(4, 3, 2).eval()
    z = torch.zeros(3, 4, 2, 2)
    out1, out2 = gm(z, z, 3), gm(z, z, 3)
    assert torch.isfinite(out1).all() and torch.equal(out1, out2)
    with pytest.raises(ValueError):
        gm(z, torch.zeros(3, 4, 2, 1), 3)


def test_global_match_receptive_field_covers_grid():
    torch.manual_seed(3)
    gm = GlobalMatch(4, 3, 4).double().eval()
    fv = torch.randn(3, 4, 4, 4, dtype=torch.float64)
    fm = torch.randn(3, 4, 4, 4, dtype=torch.float64)
    base = gm(fv, fm, 3)
    for src in (fv, fm):
        for idx in np.ndindex(*src.shape):
            pert = src.clone()
            pert[idx] += 1e-3
            out = gm(pert, fm, 3) if src is fv else gm(fv, pert, 3)
            assert not torch.equal(out, base), idx


def test_biclstm_bounded_and_carry_propagates(rng):
    lstm = BiConvLSTM(4).eval()
    g = torch.zeros(3, 4, 2, 2)
    fwd, bwd, _ = lstm.sweeps(g, 3)
    assert fwd.abs().max() <= 1 and bwd.abs().max() <= 1
    x1 = torch.from_numpy(rng.standard_normal((3, 4, 2, 2)).astype(np.float32))
    x2 = torch.from_numpy(rng.standard_normal((3, 4, 2, 2)).astype(np.float32))
    _, carry = lstm(x1, 3)
    with_carry, _ = lstm(x2, 3, carry)
    without, _ = lstm(x2, 3)
    assert not torch.allclose(with_carry, without)


def test_model_step_contract(rng):
    net = build_model(NetConfig())
    v, m = _window(rng, 3, 64, 1), _window(rng, 3, 64, 2)
    y1, s1 = model_step(v, m, ModelState(net))
    y2, s2 = model_step(v, m, ModelState(net))
    assert tuple(y1.shape) == (3, 64, 64, 2)
    assert torch.equal(y1, y2) and torch.equal(s1.carry[0], s2.carry[0])
    with pytest.raises(RuntimeError):
        model_step(v, m, ModelState(None))
    with pytest.raises(ValueError):
        model_step(v[:2], m[:2], ModelState(net))


def test_training_mode_uses_dropout(rng):
    net = build_model(NetConfig())
    v, m = _window(rng, 3, 64, 1), _window(rng, 3, 64, 2)
    a, _ = model_step(v, m, ModelState(net, training=True, generator=torch.Generator().manual_seed(1)))
    b, _ = model_step(v, m, ModelState(net, training=True, generator=torch.Generator().manual_seed(2)))
    c, _ = model_step(v, m, ModelState(net, training=True, generator=torch.Generator().manual_seed(1)))
    assert not torch.equal(a, b)
    assert torch.equal(a, c)


def test_every_parameter_group_gets_gradient(rng):
    net = build_model(NetConfig())
    state = ModelState(net, training=True)
    y, state = model_step(_window(rng, 3, 64, 1), _window(rng, 3, 64, 2), state)
    y, _ = model_step(_window(rng, 3, 64, 1), _window(rng, 3, 64, 2), state)
    alpha, _ = net.tversky()
    (y[..., 0] * torch.from_numpy(rng.random((3, 64, 64)).astype(np.float32))).sum().mul(alpha).backward()
    for name, params in parameter_groups(net).items():
        total = sum(float(p.grad.abs().sum()) for p in params if p.grad is not None)
        assert total > 0, name


def test_finite_difference_gradient_mini_config(rng):
    cfg = NetConfig(in_hw=64, channels=(2, 2, 2, 2, 4))
    assert cfg.bottleneck_hw == 2
    net = build_model(cfg, seed=5).double()
    v = torch.from_numpy(rng.random((3, 64, 64, 1)))
    m = torch.from_numpy(rng.random((3, 64, 64, 2)))
    weight = torch.from_numpy(rng.standard_normal((3, 64, 64)))

    def loss():
        y, _ = model_step(v, m, ModelState(net))
        return (y[..., 0] * weight).sum()

    net.zero_grad()
    loss().backward()
    flat = [(p, i) for p in net.network_parameters() for i in range(p.numel())]
    picks = rng.choice(len(flat), size=100, replace=False)
    eps = 1e-6
    for k in picks:
        p, i = flat[k]
        auto = float(p.grad.view(-1)[i])
        with torch.no_grad():
            orig = float(p.view(-1)[i])
            p.view(-1)[i] = orig + eps
            up = float(loss())
            p.view(-1)[i] = orig - eps
            down = float(loss())
            p.view(-1)[i] = orig
        fd = (up - down) / (2 * eps)
        assert abs(fd - auto) <= 1e-3 * max(abs(auto), abs(fd)) + 1e-7, (k, fd, auto)


def test_checkpoint_round_trip(tmp_path, rng):
    net = build_model(NetConfig(), seed=2)
    path = tmp_path / "net.pt"
    save_checkpoint(net, path, {"note": "x"})
    back = load_checkpoint(path)
    assert back.config == net.config
    assert back.checkpoint_extra == {"note": "x"}
    v, m = _window(rng, 3, 64, 1), _window(rng, 3, 64, 2)
    with torch.no_grad():
        a, _ = model_step(v, m, ModelState(net))
        b, _ = model_step(v, m, ModelState(back))
    assert torch.equal(a, b)


def test_load_rejects_foreign_file(tmp_path):
    path = tmp_path / "x.pt"
    torch.save({"format": "other"}, path)
    with pytest.raises(ValueError):
        load_checkpoint(path)
