"""Siamese 3D encoders, global matching fusion, shared bidirectional ConvLSTM
and a refinement decoder.

Internally activations live in a "slice layout" ``(N*D, C, H, W)`` where
``D = w`` is the window depth, so every in-plane operation is a plain 2D op.
3D convolutions keep ``nn.Conv3d`` weights and are evaluated as a 2D
convolution producing one output per depth tap followed by a shift-and-sum
along depth (see :class:`SliceConv3d`). :func:`model_step` takes and returns
channel-last ``(w, H, W, C)`` windows.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .losses import TverskyWeights

CHECKPOINT_FORMAT = "ifssnet-checkpoint-1"
N_LEVELS = 5

Carry = tuple[torch.Tensor, torch.Tensor]


@dataclass(frozen=True)
class NetConfig:
    w: int = 3
    in_hw: int = 64
    channels: tuple[int, ...] = (8, 8, 16, 16, 32)
    atrous_rates: tuple[int, ...] = (1, 6, 12, 18)
    dropout: tuple[float, float, float] = (0.1, 0.4, 0.1)
    kernel: int = 3

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "atrous_rates", tuple(int(r) for r in self.atrous_rates))
        object.__setattr__(self, "dropout", tuple(float(p) for p in self.dropout))
        self.validate()

    def validate(self) -> None:
        if len(self.channels) != N_LEVELS:
            raise ValueError(f"need {N_LEVELS} channel widths, got {len(self.channels)}")
        if any(c <= 0 for c in self.channels):
            raise ValueError("channel widths must be positive")
        if self.in_hw <= 0 or self.in_hw % 2**N_LEVELS:
            raise ValueError(f"in_hw must be a positive multiple of {2**N_LEVELS}, got {self.in_hw}")
        if self.w < 1 or self.w % 2 == 0:
            raise ValueError("window depth w must be odd and >= 1")
        if not self.atrous_rates or any(r < 1 for r in self.atrous_rates):
            raise ValueError("atrous rates must be >= 1")
        if len(self.dropout) != 3 or any(not 0 <= p < 1 for p in self.dropout):
            raise ValueError("dropout needs three rates in [0, 1)")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError("kernel must be odd and positive")

    @property
    def bottleneck_hw(self) -> int:
        return self.in_hw // 2**N_LEVELS


# ------------------------------------------------------------ layout glue


def to_slices(x: torch.Tensor) -> torch.Tensor:
    """``(N, C, D, H, W)`` -> ``(N*D, C, H, W)``."""
    n, c, d, h, w = x.shape
    return x.transpose(1, 2).reshape(n * d, c, h, w)


def from_slices(x: torch.Tensor, depth: int) -> torch.Tensor:
    """``(N*D, C, H, W)`` -> ``(N, C, D, H, W)``."""
    nd, c, h, w = x.shape
    return x.reshape(nd // depth, depth, c, h, w).transpose(1, 2)


def spatial_dropout(x: torch.Tensor, p: float, training: bool, depth: int, generator=None) -> torch.Tensor:
    """Drop whole channels (shared across the window depth) in slice layout.

    The draw uses ``generator`` so training runs are replayable.
    """
    if not training or p == 0.0:
        return x
    nd, c = x.shape[:2]
    keep = torch.rand((nd // depth, 1, c), generator=generator, dtype=x.dtype) >= p
    keep = keep.expand(-1, depth, -1).reshape(nd, c, 1, 1).to(x.dtype)
    return x * keep / (1.0 - p)


def _same_padding(kernel, dilation):
    totals = [d * (k - 1) for k, d in zip(kernel, dilation)]
    if all(t % 2 == 0 for t in totals):
        return tuple(t // 2 for t in totals)
    (th, tw) = totals
    return (tw // 2, tw - tw // 2, th // 2, th - th // 2)


class SliceConv3d(nn.Conv3d):
    """``nn.Conv3d`` (stride 1, depth dilation 1) run on slice-layout tensors.

    One 2D convolution emits ``kd`` partial outputs per channel, one per depth
    tap; shifting those along depth and summing gives exactly the 3D result.
    CPU backends are far faster on this than on native 3D kernels.
    ``forward`` accepts ordinary ``(N, C, D, H, W)`` input for drop-in use.
    """

    def slice_forward(self, x: torch.Tensor, depth: int) -> torch.Tensor:
        kd, kh, kw = self.kernel_size
        if self.stride != (1, 1, 1) or self.dilation[0] != 1:
            raise ValueError("SliceConv3d supports stride 1 and depth dilation 1 only")
        if isinstance(self.padding, str):
            if kd % 2 == 0:
                raise ValueError("'same' depth padding needs an odd depth kernel")
            pd, pad_hw = kd // 2, _same_padding((kh, kw), self.dilation[1:])
        else:
            pd, pad_hw = self.padding[0], tuple(self.padding[1:])
        # (Cout, Cin/g, kd, kh, kw) -> (Cout*kd, Cin/g, kh, kw), channel o*kd + k
        weight = self.weight.permute(0, 2, 1, 3, 4).reshape(self.out_channels * kd, -1, kh, kw)
        if len(pad_hw) == 4:
            # even kernel: asymmetric 'same' padding, extra on the far side
            x, pad_hw = F.pad(x, pad_hw), 0
        x = x.contiguous(memory_format=torch.channels_last)
        y = F.conv2d(x, weight, None, 1, pad_hw, self.dilation[1:], self.groups)
        if kd == 1 and pd == 0:
            out = y
        else:
            nd, _, h, w = y.shape
            n = nd // depth
            y = y.reshape(n, depth, self.out_channels, kd, h, w)
            d_out = depth + 2 * pd - kd + 1
            if d_out == depth:
                # out[d] = sum_k y[d + k - pd, tap k]; shift with cat, not pad,
                # which is much cheaper to differentiate
                out = None
                for k in range(kd):
                    s = k - pd
                    term = y[:, :, :, k]
                    if abs(s) >= depth:
                        continue
                    if s > 0:
                        term = torch.cat([term[:, s:], term.new_zeros((n, s) + term.shape[2:])], dim=1)
                    elif s < 0:
                        term = torch.cat([term.new_zeros((n, -s) + term.shape[2:]), term[:, :s]], dim=1)
                    out = term if out is None else out + term
            else:
                y = F.pad(y, (0, 0, 0, 0, 0, 0, 0, 0, pd, pd))
                out = sum(y[:, k : k + d_out, :, k] for k in range(kd))
            out = out.reshape(n * d_out, self.out_channels, h, w)
        if self.bias is not None:
            out = out + self.bias.view(1, -1, 1, 1)
        return out

    def forward(self, x):
        depth = x.shape[2]
        return from_slices(self.slice_forward(to_slices(x), depth), depth)


# ----------------------------------------------------------------- blocks


class AtrousSeparableConv3d(nn.Module):
    """Depthwise dilated 3D convolutions at several rates, concatenated, then
    mixed by one pointwise convolution.

    Dilation applies in-plane only; the window depth is too short for rates
    above 1 to reach any neighbouring slice.
    """

    def __init__(self, c_in: int, c_out: int, rates=(1, 6, 12, 18), kernel: int = 3):
        super().__init__()
        half = kernel // 2
        self.depthwise = nn.ModuleList(
            SliceConv3d(c_in, c_in, kernel, padding=(half, r * half, r * half), dilation=(1, r, r), groups=c_in)
            for r in rates
        )
        self.pointwise = SliceConv3d(c_in * len(rates), c_out, 1)

    def forward(self, x, depth: int):
        branches = torch.cat([conv.slice_forward(x, depth) for conv in self.depthwise], dim=1)
        return F.relu(self.pointwise.slice_forward(branches, depth))


class Encoder(nn.Module):
    """Five atrous-separable blocks, each followed by in-plane 2x max pooling.

    Returns the pooled bottleneck and the pre-pooling output of every block
    (the feature pyramid, level ``l`` at ``in_hw / 2**l``).
    """

    def __init__(self, config: NetConfig):
        super().__init__()
        widths = (config.channels[0],) + config.channels
        self.blocks = nn.ModuleList(
            AtrousSeparableConv3d(widths[l], widths[l + 1], config.atrous_rates, config.kernel)
            for l in range(N_LEVELS)
        )
        self.p_drop = config.dropout[0]

    def forward(self, x, depth: int, skips_in=None, skip_proj=None, generator=None):
        if skips_in is not None and len(skips_in) != len(self.blocks):
            raise ValueError(f"expected {len(self.blocks)} skip levels, got {len(skips_in)}")
        pyramid = []
        h = x
        for l, block in enumerate(self.blocks):
            if skips_in is not None:
                skip = skip_proj[l].slice_forward(skips_in[l], depth)
                if skip.shape != h.shape:
                    raise ValueError(
                        f"skip level {l} has shape {tuple(skip.shape)}, stream has {tuple(h.shape)}"
                    )
                h = h + skip
            feat = spatial_dropout(block(h, depth), self.p_drop, self.training, depth, generator)
            pyramid.append(feat)
            h = F.max_pool2d(feat, 2)
        return h, pyramid


class ResidualBlock(nn.Module):
    def __init__(self, channels: int, kernel: int = 3):
        super().__init__()
        self.conv1 = SliceConv3d(channels, channels, kernel, padding=kernel // 2)
        self.conv2 = SliceConv3d(channels, channels, kernel, padding=kernel // 2)

    def forward(self, x, depth: int):
        return x + self.conv2.slice_forward(F.relu(self.conv1.slice_forward(F.relu(x), depth)), depth)


class GlobalMatch(nn.Module):
    """Fuse image and mask bottlenecks with two factorized large-kernel chains.

    Chain A runs ``[w,1,1] -> [1,f,1] -> [1,1,f]``, chain B swaps the last two.
    Their sum goes through one residual block.
    """

    def __init__(self, channels: int, w: int, f: int, kernel: int = 3):
        super().__init__()

        def conv(c_in, size):
            return SliceConv3d(c_in, channels, size, padding="same")

        self.chain_a = nn.ModuleList([conv(2 * channels, (w, 1, 1)), conv(channels, (1, f, 1)), conv(channels, (1, 1, f))])
        self.chain_b = nn.ModuleList([conv(2 * channels, (w, 1, 1)), conv(channels, (1, 1, f)), conv(channels, (1, f, 1))])
        self.residual = ResidualBlock(channels, kernel)

    def forward(self, fv, fm, depth: int):
        if fv.shape != fm.shape:
            raise ValueError(f"stream shapes differ: {tuple(fv.shape)} vs {tuple(fm.shape)}")
        x = torch.cat([fv, fm], dim=1)
        a, b = x, x
        for conv in self.chain_a:
            a = conv.slice_forward(a, depth)
        for conv in self.chain_b:
            b = conv.slice_forward(b, depth)
        return self.residual(a + b, depth)


class ConvLSTMCell(nn.Module):
    def __init__(self, in_channels: int, hidden: int, kernel: int = 3):
        super().__init__()
        self.hidden = hidden
        self.gates = nn.Conv2d(in_channels + hidden, 4 * hidden, kernel, padding=kernel // 2)

    def zero_state(self, x) -> Carry:
        n, _, h, w = x.shape
        z = x.new_zeros((n, self.hidden, h, w))
        return z, z

    def forward(self, x, state: Carry) -> Carry:
        h, c = state
        i, f, o, g = torch.chunk(self.gates(torch.cat([x, h], dim=1)), 4, dim=1)
        c = torch.sigmoid(f) * c + torch.sigmoid(i) * torch.tanh(g)
        h = torch.sigmoid(o) * torch.tanh(c)
        return h, c


class BiConvLSTM(nn.Module):
    """One ConvLSTM cell swept forward then backward over the window depth.

    The forward sweep starts from the carried state and its terminal state is
    returned as the next carry; the backward sweep starts from zeros. Both
    sweeps are added to the input as a residual.
    """

    def __init__(self, channels: int, kernel: int = 3, p_drop: float = 0.4):
        super().__init__()
        self.cell = ConvLSTMCell(channels, channels, kernel)
        self.p_drop = p_drop

    def sweeps(self, g, depth: int, carry: Optional[Carry] = None):
        nd, c, h, w = g.shape
        seq = g.reshape(nd // depth, depth, c, h, w)
        steps = [seq[:, d] for d in range(depth)]
        state = carry if carry is not None else self.cell.zero_state(steps[0])
        if state[0].shape != (steps[0].shape[0], self.cell.hidden, h, w):
            raise ValueError(f"carry shape {tuple(state[0].shape)} does not match features {tuple(steps[0].shape)}")
        fwd = []
        for x in steps:
            state = self.cell(x, state)
            fwd.append(state[0])
        carry_out = state
        state = self.cell.zero_state(steps[0])
        bwd = [None] * depth
        for d in reversed(range(depth)):
            state = self.cell(steps[d], state)
            bwd[d] = state[0]
        fwd = torch.stack(fwd, dim=1).reshape(nd, c, h, w)
        bwd = torch.stack(bwd, dim=1).reshape(nd, c, h, w)
        return fwd, bwd, carry_out

    def forward(self, g, depth: int, carry: Optional[Carry] = None, generator=None):
        fwd, bwd, carry_out = self.sweeps(g, depth, carry)
        out = spatial_dropout(g + fwd + bwd, self.p_drop, self.training, depth, generator)
        return out, carry_out


class RefineUp(nn.Module):
    """Transposed-conv upsampling merged with one encoder level."""

    def __init__(self, c_top: int, c_skip: int, c_out: int, kernel: int = 3):
        super().__init__()
        self.up = nn.ConvTranspose3d(c_top, c_out, (1, 2, 2), stride=(1, 2, 2))
        self.skip = SliceConv3d(c_skip, c_out, kernel, padding=kernel // 2)
        self.merge = SliceConv3d(2 * c_out, c_out, kernel, padding=kernel // 2)

    def forward(self, top, skip, depth: int):
        # a (1, 2, 2) transposed conv is a per-slice 2D one
        up = F.relu(F.conv_transpose2d(top, self.up.weight[:, :, 0], self.up.bias, stride=2))
        if up.shape[2:] != skip.shape[2:]:
            raise ValueError(f"pyramid level mismatch: {tuple(up.shape)} vs {tuple(skip.shape)}")
        merged = torch.cat([up, F.relu(self.skip.slice_forward(skip, depth))], dim=1)
        return F.relu(self.merge.slice_forward(merged, depth))


class Decoder(nn.Module):
    def __init__(self, config: NetConfig):
        super().__init__()
        ch = config.channels
        tops = (ch[-1],) + tuple(reversed(ch[1:]))
        self.stages = nn.ModuleList(
            RefineUp(tops[i], ch[N_LEVELS - 1 - i], ch[N_LEVELS - 1 - i], config.kernel) for i in range(N_LEVELS)
        )
        self.head = SliceConv3d(ch[0], 2, 1)
        self.p_drop = config.dropout[2]

    def forward(self, z, skips, depth: int, generator=None):
        if len(skips) != len(self.stages):
            raise ValueError(f"expected {len(self.stages)} pyramid levels, got {len(skips)}")
        x = z
        for stage, skip in zip(self.stages, reversed(skips)):
            x = spatial_dropout(stage(x, skip, depth), self.p_drop, self.training, depth, generator)
        return torch.softmax(self.head.slice_forward(x, depth), dim=1)


class IFSSNet(nn.Module):
    """Full model. ``forward`` takes ``(N, 1, w, H, W)`` images and
    ``(N, 2, w, H, W)`` previous masks and returns ``(N, 2, w, H, W)``
    foreground/background probabilities plus the recurrent carry."""

    def __init__(self, config: NetConfig = NetConfig()):
        super().__init__()
        self.config = config
        ch = config.channels
        self.image_stem = SliceConv3d(1, ch[0], 1)
        self.mask_stem = SliceConv3d(2, ch[0], 1)
        self.encoder = Encoder(config)
        in_widths = (ch[0],) + ch[:-1]
        self.skip_proj = nn.ModuleList(SliceConv3d(ch[l], in_widths[l], 1) for l in range(N_LEVELS))
        self.fusion = GlobalMatch(ch[-1], config.w, config.bottleneck_hw, config.kernel)
        self.recurrent = BiConvLSTM(ch[-1], config.kernel, config.dropout[1])
        self.decoder = Decoder(config)
        self.tversky = TverskyWeights()

    # slice-layout stages, exposed for probing individual components
    def encode_image(self, v, depth, generator=None):
        return self.encoder(self.image_stem.slice_forward(v, depth), depth, generator=generator)

    def encode_mask(self, m, depth, image_pyramid, generator=None):
        return self.encoder(
            self.mask_stem.slice_forward(m, depth), depth, image_pyramid, self.skip_proj, generator=generator
        )

    def forward(self, v, m, carry: Optional[Carry] = None, generator=None):
        depth = v.shape[2]
        fv, img_pyr = self.encode_image(to_slices(v), depth, generator)
        fm, mask_pyr = self.encode_mask(to_slices(m), depth, img_pyr, generator)
        g = self.fusion(fv, fm, depth)
        z, carry = self.recurrent(g, depth, carry, generator)
        probs = self.decoder(z, mask_pyr, depth, generator)
        return from_slices(probs, depth), carry

    def network_parameters(self):
        """Everything except the Tversky weights, i.e. the L2-regularized set."""
        return [p for name, p in self.named_parameters() if not name.startswith("tversky.")]

    def l2_norm_sq(self) -> torch.Tensor:
        return sum((p * p).sum() for p in self.network_parameters())


def build_model(config: NetConfig = NetConfig(), seed: int = 0) -> IFSSNet:
    """Construct with fan-in scaled uniform weights and forget-gate bias 1."""
    net = IFSSNet(config)
    gen = torch.Generator().manual_seed(seed)
    for module in net.modules():
        if isinstance(module, (nn.Conv2d, nn.Conv3d, nn.ConvTranspose3d)):
            nn.init.kaiming_uniform_(module.weight, nonlinearity="relu", generator=gen)
            nn.init.zeros_(module.bias)
    cell = net.recurrent.cell
    with torch.no_grad():
        cell.gates.bias[cell.hidden : 2 * cell.hidden].fill_(1.0)
    return net


# ----------------------------------------------------- component wrappers


def _window_to_slices(x) -> torch.Tensor:
    # (w, H, W, C) channel-last window -> (w, C, H, W) slice layout, N = 1
    return torch.as_tensor(x).permute(0, 3, 1, 2)


def _slices_to_window(x) -> torch.Tensor:
    return x.permute(0, 2, 3, 1)


def encoder_forward(net: IFSSNet, x, skips_in=None, generator=None):
    """Run the shared encoder on one ``(w, H, W, C)`` window.

    ``C == 1`` selects the image stem, ``C == 2`` the mask stem; a mask stream
    takes the image stream's pyramid as ``skips_in``. Returns the channel-last
    bottleneck ``(w, f, f, k)`` and the pyramid (slice layout, per level).
    """
    x = _window_to_slices(x).to(next(net.parameters()).dtype)
    depth = x.shape[0]
    if x.shape[2] % 2**N_LEVELS or x.shape[3] % 2**N_LEVELS:
        raise ValueError(f"spatial dims must be divisible by {2**N_LEVELS}, got {tuple(x.shape[2:])}")
    if x.shape[1] == 1:
        if skips_in is not None:
            raise ValueError("image stream takes no skip input")
        bottleneck, pyramid = net.encode_image(x, depth, generator)
    elif x.shape[1] == 2:
        if skips_in is None:
            bottleneck, pyramid = net.encoder(net.mask_stem.slice_forward(x, depth), depth, generator=generator)
        else:
            bottleneck, pyramid = net.encode_mask(x, depth, skips_in, generator)
    else:
        raise ValueError(f"expected 1 or 2 input channels, got {x.shape[1]}")
    return _slices_to_window(bottleneck), pyramid


def global_match(net: IFSSNet, fv, fm):
    """Channel-last ``(w, f, f, k)`` bottlenecks in, fused ``(w, f, f, k)`` out."""
    fv, fm = _window_to_slices(fv), _window_to_slices(fm)
    return _slices_to_window(net.fusion(fv, fm, fv.shape[0]))


def biclstm_forward(net: IFSSNet, g, carry_in: Optional[Carry] = None, generator=None):
    g = _window_to_slices(g)
    out, carry = net.recurrent(g, g.shape[0], carry_in, generator)
    return _slices_to_window(out), carry


def decoder_forward(net: IFSSNet, z, skips, generator=None):
    z = _window_to_slices(z)
    return _slices_to_window(net.decoder(z, skips, z.shape[0], generator))


# ------------------------------------------------------------------ state


@dataclass
class ModelState:
    """Network parameters plus everything threaded between window steps."""

    net: Optional[IFSSNet]
    carry: Optional[Carry] = None
    training: bool = False
    generator: torch.Generator = field(default_factory=lambda: torch.Generator().manual_seed(0))

    def reset(self) -> "ModelState":
        return replace(self, carry=None)

    def detach(self) -> "ModelState":
        if self.carry is None:
            return self
        return replace(self, carry=(self.carry[0].detach(), self.carry[1].detach()))


def model_step(v_t, m_prev, state: ModelState):
    """Advance the recurrence by one window.

    ``v_t`` is ``(w, H, W, 1)``, ``m_prev`` is ``(w, H, W, 2)``; returns the
    channel-last probabilities ``(w, H, W, 2)`` and the updated state. Dropout
    is only active when ``state.training`` is set.
    """
    if state is None or state.net is None:
        raise RuntimeError("model state is not initialized")
    net = state.net
    dtype = next(net.parameters()).dtype
    v = torch.as_tensor(v_t).to(dtype)
    m = torch.as_tensor(m_prev).to(dtype)
    cfg = net.config
    if v.dim() != 4 or m.dim() != 4 or v.shape[-1] != 1 or m.shape[-1] != 2:
        raise ValueError(f"expected (w, H, W, 1) and (w, H, W, 2) windows, got {tuple(v.shape)} and {tuple(m.shape)}")
    if v.shape[:3] != (cfg.w, cfg.in_hw, cfg.in_hw) or m.shape[:3] != v.shape[:3]:
        raise ValueError(
            f"windows must be ({cfg.w}, {cfg.in_hw}, {cfg.in_hw}); got {tuple(v.shape[:3])} and {tuple(m.shape[:3])}"
        )
    net.train(state.training)
    probs, carry = net(v.permute(3, 0, 1, 2)[None], m.permute(3, 0, 1, 2)[None], state.carry, state.generator)
    return probs[0].permute(1, 2, 3, 0), replace(state, carry=carry)


# ------------------------------------------------------------ checkpoints


def save_checkpoint(net: IFSSNet, path: str | os.PathLike, extra: Optional[dict] = None) -> None:
    cfg = asdict(net.config)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "config": {k: list(v) if isinstance(v, tuple) else v for k, v in cfg.items()},
        "state_dict": net.state_dict(),
        "extra": extra or {},
    }
    torch.save(payload, path)


def load_checkpoint(path: str | os.PathLike) -> IFSSNet:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not an ifssnet checkpoint")
    net = IFSSNet(NetConfig(**payload["config"]))
    dtype = next(iter(payload["state_dict"].values())).dtype
    net.to(dtype)
    net.load_state_dict(payload["state_dict"])
    net.checkpoint_extra = payload.get("extra", {})
    return net


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def parameter_groups(net: IFSSNet) -> dict[str, list[torch.nn.Parameter]]:
    groups: dict[str, list] = {}
    for name, p in net.named_parameters():
        groups.setdefault(name.split(".")[0], []).append(p)
    return groups


def to_numpy(t: torch.Tensor) -> np.ndarray:
    return t.detach().cpu().numpy()
