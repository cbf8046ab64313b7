"""Skip-free reconstruction encoder-decoder, U-Net style segmenter and checkpoints."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from . import diffengine as de
from .errors import FormatError, ParameterError, ShapeError

CUE_MODES = ("none", "coarse", "fine")


@dataclass
class ReconNetConfig:
    encoder_layers: int = 10
    decoder_layers: int = 10
    base_channels: int = 16
    downsample_stages: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.encoder_layers != self.decoder_layers:
            raise ParameterError("encoder and decoder must have the same number of layers")
        if self.encoder_layers <= self.downsample_stages:
            raise ParameterError("need more encoder layers than downsampling stages")
        if self.base_channels < 1 or self.downsample_stages < 0:
            raise ParameterError("invalid reconstruction network widths")


@dataclass
class SegNetConfig:
    in_channels: int = 4
    depth: int = 3
    base_channels: int = 16
    skip_connections: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.in_channels < 1 or self.depth < 1 or self.base_channels < 1:
            raise ParameterError("invalid segmentation network config")


class Conv(nn.Module):
    """3x3 (or kxk) convolution holding its own weight and bias."""

    def __init__(self, cin: int, cout: int, k: int = 3, stride: int = 1):
        super().__init__()
        # float32 matches the checkpoint payload, so save/load is lossless
        self.weight = nn.Parameter(torch.empty(cout, cin, k, k, dtype=torch.float32))
        self.bias = nn.Parameter(torch.zeros(cout, dtype=torch.float32))
        self.stride = stride
        self.padding = k // 2

    def forward(self, x):
        return de.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


def init_params(net: nn.Module, seed: int) -> dict[str, torch.Tensor]:
    """He-normal weights (std sqrt(2 / fan_in)), zero biases; deterministic per seed."""
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for name, p in net.named_parameters():
            if name.endswith("bias"):
                p.zero_()
            else:
                fan_in = p.shape[1] * p.shape[2] * p.shape[3]
                std = math.sqrt(2.0 / fan_in)
                p.copy_(torch.randn(p.shape, generator=gen, dtype=torch.float64).to(p.dtype) * std)
    return dict(net.named_parameters())


def zero_params(net: nn.Module) -> None:
    with torch.no_grad():
        for p in net.parameters():
            p.zero_()


def _stride_positions(layers: int, stages: int) -> list[int]:
    return [round(j * layers / (stages + 1)) for j in range(1, stages + 1)]


class ReconNet(nn.Module):
    """Encoder-decoder mapping a coarse background to a fine one, with no skip connections.

    The decoder consumes nothing but the encoder's final output; strided
    convolutions in the encoder are mirrored by nearest 2x upsampling in the
    decoder and the result is cropped back to the input size before a
    sigmoid.
    """

    def __init__(self, config: ReconNetConfig | None = None):
        super().__init__()
        self.config = config or ReconNetConfig()
        c = self.config
        n = c.encoder_layers
        self.down_at = set(_stride_positions(n, c.downsample_stages))
        self.up_at = {n - p for p in self.down_at}

        enc, ch, stage = [], 3, 0
        for i in range(n):
            stride = 1
            if i in self.down_at:
                stage += 1
                stride = 2
            out = c.base_channels * 2 ** stage
            enc.append(Conv(ch, out, stride=stride))
            ch = out
        dec = []
        for i in range(n):
            if i in self.up_at:
                stage -= 1
            out = 3 if i == n - 1 else c.base_channels * 2 ** stage
            dec.append(Conv(ch, out))
            ch = out
        self.encoder = nn.ModuleList(enc)
        self.decoder = nn.ModuleList(dec)
        init_params(self, c.seed)

    def encode(self, x):
        for conv in self.encoder:
            x = de.relu(conv(x))
        return x

    def decode(self, z, height: int, width: int):
        last = len(self.decoder) - 1
        for i, conv in enumerate(self.decoder):
            if i in self.up_at:
                z = de.upsample_nearest(z, 2)
            z = conv(z)
            if i != last:
                z = de.relu(z)
        return de.sigmoid(de.crop(z, height, width))

    def forward(self, x):
        if x.dim() != 4 or x.shape[1] != 3:
            raise ShapeError(f"reconstruction input must be (N, 3, H, W), got {tuple(x.shape)}")
        return self.decode(self.encode(x), x.shape[2], x.shape[3])


class SegNet(nn.Module):
    """Small U-Net producing a 1-channel logit map at input resolution.

    Any module with the same (N, C, H, W) -> (N, 1, H, W) contract can be
    used in its place.
    """

    def __init__(self, config: SegNetConfig | None = None):
        super().__init__()
        self.config = config or SegNetConfig()
        c = self.config
        widths = [c.base_channels * 2 ** s for s in range(c.depth)]
        self.down = nn.ModuleList()
        ch = c.in_channels
        for w in widths:
            self.down.append(nn.ModuleList([Conv(ch, w), Conv(w, w)]))
            ch = w
        self.up = nn.ModuleList()
        for s in range(c.depth - 2, -1, -1):
            cin = ch + (widths[s] if c.skip_connections else 0)
            self.up.append(nn.ModuleList([Conv(cin, widths[s]), Conv(widths[s], widths[s])]))
            ch = widths[s]
        self.head = Conv(ch, 1, k=1)
        init_params(self, c.seed)

    def forward(self, x):
        if x.dim() != 4 or x.shape[1] != self.config.in_channels:
            raise ShapeError(f"segmentation input must be (N, {self.config.in_channels}, H, W), "
                             f"got {tuple(x.shape)}")
        skips = []
        h = x
        for s, (a, b) in enumerate(self.down):
            if s > 0:
                skips.append(h)
                h = de.maxpool2d(h, 2, ceil_mode=True)
            h = de.relu(b(de.relu(a(h))))
        for a, b in self.up:
            skip = skips.pop()
            h = de.crop(de.upsample_nearest(h, 2), skip.shape[2], skip.shape[3])
            if self.config.skip_connections:
                h = de.concat_channels(h, skip)
            h = de.relu(b(de.relu(a(h))))
        return self.head(h)


@dataclass
class Checkpoint:
    """Everything needed to resume training or run inference."""

    seg: SegNet
    recon: ReconNet | None = None
    adam: de.AdamState | None = None
    cue_mode: str = "fine"
    kernel: int = 8
    step: int = 0
    train_config: dict = field(default_factory=dict)
    rng_state: dict | None = None

    def named_parameters(self) -> dict[str, torch.Tensor]:
        out = {}
        if self.recon is not None:
            out.update({f"recon.{n}": p for n, p in self.recon.named_parameters()})
        out.update({f"seg.{n}": p for n, p in self.seg.named_parameters()})
        return out


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    params = ckpt.named_parameters()
    tensors = [(f"param/{n}", p.detach().numpy()) for n, p in params.items()]
    manifest = {
        "format": "CCKPT1",
        "cue_mode": ckpt.cue_mode,
        "kernel": ckpt.kernel,
        "step": ckpt.step,
        "seg_config": asdict(ckpt.seg.config),
        "recon_config": asdict(ckpt.recon.config) if ckpt.recon is not None else None,
        "train_config": ckpt.train_config,
        "rng_state": ckpt.rng_state,
        "adam": ckpt.adam.hyper() if ckpt.adam is not None else None,
    }
    if ckpt.adam is not None:
        for n in params:
            if n in ckpt.adam.m:
                tensors.append((f"adam_m/{n}", ckpt.adam.m[n].numpy()))
                tensors.append((f"adam_v/{n}", ckpt.adam.v[n].numpy()))
    de.write_cckpt(path, manifest, tensors)


def load_checkpoint(path) -> Checkpoint:
    manifest, arrays = de.read_cckpt(path)
    if manifest.get("format") != "CCKPT1":
        raise FormatError(f"{path}: unexpected checkpoint format {manifest.get('format')!r}")
    seg = SegNet(SegNetConfig(**manifest["seg_config"]))
    recon = None
    if manifest.get("recon_config") is not None:
        recon = ReconNet(ReconNetConfig(**manifest["recon_config"]))
    ckpt = Checkpoint(seg=seg, recon=recon, cue_mode=manifest["cue_mode"],
                      kernel=manifest["kernel"], step=manifest["step"],
                      train_config=manifest.get("train_config") or {},
                      rng_state=manifest.get("rng_state"))
    params = ckpt.named_parameters()
    with torch.no_grad():
        for n, p in params.items():
            key = f"param/{n}"
            if key not in arrays:
                raise FormatError(f"{path}: missing tensor {key!r}")
            if tuple(arrays[key].shape) != tuple(p.shape):
                raise FormatError(f"{path}: {key!r} has shape {arrays[key].shape}, "
                                  f"config implies {tuple(p.shape)}")
            p.copy_(torch.from_numpy(arrays[key]))
    hyper = manifest.get("adam")
    if hyper is not None:
        adam = de.AdamState(**hyper)
        for n in params:
            if f"adam_m/{n}" in arrays:
                adam.m[n] = torch.from_numpy(np.array(arrays[f"adam_m/{n}"]))
                adam.v[n] = torch.from_numpy(np.array(arrays[f"adam_v/{n}"]))
        ckpt.adam = adam
    return ckpt
