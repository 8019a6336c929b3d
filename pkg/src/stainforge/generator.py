"""Stain transfer generator networks.

Two architectures share one interface: a multi-resolution high-resolution-net
style network (the default) and a plain residual transformation network used by
the style-transfer-only ablations. Both predict a residual image; with the skip
connection enabled the output is input + residual, so a zero-initialized final
layer makes the network an exact identity at step 0.
"""

from dataclasses import dataclass, asdict

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import checkpoint as ckpt


@dataclass(frozen=True)
class GeneratorConfig:
    arch: str = "hrnet"  # "hrnet" or "residual"
    n_stages: int = 3
    branch_channels: tuple = (32, 64, 128)
    blocks_per_stage: int = 2
    residual_blocks: int = 5  # residual arch only
    use_skip: bool = True
    final_zero_init: bool = True

    def __post_init__(self):
        if self.arch not in ("hrnet", "residual"):
            raise ValueError(f"unknown generator arch {self.arch!r}")
        if not self.branch_channels:
            raise ValueError("branch_channels must be non-empty")
        if any(c < 1 for c in self.branch_channels):
            raise ValueError("branch_channels must be positive")
        object.__setattr__(self, "branch_channels", tuple(self.branch_channels))


@dataclass
class GeneratorOutput:
    transformed: torch.Tensor
    residual: torch.Tensor


class ConvBNReLU(nn.Module):
    """3x3 (or kxk) same-padding conv followed by batch norm and ReLU."""

    def __init__(self, c_in, c_out, kernel=3, stride=1):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, kernel, stride=stride, padding=kernel // 2, bias=False)
        self.bn = nn.BatchNorm2d(c_out)

    def forward(self, x):
        return F.relu(self.bn(self.conv(x)))


class ResidualBlock(nn.Module):
    """x + f(x) where f is two conv-bn-relu layers at constant width."""

    def __init__(self, channels):
        super().__init__()
        self.body = nn.Sequential(ConvBNReLU(channels, channels), ConvBNReLU(channels, channels))

    def forward(self, x):
        return x + self.body(x)


class _Downsample(nn.Sequential):
    """Chain of stride-2 conv-bn-relu layers dropping resolution by 2**times."""

    def __init__(self, c_in, c_out, times):
        layers = []
        for i in range(times):
            layers.append(ConvBNReLU(c_in if i == 0 else c_out, c_out, stride=2))
        super().__init__(*layers)


class _Upsample(nn.Module):
    """Nearest-neighbor upsample by 2**times followed by a 1x1 conv-bn-relu."""

    def __init__(self, c_in, c_out, times):
        super().__init__()
        self.factor = 2 ** times
        self.proj = ConvBNReLU(c_in, c_out, kernel=1)

    def forward(self, x):
        return self.proj(F.interpolate(x, scale_factor=self.factor, mode="nearest"))


class _FusionStage(nn.Module):
    """Per-branch residual blocks followed by all-to-all cross-resolution fusion."""

    def __init__(self, channels, blocks_per_stage):
        super().__init__()
        n = len(channels)
        self.blocks = nn.ModuleList(
            nn.Sequential(*[ResidualBlock(c) for _ in range(blocks_per_stage)])
            for c in channels
        )
        fuse = nn.ModuleList()
        for dst in range(n):
            row = nn.ModuleList()
            for src in range(n):
                if src == dst:
                    row.append(nn.Identity())
                elif src < dst:
                    row.append(_Downsample(channels[src], channels[dst], dst - src))
                else:
                    row.append(_Upsample(channels[src], channels[dst], src - dst))
            fuse.append(row)
        self.fuse = fuse

    def forward(self, xs):
        ys = [block(x) for block, x in zip(self.blocks, xs)]
        return [sum(self.fuse[dst][src](ys[src]) for src in range(len(ys))) for dst in range(len(ys))]


class HRNetGenerator(nn.Module):
    """Full-resolution stream with progressively added half/quarter branches.

    Lower-resolution branches are created by strided convolution, fused back
    with the full-resolution stream after every stage, and finally merged into
    a 3-channel residual by an unnormalized, unactivated convolution.
    """

    def __init__(self, config):
        super().__init__()
        self.config = config
        channels = config.branch_channels
        self.stem = ConvBNReLU(3, channels[0])
        self.transitions = nn.ModuleList(
            _Downsample(channels[b - 1], channels[b], 1) for b in range(1, len(channels))
        )
        stages = []
        for s in range(config.n_stages):
            active = min(s + 1, len(channels))
            stages.append(_FusionStage(channels[:active], config.blocks_per_stage))
        self.stages = nn.ModuleList(stages)
        self.merge_up = nn.ModuleList(
            _Upsample(channels[b], channels[0], b) for b in range(1, len(channels))
        )
        n_active = min(config.n_stages, len(channels))
        self.head = ConvBNReLU(channels[0] * n_active, channels[0])
        self.final = nn.Conv2d(channels[0], 3, 3, padding=1)

    @property
    def divisibility(self):
        return 2 ** (len(self.config.branch_channels) - 1)

    def forward(self, p):
        xs = [self.stem(p)]
        for s, stage in enumerate(self.stages):
            while len(xs) < min(s + 1, len(self.config.branch_channels)):
                xs.append(self.transitions[len(xs) - 1](xs[-1]))
            xs = stage(xs)
        merged = [xs[0]] + [self.merge_up[b - 1](xs[b]) for b in range(1, len(xs))]
        h = self.head(torch.cat(merged, dim=1))
        return self.final(h)


class ResidualTransformNet(nn.Module):
    """Feed-forward style-transfer network: downsample, residual blocks, upsample."""

    def __init__(self, config):
        super().__init__()
        self.config = config
        c = list(config.branch_channels[:3])
        while len(c) < 3:
            c.append(c[-1] * 2)
        self.encode = nn.Sequential(
            ConvBNReLU(3, c[0], kernel=9),
            ConvBNReLU(c[0], c[1], stride=2),
            ConvBNReLU(c[1], c[2], stride=2),
        )
        self.blocks = nn.Sequential(*[ResidualBlock(c[2]) for _ in range(config.residual_blocks)])
        self.decode = nn.Sequential(
            _Upsample(c[2], c[1], 1),
            _Upsample(c[1], c[0], 1),
        )
        self.final = nn.Conv2d(c[0], 3, 9, padding=4)

    @property
    def divisibility(self):
        return 4

    def forward(self, p):
        h = self.encode(p)
        h = self.blocks(h)
        h = self.decode(h)
        return self.final(h)


class StainGenerator(nn.Module):
    """Wraps a residual-predicting body with the input-to-output skip connection.

    Training mode leaves the output unclamped so gradients are exact; eval mode
    clamps to [0, 1].
    """

    def __init__(self, config):
        super().__init__()
        self.config = config
        self.body = HRNetGenerator(config) if config.arch == "hrnet" else ResidualTransformNet(config)

    @property
    def divisibility(self):
        return self.body.divisibility

    def forward(self, p):
        d = self.divisibility
        if p.shape[-2] % d or p.shape[-1] % d:
            raise ValueError(
                f"input size {tuple(p.shape[-2:])} must be divisible by {d} for this generator"
            )
        residual = self.body(p)
        t = p + residual if self.config.use_skip else residual
        if not self.training:
            t = t.clamp(0.0, 1.0)
        return GeneratorOutput(transformed=t, residual=residual)


def build_generator(config, seed=0):
    """Construct a generator with seeded, reproducible initialization."""
    torch.manual_seed(seed)
    gen = StainGenerator(config)
    if config.final_zero_init:
        final = gen.body.final
        nn.init.zeros_(final.weight)
        nn.init.zeros_(final.bias)
    return gen


def save_generator(gen, path):
    """Write the generator's parameters, buffers and config to a checkpoint file."""
    meta = {"kind": "generator", "config": asdict(gen.config)}
    ckpt.save_tensors(path, gen.state_dict(), meta=meta)


def load_generator(path):
    """Rebuild a generator from a checkpoint written by `save_generator`."""
    tensors, meta = ckpt.load_tensors(path)
    if meta.get("kind") != "generator":
        raise ckpt.CheckpointError(f"{path} is not a generator checkpoint")
    config = GeneratorConfig(**{**meta["config"], "branch_channels": tuple(meta["config"]["branch_channels"])})
    gen = StainGenerator(config)
    gen.load_state_dict(tensors)
    return gen
