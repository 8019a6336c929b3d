"""PatchGAN discriminator with a 16x16 receptive field.

Four convolutions (4x4/2, 3x3/2, 3x3/1, 1x1/1) with same padding give a score
grid of input_size/4 cells, each covering a 16-pixel square of the input.
Instance normalization keeps per-sample scores independent of the rest of the
batch; a sigmoid lives inside the network so the losses receive probabilities.
"""

import torch
import torch.nn as nn

RECEPTIVE_FIELD = 16
# smallest input for which both stride-2 layers still yield a >=2x2 score
# grid; cells then see a truncated (border-clipped) receptive field
MIN_INPUT = 8

# (kernel, stride) per conv layer; used both to build the network and to derive
# the receptive field analytically.
_LAYER_SPEC = ((4, 2), (3, 2), (3, 1), (1, 1))
_CHANNELS = (64, 128, 128)
_LEAKY_SLOPE = 0.2


def receptive_field():
    """Receptive field by the recurrence rf += (kernel - 1) * jump."""
    rf, jump = 1, 1
    for kernel, stride in _LAYER_SPEC:
        rf += (kernel - 1) * jump
        jump *= stride
    return rf


def cell_input_range(i):
    """Input pixel interval [lo, hi] (inclusive, unclipped) feeding score cell i."""
    # Derived by composing the same-padding layer geometry of _LAYER_SPEC.
    return 4 * i - 7, 4 * i + 8


def cells_covering_pixel(r, grid_size):
    """Indices of score cells whose receptive field contains input pixel r."""
    return [i for i in range(grid_size) if cell_input_range(i)[0] <= r <= cell_input_range(i)[1]]


class PatchDiscriminator(nn.Module):
    """DCGAN-style convolutional real/fake classifier over 16x16 patches.

    `normalize=False` drops the instance-norm layers; the conv geometry and
    receptive field are unchanged. Useful for strict locality checks, since
    instance statistics couple distant cells.
    """

    def __init__(self, normalize=True):
        super().__init__()
        (k1, s1), (k2, s2), (k3, s3), (k4, s4) = _LAYER_SPEC
        c1, c2, c3 = _CHANNELS

        def block(c_in, c_out, k, s, norm):
            # padding 1 for k in (3, 4): stride-2 layers halve even inputs exactly
            pad = (k - 1) // 2 if k % 2 else k // 2 - 1
            layers = [nn.Conv2d(c_in, c_out, k, stride=s, padding=pad)]
            if norm:
                layers.append(nn.InstanceNorm2d(c_out, affine=True))
            layers.append(nn.LeakyReLU(_LEAKY_SLOPE))
            return layers

        # first layer unnormalized, per DCGAN guidelines
        layers = block(3, c1, k1, s1, norm=False)
        layers += block(c1, c2, k2, s2, norm=normalize)
        layers += block(c2, c3, k3, s3, norm=normalize)
        layers += [nn.Conv2d(c3, 1, k4, stride=s4), nn.Sigmoid()]
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        if x.shape[-2] < MIN_INPUT or x.shape[-1] < MIN_INPUT:
            raise ValueError(
                f"discriminator input must be at least {MIN_INPUT}x{MIN_INPUT}, "
                f"got {tuple(x.shape[-2:])}"
            )
        return self.net(x)


def build_discriminator(seed=0, normalize=True):
    """Construct a discriminator with seeded, reproducible initialization."""
    torch.manual_seed(seed)
    return PatchDiscriminator(normalize=normalize)


def score(disc, x):
    """Score a (B, 3, H, W) batch; returns the (B, 1, g, g) patch-score grid."""
    return disc(x)
