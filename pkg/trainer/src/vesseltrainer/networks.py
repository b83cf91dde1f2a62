"""Small 3D networks for desk-scale training.

The generator is a 3-level encoder-decoder with skip connections and a tanh
head over the normalized intensity range; the discriminator is a strided
patch critic. Both are deliberately tiny so a full two-stage run is a
minutes-scale CPU job.
"""

from __future__ import annotations

import torch
from torch import nn

HU_SCALE = 1024.0


def hu_to_norm(x: torch.Tensor) -> torch.Tensor:
    return torch.clamp(x, -HU_SCALE, HU_SCALE) / HU_SCALE


def norm_to_hu(y: torch.Tensor) -> torch.Tensor:
    return y * HU_SCALE


def _conv(cin, cout, norm=True):
    layers = [nn.Conv3d(cin, cout, kernel_size=3, padding=1)]
    if norm:
        layers.append(nn.InstanceNorm3d(cout))
    layers.append(nn.LeakyReLU(0.2, inplace=True))
    return nn.Sequential(*layers)


def _down(cin, cout):
    return nn.Sequential(
        nn.Conv3d(cin, cout, kernel_size=4, stride=2, padding=1),
        nn.InstanceNorm3d(cout),
        nn.LeakyReLU(0.2, inplace=True),
    )


def _up(cin, cout):
    return nn.Sequential(
        nn.ConvTranspose3d(cin, cout, kernel_size=4, stride=2, padding=1),
        nn.InstanceNorm3d(cout),
        nn.LeakyReLU(0.2, inplace=True),
    )


class Generator(nn.Module):
    """Input and output are [B, 1, p, p, p] in the normalized range.

    The head predicts a bounded residual over the input: contrast synthesis
    is an intensity correction, and starting at identity keeps the cycle
    consistent from the first step."""

    def __init__(self, channels: int = 8):
        super().__init__()
        c = channels
        self.enc0 = _conv(1, c)
        self.down1 = _down(c, 2 * c)
        self.down2 = _down(2 * c, 4 * c)
        self.mid = _conv(4 * c, 4 * c)
        self.up1 = _up(4 * c, 2 * c)
        self.dec1 = _conv(4 * c, 2 * c)
        self.up0 = _up(2 * c, c)
        self.dec0 = _conv(2 * c, c)
        self.head = nn.Conv3d(c, 1, kernel_size=3, padding=1)

    def forward(self, x):
        e0 = self.enc0(x)
        e1 = self.down1(e0)
        e2 = self.down2(e1)
        m = self.mid(e2)
        d1 = self.dec1(torch.cat([self.up1(m), e1], dim=1))
        d0 = self.dec0(torch.cat([self.up0(d1), e0], dim=1))
        return x + torch.tanh(self.head(d0))


class Discriminator(nn.Module):
    """Strided patch critic; returns an unbounded score map for LSGAN."""

    def __init__(self, channels: int = 8):
        super().__init__()
        c = channels
        self.net = nn.Sequential(
            nn.Conv3d(1, c, kernel_size=4, stride=2, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv3d(c, 2 * c, kernel_size=4, stride=2, padding=1),
            nn.InstanceNorm3d(2 * c),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv3d(2 * c, 1, kernel_size=3, padding=1),
        )

    def forward(self, x):
        return self.net(x)
