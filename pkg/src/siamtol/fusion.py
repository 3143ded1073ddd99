"""Residual template fusion: fused = zf + M(concat(zf, uf)).

M is three 1x1 convolutions (2C -> C -> C/2 -> C for the 256-channel layout
that is 512 -> 256 -> 128 -> 256), ReLU after the first two. The last layer
starts at zero so a freshly built fuser returns ``zf`` unchanged.
"""
from __future__ import annotations

import torch
from torch import nn

from .backbone import TemplateSet


class FusionBlock(nn.Module):
    def __init__(self, channels: int, zero_init: bool = True):
        super().__init__()
        # 256 / 128 hidden widths scale with the template width
        h1 = channels
        h2 = max(channels // 2, 1)
        self.net = nn.Sequential(
            nn.Conv2d(2 * channels, h1, 1), nn.ReLU(inplace=True),
            nn.Conv2d(h1, h2, 1), nn.ReLU(inplace=True),
            nn.Conv2d(h2, channels, 1),
        )
        if zero_init:
            nn.init.zeros_(self.net[-1].weight)
            nn.init.zeros_(self.net[-1].bias)

    @property
    def last(self) -> nn.Conv2d:
        return self.net[-1]

    def forward(self, zf: torch.Tensor, uf: torch.Tensor) -> torch.Tensor:
        if zf.shape != uf.shape:
            raise ValueError(f"template shapes differ: {tuple(zf.shape)} vs {tuple(uf.shape)}")
        return zf + self.net(torch.cat([zf, uf], dim=1))


class TemplateFusion(nn.Module):
    """Independent fusion block per pyramid level."""

    def __init__(self, channels: int, levels: int = 2, zero_init: bool = True):
        super().__init__()
        self.blocks = nn.ModuleList(FusionBlock(channels, zero_init) for _ in range(levels))

    def forward(self, zf: TemplateSet, uf: TemplateSet) -> TemplateSet:
        return fuse_template(zf, uf, self)


def fuse_template(zf: TemplateSet, uf: TemplateSet, fusion: TemplateFusion) -> TemplateSet:
    if len(zf.levels) != len(uf.levels) or len(zf.levels) != len(fusion.blocks):
        raise ValueError("template level count mismatch")
    return TemplateSet(tuple(blk(z, u) for blk, z, u in
                             zip(fusion.blocks, zf.levels, uf.levels)), "fused")
