"""Stride-8 residual feature extractor with a two-level compressed pyramid.

Shape arithmetic lives in :func:`spatial_out`. The three downsampling
convolutions are 3x3, stride 2, unpadded, so ``s -> (s - 3) // 2 + 1`` three
times: 127 -> 63 -> 31 -> 15 and 255 -> 127 -> 63 -> 31. The third stage is
dilated (stride 1, padding = dilation) and keeps the size. Feature cell ``k``
of a level is centred on input pixel ``8k + 7``, which puts the centre cell
on the patch centre for both 127 and 255 inputs.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import torch
from torch import nn

TEMPLATE_SIZE = 7


def spatial_out(size: int) -> int:
    for _ in range(3):
        size = (size - 3) // 2 + 1
    return size


@dataclass
class BackboneConfig:
    preset: str = "tiny"
    stem_channels: int = 16
    stage_channels: list[int] = field(default_factory=lambda: [32, 64, 64])
    stage_blocks: list[int] = field(default_factory=lambda: [1, 1, 1])
    compressed_channels: int = 32
    dilation: int = 2
    freeze_early: bool = False

    @classmethod
    def from_preset(cls, preset: str) -> "BackboneConfig":
        if preset == "tiny":
            return cls()
        if preset == "paper":
            return cls(preset="paper", stem_channels=64,
                       stage_channels=[256, 512, 1024], stage_blocks=[3, 4, 6],
                       compressed_channels=256, freeze_early=True)
        raise ValueError(f"unknown backbone preset {preset!r}")


class FeaturePyramid(NamedTuple):
    """Per-level maps [B, C, S, S]; level 0 is stage 2, level 1 is stage 3."""
    levels: tuple[torch.Tensor, torch.Tensor]

    @property
    def size(self) -> int:
        return self.levels[0].shape[-1]


class TemplateSet(NamedTuple):
    levels: tuple[torch.Tensor, torch.Tensor]
    tag: str = "initial"


def conv_bn(cin, cout, k, stride=1, padding=0, dilation=1, relu=True):
    layers = [nn.Conv2d(cin, cout, k, stride, padding, dilation=dilation, bias=False),
              nn.BatchNorm2d(cout)]
    if relu:
        layers.append(nn.ReLU(inplace=True))
    return nn.Sequential(*layers)


class ResBlock(nn.Module):
    """Basic residual block.

    ``down=True``: unpadded stride-2 3x3 entry conv; the shortcut is a
    stride-2 1x1 conv on the input with a one-pixel border trimmed, which
    keeps both paths on the same centres.
    """

    def __init__(self, cin, cout, down=False, dilation=1):
        super().__init__()
        self.down = down
        if down:
            self.conv1 = conv_bn(cin, cout, 3, stride=2)
        else:
            self.conv1 = conv_bn(cin, cout, 3, padding=dilation, dilation=dilation)
        self.conv2 = conv_bn(cout, cout, 3, padding=dilation, dilation=dilation, relu=False)
        if down:
            self.shortcut = conv_bn(cin, cout, 1, stride=2, relu=False)
        elif cin != cout:
            self.shortcut = conv_bn(cin, cout, 1, relu=False)
        else:
            self.shortcut = None
        self.relu = nn.ReLU(inplace=True)

    def forward(self, x):
        out = self.conv2(self.conv1(x))
        if self.down:
            x = x[:, :, 1:-1, 1:-1]
        idt = x if self.shortcut is None else self.shortcut(x)
        return self.relu(out + idt)


def make_stage(cin, cout, blocks, down, dilation=1):
    layers = [ResBlock(cin, cout, down=down, dilation=1 if down else dilation)]
    for _ in range(blocks - 1):
        layers.append(ResBlock(cout, cout, dilation=dilation))
    return nn.Sequential(*layers)


class Backbone(nn.Module):
    def __init__(self, cfg: BackboneConfig | None = None):
        super().__init__()
        cfg = cfg or BackboneConfig()
        self.cfg = cfg
        c1, c2, c3 = cfg.stage_channels
        b1, b2, b3 = cfg.stage_blocks
        self.stem = conv_bn(3, cfg.stem_channels, 3, stride=2)
        self.stage1 = make_stage(cfg.stem_channels, c1, b1, down=True)
        self.stage2 = make_stage(c1, c2, b2, down=True)
        self.stage3 = make_stage(c2, c3, b3, down=False, dilation=cfg.dilation)
        c = cfg.compressed_channels
        self.compress = nn.ModuleList([conv_bn(c2, c, 1, relu=False),
                                       conv_bn(c3, c, 1, relu=False)])
        # number of images pushed through forward(); used to audit encodings
        self.images_encoded = 0

    @property
    def early_modules(self) -> list[nn.Module]:
        return [self.stem, self.stage1]

    def forward(self, images: torch.Tensor) -> FeaturePyramid:
        if images.shape[-1] != images.shape[-2]:
            raise ValueError("backbone expects square inputs")
        if spatial_out(images.shape[-1]) < 1:
            raise ValueError(f"input size {images.shape[-1]} too small for stride 8")
        self.images_encoded += images.shape[0]
        x = self.stage1(self.stem(images))
        f2 = self.stage2(x)
        f3 = self.stage3(f2)
        return FeaturePyramid((self.compress[0](f2), self.compress[1](f3)))


def center_crop7(pyr: FeaturePyramid | tuple, tag: str = "initial") -> TemplateSet:
    levels = pyr.levels if isinstance(pyr, FeaturePyramid) else tuple(pyr)
    out = []
    for f in levels:
        s = f.shape[-1]
        if s < TEMPLATE_SIZE or s % 2 == 0:
            raise ValueError(f"cannot centre-crop 7x7 from a {s}x{s} map")
        lo = (s - TEMPLATE_SIZE) // 2
        out.append(f[..., lo:lo + TEMPLATE_SIZE, lo:lo + TEMPLATE_SIZE])
    return TemplateSet(tuple(out), tag)
