"""Depth-wise correlation RPN blocks and their learnable level aggregation.

Channel layout of the outputs: ``cls`` channel ``2a + k`` is the logit of
class ``k`` (0 background, 1 foreground) for anchor type ``a``; ``reg``
channel ``4a + j`` is delta ``j`` of (dx, dy, dw, dh).
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .backbone import FeaturePyramid, TemplateSet


def depthwise_xcorr(search: torch.Tensor, kernel: torch.Tensor) -> torch.Tensor:
    """Valid per-channel cross-correlation of ``search`` with ``kernel``.

    Accepts [C, H, W] / [C, k, k] or batched [B, C, H, W] / [B, C, k, k].
    """
    unbatched = search.dim() == 3
    if unbatched:
        search, kernel = search.unsqueeze(0), kernel.unsqueeze(0)
    b, c, h, w = search.shape
    if kernel.shape[:2] != (b, c):
        raise ValueError(f"kernel {tuple(kernel.shape)} does not match search {tuple(search.shape)}")
    kh, kw = kernel.shape[-2:]
    if kh > h or kw > w:
        raise ValueError("kernel larger than search map")
    out = F.conv2d(search.reshape(1, b * c, h, w), kernel.reshape(b * c, 1, kh, kw), groups=b * c)
    out = out.reshape(b, c, out.shape[-2], out.shape[-1])
    return out[0] if unbatched else out


def aggregate_maps(maps, logits: torch.Tensor) -> torch.Tensor:
    """Softmax(logits)-weighted sum of shape-identical level maps."""
    maps = list(maps)
    if len(maps) != logits.shape[0]:
        raise ValueError("one logit per level required")
    if any(m.shape != maps[0].shape for m in maps):
        raise ValueError("level maps must share a shape")
    weights = torch.softmax(logits, dim=0)
    return sum(wt * m for wt, m in zip(weights, maps))


class XCorrBranch(nn.Module):
    """Adjust both inputs (3x3, size preserving, bias-free), correlate, head."""

    def __init__(self, channels: int, out_channels: int):
        super().__init__()
        self.template_adjust = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1, bias=False), nn.ReLU(inplace=True))
        self.search_adjust = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1, bias=False), nn.ReLU(inplace=True))
        self.head = nn.Sequential(
            nn.Conv2d(channels, channels, 1), nn.ReLU(inplace=True),
            nn.Conv2d(channels, out_channels, 1))

    def correlate(self, template: torch.Tensor, search: torch.Tensor,
                  search_adjusted: torch.Tensor | None = None) -> torch.Tensor:
        if search_adjusted is None:
            search_adjusted = self.search_adjust(search)
        return depthwise_xcorr(search_adjusted, self.template_adjust(template))

    def forward(self, template, search, search_adjusted=None):
        return self.head(self.correlate(template, search, search_adjusted))


@dataclass
class RpnOutputs:
    cls: torch.Tensor                  # [B, 2A, R, R]
    reg: torch.Tensor                  # [B, 4A, R, R]
    cls_levels: tuple[torch.Tensor, ...]
    reg_levels: tuple[torch.Tensor, ...]


class RPN(nn.Module):
    def __init__(self, channels: int, num_anchors: int, levels: int = 2):
        super().__init__()
        self.num_anchors = num_anchors
        self.cls_branches = nn.ModuleList(XCorrBranch(channels, 2 * num_anchors) for _ in range(levels))
        self.reg_branches = nn.ModuleList(XCorrBranch(channels, 4 * num_anchors) for _ in range(levels))
        self.cls_logits = nn.Parameter(torch.zeros(levels))
        self.reg_logits = nn.Parameter(torch.zeros(levels))

    def forward(self, template: TemplateSet, search: FeaturePyramid) -> RpnOutputs:
        return rpn_forward(template, search, self)


def _check_levels(tl, sl, rpn):
    if len(tl) != len(sl) or len(tl) != len(rpn.cls_branches):
        raise ValueError("template/search/RPN level counts differ")
    for t, s in zip(tl, sl):
        if t.shape[:2] != s.shape[:2]:
            raise ValueError(f"template {tuple(t.shape)} vs search {tuple(s.shape)}")


def rpn_forward(template: TemplateSet, search: FeaturePyramid, rpn: RPN) -> RpnOutputs:
    return rpn_forward_many([template], search, rpn)[0]


def rpn_forward_many(templates, search: FeaturePyramid, rpn: RPN) -> list[RpnOutputs]:
    """Detect with several templates against one search pyramid.

    The search-side adjust convolutions run once and are shared.
    """
    sl = search.levels if isinstance(search, FeaturePyramid) else tuple(search)
    for t in templates:
        _check_levels(t.levels, sl, rpn)
    cls_adj = [br.search_adjust(s) for br, s in zip(rpn.cls_branches, sl)]
    reg_adj = [br.search_adjust(s) for br, s in zip(rpn.reg_branches, sl)]
    outs = []
    for t in templates:
        cls_levels = tuple(br(z, s, a) for br, z, s, a in zip(rpn.cls_branches, t.levels, sl, cls_adj))
        reg_levels = tuple(br(z, s, a) for br, z, s, a in zip(rpn.reg_branches, t.levels, sl, reg_adj))
        outs.append(RpnOutputs(aggregate_maps(cls_levels, rpn.cls_logits),
                               aggregate_maps(reg_levels, rpn.reg_logits),
                               cls_levels, reg_levels))
    return outs
