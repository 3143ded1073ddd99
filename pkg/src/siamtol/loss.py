"""Per-aspect detection loss (cross entropy + lambda * smooth-L1) and their sum."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .geometry import NEGATIVE, POSITIVE, LabelMap
from .model import ASPECTS
from .rpn import RpnOutputs


class EmptyLabelWarning(UserWarning):
    pass


@dataclass
class LossConfig:
    lambda_reg: float = 1.2
    aspects: list[str] = field(default_factory=lambda: list(ASPECTS))

    def __post_init__(self):
        if self.lambda_reg <= 0:
            raise ValueError("lambda_reg must be positive")
        unknown = set(self.aspects) - set(ASPECTS)
        if unknown:
            raise ValueError(f"unknown loss aspects {sorted(unknown)}")
        if "overall" not in self.aspects:
            raise ValueError("the overall aspect cannot be disabled")


def _flat_cls(cls_map: torch.Tensor) -> torch.Tensor:
    """[.., 2A, R, R] -> [.., A*R*R, 2] in anchor order (a, i, j)."""
    *lead, c, r1, r2 = cls_map.shape
    x = cls_map.reshape(*lead, c // 2, 2, r1, r2)
    return x.movedim(-3, -1).reshape(*lead, (c // 2) * r1 * r2, 2)


def _flat_reg(reg_map: torch.Tensor) -> torch.Tensor:
    *lead, c, r1, r2 = reg_map.shape
    x = reg_map.reshape(*lead, c // 4, 4, r1, r2)
    return x.movedim(-3, -1).reshape(*lead, (c // 4) * r1 * r2, 4)


def foreground_prob(cls_map: torch.Tensor) -> torch.Tensor:
    """Foreground softmax probability per anchor, flattened in (a, i, j) order."""
    return torch.softmax(_flat_cls(cls_map), dim=-1)[..., 1]


def flat_deltas(reg_map: torch.Tensor) -> torch.Tensor:
    return _flat_reg(reg_map)


def classification_loss(cls_map: torch.Tensor, labels: LabelMap) -> torch.Tensor:
    """Mean cross entropy over sampled (positive and negative) anchors."""
    logits = _flat_cls(cls_map).reshape(-1, 2)
    lab = np.asarray(labels.cls).reshape(-1)
    if lab.shape[0] != logits.shape[0]:
        raise ValueError(f"{lab.shape[0]} labels for {logits.shape[0]} anchors")
    idx = np.flatnonzero((lab == POSITIVE) | (lab == NEGATIVE))
    if idx.size == 0:
        warnings.warn("no sampled anchors; classification loss is 0", EmptyLabelWarning)
        return cls_map.sum() * 0.0
    it = torch.from_numpy(idx)
    target = torch.from_numpy((lab[idx] == POSITIVE).astype(np.int64))
    return F.cross_entropy(logits[it], target, reduction="mean")


def smooth_l1(d: torch.Tensor) -> torch.Tensor:
    a = d.abs()
    return torch.where(a < 1.0, 0.5 * d * d, a - 0.5)


def regression_loss(reg_map: torch.Tensor, labels: LabelMap) -> torch.Tensor:
    """Mean over positive anchors of the per-coordinate-averaged smooth-L1."""
    deltas = _flat_reg(reg_map).reshape(-1, 4)
    lab = np.asarray(labels.cls).reshape(-1)
    idx = np.flatnonzero(lab == POSITIVE)
    if idx.size == 0:
        warnings.warn("no positive anchors; regression loss is 0", EmptyLabelWarning)
        return reg_map.sum() * 0.0
    target = np.asarray(labels.reg_target).reshape(-1, 4)[idx]
    tgt = torch.as_tensor(target, dtype=reg_map.dtype)
    return smooth_l1(deltas[torch.from_numpy(idx)] - tgt).mean()


@dataclass
class AspectLoss:
    cls: torch.Tensor
    reg: torch.Tensor
    total: torch.Tensor
    degenerate: bool = False


@dataclass
class LossBundle:
    aspects: dict[str, AspectLoss]
    total: torch.Tensor

    def row(self) -> dict[str, float]:
        out = {}
        for name in ASPECTS:
            a = self.aspects.get(name)
            out[f"loss_{name}_cls"] = float(a.cls.detach()) if a else 0.0
            out[f"loss_{name}_reg"] = float(a.reg.detach()) if a else 0.0
        out["loss_total"] = float(self.total.detach())
        return out


def aspect_loss(outputs: RpnOutputs, labels: LabelMap, cfg: LossConfig | None = None) -> AspectLoss:
    cfg = cfg or LossConfig()
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", EmptyLabelWarning)
        lc = classification_loss(outputs.cls, labels)
        lr = regression_loss(outputs.reg, labels)
    return AspectLoss(lc, lr, lc + cfg.lambda_reg * lr, degenerate=bool(caught))


def total_loss(aspects: dict[str, AspectLoss]) -> torch.Tensor:
    if "overall" not in aspects:
        raise ValueError("overall aspect missing")
    return sum(a.total for a in aspects.values())


def multi_aspect_loss(outputs: dict[str, RpnOutputs], labels: LabelMap,
                      cfg: LossConfig | None = None) -> LossBundle:
    cfg = cfg or LossConfig()
    parts = {name: aspect_loss(outputs[name], labels, cfg)
             for name in ASPECTS if name in cfg.aspects}
    return LossBundle(parts, total_loss(parts))
