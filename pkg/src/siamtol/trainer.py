"""Triplet sampling, update-sample augmentation, LR schedule and SGD training."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import cv2
import numpy as np
import torch

from .data import Sequence
from .geometry import AnchorSet, BBox, LabelConfig, LabelMap, assign_labels, context_size, crop_patch, stack_labels
from .loss import LossBundle, LossConfig, multi_aspect_loss
from .model import ASPECTS, SiamTOL

log = logging.getLogger(__name__)

LOG_COLUMNS = ["step", "epoch", "lr"] + [f"loss_{a}_{k}" for a in ASPECTS for k in ("cls", "reg")] + ["loss_total"]


class NonFiniteLoss(RuntimeError):
    def __init__(self, aspect: str, value: float):
        super().__init__(f"non-finite {aspect} loss ({value})")
        self.aspect = aspect


@dataclass
class CropConfig:
    exemplar_size: int = 127
    search_size: int = 255
    context_amount: float = 0.5


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 8
    pairs_per_epoch: int = 2000
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_start: float = 0.001
    lr_peak: float = 0.005
    lr_end: float = 0.0005
    warmup_epochs: int = 5
    backbone_unfreeze_epoch: int = 1
    backbone_lr_divisor: float = 16.0
    max_gap: int = 100
    p_rotate: float = 0.3
    p_blur: float = 0.3
    p_occlude: float = 0.3
    rotate_max_deg: float = 15.0
    occlude_area: list[float] = field(default_factory=lambda: [0.1, 0.3])
    update_jitter: float = 0.05      # update crop centre/size noise, fraction of box size
    search_shift: float = 32.0       # max search crop offset, search-patch pixels
    search_scale_jitter: float = 0.05
    seed: int = 0

    @classmethod
    def from_preset(cls, preset: str) -> "TrainConfig":
        if preset == "tiny":
            return cls()
        if preset == "paper":
            return cls(epochs=20, batch_size=32, pairs_per_epoch=600_000, backbone_unfreeze_epoch=11)
        raise ValueError(f"unknown train preset {preset!r}")

    def validate(self) -> None:
        rates = (self.lr_start, self.lr_peak, self.lr_end, self.backbone_lr_divisor)
        if min(rates) <= 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ValueError("learning rates and divisor must be positive")
        if not 1 <= self.backbone_unfreeze_epoch <= self.epochs:
            raise ValueError("backbone_unfreeze_epoch must lie in [1, epochs]")
        if not 0 <= self.warmup_epochs <= self.epochs:
            raise ValueError("warmup_epochs must lie in [0, epochs]")


@dataclass
class SampleTriplet:
    exemplar: np.ndarray     # 127x127x3 float32
    update: np.ndarray       # 127x127x3 float32, augmented
    search: np.ndarray       # 255x255x3 float32
    gt: BBox                 # in search-patch pixels
    frames: tuple[int, int, int]
    labels: LabelMap | None = None


# ---------------------------------------------------------------------------
# sampling

def sample_frames(n_valid: int, rng: np.random.Generator, max_gap: int) -> tuple[int, int, int]:
    """Positions (z, u, x) into the list of valid frames with z <= u <= x."""
    iz = int(rng.integers(n_valid))
    ix = int(rng.integers(iz, min(iz + max_gap, n_valid - 1) + 1))
    iu = int(rng.integers(iz, ix + 1))
    return iz, iu, ix


def build_triplet(sequence: Sequence, rng: np.random.Generator, cfg: TrainConfig | None = None,
                  crop: CropConfig | None = None) -> SampleTriplet:
    cfg = cfg or TrainConfig()
    crop = crop or CropConfig()
    valid = sequence.valid_indices
    if len(valid) < 2:
        raise ValueError(f"sequence {sequence.name} has fewer than two annotated frames")
    iz, iu, ix = sample_frames(len(valid), rng, cfg.max_gap)
    tz, tu, tx = valid[iz], valid[iu], valid[ix]

    bz = sequence.gt[tz]
    exemplar = crop_patch(sequence.frames[tz], (bz.cx, bz.cy),
                          context_size(bz.w, bz.h, crop.context_amount), crop.exemplar_size)

    bu = sequence.gt[tu]
    j = cfg.update_jitter
    ucx = bu.cx + rng.uniform(-j, j) * bu.w
    ucy = bu.cy + rng.uniform(-j, j) * bu.h
    us = math.exp(rng.uniform(-j, j))
    update = crop_patch(sequence.frames[tu], (ucx, ucy),
                        context_size(bu.w * us, bu.h * us, crop.context_amount), crop.exemplar_size)
    update = augment_update(update, rng, cfg)

    bx = sequence.gt[tx]
    s_x = context_size(bx.w, bx.h, crop.context_amount) * crop.search_size / crop.exemplar_size
    s_x *= math.exp(rng.uniform(-cfg.search_scale_jitter, cfg.search_scale_jitter))
    k = crop.search_size / s_x
    shift = rng.uniform(-cfg.search_shift, cfg.search_shift, 2) / k
    centre = (bx.cx + shift[0], bx.cy + shift[1])
    search = crop_patch(sequence.frames[tx], centre, s_x, crop.search_size)
    c = (crop.search_size - 1) / 2.0
    gt = BBox((bx.cx - centre[0]) * k + c, (bx.cy - centre[1]) * k + c, bx.w * k, bx.h * k)
    return SampleTriplet(exemplar, update, search, gt, (tz, tu, tx))


def augment_update(patch: np.ndarray, rng: np.random.Generator, cfg: TrainConfig | None = None) -> np.ndarray:
    """Random rotation, box blur and mean-coloured occlusion, each independently."""
    cfg = cfg or TrainConfig()
    out = np.asarray(patch, dtype=np.float32)
    size = out.shape[0]
    if out.shape[1] != size:
        raise ValueError("augment_update expects a square patch")
    # draw every random number up front so the stream does not depend on which branches fire
    u_rot, angle = rng.random(), rng.uniform(-cfg.rotate_max_deg, cfg.rotate_max_deg)
    u_blur, ksize = rng.random(), int(rng.choice([3, 5]))
    u_occ, frac = rng.random(), rng.uniform(*cfg.occlude_area)
    aspect = math.exp(rng.uniform(math.log(0.5), math.log(2.0)))
    pos = rng.random(2)
    mean = out.reshape(-1, out.shape[-1]).mean(axis=0)
    if u_rot < cfg.p_rotate:
        c = (size - 1) / 2.0
        m = cv2.getRotationMatrix2D((c, c), angle, 1.0)
        out = cv2.warpAffine(out, m, (size, size), flags=cv2.INTER_LINEAR,
                             borderMode=cv2.BORDER_CONSTANT, borderValue=tuple(float(v) for v in mean))
    if u_blur < cfg.p_blur:
        out = cv2.blur(out, (ksize, ksize))
    if u_occ < cfg.p_occlude:
        area = frac * size * size
        rw = min(size, max(1, int(round(math.sqrt(area * aspect)))))
        rh = min(size, max(1, int(round(area / rw))))
        x0 = int(pos[0] * (size - rw + 1))
        y0 = int(pos[1] * (size - rh + 1))
        out = out.copy()
        out[y0:y0 + rh, x0:x0 + rw] = mean
    return out


def to_tensor(patches, dtype=torch.float32) -> torch.Tensor:
    arr = np.stack([np.asarray(p, dtype=np.float32) for p in patches])
    return torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous().to(dtype)


def attach_labels(batch: list[SampleTriplet], anchors: AnchorSet, label_cfg: LabelConfig,
                  rng: np.random.Generator) -> None:
    for t in batch:
        if t.labels is None:
            t.labels = assign_labels(anchors, t.gt, label_cfg, rng)


# ---------------------------------------------------------------------------
# schedule

def lr_at(epoch: int, step_fraction: float, cfg: TrainConfig) -> float:
    """Learning rate of the non-backbone modules.

    Linear warm-up lr_start -> lr_peak over the first ``warmup_epochs``, then
    log-linear decay lr_peak -> lr_end ending with the last epoch.
    """
    if not 1 <= epoch <= cfg.epochs:
        raise ValueError(f"epoch {epoch} outside 1..{cfg.epochs}")
    if not 0.0 <= step_fraction <= 1.0:
        raise ValueError("step_fraction must lie in [0, 1]")
    pos = epoch - 1 + step_fraction
    if pos <= cfg.warmup_epochs and cfg.warmup_epochs > 0:
        return cfg.lr_start + (cfg.lr_peak - cfg.lr_start) * pos / cfg.warmup_epochs
    span = cfg.epochs - cfg.warmup_epochs
    if span <= 0:
        return cfg.lr_peak
    frac = (pos - cfg.warmup_epochs) / span
    return cfg.lr_peak * (cfg.lr_end / cfg.lr_peak) ** frac


def backbone_trainable(epoch: int, cfg: TrainConfig) -> bool:
    return epoch >= cfg.backbone_unfreeze_epoch


def backbone_lr_at(epoch: int, step_fraction: float, cfg: TrainConfig) -> float:
    if not backbone_trainable(epoch, cfg):
        return 0.0
    return lr_at(epoch, step_fraction, cfg) / cfg.backbone_lr_divisor


# ---------------------------------------------------------------------------
# optimisation

def no_decay(name: str, p: torch.nn.Parameter) -> bool:
    """Biases, normalisation affine parameters and aggregation logits."""
    return p.dim() <= 1


def build_optimizer(model: SiamTOL, cfg: TrainConfig) -> torch.optim.SGD:
    groups = []
    for gname, params in model.parameter_groups().items():
        for decay in (True, False):
            ps = [p for n, p in params if no_decay(n, p) != decay]
            if ps:
                groups.append({"params": ps, "name": gname, "decay": decay,
                               "weight_decay": cfg.weight_decay if decay else 0.0})
    return torch.optim.SGD(groups, lr=cfg.lr_start, momentum=cfg.momentum)


def set_trainable(model: SiamTOL, optimizer: torch.optim.Optimizer, epoch: int, cfg: TrainConfig,
                  step_fraction: float = 0.0, freeze_early: bool | None = None) -> float:
    """Apply the freeze policy and learning rates; returns the head LR."""
    if freeze_early is None:
        freeze_early = model.backbone_cfg.freeze_early
    head_lr = lr_at(epoch, step_fraction, cfg)
    bb_on = backbone_trainable(epoch, cfg)
    state = {"head": True, "backbone": bb_on, "backbone_early": bb_on and not freeze_early}
    for gname, params in model.parameter_groups().items():
        for _, p in params:
            p.requires_grad_(state[gname])
    for g in optimizer.param_groups:
        if g["name"] == "head":
            g["lr"] = head_lr
        else:
            g["lr"] = head_lr / cfg.backbone_lr_divisor if state[g["name"]] else 0.0
    model.train()
    # frozen parts keep their running statistics
    if not state["backbone_early"]:
        for m in model.backbone.early_modules:
            m.eval()
    if not state["backbone"]:
        for m in (model.backbone.stage2, model.backbone.stage3):
            m.eval()
    return head_lr


def train_step(model: SiamTOL, optimizer: torch.optim.Optimizer, batch: list[SampleTriplet],
               loss_cfg: LossConfig | None = None) -> LossBundle:
    loss_cfg = loss_cfg or LossConfig()
    if any(t.labels is None for t in batch):
        raise ValueError("attach labels before calling train_step")
    dtype = next(model.parameters()).dtype
    z = to_tensor([t.exemplar for t in batch], dtype)
    u = to_tensor([t.update for t in batch], dtype)
    x = to_tensor([t.search for t in batch], dtype)
    outs = model.forward_aspects(z, u, x, loss_cfg.aspects)
    bundle = multi_aspect_loss(outs, stack_labels([t.labels for t in batch]), loss_cfg)
    for name, part in bundle.aspects.items():
        if not torch.isfinite(part.total):
            raise NonFiniteLoss(name, float(part.total.detach()))
    optimizer.zero_grad(set_to_none=True)
    bundle.total.backward()
    optimizer.step()
    return bundle


class Trainer:
    def __init__(self, model: SiamTOL, cfg: TrainConfig, anchors: AnchorSet,
                 label_cfg: LabelConfig | None = None, loss_cfg: LossConfig | None = None,
                 crop: CropConfig | None = None):
        cfg.validate()
        self.model = model
        self.cfg = cfg
        self.anchors = anchors
        self.label_cfg = label_cfg or LabelConfig()
        self.loss_cfg = loss_cfg or LossConfig()
        self.crop = crop or CropConfig()
        self.optimizer = build_optimizer(model, cfg)
        self.rng = np.random.default_rng(cfg.seed)
        self.step = 0
        self.history: list[dict] = []

    def sample_batch(self, sequences: list[Sequence]) -> list[SampleTriplet]:
        batch = []
        while len(batch) < self.cfg.batch_size:
            seq = sequences[int(self.rng.integers(len(sequences)))]
            if len(seq.valid_indices) < 2:
                continue
            batch.append(build_triplet(seq, self.rng, self.cfg, self.crop))
        attach_labels(batch, self.anchors, self.label_cfg, self.rng)
        return batch

    def fit(self, sequences: list[Sequence], log_path: str | Path | None = None,
            on_epoch_end: Callable[[int], None] | None = None) -> list[dict]:
        steps = max(1, self.cfg.pairs_per_epoch // self.cfg.batch_size)
        writer = fh = None
        if log_path is not None:
            fh = open(log_path, "w", newline="")
            writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
            writer.writeheader()
        try:
            for epoch in range(1, self.cfg.epochs + 1):
                for i in range(steps):
                    lr = set_trainable(self.model, self.optimizer, epoch, self.cfg, i / steps)
                    bundle = train_step(self.model, self.optimizer, self.sample_batch(sequences), self.loss_cfg)
                    self.step += 1
                    row = {"step": self.step, "epoch": epoch, "lr": lr, **bundle.row()}
                    self.history.append(row)
                    if writer:
                        writer.writerow(row)
                    if self.step % 50 == 0:
                        log.info("epoch %d step %d lr %.5f loss %.4f", epoch, self.step, lr, row["loss_total"])
                if fh:
                    fh.flush()
                if on_epoch_end:
                    on_epoch_end(epoch)
        finally:
            if fh:
                fh.close()
        self.model.eval()
        return self.history
