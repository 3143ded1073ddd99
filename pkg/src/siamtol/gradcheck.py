"""Central finite-difference gradient checks (double precision).

Every parameter tensor is checked two ways: on a random subset of its
coordinates and along one random direction spanning all of its entries.
Relative error is ``|a - n| / max(|a|, |n|, floor)``; the floor keeps
coordinates with (near-)zero gradient from dividing by round-off.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from .backbone import Backbone, BackboneConfig, FeaturePyramid, TemplateSet
from .fusion import TemplateFusion
from .geometry import AnchorConfig, BBox, LabelConfig, assign_labels, generate_anchors, stack_labels
from .loss import LossConfig, multi_aspect_loss
from .model import SiamTOL
from .rpn import RPN, aggregate_maps

STEP = 1e-5
TOLERANCE = 1e-4
FLOOR = 1e-6


@dataclass
class GradCheckResult:
    name: str
    max_rel_err: float
    checks: int
    kinks_skipped: int = 0

    @property
    def passed(self) -> bool:
        return self.max_rel_err < TOLERANCE


def _rel(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), FLOOR)


class _ReluSigns:
    """Records the sign pattern entering every ReLU during one forward pass.

    A central difference whose two evaluations see different patterns
    straddles a kink, where the derivative it estimates does not exist.
    """

    def __init__(self, modules):
        self.masks: list[torch.Tensor] = []
        self.handles = [m.register_forward_pre_hook(self._hook) for m in modules
                        if isinstance(m, torch.nn.ReLU)]

    def _hook(self, module, inputs):
        self.masks.append(inputs[0] > 0)

    def capture(self, fn):
        self.masks = []
        value = fn().item()
        return value, self.masks

    def close(self):
        for h in self.handles:
            h.remove()


def _same(m1, m2) -> bool:
    return len(m1) == len(m2) and all(torch.equal(a, b) for a, b in zip(m1, m2))


def check_gradients(name: str, fn: Callable[[], torch.Tensor], params: list[tuple[str, torch.Tensor]],
                    samples: int = 6, step: float = STEP, seed: int = 0,
                    modules=()) -> GradCheckResult:
    """Compare autograd gradients of scalar ``fn()`` against central differences.

    ``modules``: ReLUs inside are monitored; probes that cross a kink are
    redrawn (at most ``4 * samples`` attempts per tensor).
    """
    rng = np.random.default_rng(seed)
    tensors = [p for _, p in params]
    loss = fn()
    grads = torch.autograd.grad(loss, tensors, allow_unused=True)
    monitor = _ReluSigns([m for mod in modules for m in mod.modules()])
    worst, count, kinks = 0.0, 0, 0

    def probe(apply, undo):
        apply(+1)
        fp, mp = monitor.capture(fn)
        undo()
        apply(-1)
        fm, mm = monitor.capture(fn)
        undo()
        return (fp - fm) / (2 * step), _same(mp, mm)

    try:
        with torch.no_grad():
            for (pname, p), g in zip(params, grads):
                g = torch.zeros_like(p) if g is None else g
                flat, gflat = p.view(-1), g.reshape(-1)
                n = flat.numel()
                order = np.arange(n) if n <= samples else rng.permutation(n)[:4 * samples]
                done = 0
                for i in order:
                    if done >= samples:
                        break
                    orig = flat[i].item()

                    def apply(sign, i=i, orig=orig):
                        flat[i] = orig + sign * step

                    def undo(i=i, orig=orig):
                        flat[i] = orig

                    num, smooth = probe(apply, undo)
                    if not smooth:
                        kinks += 1
                        continue
                    worst = max(worst, _rel(gflat[i].item(), num))
                    count += 1
                    done += 1
                for _ in range(4):
                    direction = torch.from_numpy(rng.standard_normal(n)).to(p.dtype)
                    direction /= direction.norm()
                    orig = flat.clone()

                    def apply(sign, direction=direction, orig=orig):
                        flat.copy_(orig).add_(direction, alpha=sign * step)

                    def undo(orig=orig):
                        flat.copy_(orig)

                    num, smooth = probe(apply, undo)
                    if not smooth:
                        kinks += 1
                        continue
                    worst = max(worst, _rel(float(gflat @ direction), num))
                    count += 1
                    break
    finally:
        monitor.close()
    return GradCheckResult(name, worst, count, kinks)


def _weights_like(t: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
    return torch.randn(t.shape, generator=gen, dtype=t.dtype)


def fusion_suite(channels: int = 8, seed: int = 0, samples: int = 6) -> GradCheckResult:
    torch.manual_seed(seed)
    fusion = TemplateFusion(channels, zero_init=False).double()
    gen = torch.Generator().manual_seed(seed)
    zf = [torch.randn(2, channels, 7, 7, generator=gen, dtype=torch.float64) for _ in range(2)]
    uf = [torch.randn(2, channels, 7, 7, generator=gen, dtype=torch.float64) for _ in range(2)]

    def fn():
        return sum(blk(z, u).sum() for blk, z, u in zip(fusion.blocks, zf, uf))

    return check_gradients("fusion", fn, list(fusion.named_parameters()), samples, seed=seed,
                           modules=[fusion])


def rpn_suite(channels: int = 8, anchors: int = 5, seed: int = 0, samples: int = 6) -> GradCheckResult:
    torch.manual_seed(seed)
    rpn = RPN(channels, anchors).double()
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        rpn.cls_logits.copy_(torch.randn(2, generator=gen, dtype=torch.float64))
        rpn.reg_logits.copy_(torch.randn(2, generator=gen, dtype=torch.float64))
    tmpl = TemplateSet(tuple(torch.randn(2, channels, 7, 7, generator=gen, dtype=torch.float64) for _ in range(2)))
    srch = FeaturePyramid(tuple(torch.randn(2, channels, 13, 13, generator=gen, dtype=torch.float64) for _ in range(2)))
    out = rpn(tmpl, srch)
    wc, wr = _weights_like(out.cls, gen), _weights_like(out.reg, gen)

    def fn():
        o = rpn(tmpl, srch)
        return (o.cls * wc).sum() + (o.reg * wr).sum()

    return check_gradients("rpn", fn, list(rpn.named_parameters()), samples, seed=seed, modules=[rpn])


def aggregation_suite(seed: int = 0) -> GradCheckResult:
    gen = torch.Generator().manual_seed(seed)
    maps = [torch.randn(3, 4, 5, generator=gen, dtype=torch.float64) for _ in range(2)]
    w = torch.randn(3, 4, 5, generator=gen, dtype=torch.float64)
    logits = torch.randn(2, generator=gen, dtype=torch.float64).requires_grad_(True)
    return check_gradients("aggregation", lambda: (aggregate_maps(maps, logits) * w).sum(),
                           [("logits", logits)], samples=2, seed=seed)


def backbone_suite(cfg: BackboneConfig | None = None, size: int = 63, seed: int = 0,
                   samples: int = 4) -> GradCheckResult:
    torch.manual_seed(seed)
    backbone = Backbone(cfg or BackboneConfig()).double().train()
    gen = torch.Generator().manual_seed(seed)
    images = torch.rand(2, 3, size, size, generator=gen, dtype=torch.float64) * 255
    pyr = backbone(images)
    ws = [_weights_like(l, gen) for l in pyr.levels]

    def fn():
        p = backbone(images)
        return sum((l * w).sum() for l, w in zip(p.levels, ws)) / ws[0].numel()

    return check_gradients("backbone", fn, list(backbone.named_parameters()), samples, seed=seed,
                           modules=[backbone])


def loss_suite(cfg: BackboneConfig | None = None, seed: int = 0, samples: int = 3,
               exemplar: int = 63, search: int = 95, aspect: str | None = None) -> GradCheckResult:
    """One aspect's total (or, with ``aspect=None``, the grand total) w.r.t.
    every trainable parameter."""
    torch.manual_seed(seed)
    model = SiamTOL(cfg or BackboneConfig(), AnchorConfig()).double().train()
    for blk in model.fusion.blocks:
        torch.nn.init.normal_(blk.last.weight, std=0.1)
    gen = torch.Generator().manual_seed(seed)
    z = torch.rand(2, 3, exemplar, exemplar, generator=gen, dtype=torch.float64) * 255
    u = torch.rand(2, 3, exemplar, exemplar, generator=gen, dtype=torch.float64) * 255
    x = torch.rand(2, 3, search, search, generator=gen, dtype=torch.float64) * 255
    with torch.no_grad():
        r = model.forward_aspects(z, u, x)["overall"].cls.shape[-1]
    anchors = generate_anchors(model.anchor_cfg, r, search)
    c = (search - 1) / 2.0
    rng = np.random.default_rng(seed)
    labels = stack_labels([assign_labels(anchors, BBox(c + 3, c - 2, 60, 70), LabelConfig(), rng),
                           assign_labels(anchors, BBox(c - 5, c + 4, 70, 55), LabelConfig(), rng)])
    loss_cfg = LossConfig()

    def fn():
        bundle = multi_aspect_loss(model.forward_aspects(z, u, x), labels, loss_cfg)
        return bundle.total if aspect is None else bundle.aspects[aspect].total

    name = "loss" if aspect is None else f"loss_{aspect}"
    return check_gradients(name, fn, list(model.named_parameters()), samples, seed=seed, modules=[model])


SUITES = {
    "fusion": fusion_suite,
    "rpn": rpn_suite,
    "aggregation": aggregation_suite,
    "backbone": backbone_suite,
    "loss_basic": lambda **kw: loss_suite(aspect="basic", **kw),
    "loss_update": lambda **kw: loss_suite(aspect="update", **kw),
    "loss_overall": lambda **kw: loss_suite(aspect="overall", **kw),
    "loss": loss_suite,
}


def run_all(backbone_cfg: BackboneConfig | None = None, seed: int = 0) -> list[GradCheckResult]:
    results = [fusion_suite(seed=seed), rpn_suite(seed=seed), aggregation_suite(seed=seed),
               backbone_suite(backbone_cfg, seed=seed)]
    for aspect in ("basic", "update", "overall", None):
        results.append(loss_suite(backbone_cfg, seed=seed, samples=2, aspect=aspect))
    return results
