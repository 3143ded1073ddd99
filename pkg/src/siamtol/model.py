"""The updatable Siamese network: shared backbone, template fusion, RPN."""
from __future__ import annotations

import torch
from torch import nn

from .backbone import TEMPLATE_SIZE, Backbone, BackboneConfig, FeaturePyramid, TemplateSet, center_crop7, spatial_out
from .fusion import TemplateFusion, fuse_template
from .geometry import AnchorConfig
from .rpn import RPN, RpnOutputs, rpn_forward, rpn_forward_many

ASPECTS = ("basic", "update", "overall")


def response_size(search_size: int = 255) -> int:
    return spatial_out(search_size) - TEMPLATE_SIZE + 1


class SiamTOL(nn.Module):
    def __init__(self, backbone_cfg: BackboneConfig | None = None,
                 anchor_cfg: AnchorConfig | None = None):
        super().__init__()
        self.backbone_cfg = backbone_cfg or BackboneConfig()
        self.anchor_cfg = anchor_cfg or AnchorConfig()
        c = self.backbone_cfg.compressed_channels
        self.backbone = Backbone(self.backbone_cfg)
        self.fusion = TemplateFusion(c)
        self.rpn = RPN(c, self.anchor_cfg.num_anchors)

    def encode(self, images: torch.Tensor) -> FeaturePyramid:
        return self.backbone(images)

    def template(self, images: torch.Tensor, tag: str = "initial") -> TemplateSet:
        return center_crop7(self.backbone(images), tag)

    def fuse(self, zf: TemplateSet, uf: TemplateSet) -> TemplateSet:
        return fuse_template(zf, uf, self.fusion)

    def detect(self, template: TemplateSet, search: FeaturePyramid) -> RpnOutputs:
        return rpn_forward(template, search, self.rpn)

    def forward_aspects(self, exemplar: torch.Tensor, update: torch.Tensor,
                        search: torch.Tensor, aspects=ASPECTS) -> dict[str, RpnOutputs]:
        """Run the enabled loss aspects, encoding every image exactly once.

        basic: exemplar template vs search; update: update-sample template vs
        search; overall: fused template vs search.
        """
        b = exemplar.shape[0]
        pyr_zu = self.backbone(torch.cat([exemplar, update], dim=0))
        zu = center_crop7(pyr_zu)
        zf = TemplateSet(tuple(l[:b] for l in zu.levels), "initial")
        uf = TemplateSet(tuple(l[b:] for l in zu.levels), "update")
        xf = self.backbone(search)
        templates = {"basic": zf, "update": uf}
        if "overall" in aspects:
            templates["overall"] = self.fuse(zf, uf)
        names = [a for a in ASPECTS if a in aspects]
        outs = rpn_forward_many([templates[a] for a in names], xf, self.rpn)
        return dict(zip(names, outs))

    def parameter_groups(self) -> dict[str, list[tuple[str, nn.Parameter]]]:
        """Named parameters split into backbone-early / backbone / head."""
        early = {id(p) for m in self.backbone.early_modules for p in m.parameters()}
        neck = {id(p) for p in self.backbone.compress.parameters()}
        groups = {"backbone_early": [], "backbone": [], "head": []}
        for name, p in self.named_parameters():
            if id(p) in early:
                groups["backbone_early"].append((name, p))
            elif name.startswith("backbone.") and id(p) not in neck:
                groups["backbone"].append((name, p))
            else:
                groups["head"].append((name, p))
        return groups
