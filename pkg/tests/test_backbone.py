import pytest
import torch

from siamtol.backbone import Backbone, BackboneConfig, FeaturePyramid, center_crop7, spatial_out
from siamtol.gradcheck import backbone_suite


@pytest.mark.parametrize("size,expected", [(127, 15), (255, 31), (63, 7)])
def test_spatial_out(size, expected):
    assert spatial_out(size) == expected


@pytest.fixture(scope="module")
def backbone():
    torch.manual_seed(0)
    return Backbone(BackboneConfig()).eval()


def test_pyramid_shapes(backbone):
    with torch.no_grad():
        z = backbone(torch.rand(2, 3, 127, 127) * 255)
        x = backbone(torch.rand(1, 3, 255, 255) * 255)
    assert len(z.levels) == 2
    assert all(l.shape == (2, 32, 15, 15) for l in z.levels)
    assert all(l.shape == (1, 32, 31, 31) for l in x.levels)
    assert z.size == 15


def test_eval_forward_deterministic(backbone):
    img = torch.rand(1, 3, 127, 127) * 255
    with torch.no_grad():
        a, b = backbone(img), backbone(img)
    assert all(torch.equal(p, q) for p, q in zip(a.levels, b.levels))


def test_too_small_input_rejected(backbone):
    with pytest.raises(ValueError):
        backbone(torch.rand(1, 3, 6, 6))


def test_channel_compression_width():
    cfg = BackboneConfig(compressed_channels=12, stage_channels=[8, 24, 40])
    bb = Backbone(cfg).eval()
    with torch.no_grad():
        out = bb(torch.rand(1, 3, 127, 127))
    assert [l.shape[1] for l in out.levels] == [12, 12]


def test_full_preset_structure():
    cfg = BackboneConfig.from_preset("paper")
    assert cfg.compressed_channels == 256 and cfg.freeze_early
    assert cfg.stage_blocks == [3, 4, 6] and cfg.dilation == 2


def test_stride_8_alignment(backbone):
    # a feature cell's receptive field centre follows the 8k + 7 rule: moving
    # an impulse by 8 input pixels moves the response peak by one cell
    bb = Backbone(BackboneConfig()).double().eval()
    with torch.no_grad():
        for m in bb.modules():
            if isinstance(m, torch.nn.Conv2d):
                m.weight.abs_()
        peaks = []
        for shift in (0, 8):
            img = torch.zeros(1, 3, 127, 127, dtype=torch.float64)
            img[..., 63 + shift, 63 + shift] = 1000.0
            base = bb(torch.zeros_like(img)).levels[0]
            resp = (bb(img).levels[0] - base).abs().sum(1)[0]
            peaks.append(divmod(int(resp.argmax()), 15))
    assert peaks[0] == (7, 7) and peaks[1] == (8, 8)


def test_center_crop7_window():
    f = torch.arange(15 * 15, dtype=torch.float32).reshape(1, 1, 15, 15)
    t = center_crop7(FeaturePyramid((f, f)))
    assert torch.equal(t.levels[0], f[..., 4:11, 4:11])
    assert t.tag == "initial"


def test_center_crop7_constant_and_identity():
    c = torch.full((1, 3, 31, 31), 2.5)
    assert torch.all(center_crop7((c, c)).levels[1] == 2.5)
    s = torch.randn(1, 3, 7, 7)
    assert torch.equal(center_crop7((s, s)).levels[0], s)


@pytest.mark.parametrize("s", [5, 8])
def test_center_crop7_rejects(s):
    f = torch.zeros(1, 1, s, s)
    with pytest.raises(ValueError):
        center_crop7((f, f))


def test_backbone_gradients():
    r = backbone_suite(seed=1)
    assert r.passed, r
