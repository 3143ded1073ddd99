import time

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from oracles import naive_xcorr
from siamtol.backbone import Backbone, BackboneConfig, FeaturePyramid, TemplateSet, center_crop7
from siamtol.gradcheck import aggregation_suite, rpn_suite
from siamtol.rpn import RPN, aggregate_maps, depthwise_xcorr, rpn_forward, rpn_forward_many


def test_xcorr_output_size():
    assert depthwise_xcorr(torch.randn(4, 31, 31), torch.randn(4, 7, 7)).shape == (4, 25, 25)


def test_xcorr_impulse_kernel():
    s = torch.randn(1, 9, 9, dtype=torch.float64)
    k = torch.zeros(1, 3, 3, dtype=torch.float64)
    k[0, 0, 0] = 1.0
    assert torch.equal(depthwise_xcorr(s, k), s[:, :7, :7])


def test_xcorr_matches_naive_oracle():
    gen = torch.Generator().manual_seed(0)
    s = torch.randn(4, 6, 9, 9, generator=gen, dtype=torch.float64)
    k = torch.randn(4, 6, 3, 3, generator=gen, dtype=torch.float64)
    out = depthwise_xcorr(s, k).numpy()
    for b in range(4):
        assert np.abs(out[b] - naive_xcorr(s[b].numpy(), k[b].numpy())).max() < 1e-6


def test_xcorr_errors():
    with pytest.raises(ValueError):
        depthwise_xcorr(torch.randn(3, 9, 9), torch.randn(4, 3, 3))
    with pytest.raises(ValueError):
        depthwise_xcorr(torch.randn(3, 5, 5), torch.randn(3, 7, 7))


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 5), st.integers(1, 6), st.integers(0, 6), st.floats(-3, 3))
def test_xcorr_bilinear(c, k, extra, alpha):
    gen = torch.Generator().manual_seed(c * 100 + k * 10 + extra)
    x1, x2 = (torch.randn(c, k + extra, k + extra, generator=gen, dtype=torch.float64) for _ in range(2))
    ker = torch.randn(c, k, k, generator=gen, dtype=torch.float64)
    assert torch.allclose(depthwise_xcorr(alpha * x1, ker), alpha * depthwise_xcorr(x1, ker), atol=1e-6)
    assert torch.allclose(depthwise_xcorr(x1 + x2, ker),
                          depthwise_xcorr(x1, ker) + depthwise_xcorr(x2, ker), atol=1e-6)


def test_xcorr_translation_equivariance():
    gen = torch.Generator().manual_seed(5)
    s = torch.randn(3, 12, 12, generator=gen, dtype=torch.float64)
    k = torch.randn(3, 4, 4, generator=gen, dtype=torch.float64)
    shifted = torch.roll(s, shifts=(1, 1), dims=(1, 2))
    a, b = depthwise_xcorr(s, k), depthwise_xcorr(shifted, k)
    assert torch.equal(a[:, :-1, :-1], b[:, 1:, 1:])


def test_aggregate_examples():
    a, b = torch.randn(2, 3, 3, dtype=torch.float64), torch.randn(2, 3, 3, dtype=torch.float64)
    mean = aggregate_maps([a, b], torch.zeros(2, dtype=torch.float64))
    assert torch.allclose(mean, (a + b) / 2, atol=1e-15)
    sat = aggregate_maps([a, b], torch.tensor([40.0, -40.0], dtype=torch.float64))
    assert (sat - a).abs().max() < 1e-12
    with pytest.raises(ValueError):
        aggregate_maps([a, b[:1]], torch.zeros(2))


@given(st.lists(st.floats(-30, 30), min_size=2, max_size=2))
def test_aggregation_weights_simplex(logits):
    w = torch.softmax(torch.tensor(logits, dtype=torch.float64), 0)
    assert torch.all(w > 0) and abs(float(w.sum()) - 1.0) < 1e-12


@pytest.fixture(scope="module")
def rpn_inputs():
    torch.manual_seed(0)
    bb = Backbone(BackboneConfig()).eval()
    with torch.no_grad():
        z = center_crop7(bb(torch.rand(2, 3, 127, 127) * 255))
        x = bb(torch.rand(2, 3, 255, 255) * 255)
    return RPN(32, 5).eval(), z, x


def test_rpn_output_shapes(rpn_inputs):
    rpn, z, x = rpn_inputs
    with torch.no_grad():
        out = rpn_forward(z, x, rpn)
    assert out.cls.shape == (2, 10, 25, 25) and out.reg.shape == (2, 20, 25, 25)
    assert len(out.cls_levels) == 2 and out.cls_levels[0].shape == out.cls.shape


def test_rpn_zero_search_zero_correlation(rpn_inputs):
    rpn, z, x = rpn_inputs
    zero = FeaturePyramid(tuple(l * 0 for l in x.levels))
    with torch.no_grad():
        for br, t, s in zip(list(rpn.cls_branches) + list(rpn.reg_branches),
                            z.levels * 2, zero.levels * 2):
            assert torch.count_nonzero(br.correlate(t, s)) == 0


def test_rpn_forward_many_matches_single(rpn_inputs):
    rpn, z, x = rpn_inputs
    z2 = TemplateSet(tuple(l.flip(-1) for l in z.levels))
    with torch.no_grad():
        many = rpn_forward_many([z, z2], x, rpn)
        for t, m in zip([z, z2], many):
            single = rpn_forward(t, x, rpn)
            assert torch.allclose(single.cls, m.cls, atol=1e-6)
            assert torch.allclose(single.reg, m.reg, atol=1e-6)


def test_rpn_level_mismatch(rpn_inputs):
    rpn, z, x = rpn_inputs
    with pytest.raises(ValueError):
        rpn_forward(TemplateSet(z.levels[:1]), x, rpn)


def test_rpn_gradients():
    r = rpn_suite(seed=2)
    assert r.passed, r


def test_aggregation_gradients():
    r = aggregation_suite(seed=4)
    assert r.passed, r
