import math
import warnings

import numpy as np
import pytest
import torch

from oracles import scalar_ce
from siamtol.geometry import IGNORE, NEGATIVE, POSITIVE, LabelMap
from siamtol.loss import (AspectLoss, EmptyLabelWarning, LossConfig, aspect_loss,
                          classification_loss, multi_aspect_loss, regression_loss, total_loss)
from siamtol.gradcheck import loss_suite
from siamtol.rpn import RpnOutputs

A, R = 5, 3
N = A * R * R


def _labels(rng, p_pos=0.1, p_neg=0.5):
    u = rng.random(N)
    cls = np.where(u < p_pos, POSITIVE, np.where(u < p_pos + p_neg, NEGATIVE, IGNORE)).astype(np.int8)
    reg = np.full((N, 4), np.nan)
    reg[cls == POSITIVE] = rng.normal(size=((cls == POSITIVE).sum(), 4))
    return LabelMap(cls, reg)


def _outputs(rng, b=None):
    lead = () if b is None else (b,)
    cls = torch.from_numpy(rng.normal(size=lead + (2 * A, R, R)))
    reg = torch.from_numpy(rng.normal(size=lead + (4 * A, R, R)))
    return RpnOutputs(cls, reg, (cls,), (reg,))


def test_uniform_logits_give_ln2(rng):
    lab = _labels(rng)
    assert classification_loss(torch.zeros(2 * A, R, R, dtype=torch.float64), lab).item() == pytest.approx(math.log(2), abs=1e-12)


def test_saturated_correct_logits():
    cls = np.full(N, NEGATIVE, np.int8)
    cls[::7] = POSITIVE
    logits = torch.zeros(A, 2, R, R, dtype=torch.float64)
    pos = torch.from_numpy(cls.reshape(A, R, R) == POSITIVE)
    logits[:, 1] = torch.where(pos, 40.0, -40.0)
    loss = classification_loss(logits.reshape(2 * A, R, R), LabelMap(cls, np.zeros((N, 4))))
    assert loss.item() < 1e-10


def test_ce_matches_scalar_oracle(rng):
    for _ in range(20):
        lab = _labels(rng)
        cls_map = torch.from_numpy(rng.normal(size=(2 * A, R, R)) * 3)
        # channel 2a + k, anchor order (a, i, j)
        arr = cls_map.numpy().reshape(A, 2, R, R)
        pairs, targets = [], []
        for n in range(N):
            a, rem = divmod(n, R * R)
            i, j = divmod(rem, R)
            if lab.cls[n] != IGNORE:
                pairs.append((arr[a, 0, i, j], arr[a, 1, i, j]))
                targets.append(int(lab.cls[n]))
        assert abs(classification_loss(cls_map, lab).item() - scalar_ce(pairs, targets)) < 1e-9


def _single_positive(target=(0.0, 0.0, 0.0, 0.0)):
    cls = np.full(N, NEGATIVE, np.int8)
    cls[4] = POSITIVE
    reg = np.full((N, 4), np.nan)
    reg[4] = target
    return LabelMap(cls, reg)


def test_regression_examples():
    lab = _single_positive()
    reg = torch.zeros(4 * A, R, R, dtype=torch.float64)
    assert regression_loss(reg, lab).item() == 0.0
    # anchor 4 -> a=0, i=1, j=1; dx lives in channel 0
    reg[0, 1, 1] = 1.0
    assert regression_loss(reg, lab).item() == pytest.approx(0.5 / 4)
    reg[0, 1, 1] = 2.0
    assert regression_loss(reg, lab).item() == pytest.approx(1.5 / 4)


def test_empty_labels_flagged():
    lab = LabelMap(np.full(N, IGNORE, np.int8), np.full((N, 4), np.nan))
    out = _outputs(np.random.default_rng(0))
    with pytest.warns(EmptyLabelWarning):
        assert classification_loss(out.cls, lab).item() == 0.0
    res = aspect_loss(out, lab)
    assert res.degenerate and res.total.item() == 0.0


def test_aspect_total_formula(rng):
    lab = _labels(rng)
    out = _outputs(rng)
    res = aspect_loss(out, lab, LossConfig(1.2))
    assert res.total.item() == res.cls.item() + 1.2 * res.reg.item()
    doubled = aspect_loss(out, lab, LossConfig(2.4))
    assert (doubled.total - doubled.cls).item() == pytest.approx(2 * (res.total - res.cls).item(), rel=1e-15)


def test_aspect_example_numbers():
    t = lambda v: torch.tensor(v, dtype=torch.float64)  # noqa: E731
    assert (t(1.0) + 1.2 * t(0.5)).item() == pytest.approx(1.6)
    parts = {k: AspectLoss(t(1.0), t(0.0), t(1.0)) for k in ("basic", "update", "overall")}
    assert total_loss(parts).item() == 3.0
    assert total_loss({"overall": parts["overall"]}).item() == 1.0
    with pytest.raises(ValueError):
        total_loss({"basic": parts["basic"]})


def test_grand_total_is_sum(rng):
    lab = _labels(rng)
    outs = {k: _outputs(rng) for k in ("basic", "update", "overall")}
    full = multi_aspect_loss(outs, lab)
    only = multi_aspect_loss(outs, lab, LossConfig(aspects=["overall"]))
    assert set(only.aspects) == {"overall"}
    diff = full.total - only.total
    assert diff.item() == pytest.approx((full.aspects["basic"].total + full.aspects["update"].total).item(), rel=1e-12)


def test_loss_config_validation():
    with pytest.raises(ValueError):
        LossConfig(lambda_reg=0)
    with pytest.raises(ValueError):
        LossConfig(aspects=["basic", "update"])
    with pytest.raises(ValueError):
        LossConfig(aspects=["overall", "bogus"])


def test_losses_nonnegative_finite(rng):
    for _ in range(20):
        lab = _labels(rng)
        res = aspect_loss(_outputs(rng), lab)
        for v in (res.cls, res.reg, res.total):
            assert torch.isfinite(v) and v.item() >= 0


def test_batched_layout(rng):
    labs = [_labels(rng) for _ in range(3)]
    out = _outputs(rng, b=3)
    stacked = LabelMap(np.stack([l.cls for l in labs]), np.stack([l.reg_target for l in labs]))
    batched = classification_loss(out.cls, stacked).item()
    # mean over all sampled anchors of the batch, weighted by their counts
    per = [(classification_loss(out.cls[b], labs[b]).item(), int((labs[b].cls != IGNORE).sum())) for b in range(3)]
    assert batched == pytest.approx(sum(v * n for v, n in per) / sum(n for _, n in per), rel=1e-12)


@pytest.mark.parametrize("aspect", ["overall"])
def test_loss_gradients(aspect):
    r = loss_suite(seed=5, aspect=aspect, samples=2)
    assert r.passed, r
