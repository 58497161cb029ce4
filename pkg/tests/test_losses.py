import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mde_edit.core import DegenerateSegmentation, EmptyMask, GuidanceConfig, ShapeMismatch
from mde_edit.losses import bce, ccl, oal, total_loss

EPS = 1e-6


def oal_oracle(seg, mask):
    """Scalar double loop over pixels."""
    H, W = len(seg), len(seg[0])
    peak = max(abs(seg[i][j]) for i in range(H) for j in range(W))

    def b(p, s):
        p = min(max(p, EPS), 1 - EPS)
        return -(s * math.log(p) + (1 - s) * math.log(1 - p))

    t1 = t2 = 0.0
    for i in range(H):
        for j in range(W):
            t1 += b(seg[i][j], mask[i][j])
            t2 += b(seg[i][j] / peak, mask[i][j])
    return (t1 + t2) / (H * W)


def ccl_oracle(a, commons, mask):
    H, W = len(a), len(a[0])
    tot = n = 0
    for i in range(H):
        for j in range(W):
            if mask[i][j] > 0.5:
                c = sum(cm[i][j] for cm in commons)
                r = a[i][j] / max(a[i][j] + c, 1e-12)
                tot += (1 - r) ** 2
                n += 1
    return tot / n


def test_oal_worked_example():
    got = float(oal([torch.tensor([0.8, 0.2], dtype=torch.float64)], [torch.tensor([1.0, 0.0], dtype=torch.float64)]))
    assert got == pytest.approx(0.3669, abs=1e-3)


def test_oal_and_ccl_match_oracles():
    rng = np.random.default_rng(1)
    for _ in range(50):
        seg = rng.uniform(0, 1, (8, 8))
        mask = (rng.uniform(size=(8, 8)) < 0.4).astype(float)
        mask[0, 0] = 1
        a = rng.uniform(0, 1, (8, 8))
        commons = [rng.uniform(0, 1, (8, 8)) for _ in range(3)]
        assert float(oal([seg], [mask])) == pytest.approx(oal_oracle(seg.tolist(), mask.tolist()), rel=1e-10)
        assert float(ccl(a, commons, mask)) == pytest.approx(
            ccl_oracle(a.tolist(), [c.tolist() for c in commons], mask.tolist()), rel=1e-10
        )


def test_oal_sums_objects():
    rng = np.random.default_rng(2)
    s1, s2 = rng.uniform(size=(4, 4)), rng.uniform(size=(4, 4))
    m1, m2 = (s1 > 0.5).astype(float), (s2 > 0.3).astype(float)
    assert float(oal([s1, s2], [m1, m2])) == pytest.approx(float(oal([s1], [m1])) + float(oal([s2], [m2])), rel=1e-12)


def test_oal_scale_invariant_second_term():
    rng = np.random.default_rng(3)
    s = rng.uniform(0.1, 0.9, (4, 4))
    m = (rng.uniform(size=(4, 4)) > 0.5).astype(float)
    first = lambda x: float(bce(x, m))
    # the normalized term is the same for s and s/2, so the difference is in the raw term only
    diff = float(oal([s], [m])) - float(oal([s / 2], [m]))
    assert diff == pytest.approx(first(s) - first(s / 2), rel=1e-10)


def test_oal_errors():
    with pytest.raises(DegenerateSegmentation):
        oal([np.zeros((3, 3))], [np.ones((3, 3))])
    with pytest.raises(ShapeMismatch):
        oal([np.ones((3, 3))], [np.ones((2, 2))])
    with pytest.raises(ShapeMismatch):
        oal([np.ones((3, 3))], [])


def test_ccl_edge_cases():
    m = np.zeros((2, 2))
    with pytest.raises(EmptyMask):
        ccl(np.ones((2, 2)), [], m)
    m[0, 0] = 1
    # no competing attention: ratio 1, zero loss
    assert float(ccl(np.full((2, 2), 0.3), [], m)) == 0.0
    # all-zero attention: denominator floor gives ratio 0 and loss 1, no NaN
    assert float(ccl(np.zeros((2, 2)), [np.zeros((2, 2))], m)) == 1.0
    # sum reduction counts pixels
    m[1, 1] = 1
    a, c = np.full((2, 2), 0.25), [np.full((2, 2), 0.75)]
    assert float(ccl(a, c, m, "masked_sum")) == pytest.approx(2 * 0.75**2)
    assert float(ccl(a, c, m)) == pytest.approx(0.75**2)
    with pytest.raises(ValueError):
        ccl(a, c, m, "mean")


def test_ccl_multi_token_sum():
    a1, a2, c = np.full((2, 2), 0.1), np.full((2, 2), 0.3), [np.full((2, 2), 0.4)]
    m = np.ones((2, 2))
    assert float(ccl([a1, a2], c, m)) == pytest.approx(float(ccl(a1 + a2, c, m)), rel=1e-12)


@settings(max_examples=80, deadline=None)
@given(
    arrays(np.float64, (5, 5), elements=st.floats(0.0, 1.0)),
    arrays(np.float64, (5, 5), elements=st.floats(0.0, 1.0)),
    arrays(np.float64, (5, 5), elements=st.floats(0.0, 1.0)),
)
def test_loss_properties(a, c, seg):
    mask = np.zeros((5, 5))
    mask[1:3, 1:4] = 1
    val = float(ccl(a, [c], mask))
    assert 0.0 <= val <= 1.0 + 1e-12
    if seg.max() > 1e-6:
        assert float(oal([seg], [mask])) >= 0.0


def test_gradients_match_finite_differences():
    rng = np.random.default_rng(4)
    seg = torch.tensor(rng.uniform(0.05, 0.95, (4, 4)), requires_grad=True)
    mask = torch.tensor((rng.uniform(size=(4, 4)) > 0.5).astype(float))
    a = torch.tensor(rng.uniform(0.05, 0.95, (4, 4)), requires_grad=True)
    c = torch.tensor(rng.uniform(0.05, 0.95, (4, 4)))
    mask[0, 0] = 1
    assert torch.autograd.gradcheck(lambda x: oal([x], [mask]), (seg,))
    assert torch.autograd.gradcheck(lambda x: ccl(x, [c], mask), (a,))


def test_total_loss_weights():
    cfg = GuidanceConfig()
    lb = total_loss(torch.tensor(0.4), torch.tensor(0.2), cfg, [0.1, 0.3])
    assert lb.total == pytest.approx(0.4 + 1.25 * 0.2)
    assert lb.tensor is not None and lb.per_object_oal == pytest.approx((0.1, 0.3))
    assert total_loss(0.4, 0.2, GuidanceConfig(lambda2=0)).total == pytest.approx(0.4)
    assert total_loss(0.4, 0.2, GuidanceConfig(lambda1=0)).total == pytest.approx(0.25)
    with pytest.raises(ValueError):
        total_loss(-1.0, 0.0, cfg)
    assert '"total"' in lb.to_json(3, 0)
