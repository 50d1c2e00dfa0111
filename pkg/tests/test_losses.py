import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from epcformer import autograd as ag
from epcformer.autograd import Tensor, check_gradients, parameter
from epcformer.losses import (LossWeights, NonFiniteLossError, assign_labels, giou_numpy, hungarian,
                              loss_box, loss_emb, loss_focal, loss_mask, matching_cost, total_loss)


def np_focal(x, t, alpha, gamma):
    p = 1 / (1 + np.exp(-x))
    pt = np.where(t == 1, p, 1 - p)
    at = np.where(t == 1, alpha, 1 - alpha)
    return np.mean(-at * (1 - pt) ** gamma * np.log(pt))


def test_focal_reduces_to_half_bce():
    rng = np.random.default_rng(0)
    x = rng.normal(size=20)
    t = (rng.random(20) < 0.5).astype(float)
    p = 1 / (1 + np.exp(-x))
    bce = np.mean(-(t * np.log(p) + (1 - t) * np.log(1 - p)))
    assert loss_focal(Tensor(x), t, alpha=0.5, gamma=0.0).item() == pytest.approx(0.5 * bce, abs=1e-14)


def test_focal_limits_and_oracle():
    assert loss_focal(Tensor([40.0]), np.array([1.0])).item() < 1e-15
    rng = np.random.default_rng(1)
    for _ in range(20):
        x = rng.normal(scale=3, size=(4, 5))
        t = (rng.random((4, 5)) < 0.3).astype(float)
        a, g = rng.uniform(0.1, 0.9), rng.choice([0.0, 1.0, 2.0, 2.5])
        assert abs(loss_focal(Tensor(x), t, a, g).item() - np_focal(x, t, a, g)) < 1e-12
    with pytest.raises(ValueError):
        loss_focal(Tensor([0.0]), np.array([0.5]))


def test_box_identical_and_far_apart():
    b = np.array([[0.4, 0.5, 0.2, 0.3]])
    l1, gl = loss_box(Tensor(b), b)
    assert l1.item() == 0.0 and gl.item() == pytest.approx(0.0, abs=1e-15)
    tiny = 1e-4
    _, gl = loss_box(Tensor([[0.0, 0.0, tiny, tiny]]), np.array([[1.0, 1.0, tiny, tiny]]))
    assert gl.item() == pytest.approx(2.0, abs=1e-6)


def test_degenerate_box_is_flagged():
    diag = {}
    _, gl = loss_box(Tensor([[0.5, 0.5, 0.0, 0.2]]), np.array([[0.5, 0.5, 0.2, 0.2]]), diag)
    assert diag["degenerate_boxes"] == 1 and math.isfinite(gl.item())


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0.05, 0.95), min_size=8, max_size=8))
def test_giou_never_exceeds_iou(v):
    iou, giou = giou_numpy(np.array(v[:4]), np.array(v[4:]))
    assert giou <= iou + 1e-15
    _, gl = loss_box(Tensor([v[:4]]), np.array([v[4:]]))
    assert 0.0 <= gl.item() <= 2.0
    assert gl.item() == pytest.approx(1 - giou, abs=1e-12)


def test_box_gradients():
    rng = np.random.default_rng(2)
    pred = parameter(rng.uniform(0.3, 0.6, (3, 4)))
    gt = rng.uniform(0.3, 0.6, (3, 4))
    fn = lambda: ag.add(*loss_box(pred, gt))
    assert check_gradients(fn, {"p": pred})["p"] < 1e-6


def test_mask_loss_cases():
    gt = np.zeros((1, 6, 6))
    gt[0, :3] = 1
    assert loss_mask(Tensor(np.where(gt > 0, 30.0, -30.0)), gt).item() < 1e-3
    n = gt.size
    # zero logits: p = 1/2 everywhere
    dice = 1 - (2 * (n / 4) + 1) / (n / 2 + n / 2 + 1)
    assert loss_mask(Tensor(np.zeros_like(gt)), gt, focal_weight=0.0).item() == pytest.approx(dice, abs=1e-15)
    empty = np.zeros((1, 6, 6))
    assert loss_mask(Tensor(np.full_like(empty, -30.0)), empty).item() < 1e-3
    with pytest.raises(ag.ShapeError):
        loss_mask(Tensor(np.zeros((1, 5, 6))), gt)


def test_mask_loss_gradients():
    rng = np.random.default_rng(3)
    x = parameter(rng.normal(size=(2, 4, 4)))
    gt = (rng.random((2, 4, 4)) < 0.5).astype(float)
    assert check_gradients(lambda: loss_mask(x, gt, 2.0, 5.0), {"x": x})["x"] < 1e-6


def test_emb_single_object_is_zero():
    f = Tensor(np.eye(3))
    assert loss_emb(f, f, {0: 1}, {0: 2}).item() == 0.0
    assert loss_emb(f, f, {}, {}).item() == 0.0


def test_emb_orthogonal_identical_oracle():
    n, tau = 3, 0.07
    f = Tensor(np.eye(4)[:n] * 2.0)
    m = {i: i for i in range(n)}
    expected = -math.log(math.exp(1 / tau) / (math.exp(1 / tau) + (n - 1)))
    assert loss_emb(f, f, m, m, tau).item() == pytest.approx(expected, abs=1e-12)


def test_emb_relabeling_invariance():
    rng = np.random.default_rng(4)
    f1, f2 = rng.normal(size=(6, 5)), rng.normal(size=(6, 5))
    m1, m2 = {0: 1, 1: 4, 2: 0}, {0: 3, 1: 2, 2: 5}
    base = loss_emb(Tensor(f1), Tensor(f2), m1, m2).item()
    perm = rng.permutation(6)  # new row k holds old row perm[k]
    inv = np.argsort(perm)
    p1 = {o: int(inv[q]) for o, q in m1.items()}
    p2 = {o: int(inv[q]) for o, q in m2.items()}
    assert loss_emb(Tensor(f1[perm]), Tensor(f2[perm]), p1, p2).item() == pytest.approx(base, abs=1e-13)
    assert base >= 0.0


def test_total_loss_combination():
    rng = np.random.default_rng(5)
    parts = {k: Tensor(float(rng.random())) for k in ("ref", "box", "mask", "emb", "expr")}
    assert total_loss(parts, LossWeights(0, 0, 0, 0, 0)).item() == 0.0
    assert total_loss(parts, LossWeights(0, 1, 0, 0, 0)).item() == parts["box"].item()
    w = LossWeights(*rng.random(5))
    expected = 0.0
    for k in ("ref", "box", "mask", "emb", "expr"):
        expected = expected + getattr(w, k) * parts[k].item()
    assert total_loss(parts, w).item() == expected
    doubled = LossWeights(w.ref, w.box, 2 * w.mask, w.emb, w.expr)
    assert total_loss(parts, doubled).item() - total_loss(parts, w).item() == pytest.approx(
        w.mask * parts["mask"].item(), abs=1e-15)


def test_total_loss_names_nan_term():
    with pytest.raises(NonFiniteLossError, match="mask"):
        total_loss({"ref": Tensor(1.0), "mask": Tensor(np.nan)}, LossWeights())
    with pytest.raises(ValueError):
        LossWeights(ref=-1.0)


# --- assignment ------------------------------------------------------------

def brute_force_assignment(cost):
    n, q = cost.shape
    best = min(itertools.permutations(range(q), n), key=lambda cols: sum(cost[i, c] for i, c in enumerate(cols)))
    return sum(cost[i, c] for i, c in enumerate(best))


def test_one_object_one_query():
    assert assign_labels(np.array([0.3]), np.array([[0.5, 0.5, 0.2, 0.2]]),
                         np.array([[0.4, 0.4, 0.1, 0.1]]), np.array([True])) == {0: 0}


def test_assignment_matches_permutation_brute_force():
    rng = np.random.default_rng(6)
    for n in range(1, 7):
        for _ in range(5):
            q = 8
            logits = rng.normal(size=q)
            boxes = rng.uniform(0.2, 0.8, (q, 4))
            gts = rng.uniform(0.2, 0.8, (n, 4))
            referred = np.arange(n) == rng.integers(n)
            cost = matching_cost(logits, boxes, gts, referred)
            m = assign_labels(logits, boxes, gts, referred)
            assert sorted(m) == list(range(n)) and len(set(m.values())) == n
            got = sum(cost[o, qq] for o, qq in m.items())
            assert got == pytest.approx(brute_force_assignment(cost), abs=1e-12)


def test_tied_costs_resolve_to_lowest_indices():
    assert hungarian(np.ones((3, 5))) == [(0, 0), (1, 1), (2, 2)]
    assert hungarian(np.ones((2, 2))) == [(0, 0), (1, 1)]


def test_too_many_objects_raise():
    with pytest.raises(ValueError):
        assign_labels(np.zeros(2), np.full((2, 4), 0.5), np.full((3, 4), 0.5), np.array([True, False, False]))


def test_matching_cost_combines_focal_and_box_terms():
    logits = np.array([0.0, 2.0])
    boxes = np.array([[0.5, 0.5, 0.2, 0.2], [0.3, 0.3, 0.2, 0.2]])
    gts = np.array([[0.5, 0.5, 0.2, 0.2]])
    cost = matching_cost(logits, boxes, gts, np.array([True]), lambda_ref=2.0, lambda_box=1.0)
    focal0 = np_focal(np.array([0.0]), np.array([1.0]), 0.25, 2.0)
    assert cost[0, 0] == pytest.approx(2.0 * focal0, abs=1e-12)
    l1 = 0.4
    _, g = giou_numpy(gts[0], boxes[1])
    focal1 = np_focal(np.array([2.0]), np.array([1.0]), 0.25, 2.0)
    assert cost[0, 1] == pytest.approx(2.0 * focal1 + 5 * l1 + 2 * (1 - g), abs=1e-12)
