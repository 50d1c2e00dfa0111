import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from epcformer import metrics as M
from epcformer.metrics import ScoredMask


# --- brute-force references ------------------------------------------------

def bf_iou(p, g):
    inter = union = 0
    for i in range(p.shape[0]):
        for j in range(p.shape[1]):
            inter += int(p[i, j] and g[i, j])
            union += int(p[i, j] or g[i, j])
    return 1.0 if union == 0 else inter / union


def bf_boundary(m):
    h, w = m.shape
    out = set()
    for i in range(h):
        for j in range(w):
            if not m[i, j]:
                continue
            for di in (-1, 0, 1):
                for dj in (-1, 0, 1):
                    a, b = i + di, j + dj
                    if not (0 <= a < h and 0 <= b < w) or not m[a, b]:
                        out.add((i, j))
    return out


def bf_f(p, g, tol):
    pb, gb = bf_boundary(p), bf_boundary(g)
    if not pb and not gb:
        return 1.0
    if not pb or not gb:
        return 0.0

    def near(x, ys):
        return any(math.hypot(x[0] - y[0], x[1] - y[1]) <= tol for y in ys)

    prec = sum(near(x, gb) for x in pb) / len(pb)
    rec = sum(near(y, pb) for y in gb) / len(gb)
    return 0.0 if prec + rec == 0 else 2 * prec * rec / (prec + rec)


def bf_ap(preds, gts, thr):
    n_gt = sum(len(g) for g in gts)
    order = sorted(((p.score, i, j) for i, ps in enumerate(preds) for j, p in enumerate(ps)),
                   key=lambda x: (-x[0], x[1], x[2]))
    used = set()
    hits = []
    for _, i, j in order:
        best, best_iou = None, -1.0
        for k, g in enumerate(gts[i]):
            if (i, k) in used:
                continue
            iou = bf_iou(preds[i][j].mask, g)
            if iou >= thr and iou > best_iou:
                best, best_iou = k, iou
        if best is not None:
            used.add((i, best))
        hits.append(best is not None)
    # operating points only after the last of a run of tied scores
    points = [r for r in range(len(hits)) if r == len(hits) - 1 or order[r + 1][0] != order[r][0]]
    prec = {r: sum(hits[:r + 1]) / (r + 1) for r in points}
    rec = {r: sum(hits[:r + 1]) / n_gt for r in points}
    total = 0.0
    for k in range(101):
        r = k / 100
        cands = [prec[i] for i in points if rec[i] >= r - 1e-12]
        total += max(cands) if cands else 0.0
    return total / 101


def random_pair(rng, max_side=16):
    h, w = rng.integers(1, max_side + 1, size=2)
    dens = rng.uniform(0.1, 0.9)
    return rng.random((h, w)) < dens, rng.random((h, w)) < dens


# --- J ---------------------------------------------------------------------

def test_region_similarity_trivial():
    m = np.zeros((5, 5), bool)
    m[1:3, 1:4] = True
    d = np.zeros((5, 5), bool)
    d[4, 4] = True
    assert M.region_similarity(m, m) == 1.0
    assert M.region_similarity(m, d) == 0.0
    assert M.region_similarity(np.zeros((3, 3)), np.zeros((3, 3))) == 1.0
    assert M.region_similarity(m, np.zeros_like(m)) == 0.0
    with pytest.raises(ValueError):
        M.region_similarity(m, m[:3])


def test_region_similarity_matches_pixel_counting():
    rng = np.random.default_rng(0)
    for _ in range(100):
        p, g = random_pair(rng)
        assert M.region_similarity(p, g) == bf_iou(p, g)


# --- F ---------------------------------------------------------------------

def test_contour_accuracy_trivial():
    m = np.zeros((10, 10), bool)
    m[2:7, 3:8] = True
    assert M.contour_accuracy(m, m) == 1.0
    assert M.contour_accuracy(np.zeros_like(m), m) == 0.0
    assert M.contour_accuracy(np.zeros_like(m), np.zeros_like(m)) == 1.0
    with pytest.raises(ValueError):
        M.contour_accuracy(m, m[:, :4])


@pytest.mark.parametrize("shift", [(0, 1), (1, 0), (0, -1), (-1, 0)])
def test_one_pixel_translation_within_tolerance_one(shift):
    g = np.zeros((16, 16), bool)
    g[4:10, 5:12] = True
    p = np.roll(g, shift, axis=(0, 1))
    assert bf_f(p, g, 1) == 1.0
    assert M.contour_accuracy(p, g, 1) == 1.0


def test_default_tolerance():
    assert M.default_tolerance((24, 24)) == 1
    assert M.default_tolerance((480, 854)) == round(0.008 * math.hypot(480, 854))


def test_contour_accuracy_matches_brute_force():
    rng = np.random.default_rng(1)
    for k in range(100):
        p, g = random_pair(rng)
        tol = [1, 1.5, 2][k % 3]
        assert M.contour_accuracy(p, g, tol) == bf_f(p, g, tol)


def test_boundary_matches_brute_force():
    rng = np.random.default_rng(2)
    for _ in range(50):
        p, _ = random_pair(rng)
        assert set(zip(*np.nonzero(M.boundary(p)))) == bf_boundary(p)


# --- P@K and IoU aggregates ------------------------------------------------

def test_precision_at_k_trivial():
    ious = [0.75] * 4
    assert M.precision_at_k(ious, 0.5) == 1.0
    assert M.precision_at_k(ious, 0.7) == 1.0
    assert M.precision_at_k(ious, 0.8) == 0.0
    assert M.precision_at_k([0.7], 0.7) == 0.0
    with pytest.raises(ValueError):
        M.precision_at_k([], 0.5)


def test_precision_at_k_matches_counting():
    rng = np.random.default_rng(3)
    for _ in range(100):
        ious = rng.choice(np.linspace(0, 1, 21), size=rng.integers(1, 30))
        for k in M.PRECISION_THRESHOLDS:
            assert M.precision_at_k(ious, k) == sum(1 for v in ious if v > k) / len(ious)


def test_aggregate_iou_examples():
    overall, mean = M.aggregate_iou([3], [5])
    assert overall == mean == 0.6
    overall, mean = M.aggregate_iou([1, 3], [2, 4])
    assert overall == 4 / 6 and mean == (0.5 + 0.75) / 2
    assert M.aggregate_iou([0, 0], [0, 0]) == (1.0, 1.0)


def test_aggregate_iou_matches_direct():
    rng = np.random.default_rng(4)
    for _ in range(100):
        pairs = [random_pair(rng, 8) for _ in range(rng.integers(1, 6))]
        pairs = [(p, g) for p, g in pairs if p.shape == g.shape]
        inter = [int((p & g).sum()) for p, g in pairs]
        union = [int((p | g).sum()) for p, g in pairs]
        overall, mean = M.aggregate_iou(inter, union)
        assert overall == (sum(inter) / sum(union) if sum(union) else 1.0)
        assert mean == pytest.approx(np.mean([bf_iou(p, g) for p, g in pairs]), abs=1e-15)


# --- mAP -------------------------------------------------------------------

def _blob(h, w, box):
    m = np.zeros((h, w), bool)
    r0, r1, c0, c1 = box
    m[r0:r1, c0:c1] = True
    return m


def test_map_perfect_and_empty():
    gts = [[_blob(8, 8, (0, 3, 0, 3)), _blob(8, 8, (4, 8, 4, 8))]]
    perfect = [[ScoredMask(0.9, gts[0][0]), ScoredMask(0.8, gts[0][1])]]
    assert M.mean_average_precision(perfect, gts) == 1.0
    assert M.mean_average_precision([[]], gts) == 0.0
    with pytest.raises(ValueError):
        M.mean_average_precision([[]], [[]])


def test_map_hand_evaluated_five_predictions_three_gts():
    g1, g2, g3 = _blob(9, 9, (0, 3, 0, 3)), _blob(9, 9, (4, 6, 0, 9)), _blob(9, 9, (7, 9, 6, 9))
    junk = _blob(9, 9, (0, 2, 5, 9))
    preds = [[ScoredMask(0.9, g1), ScoredMask(0.8, junk), ScoredMask(0.7, g2),
              ScoredMask(0.6, g1), ScoredMask(0.5, g3)]]
    # ranks: TP FP TP FP TP -> envelope 1 (r <= 1/3), 2/3 (r <= 2/3), 3/5 (r <= 1)
    expected = (34 * 1.0 + 33 * (2 / 3) + 34 * 0.6) / 101
    assert M.mean_average_precision(preds, [[g1, g2, g3]]) == pytest.approx(expected, abs=1e-12)
    assert bf_ap(preds, [[g1, g2, g3]], 0.5) == pytest.approx(expected, abs=1e-12)


def test_map_matches_brute_force_pr():
    rng = np.random.default_rng(5)
    for _ in range(100):
        n_img = int(rng.integers(1, 4))
        gts, preds = [], []
        for _ in range(n_img):
            h, w = rng.integers(2, 17, size=2)
            g = [rng.random((h, w)) < 0.4 for _ in range(rng.integers(1, 3))]
            # predictions: noisy copies of ground truths plus clutter
            p = []
            for _ in range(rng.integers(0, 5)):
                base = g[int(rng.integers(len(g)))] if rng.random() < 0.7 else rng.random((h, w)) < 0.4
                p.append(ScoredMask(float(rng.choice([0.2, 0.5, 0.9, rng.random()])), base ^ (rng.random((h, w)) < 0.1)))
            gts.append(g)
            preds.append(p)
        got = M.mean_average_precision(preds, gts)
        want = np.mean([bf_ap(preds, gts, t) for t in M.MAP_THRESHOLDS])
        assert abs(got - want) <= 1e-9


# --- report ----------------------------------------------------------------

def test_report_on_perfect_predictions():
    rng = np.random.default_rng(6)
    gts = [rng.random((12, 12)) < 0.5 for _ in range(5)]
    rep = M.build_report(gts, gts)
    assert rep.J == rep.F == rep.JF == 1.0
    assert all(v == 1.0 for v in rep.precision_at.values())
    assert rep.mAP == 1.0


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_report_invariants_and_permutation(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 8))
    gts = [rng.random((10, 10)) < 0.4 for _ in range(n)]
    preds = [g ^ (rng.random((10, 10)) < 0.2) for g in gts]
    rep = M.build_report(preds, gts)
    assert rep.JF == (rep.J + rep.F) / 2
    values = [rep.J, rep.F, rep.JF, rep.overall_iou, rep.mean_iou, rep.mAP, *rep.precision_at.values()]
    assert all(0.0 <= v <= 1.0 for v in values)
    perm = rng.permutation(n)
    shuffled = M.build_report([preds[i] for i in perm], [gts[i] for i in perm])
    assert shuffled.to_text() == rep.to_text()


def test_report_text_round_trip():
    rep = M.MetricsReport(0.5, 0.25, 0.375, {0.5: 0.4}, 0.3, 0.2, 0.1, 7)
    text = rep.to_text()
    assert "J=0.500000\n" in text and "P@0.5=0.400000\n" in text
    assert M.MetricsReport.from_text(text) == rep
