import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vitad.metrics import (
    MetricReport,
    UndefinedMetric,
    aggregate_mad,
    aupro,
    auroc,
    average_precision,
    f1_max,
    mean_report,
)

# ---------------------------------------------------------------------------
# brute-force oracles (written against the definitions, not the implementation)


def auroc_oracle(scores, labels):
    scores = np.asarray(scores, float)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                total += 1.0
            elif p == n:
                total += 0.5
    return total / (len(pos) * len(neg))


def ap_oracle(scores, labels):
    scores = np.asarray(scores, float)
    labels = np.asarray(labels)
    total = 0.0
    for i in np.flatnonzero(labels == 1):
        t = scores[i]
        predicted = scores >= t
        total += (labels[predicted] == 1).sum() / predicted.sum()
    return total / (labels == 1).sum()


def f1_oracle(scores, labels):
    scores = np.asarray(scores, float)
    labels = np.asarray(labels)
    best = 0.0
    for t in np.unique(scores):
        pred = scores >= t
        tp = ((labels == 1) & pred).sum()
        p = tp / pred.sum() if pred.any() else 0.0
        r = tp / (labels == 1).sum()
        f1 = 2 * p * r / (p + r) if (p + r) > 0 else 0.0
        best = max(best, f1)
    return best


def _flood_regions(mask):
    """4/8-neighbor flood fill, 8-connectivity, no scipy."""
    mask = np.asarray(mask, bool)
    seen = np.zeros_like(mask)
    regions = []
    h, w = mask.shape
    for sy in range(h):
        for sx in range(w):
            if not mask[sy, sx] or seen[sy, sx]:
                continue
            stack = [(sy, sx)]
            seen[sy, sx] = True
            px = []
            while stack:
                y, x = stack.pop()
                px.append((y, x))
                for dy in (-1, 0, 1):
                    for dx in (-1, 0, 1):
                        ny, nx = y + dy, x + dx
                        if 0 <= ny < h and 0 <= nx < w and mask[ny, nx] and not seen[ny, nx]:
                            seen[ny, nx] = True
                            stack.append((ny, nx))
            regions.append(px)
    return regions


def aupro_oracle(maps, masks, fpr_cap):
    per_image_regions = []
    normal_scores = []
    for m, gt in zip(maps, masks):
        m = np.asarray(m, float)
        gt = np.asarray(gt, bool)
        normal_scores.append(m[~gt])
        for px in _flood_regions(gt):
            per_image_regions.append(np.array([m[y, x] for y, x in px]))
    normal_scores = np.concatenate(normal_scores)
    thresholds = np.unique(np.concatenate([normal_scores] + per_image_regions))[::-1]
    points = [(0.0, 0.0)]
    for t in thresholds:
        fpr = (normal_scores >= t).mean()
        pro = np.mean([(r >= t).mean() for r in per_image_regions])
        points.append((fpr, pro))
    if points[1][0] == 0.0:
        points[0] = (0.0, points[1][1])
    area = 0.0
    for (x0, y0), (x1, y1) in zip(points, points[1:]):
        if x1 <= x0:
            continue
        if x0 >= fpr_cap:
            break
        if x1 > fpr_cap:
            y1 = y0 + (y1 - y0) * (fpr_cap - x0) / (x1 - x0)
            x1 = fpr_cap
        area += 0.5 * (y0 + y1) * (x1 - x0)
    return area / fpr_cap


def random_instance(seed, n_max=64):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(3, n_max + 1))
    if rng.integers(2):
        scores = rng.random(n)
    else:
        scores = rng.integers(0, 5, n).astype(float)  # plenty of ties
    labels = rng.integers(0, 2, n)
    if labels.sum() == 0:
        labels[rng.integers(n)] = 1
    if labels.sum() == n:
        labels[rng.integers(n)] = 0
    return scores, labels


# ---------------------------------------------------------------------------
# pinned examples


def test_auroc_pinned_example():
    assert auroc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == pytest.approx(0.75)


def test_auroc_perfect_separation():
    assert auroc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0


def test_auroc_all_ties():
    assert auroc([0.5, 0.5, 0.5, 0.5], [0, 1, 0, 1]) == 0.5


def test_auroc_single_class_undefined():
    with pytest.raises(UndefinedMetric):
        auroc([0.1, 0.2], [1, 1])


def test_ap_pinned_example():
    assert average_precision([0.9, 0.8, 0.1], [1, 0, 1]) == pytest.approx(5.0 / 6.0)


def test_ap_all_positives_first():
    assert average_precision([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 1.0


def test_ap_single_positive_last():
    n = 7
    scores = np.linspace(1.0, 0.1, n)
    labels = np.zeros(n, int)
    labels[-1] = 1
    assert average_precision(scores, labels) == pytest.approx(1.0 / n)


def test_ap_no_positive_undefined():
    with pytest.raises(UndefinedMetric):
        average_precision([0.3, 0.2], [0, 0])


def test_f1_pinned_example():
    assert f1_max([0.9, 0.8, 0.1], [1, 0, 1]) == pytest.approx(0.8)


def test_f1_perfect_separation():
    assert f1_max([0.9, 0.8, 0.2], [1, 1, 0]) == 1.0


def test_f1_positive_top_is_nonzero():
    assert f1_max([0.9, 0.5, 0.1], [1, 0, 0]) > 0.0


# ---------------------------------------------------------------------------
# oracle equivalence (the acceptance-scale sweep lives in test_acceptance)


@pytest.mark.parametrize("seed", range(25))
def test_threshold_metrics_match_oracles(seed):
    scores, labels = random_instance(seed)
    assert auroc(scores, labels) == pytest.approx(auroc_oracle(scores, labels), abs=1e-9)
    assert average_precision(scores, labels) == pytest.approx(
        ap_oracle(scores, labels), abs=1e-9
    )
    assert f1_max(scores, labels) == pytest.approx(f1_oracle(scores, labels), abs=1e-9)


# ---------------------------------------------------------------------------
# aupro


def test_aupro_perfect_detector():
    mask = np.zeros((6, 6), bool)
    mask[1:3, 1:3] = True
    for cap in (0.1, 0.3, 1.0):
        assert aupro([mask.astype(float)], [mask], fpr_cap=cap) == pytest.approx(1.0)


def test_aupro_constant_map_is_half_cap_curve():
    mask = np.zeros((6, 6), bool)
    mask[2:4, 2:4] = True
    m = np.full((6, 6), 0.7)
    assert aupro([m], [mask], fpr_cap=1.0) == pytest.approx(0.5, abs=1e-12)
    assert aupro([m], [mask], fpr_cap=0.3) == pytest.approx(0.15, abs=1e-12)


def test_aupro_one_region_found_one_missed():
    mask = np.zeros((6, 6), bool)
    mask[0:2, 0:2] = True   # region A
    mask[4:6, 4:6] = True   # region B
    m = np.zeros((6, 6))
    m[0:2, 0:2] = 1.0
    rng = np.random.default_rng(0)
    bg = ~mask
    m[bg] = rng.uniform(0.4, 0.6, bg.sum())
    assert aupro([m], [mask], fpr_cap=0.3) == pytest.approx(0.5, abs=1e-12)


def test_aupro_no_regions_undefined():
    with pytest.raises(UndefinedMetric):
        aupro([np.ones((4, 4))], [np.zeros((4, 4), bool)])


def test_aupro_diagonal_blob_is_one_region():
    # 8-connectivity joins the diagonal; a fully scored blob stays perfect
    mask = np.zeros((5, 5), bool)
    mask[1, 1] = mask[2, 2] = mask[3, 3] = True
    m = mask.astype(float)
    assert aupro([m], [mask], fpr_cap=0.3) == pytest.approx(1.0)


@pytest.mark.parametrize("seed", range(20))
def test_aupro_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    h = int(rng.integers(4, 9))
    maps, masks = [], []
    for _ in range(int(rng.integers(1, 3))):
        mask = np.zeros((h, h), bool)
        for _ in range(int(rng.integers(1, 4))):
            y, x = rng.integers(0, h - 1, 2)
            mask[y : y + int(rng.integers(1, 3)), x : x + int(rng.integers(1, 3))] = True
        maps.append(rng.random((h, h)))
        masks.append(mask)
    if not any(m.any() for m in masks):
        masks[0][0, 0] = True
    cap = float(rng.choice([0.3, 0.5, 1.0]))
    assert aupro(maps, masks, fpr_cap=cap) == pytest.approx(
        aupro_oracle(maps, masks, cap), abs=1e-9
    )


def test_aupro_binned_close_to_exact():
    rng = np.random.default_rng(5)
    mask = np.zeros((16, 16), bool)
    mask[3:7, 3:7] = True
    m = rng.random((16, 16)) + 2.0 * mask
    exact = aupro([m], [mask], fpr_cap=0.3)
    binned = aupro([m], [mask], fpr_cap=0.3, bins=200)
    assert abs(exact - binned) < 0.02


# ---------------------------------------------------------------------------
# properties


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_auroc_invariant_under_monotone_transform(seed):
    scores, labels = random_instance(seed, n_max=32)
    base = auroc(scores, labels)
    assert auroc(np.exp(scores), labels) == pytest.approx(base, abs=1e-12)
    assert auroc(3.0 * scores + 7.0, labels) == pytest.approx(base, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_auroc_complement_symmetry_without_ties(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(4, 32))
    scores = rng.permutation(np.arange(n)).astype(float)
    labels = rng.integers(0, 2, n)
    if labels.sum() in (0, n):
        labels[0] = 1 - labels[0]
    assert auroc(scores, labels) + auroc(scores, 1 - labels) == pytest.approx(1.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_metrics_in_unit_interval_and_f1max_dominates(seed):
    scores, labels = random_instance(seed, n_max=32)
    a, p, f = auroc(scores, labels), average_precision(scores, labels), f1_max(scores, labels)
    assert 0.0 <= a <= 1.0 and 0.0 <= p <= 1.0 and 0.0 <= f <= 1.0
    t = float(np.median(scores))
    pred = scores >= t
    tp = ((labels == 1) & pred).sum()
    prec = tp / pred.sum() if pred.any() else 0.0
    rec = tp / (labels == 1).sum()
    fixed = 2 * prec * rec / (prec + rec) if (prec + rec) > 0 else 0.0
    assert f >= fixed - 1e-12


# ---------------------------------------------------------------------------
# aggregation


def test_mad_from_headline_means():
    vals = (0.983, 0.994, 0.973, 0.977, 0.553, 0.587, 0.914)
    assert round(aggregate_mad(vals) * 100, 1) == 85.4


def test_mad_second_column_within_rounding():
    vals = (0.888, 0.947, 0.920, 0.886, 0.526, 0.486, 0.711)
    assert abs(aggregate_mad(vals) * 100 - 76.6) <= 0.15


def test_mad_equal_values():
    assert aggregate_mad([0.7] * 7) == pytest.approx(0.7)


def test_mad_missing_field_rejected():
    with pytest.raises(ValueError):
        aggregate_mad([0.5] * 6)
    with pytest.raises(ValueError):
        aggregate_mad([0.5] * 6 + [None])


def test_report_mad_matches_field_mean():
    r = MetricReport(0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3)
    assert r.mad == pytest.approx(np.mean([0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3]), abs=1e-9)


def test_partial_report_warns_and_excludes():
    r = MetricReport(image_auroc=0.9, image_ap=0.8)
    with pytest.warns(UserWarning):
        assert r.mad == pytest.approx(0.85)


def test_mean_report_averages_per_field():
    a = MetricReport(0.9, 0.9, 0.9, 0.9, 0.9, 0.9, 0.9)
    b = MetricReport(0.7, 0.7, 0.7, 0.7, 0.7, 0.7, 0.7)
    m = mean_report([a, b])
    assert m.image_auroc == pytest.approx(0.8) and m.mad == pytest.approx(0.8, abs=1e-9)
