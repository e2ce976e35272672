import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nnmamba import metrics
from nnmamba.errors import UndefinedMetricError
from oracles import brute_argmax, brute_auc, brute_boundary, brute_dice, brute_hd95, random_mask


# ---------------------------------------------------------------- dice


def test_dice_examples():
    a = np.zeros((4, 4, 4), bool)
    a[:2] = True
    assert metrics.dice(a, a) == 1.0
    assert metrics.dice(a, ~a) == 0.0
    assert metrics.dice(np.zeros_like(a), np.zeros_like(a)) == 1.0
    assert metrics.dice(a, np.zeros_like(a)) == 0.0
    p = np.zeros(16, bool)
    g = np.zeros(16, bool)
    p[:8] = True
    g[6:10] = True
    assert metrics.dice(p, g) == pytest.approx(4 / 12)


def test_dice_matches_oracle_on_random_masks():
    rng = np.random.default_rng(0)
    for _ in range(100):
        p, g = random_mask(rng), random_mask(rng)
        assert metrics.dice(p, g) == brute_dice(p, g)


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=30, deadline=None)
def test_dice_symmetry_and_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    p, g = rng.random((5, 5, 5)) < 0.4, rng.random((5, 5, 5)) < 0.4
    perm = rng.permutation(125)
    assert metrics.dice(p, g) == metrics.dice(g, p)
    assert metrics.dice(p, g) == metrics.dice(p.ravel()[perm], g.ravel()[perm])


# ---------------------------------------------------------------- hd95


def test_hd95_identical_and_single_voxels():
    m = np.zeros((8, 8, 8), bool)
    m[2:5, 2:5, 2:5] = True
    assert metrics.hd95(m, m) == 0.0
    a = np.zeros((10, 10, 10), bool)
    b = np.zeros_like(a)
    a[1, 1, 1] = True
    b[1, 4, 5] = True
    assert metrics.hd95(a, b) == 5.0


def test_hd95_uses_spacing():
    a = np.zeros((10, 10, 10), bool)
    b = np.zeros_like(a)
    a[0, 0, 0] = True
    b[2, 0, 0] = True
    assert metrics.hd95(a, b, spacing=(1.5, 1.0, 1.0)) == 3.0


def test_hd95_empty_mask_is_undefined():
    a = np.zeros((4, 4, 4), bool)
    b = a.copy()
    b[0, 0, 0] = True
    with pytest.raises(UndefinedMetricError):
        metrics.hd95(a, b)


def test_boundary_matches_oracle():
    rng = np.random.default_rng(1)
    for _ in range(10):
        m = random_mask(rng)
        got = np.argwhere(metrics.boundary(m)).astype(float)
        np.testing.assert_array_equal(got, brute_boundary(m))


def test_hd95_matches_all_pairs_oracle():
    rng = np.random.default_rng(2)
    for _ in range(100):
        p, g = random_mask(rng), random_mask(rng)
        spacing = rng.uniform(0.5, 2.0, size=3)
        assert abs(metrics.hd95(p, g, spacing) - brute_hd95(p, g, spacing)) <= 1e-9


def test_hd95_symmetric_and_below_hausdorff():
    rng = np.random.default_rng(3)
    for _ in range(20):
        p, g = random_mask(rng), random_mask(rng)
        assert metrics.hd95(p, g) == metrics.hd95(g, p)
        assert metrics.hd95(p, g) <= metrics.hausdorff(p, g)


def test_seg_report_flags_undefined_distance():
    gt = np.zeros((2, 6, 6, 6), np.int8)
    gt[:, 1:5, 1:5, 1:5] = 1
    gt[:, 2:4, 2:4, 2:4] = 2
    pred = gt.copy()
    pred[1][pred[1] == 2] = 1  # region 2 missing in the second prediction
    rep = metrics.seg_report(pred, gt, num_regions=2)
    assert rep["dice_region1"] == 1.0
    assert rep["dice_region2"] == 0.5
    assert rep["hd95_region2"] == 0.0
    assert rep.flags == ["hd95_undefined:1"]


# ---------------------------------------------------------------- landmarks


def test_mre_examples():
    h = np.zeros((2, 10, 10, 10))
    h[0, 2, 3, 4] = 1.0
    h[1, 5, 5, 5] = 1.0
    errors, mean = metrics.mre(h, [[2, 3, 4], [2, 1, 5]])
    np.testing.assert_array_equal(errors, [0.0, 5.0])
    assert mean == 2.5


def test_mre_tie_breaks_to_lowest_index():
    h = np.zeros((1, 4, 4, 4))
    h[0, 3, 0, 0] = h[0, 1, 2, 3] = 1.0
    np.testing.assert_array_equal(metrics.heatmap_argmax(h)[0], [1, 2, 3])


def test_argmax_matches_full_scan_oracle():
    from scipy.ndimage import gaussian_filter

    rng = np.random.default_rng(4)
    for _ in range(100):
        h = gaussian_filter(rng.normal(size=(1, 6, 7, 5)), 1.0, axes=(1, 2, 3))
        h = np.round(h, 2)  # creates ties
        np.testing.assert_array_equal(metrics.heatmap_argmax(h)[0], brute_argmax(h[0]))


def test_mre_spacing():
    h = np.zeros((1, 5, 5, 5))
    h[0, 1, 1, 1] = 1
    errors, _ = metrics.mre(h, [[2.0, 0.5, 0.5]], spacing=(2.0, 0.5, 0.5))
    assert errors[0] == 0.0


# ---------------------------------------------------------------- classification


def test_confusion_example():
    labels = [1] * 10 + [0] * 10
    scores = [0.9] * 8 + [0.1] * 2 + [0.2] * 7 + [0.8] * 3
    rep = metrics.cls_metrics(scores, labels)
    assert rep.counts == {"tp": 8, "fp": 3, "tn": 7, "fn": 2}
    assert rep["accuracy"] == 0.75
    assert rep["recall"] == 0.8
    assert rep["specificity"] == 0.7
    assert round(rep["precision"], 4) == 0.7273
    assert round(rep["f1"], 4) == 0.7619


def test_perfect_separation():
    rep = metrics.cls_metrics([0.1, 0.2, 0.8, 0.95], [0, 0, 1, 1])
    assert all(v == 1.0 for v in rep.values.values())


def test_single_class_auc_undefined():
    with pytest.raises(UndefinedMetricError):
        metrics.auc([0.1, 0.9], [1, 1])
    rep = metrics.cls_metrics([0.1, 0.9], [1, 1])
    assert math.isnan(rep["auc"]) and "auc_undefined" in rep.flags
    assert "specificity_zero_denominator" in rep.flags and rep["specificity"] == 0.0


def test_cls_matches_oracle_on_random_instances():
    rng = np.random.default_rng(5)
    for _ in range(100):
        n = int(rng.integers(4, 40))
        labels = rng.integers(0, 2, n)
        labels[:2] = [0, 1]
        scores = np.round(rng.random(n), 1)  # ties on purpose
        rep = metrics.cls_metrics(scores, labels)
        tp = sum(1 for s, l in zip(scores, labels) if s >= 0.5 and l == 1)
        fp = sum(1 for s, l in zip(scores, labels) if s >= 0.5 and l == 0)
        tn = sum(1 for s, l in zip(scores, labels) if s < 0.5 and l == 0)
        fn = sum(1 for s, l in zip(scores, labels) if s < 0.5 and l == 1)
        assert rep.counts == {"tp": tp, "fp": fp, "tn": tn, "fn": fn}
        assert rep["accuracy"] * n == pytest.approx(tp + tn, abs=1e-12)
        assert abs(rep["auc"] - brute_auc(scores, labels)) <= 1e-9


def test_random_scores_give_auc_near_half():
    rng = np.random.default_rng(6)
    labels = rng.integers(0, 2, 2000)
    assert abs(metrics.auc(rng.permutation(labels.astype(float)), labels) - 0.5) <= 0.05


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=30, deadline=None)
def test_auc_invariant_under_monotone_transform(seed):
    rng = np.random.default_rng(seed)
    labels = np.r_[0, 1, rng.integers(0, 2, 30)]
    scores = np.round(rng.normal(size=32), 1)
    assert metrics.auc(scores, labels) == metrics.auc(np.exp(3 * scores) + 7, labels)


def test_report_serialization():
    rep = metrics.cls_metrics([0.9, 0.1, 0.6], [1, 0, 0])
    d = json.loads(rep.to_json())
    assert d["counts"]["fp"] == 1
    header, row = rep.to_csv_row(header=True).splitlines()
    assert header.split(",")[:2] == ["accuracy", "recall"]
    assert len(row.split(",")) == len(header.split(","))


def test_landmark_report_names():
    rep = metrics.landmark_report([[1.0, 3.0], [3.0, 5.0]], ["a", "b"])
    assert rep.values == {"mre_a": 2.0, "mre_b": 4.0, "mre_mean": 3.0}
