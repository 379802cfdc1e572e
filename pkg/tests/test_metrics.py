import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vesselkit.metrics import (
    Confusion,
    bifurcation_hit_or_miss,
    confusion,
    pr_ratio,
    precision_recall_dice,
    threshold_probs,
)
from vesselkit.volume import LabelVolume


def cube_mask(shape, centres, half=2):
    m = np.zeros(shape, bool)
    for c in centres:
        lo = np.maximum(np.array(c) - half, 0)
        hi = np.minimum(np.array(c) + half + 1, shape)
        m[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] = True
    return m


def test_confusion_basic():
    gt = np.zeros((2, 2, 2), bool)
    c = confusion(np.ones((2, 2, 2)), gt)
    assert c == Confusion(0, 8, 0, 0)
    c = confusion(gt, gt)
    assert c.fp == c.fn == 0 and c.total == 8


def test_confusion_shape_mismatch():
    with pytest.raises(ValueError):
        confusion(np.zeros((2, 2, 2)), np.zeros((2, 2, 3)))


def test_confusion_matches_scalar_count():
    rng = np.random.default_rng(0)
    p = rng.integers(0, 2, (4, 5, 5))
    g = rng.integers(0, 2, (4, 5, 5))
    tp = fp = fn = tn = 0
    for a, b in zip(p.ravel(), g.ravel()):
        tp += a and b
        fp += a and not b
        fn += (not a) and b
        tn += (not a) and (not b)
    assert confusion(p, g) == Confusion(tp, fp, fn, tn)


def test_prd_examples():
    assert precision_recall_dice(Confusion(5, 0, 0, 3)) == (1, 1, 1)
    assert precision_recall_dice(Confusion(0, 4, 4, 0)) == (0, 0, 0)
    p, r, d = precision_recall_dice(Confusion(1, 0, 1, 0))
    assert (p, r) == (1, 0.5) and d == pytest.approx(2 / 3, rel=1e-15)
    assert precision_recall_dice(Confusion(0, 0, 0, 9)) == (None, None, None)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 1000), st.integers(0, 1000), st.integers(0, 1000), st.integers(0, 1000))
def test_dice_is_harmonic_mean(tp, fp, fn, tn):
    p, r, d = precision_recall_dice(Confusion(tp, fp, fn, tn))
    if p is not None and r is not None and p + r > 0:
        assert d == pytest.approx(2 * p * r / (p + r), rel=1e-12)
    for v in (p, r, d):
        assert v is None or 0 <= v <= 1


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_confusion_symmetry(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.integers(0, 2, (2, 3, 4, 5))
    assert confusion(a, b).fp == confusion(b, a).fn


def test_pr_ratio():
    assert pr_ratio(0.8, 0.8) == 1.0
    assert pr_ratio(0.9, 0.45) == 2.0
    assert pr_ratio(0.5, 0) is None
    assert pr_ratio(None, 0.5) is None


def test_threshold_probs():
    assert threshold_probs(np.full((2, 2, 2), 0.5), 0.5).data.all()
    assert threshold_probs(np.random.default_rng(0).uniform(size=(3, 3, 3)), 0.0).data.all()
    probs = np.random.default_rng(1).uniform(size=(4, 4, 4))
    m = threshold_probs(probs, 0.3, "centerline")
    assert isinstance(m, LabelVolume) and m.kind == "centerline"
    assert all(m.data[i] == (probs[i] >= 0.3) for i in np.ndindex(probs.shape))


def test_exact_cubes_are_perfect():
    shape = (30, 30, 30)
    pts = [(5, 5, 5), (20, 12, 8)]
    rep = bifurcation_hit_or_miss(cube_mask(shape, pts), pts)
    assert rep.recall == 1 and rep.precision == 1 and rep.mean_err == 0 and rep.detection_pct == 1


def test_single_voxel_at_chebyshev_five_is_miss_and_fp():
    pred = np.zeros((20, 20, 20), bool)
    pred[15, 10, 10] = True
    rep = bifurcation_hit_or_miss(pred, [(10, 10, 10)])
    assert rep.hits == 0 and rep.recall == 0 and rep.precision == 0
    assert rep.false_positive_voxels == 1 and rep.mean_err is None


def test_unit_offset_hit():
    pred = np.zeros((10, 10, 10), bool)
    pred[5, 4, 4] = True
    rep = bifurcation_hit_or_miss(pred, [(4, 4, 4)])
    assert rep.hits == 1 and rep.mean_err == 1.0 and rep.err_std == 0.0


def test_empty_gt_is_undefined():
    rep = bifurcation_hit_or_miss(np.ones((4, 4, 4)), [])
    assert rep.recall is None and rep.precision == 0


def test_points_outside_volume_rejected():
    with pytest.raises(ValueError):
        bifurcation_hit_or_miss(np.zeros((4, 4, 4)), [(4, 0, 0)])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_adding_voxels_never_lowers_recall(seed):
    rng = np.random.default_rng(seed)
    shape = (16, 16, 16)
    pts = rng.integers(0, 16, (4, 3))
    pred = rng.uniform(size=shape) < 0.002
    more = pred | (rng.uniform(size=shape) < 0.002)
    a = bifurcation_hit_or_miss(pred, pts)
    b = bifurcation_hit_or_miss(more, pts)
    assert b.recall >= a.recall


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_hit_distances_consistent(seed):
    rng = np.random.default_rng(seed)
    shape = (12, 12, 12)
    pts = rng.integers(0, 12, (3, 3))
    pred = rng.uniform(size=shape) < 0.01
    rep = bifurcation_hit_or_miss(pred, pts)
    if rep.hits:
        # a hit's nearest voxel is within the Euclidean bound of a Chebyshev-4 neighbour
        assert 0 <= rep.mean_err <= math.sqrt(3) * 4 + 1e-12
        assert rep.mean_err <= math.sqrt(3) * 11
