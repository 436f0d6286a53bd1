"""Detection and evaluation: local maxima, matching oracle, FROC, calibration."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evlesion import detect
from evlesion.data import Lesion
from evlesion.detect import (DetectionPoint, calibration, find_local_maxima, froc,
                             lesion_voxel_positions, match_detections)


SPACING = (3.0, 0.5, 0.5)


# --------------------------------------------------------------------------
# local maxima
# --------------------------------------------------------------------------

def test_uniform_map_yields_one_plateau_below_min_score():
    prob = np.full((4, 6, 6), 0.2)
    assert find_local_maxima(prob, SPACING, min_score=0.5) == []


def test_uniform_map_is_single_plateau():
    prob = np.full((3, 4, 4), 0.4)
    dets = find_local_maxima(prob, SPACING, min_score=0.1)
    assert len(dets) == 1
    assert dets[0].position_mm == (0.0, 0.0, 0.0)  # first voxel in scan order


def test_single_spike_mm_conversion():
    prob = np.zeros((4, 16, 16))
    prob[2, 10, 12] = 0.9
    dets = find_local_maxima(prob, SPACING, min_score=0.5)
    assert len(dets) == 1
    assert dets[0].position_mm == (6.0, 5.0, 6.0)
    assert dets[0].score == 0.9


def test_two_separate_spikes():
    prob = np.zeros((4, 16, 16))
    prob[1, 3, 3] = 0.8
    prob[3, 12, 12] = 0.6
    dets = find_local_maxima(prob, SPACING, min_score=0.5)
    assert len(dets) == 2
    assert dets[0].score == 0.8  # sorted by descending score


def test_plateau_tie_broken_by_scan_order():
    prob = np.zeros((2, 5, 5))
    prob[0, 2, 2] = 0.7
    prob[0, 2, 3] = 0.7  # adjacent equal values: one detection
    dets = find_local_maxima(prob, SPACING, min_score=0.5)
    assert len(dets) == 1
    assert dets[0].position_mm == (0.0, 1.0, 1.0)


def test_uncertainty_filter_and_no_threshold_equivalence():
    r = np.random.default_rng(5)
    prob = r.uniform(size=(4, 10, 10))
    uncert = r.uniform(size=(4, 10, 10))
    base = find_local_maxima(prob, SPACING, min_score=0.2)
    at_one = find_local_maxima(prob, SPACING, min_score=0.2, uncert=uncert, u_threshold=1.0)
    assert [(d.position_mm, d.score) for d in base] == [(d.position_mm, d.score) for d in at_one]


def test_threshold_family_subset_property():
    r = np.random.default_rng(9)
    prob = r.uniform(size=(4, 12, 12))
    uncert = r.uniform(size=(4, 12, 12))
    sets = []
    for t in (0.3, 0.5, 0.7, 0.9, 1.0):
        dets = find_local_maxima(prob, SPACING, min_score=0.1, uncert=uncert, u_threshold=t)
        sets.append({d.position_mm for d in dets})
    for smaller, larger in zip(sets, sets[1:]):
        assert smaller <= larger


def test_shape_mismatch_rejected():
    with pytest.raises(ValueError, match="mismatch"):
        find_local_maxima(np.zeros((2, 4, 4)), SPACING, uncert=np.zeros((2, 4, 5)),
                          u_threshold=0.5)


# --------------------------------------------------------------------------
# matching
# --------------------------------------------------------------------------

def centroids(lesions):
    return [np.array([l.center_mm]) for l in lesions]


def test_detection_at_centroid_is_tp():
    les = [Lesion((6.0, 8.0, 8.0), 3.0)]
    det = DetectionPoint((6.0, 8.0, 8.0), 0.9)
    hit = match_detections([det], centroids(les))
    assert det.is_tp and hit[0]


def test_boundary_5_01_mm_is_fp():
    les = [Lesion((6.0, 8.0, 8.0), 0.0)]
    det = DetectionPoint((6.0, 8.0, 8.0 + 5.01), 0.9)
    hit = match_detections([det], centroids(les))
    assert not det.is_tp and not hit[0]
    det2 = DetectionPoint((6.0, 8.0, 8.0 + 5.0), 0.9)
    assert match_detections([det2], centroids(les))[0]


def test_detection_matches_nearest_lesion_only():
    les = [Lesion((0.0, 0.0, 0.0), 0.0), Lesion((0.0, 4.0, 0.0), 0.0)]
    det = DetectionPoint((0.0, 1.0, 0.0), 0.5)
    hit = match_detections([det], centroids(les))
    assert det.matched_lesion == 0
    assert hit[0] and not hit[1]


def _brute_force_match(dets, lesions, radius):
    """O(n*m) oracle over centroid geometry."""
    labels, hits = [], [False] * len(lesions)
    for det in dets:
        dists = [np.linalg.norm(np.array(det.position_mm) - np.array(l.center_mm))
                 for l in lesions]
        j = int(np.argmin(dists)) if dists else None
        if j is not None and dists[j] <= radius:
            labels.append(j)
            hits[j] = True
        else:
            labels.append(None)
    return labels, hits


@given(st.integers(min_value=0, max_value=6), st.integers(min_value=0, max_value=4),
       st.integers(min_value=0, max_value=10**6))
@settings(max_examples=60, deadline=None)
def test_matching_equals_brute_force(n_det, n_les, seed):
    r = np.random.default_rng(seed)
    lesions = [Lesion(tuple(r.uniform(0, 24, size=3)), 0.0) for _ in range(n_les)]
    dets = [DetectionPoint(tuple(r.uniform(0, 24, size=3)), float(r.uniform()))
            for _ in range(n_det)]
    want_labels, want_hits = _brute_force_match(dets, lesions, 5.0)
    hits = match_detections(dets, centroids(lesions), radius_mm=5.0)
    assert [d.matched_lesion for d in dets] == want_labels
    assert list(hits) == want_hits


def test_matching_translation_invariant():
    r = np.random.default_rng(31)
    lesions = [Lesion(tuple(r.uniform(0, 20, size=3)), 0.0) for _ in range(3)]
    dets = [DetectionPoint(tuple(r.uniform(0, 20, size=3)), 0.5) for _ in range(5)]
    match_detections(dets, centroids(lesions))
    base = [d.matched_lesion for d in dets]
    offset = np.array([7.0, -3.0, 2.5])
    lesions2 = [Lesion(tuple(np.array(l.center_mm) + offset), 0.0) for l in lesions]
    dets2 = [DetectionPoint(tuple(np.array(d.position_mm) + offset), d.score) for d in dets]
    match_detections(dets2, centroids(lesions2))
    assert [d.matched_lesion for d in dets2] == base


def test_mask_mode_uses_nearest_lesion_voxel():
    """Distance goes to the closest labeled voxel, not the centroid."""
    les = Lesion((6.0, 8.0, 8.0), 3.0)
    label = np.zeros((5, 32, 32), dtype=np.uint8)
    zz = np.arange(5)[:, None, None] * 3.0
    yy = np.arange(32)[None, :, None] * 0.5
    xx = np.arange(32)[None, None, :] * 0.5
    label[((zz - 6) ** 2 + (yy - 8) ** 2 + (xx - 8) ** 2) <= 9.0] = 1
    pts = lesion_voxel_positions(label, SPACING, [les])
    # 7 mm from the centroid but ~4 mm from the lesion surface
    det = DetectionPoint((6.0, 8.0, 15.0), 0.9)
    match_detections([det], pts)
    assert det.is_tp
    far = DetectionPoint((6.0, 8.0, 19.2), 0.9)
    match_detections([far], pts)
    assert not far.is_tp


def test_mask_mode_empty_lesion_falls_back_to_centroid():
    label = np.zeros((2, 4, 4), dtype=np.uint8)
    pts = lesion_voxel_positions(label, SPACING, [Lesion((1.0, 1.0, 1.0), 0.2)])
    np.testing.assert_array_equal(pts[0], [[1.0, 1.0, 1.0]])


# --------------------------------------------------------------------------
# FROC
# --------------------------------------------------------------------------

def _mk(dets):
    return [DetectionPoint(p, s) for p, s in dets]


def test_perfect_detector_full_sensitivity():
    per_volume = []
    for v in range(3):
        les = [Lesion((6.0, 5.0 + v, 5.0), 0.0)]
        dets = _mk([((6.0, 5.0 + v, 5.0), 0.9)])
        match_detections(dets, centroids(les))
        per_volume.append((dets, 1))
    curve = froc(per_volume)
    sens = curve.sensitivity_at(detect.DEFAULT_FPS_GRID)
    np.testing.assert_array_equal(sens, 1.0)


def test_no_detections_zero_everywhere():
    curve = froc([([], 2), ([], 1)])
    np.testing.assert_array_equal(curve.sensitivity_at(detect.DEFAULT_FPS_GRID), 0.0)


def test_three_volume_hand_enumerated_table():
    """Frozen oracle: the full threshold sweep enumerated by hand.

    Volume A: lesion L0 hit at 0.9; FPs at 0.8 and 0.3.
    Volume B: lesions L1 (hit at 0.7), L2 (missed); FP at 0.6.
    Volume C: no lesions; FP at 0.5.

    Sweep over distinct scores (desc)      fps/vol   sensitivity (of 3)
      t=0.9: TP(L0)                        0/3=0     1/3
      t=0.8: +FP                           1/3       1/3
      t=0.7: +TP(L1)                       1/3       2/3
      t=0.6: +FP                           2/3       2/3
      t=0.5: +FP                           3/3       2/3
      t=0.3: +FP                           4/3       2/3
    """
    far = (0.0, 0.0, 0.0)

    vol_a_les = [Lesion((6.0, 10.0, 10.0), 0.0)]
    vol_a = _mk([((6.0, 10.0, 10.0), 0.9), ((0.0, 30.0, 30.0), 0.8),
                 ((18.0, 30.0, 2.0), 0.3)])
    match_detections(vol_a, centroids(vol_a_les))

    vol_b_les = [Lesion((3.0, 5.0, 5.0), 0.0), Lesion((12.0, 20.0, 20.0), 0.0)]
    vol_b = _mk([((3.0, 5.0, 5.0), 0.7), ((6.0, 30.0, 5.0), 0.6)])
    match_detections(vol_b, centroids(vol_b_les))

    vol_c = _mk([((9.0, 15.0, 15.0), 0.5)])
    match_detections(vol_c, [])

    curve = froc([(vol_a, 1), (vol_b, 2), (vol_c, 0)])
    np.testing.assert_allclose(curve.thresholds, [0.9, 0.8, 0.7, 0.6, 0.5, 0.3])
    np.testing.assert_allclose(curve.fps_per_volume,
                               [0.0, 1 / 3, 1 / 3, 2 / 3, 1.0, 4 / 3])
    np.testing.assert_allclose(curve.sensitivity,
                               [1 / 3, 1 / 3, 2 / 3, 2 / 3, 2 / 3, 2 / 3])
    # interpolated reporting values, by hand:
    #   fps=0.5 sits between (1/3, 2/3) and (2/3, 2/3) -> 2/3
    #   fps=1.0 is an exact sample -> 2/3; beyond max fps -> stays 2/3
    np.testing.assert_allclose(curve.sensitivity_at([0.5, 1.0, 2.0]),
                               [2 / 3, 2 / 3, 2 / 3])
    #   the 1/3 plateau starts at fps=0 (threshold 0.9 has zero FPs)
    np.testing.assert_allclose(curve.sensitivity_at([0.0]), [1 / 3])


def test_froc_monotone_in_threshold_on_random_scenes():
    r = np.random.default_rng(77)
    for _ in range(10):
        per_volume = []
        for _v in range(4):
            lesions = [Lesion(tuple(r.uniform(0, 24, 3)), 0.0)
                       for _ in range(int(r.integers(0, 3)))]
            dets = _mk([(tuple(r.uniform(0, 24, 3)), float(r.uniform()))
                        for _ in range(int(r.integers(0, 6)))])
            match_detections(dets, centroids(lesions))
            per_volume.append((dets, len(lesions)))
        curve = froc(per_volume)
        assert np.all(np.diff(curve.fps_per_volume) >= 0)
        assert np.all(np.diff(curve.sensitivity) >= 0)
        assert np.all((curve.sensitivity >= 0) & (curve.sensitivity <= 1))


# --------------------------------------------------------------------------
# calibration
# --------------------------------------------------------------------------

def test_all_correct_every_bin_accuracy_one():
    r = np.random.default_rng(3)
    u = r.uniform(size=1000)
    pred = np.ones(1000, dtype=int)
    table = calibration(u, pred, pred.copy())
    for b in table.bins:
        if not b.empty:
            assert b.accuracy == 1.0


def test_counts_sum_preserved_and_edges():
    r = np.random.default_rng(4)
    u = r.uniform(size=5000)
    pred = r.integers(0, 2, size=5000)
    true = r.integers(0, 2, size=5000)
    table = calibration(u, pred, true)
    assert table.total_count() == 5000
    lows = [b.low for b in table.bins]
    np.testing.assert_allclose(lows, np.arange(10) / 10)
    np.testing.assert_allclose([b.high for b in table.bins], np.arange(1, 11) / 10)


def test_exact_one_goes_to_last_bin():
    table = calibration(np.array([1.0]), np.array([1]), np.array([1]))
    assert table.bins[-1].count == 1


def test_empty_bins_flagged():
    table = calibration(np.array([0.05, 0.05]), np.array([1, 0]), np.array([1, 1]))
    assert table.bins[0].count == 2
    assert table.bins[0].accuracy == 0.5
    assert all(b.empty for b in table.bins[1:])
    assert np.isnan(table.bins[1].accuracy)
