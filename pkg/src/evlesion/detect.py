"""Lesion detection from probability maps plus FROC and calibration metrics.

Detections are 3D local maxima of the per-voxel lesion score map under
26-connectivity with non-strict comparison; a plateau of equal values
yields one detection at its first voxel in scan order.  Score and
uncertainty thresholds filter the plateau representatives afterwards, so
detection sets are nested across thresholds (tighter threshold => subset).

Millimeter positions follow the voxel convention position = index * spacing.
A detection is a true positive when it lies within ``radius_mm`` of the
ground truth: by default distance to the nearest labeled lesion voxel
center ("mask" mode); "centroid" mode measures to lesion centers instead.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

DEFAULT_FPS_GRID = (0.5, 1.0, 1.5, 2.0, 2.5, 3.0)


@dataclass
class DetectionPoint:
    position_mm: tuple  # (z, y, x)
    score: float
    matched_lesion: int | None = None  # set by match_detections

    @property
    def is_tp(self):
        return self.matched_lesion is not None


@dataclass
class FrocCurve:
    thresholds: np.ndarray
    fps_per_volume: np.ndarray  # non-decreasing
    sensitivity: np.ndarray

    def sensitivity_at(self, fps_grid):
        """Linear interpolation at the reporting grid.

        Below the first sample the curve is anchored at (0, 0); past the
        final sample sensitivity stays at the max-recall value rather than
        extrapolating.
        """
        fps = np.concatenate([[0.0], self.fps_per_volume])
        sens = np.concatenate([[0.0], self.sensitivity])
        # collapse duplicate fps values keeping the best sensitivity
        best = {}
        for f, s in zip(fps, sens):
            best[f] = max(best.get(f, 0.0), s)
        xs = np.array(sorted(best))
        ys = np.array([best[x] for x in xs])
        return np.interp(np.asarray(fps_grid, dtype=np.float64), xs, ys)


@dataclass
class CalibrationBin:
    low: float
    high: float
    count: int
    accuracy: float  # nan when empty

    @property
    def empty(self):
        return self.count == 0


@dataclass
class CalibrationTable:
    bins: list = field(default_factory=list)

    def total_count(self):
        return sum(b.count for b in self.bins)


_NEIGHBOR_OFFSETS = [
    (dz, dy, dx)
    for dz in (-1, 0, 1)
    for dy in (-1, 0, 1)
    for dx in (-1, 0, 1)
    if (dz, dy, dx) != (0, 0, 0)
]


def find_local_maxima(prob, spacing, min_score=0.0, uncert=None, u_threshold=None):
    """Detection points from a (l, h, w) score map.

    A voxel qualifies when it is >= all 26 neighbors (missing neighbors at
    the border count as -inf), its plateau representative is the first
    voxel in scan order, its score is >= min_score, and, when an
    uncertainty map is given, its uncertainty is <= u_threshold.
    """
    prob = np.asarray(prob, dtype=np.float64)
    if prob.ndim != 3:
        raise ValueError(f"expected a 3D map, got shape {prob.shape}")
    if uncert is not None:
        uncert = np.asarray(uncert, dtype=np.float64)
        if uncert.shape != prob.shape:
            raise ValueError(f"prob/uncert shape mismatch: {prob.shape} vs {uncert.shape}")

    padded = np.pad(prob, 1, constant_values=-np.inf)
    is_max = np.ones(prob.shape, dtype=bool)
    for dz, dy, dx in _NEIGHBOR_OFFSETS:
        shifted = padded[1 + dz:padded.shape[0] - 1 + dz,
                         1 + dy:padded.shape[1] - 1 + dy,
                         1 + dx:padded.shape[2] - 1 + dx]
        is_max &= prob >= shifted

    # adjacent maxima necessarily share the same value, so connected
    # components of the max mask are plateaus; keep the first voxel each
    labels, n = ndimage.label(is_max, structure=np.ones((3, 3, 3), dtype=int))
    detections = []
    if n:
        flat = labels.reshape(-1)
        first = np.full(n + 1, flat.size, dtype=np.int64)
        idx = np.flatnonzero(flat)
        np.minimum.at(first, flat[idx], idx)
        spacing = np.asarray(spacing, dtype=np.float64)
        for comp in range(1, n + 1):
            vox = np.unravel_index(first[comp], prob.shape)
            score = float(prob[vox])
            if score < min_score:
                continue
            if uncert is not None and u_threshold is not None and uncert[vox] > u_threshold:
                continue
            pos = tuple(float(v) for v in np.array(vox) * spacing)
            detections.append(DetectionPoint(position_mm=pos, score=score))
    detections.sort(key=lambda d: (-d.score, d.position_mm))
    return detections


def lesion_voxel_positions(label, spacing, lesions, cfg=None):
    """Per-lesion arrays of labeled voxel positions in mm.

    Voxels are assigned by rasterizing each lesion sphere on the label
    grid; a lesion with no voxels on the grid falls back to its centroid.
    """
    spacing = np.asarray(spacing, dtype=np.float64)
    shape = label.shape
    zz = np.arange(shape[0])[:, None, None] * spacing[0]
    yy = np.arange(shape[1])[None, :, None] * spacing[1]
    xx = np.arange(shape[2])[None, None, :] * spacing[2]
    out = []
    for les in lesions:
        cz, cy, cx = les.center_mm
        r = les.radius_mm
        inside = ((zz - cz) ** 2 + (yy - cy) ** 2 + (xx - cx) ** 2) <= r * r
        inside &= label > 0
        pts = np.argwhere(inside) * spacing
        if pts.size == 0:
            pts = np.array([[cz, cy, cx]])
        out.append(pts)
    return out


def match_detections(detections, lesion_points, radius_mm=5.0):
    """Label detections TP/FP against per-lesion point sets.

    ``lesion_points`` is a list of (n_i, 3) mm arrays (one per lesion; a
    single centroid row gives centroid matching).  Each detection matches
    at most the nearest lesion within ``radius_mm``.  Returns the per-lesion
    hit flags; detections are labeled in place via ``matched_lesion``.
    """
    hit = np.zeros(len(lesion_points), dtype=bool)
    for det in detections:
        pos = np.asarray(det.position_mm)
        best, best_d = None, np.inf
        for j, pts in enumerate(lesion_points):
            d = float(np.sqrt(((pts - pos) ** 2).sum(axis=1)).min())
            if d < best_d:
                best, best_d = j, d
        if best is not None and best_d <= radius_mm:
            det.matched_lesion = best
            hit[best] = True
        else:
            det.matched_lesion = None
    return hit


def froc(per_volume, thresholds=None):
    """FROC curve from per-volume (matched detections, lesion count) pairs.

    ``per_volume`` is a list of (detections, n_lesions) with detections
    already labeled by :func:`match_detections`.  The default threshold
    sweep uses every distinct detection score, descending.
    """
    n_volumes = len(per_volume)
    total_lesions = sum(n for _, n in per_volume)
    scores = sorted({d.score for dets, _ in per_volume for d in dets}, reverse=True)
    if thresholds is None:
        thresholds = scores
    thresholds = sorted(thresholds, reverse=True)

    fps_list, sens_list = [], []
    for t in thresholds:
        fp = 0
        detected = set()
        for vol_idx, (dets, _) in enumerate(per_volume):
            for d in dets:
                if d.score >= t:
                    if d.is_tp:
                        detected.add((vol_idx, d.matched_lesion))
                    else:
                        fp += 1
        fps_list.append(fp / n_volumes if n_volumes else 0.0)
        sens_list.append(len(detected) / total_lesions if total_lesions else 0.0)
    return FrocCurve(thresholds=np.asarray(thresholds, dtype=np.float64),
                     fps_per_volume=np.asarray(fps_list),
                     sensitivity=np.asarray(sens_list))


def calibration(uncertainty, predicted, true, n_bins=10):
    """Accuracy per equal-width uncertainty bin.

    Bin edges are 0.0, 0.1, ..., 1.0; uncertainty exactly 1.0 falls in the
    last bin.  Empty bins carry count 0 and NaN accuracy.
    """
    u = np.asarray(uncertainty, dtype=np.float64).reshape(-1)
    correct = (np.asarray(predicted).reshape(-1) == np.asarray(true).reshape(-1))
    if u.shape != correct.shape:
        raise ValueError(f"shape mismatch: {u.shape} vs {correct.shape}")
    idx = np.minimum((u * n_bins).astype(int), n_bins - 1)
    table = CalibrationTable()
    for b in range(n_bins):
        mask = idx == b
        count = int(mask.sum())
        acc = float(correct[mask].mean()) if count else float("nan")
        table.bins.append(CalibrationBin(low=b / n_bins, high=(b + 1) / n_bins,
                                         count=count, accuracy=acc))
    return table
