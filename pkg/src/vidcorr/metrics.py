"""Segmentation quality: region similarity J, contour accuracy F, and
their track-level aggregates.

J is the Jaccard index of the object's binary masks. F matches the two
boundary point sets with a distance tolerance of 0.8% of the image
diagonal (floor one pixel) and reports the harmonic mean of the matched
fractions. The first frame of every track carries the given label and
is excluded from averaging.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import distance_transform_edt


@dataclass
class MaskRaster:
    """Integer object-id grid; 0 is background."""

    grid: np.ndarray
    num_objects: int = 0

    def __post_init__(self):
        self.grid = np.asarray(self.grid)
        if self.grid.ndim != 2 or not np.issubdtype(self.grid.dtype, np.integer):
            raise ValueError(f"mask must be a 2-d integer grid, got "
                             f"{self.grid.shape} {self.grid.dtype}")
        if self.num_objects == 0:
            self.num_objects = int(self.grid.max(initial=0))
        if self.grid.min(initial=0) < 0 or self.grid.max(initial=0) > self.num_objects:
            raise ValueError(f"object ids must lie in 0..{self.num_objects}")


def _binary(mask, object_id):
    grid = mask.grid if isinstance(mask, MaskRaster) else np.asarray(mask)
    return grid == object_id


def _check_shapes(pred, truth):
    p = pred.grid if isinstance(pred, MaskRaster) else np.asarray(pred)
    t = truth.grid if isinstance(truth, MaskRaster) else np.asarray(truth)
    if p.shape != t.shape:
        raise ValueError(f"mask shapes differ: {p.shape} vs {t.shape}")


def region_similarity_J(pred, truth, object_id):
    """Intersection over union of the object's binary masks.

    Both masks empty counts as a perfect 1; exactly one empty is 0."""
    _check_shapes(pred, truth)
    p = _binary(pred, object_id)
    t = _binary(truth, object_id)
    union = np.logical_or(p, t).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, t).sum() / union)


def boundary_pixels(binary):
    """Foreground cells 4-adjacent to non-foreground; cells outside the
    grid count as non-foreground, so edge-touching objects still have a
    boundary there."""
    fg = np.asarray(binary, dtype=bool)
    padded = np.zeros((fg.shape[0] + 2, fg.shape[1] + 2), dtype=bool)
    padded[1:-1, 1:-1] = fg
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1]
                & padded[1:-1, :-2] & padded[1:-1, 2:])
    return fg & ~interior


def default_tolerance(shape):
    """ceil(0.008 * image diagonal), at least one pixel."""
    diag = math.hypot(shape[0], shape[1])
    return max(1, math.ceil(0.008 * diag))


def contour_accuracy_F(pred, truth, object_id, tolerance=None):
    """Boundary F-measure with distance-tolerance matching.

    Precision: fraction of predicted boundary pixels within tolerance
    (Euclidean) of some truth boundary pixel; recall symmetric. Both
    boundaries empty gives 1, a vanished P + R gives 0."""
    _check_shapes(pred, truth)
    p = _binary(pred, object_id)
    t = _binary(truth, object_id)
    if tolerance is None:
        tolerance = default_tolerance(p.shape)
    p_bnd = boundary_pixels(p)
    t_bnd = boundary_pixels(t)
    if not p_bnd.any() and not t_bnd.any():
        return 1.0
    if not p_bnd.any() or not t_bnd.any():
        return 0.0
    dist_to_truth = distance_transform_edt(~t_bnd)
    dist_to_pred = distance_transform_edt(~p_bnd)
    precision = float((dist_to_truth[p_bnd] <= tolerance).mean())
    recall = float((dist_to_pred[t_bnd] <= tolerance).mean())
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


@dataclass
class TrackScores:
    """Per-frame J and F for one object in one sequence, first frame
    already excluded."""

    sequence: str
    object_id: int
    j_frames: list
    f_frames: list

    def __post_init__(self):
        if not self.j_frames or len(self.j_frames) != len(self.f_frames):
            raise ValueError("a track needs matching, nonempty J and F lists")

    @property
    def j_mean(self):
        return float(np.mean(self.j_frames))

    @property
    def f_mean(self):
        return float(np.mean(self.f_frames))


@dataclass
class SequenceScores:
    """Aggregates over a set of tracks, Table-style."""

    tracks: list = field(repr=False)
    j_mean: float = 0.0
    f_mean: float = 0.0
    j_recall: float = 0.0
    f_recall: float = 0.0

    @property
    def jf_mean(self):
        return (self.j_mean + self.f_mean) / 2.0


def score_track(pred_masks, truth_masks, object_id, sequence="seq", tolerance=None):
    """J and F per frame for one object; frame 0 is the given label and
    does not count."""
    if len(pred_masks) != len(truth_masks):
        raise ValueError(f"{len(pred_masks)} predictions for {len(truth_masks)} frames")
    if len(pred_masks) < 2:
        raise ValueError("a track needs at least one frame beyond the first")
    js, fs = [], []
    for pred, truth in zip(pred_masks[1:], truth_masks[1:]):
        js.append(region_similarity_J(pred, truth, object_id))
        fs.append(contour_accuracy_F(pred, truth, object_id, tolerance))
    return TrackScores(sequence, object_id, js, fs)


def aggregate(tracks):
    """Means over tracks of per-track frame means, plus the fraction of
    tracks above 0.5 (the recall columns)."""
    if not tracks:
        raise ValueError("no tracks to aggregate")
    j_means = np.array([t.j_mean for t in tracks])
    f_means = np.array([t.f_mean for t in tracks])
    return SequenceScores(
        tracks=list(tracks),
        j_mean=float(j_means.mean()),
        f_mean=float(f_means.mean()),
        j_recall=float((j_means > 0.5).mean()),
        f_recall=float((f_means > 0.5).mean()),
    )


def report(scores):
    """Tab-separated table: one row per track, then the global footer
    J&F_m, J_m, J_r, F_m, F_r."""
    lines = ["# sequence\tobject\tJ_m\tF_m"]
    for t in scores.tracks:
        lines.append(f"{t.sequence}\t{t.object_id}\t{t.j_mean:.4f}\t{t.f_mean:.4f}")
    lines.append("# J&F_m\tJ_m\tJ_r\tF_m\tF_r")
    lines.append(f"{scores.jf_mean:.4f}\t{scores.j_mean:.4f}\t{scores.j_recall:.4f}"
                 f"\t{scores.f_mean:.4f}\t{scores.f_recall:.4f}")
    return "\n".join(lines) + "\n"
