"""Completion metrics and nearest-neighbor label transfer.

Voxel IoU and Chamfer distance score completed voxel sets against ground
truth; the label operators carry per-point classes into the canonical
voxel domain (majority vote, then nearest-neighbor propagation) and back
out onto target points.
"""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyInputError, StructureError
from .grid import SparseGrid, coords_to_centers, membership_mask, unique_coords, voxelize

UNLABELED = 0xFFFFFFFF  # sentinel class id


def voxel_iou(pred, gt) -> float:
    """|pred ∩ gt| / |pred ∪ gt| over coordinate sets; 1.0 when both empty."""
    p = unique_coords(np.asarray(pred, dtype=np.int64).reshape(-1, 3))
    g = unique_coords(np.asarray(gt, dtype=np.int64).reshape(-1, 3))
    if p.shape[0] == 0 and g.shape[0] == 0:
        return 1.0
    inter = int(membership_mask(p, g).sum())
    union = p.shape[0] + g.shape[0] - inter
    return inter / union


def chamfer(pred, gt, voxel_size: float, origin=(0.0, 0.0, 0.0)) -> float:
    """Symmetric Chamfer distance between voxel-center sets, in meters.

    Sum of the two directed mean nearest-neighbor distances (unsquared).
    """
    p = unique_coords(np.asarray(pred, dtype=np.int64).reshape(-1, 3))
    g = unique_coords(np.asarray(gt, dtype=np.int64).reshape(-1, 3))
    if p.shape[0] == 0 or g.shape[0] == 0:
        raise EmptyInputError("chamfer distance needs two non-empty voxel sets")
    pc = coords_to_centers(p, voxel_size, origin)
    gc = coords_to_centers(g, voxel_size, origin)
    d_pg = cKDTree(gc).query(pc)[0]
    d_gp = cKDTree(pc).query(gc)[0]
    return float(d_pg.mean() + d_gp.mean())


def majority_vote_labels(labels, grid: SparseGrid, point_to_voxel) -> np.ndarray:
    """Per-voxel modal class over member points; ties to the smallest id.

    Points labeled UNLABELED don't vote; voxels with no votes stay
    UNLABELED.
    """
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    p2v = np.asarray(point_to_voxel, dtype=np.int64).reshape(-1)
    if labels.shape[0] != p2v.shape[0]:
        raise StructureError("labels and point_to_voxel length mismatch")
    out = np.full(len(grid), UNLABELED, dtype=np.uint32)
    voting = labels != UNLABELED
    if not voting.any():
        return out
    vl, vv = labels[voting], p2v[voting]
    classes, class_idx = np.unique(vl, return_inverse=True)
    counts = np.zeros((len(grid), classes.shape[0]), dtype=np.int64)
    np.add.at(counts, (vv, class_idx), 1)
    voted = counts.sum(axis=1) > 0
    # argmax picks the first (smallest) class id on ties
    out[voted] = classes[np.argmax(counts[voted], axis=1)].astype(np.uint32)
    return out


def prop_labels(source_coords, source_labels, canonical_coords, voxel_size: float, origin=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Push each labeled source voxel's class onto its nearest canonical voxel.

    Canonical voxels that receive nothing stay UNLABELED; collisions are
    resolved by majority, ties to the smallest class id.
    """
    canonical = unique_coords(np.asarray(canonical_coords, dtype=np.int64).reshape(-1, 3))
    if canonical.shape[0] == 0:
        raise EmptyInputError("prop_labels needs a non-empty canonical set")
    src = np.asarray(source_coords, dtype=np.int64).reshape(-1, 3)
    lab = np.asarray(source_labels, dtype=np.uint32).reshape(-1)
    if src.shape[0] != lab.shape[0]:
        raise StructureError("source labels and coords length mismatch")
    out = np.full(canonical.shape[0], UNLABELED, dtype=np.uint32)
    labeled = lab != UNLABELED
    if not labeled.any():
        return out
    src, lab = src[labeled], lab[labeled]
    tree = cKDTree(coords_to_centers(canonical, voxel_size, origin))
    nn = tree.query(coords_to_centers(src, voxel_size, origin))[1]
    classes, class_idx = np.unique(lab.astype(np.int64), return_inverse=True)
    counts = np.zeros((canonical.shape[0], classes.shape[0]), dtype=np.int64)
    np.add.at(counts, (nn, class_idx), 1)
    hit = counts.sum(axis=1) > 0
    out[hit] = classes[np.argmax(counts[hit], axis=1)].astype(np.uint32)
    return out


def proj_labels(pred_coords, pred_labels, target_points, voxel_size: float, origin=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Per-point labels for a target cloud from canonical voxel predictions.

    The target is voxelized on the same lattice; every point inherits the
    label of its voxel's nearest predicted voxel.
    """
    pred = np.asarray(pred_coords, dtype=np.int64).reshape(-1, 3)
    lab = np.asarray(pred_labels, dtype=np.uint32).reshape(-1)
    if pred.shape[0] == 0:
        raise EmptyInputError("proj_labels needs non-empty predictions")
    if pred.shape[0] != lab.shape[0]:
        raise StructureError("prediction labels and coords length mismatch")
    grid, p2v = voxelize(target_points, voxel_size, origin)
    tree = cKDTree(coords_to_centers(pred, voxel_size, origin))
    nn = tree.query(coords_to_centers(grid.coords, voxel_size, origin))[1]
    return lab[nn][p2v]


def seg_miou(pred_labels, gt_labels, classes) -> tuple[dict, float]:
    """Per-class point IoU and the mean over classes present in ground truth.

    Points whose ground truth is UNLABELED are ignored entirely.
    """
    pred = np.asarray(pred_labels, dtype=np.uint32).reshape(-1)
    gt = np.asarray(gt_labels, dtype=np.uint32).reshape(-1)
    if pred.shape[0] != gt.shape[0]:
        raise StructureError("prediction/ground-truth length mismatch")
    valid = gt != UNLABELED
    pred, gt = pred[valid], gt[valid]
    per_class = {}
    present = []
    for c in classes:
        c = int(c)
        tp = int(((pred == c) & (gt == c)).sum())
        fp = int(((pred == c) & (gt != c)).sum())
        fn = int(((pred != c) & (gt == c)).sum())
        if tp + fn == 0:
            continue  # class absent from ground truth
        iou = tp / (tp + fp + fn)
        per_class[c] = iou
        present.append(iou)
    mean = float(np.mean(present)) if present else 0.0
    return per_class, mean
