"""Metrics and label transfer: IoU, Chamfer, majority vote, Prop/Proj, mIoU."""

import numpy as np
import pytest

from voxcomplete.errors import EmptyInputError
from voxcomplete.grid import unique_coords, voxelize
from voxcomplete.metrics import (
    UNLABELED,
    chamfer,
    majority_vote_labels,
    prop_labels,
    proj_labels,
    seg_miou,
    voxel_iou,
)


class TestVoxelIoU:
    def test_identity(self, rng):
        a = unique_coords(rng.integers(-5, 5, size=(100, 3)))
        assert voxel_iou(a, a) == 1.0

    def test_disjoint(self):
        assert voxel_iou([(0, 0, 0)], [(5, 5, 5)]) == 0.0

    def test_counted_example(self):
        pred = [(0, 0, 0), (1, 0, 0), (2, 0, 0), (3, 0, 0)]
        gt = [(1, 0, 0), (2, 0, 0), (3, 0, 0), (4, 0, 0), (5, 0, 0)]
        # intersection 3, union 6
        assert voxel_iou(pred, gt) == 0.5

    def test_both_empty(self):
        empty = np.empty((0, 3), dtype=np.int64)
        assert voxel_iou(empty, empty) == 1.0

    def test_matches_set_oracle(self, rng):
        for _ in range(10):
            a = unique_coords(rng.integers(-6, 6, size=(150, 3)))
            b = unique_coords(rng.integers(-6, 6, size=(150, 3)))
            sa = {tuple(v) for v in a}
            sb = {tuple(v) for v in b}
            assert voxel_iou(a, b) == len(sa & sb) / len(sa | sb)

    def test_monotone_when_adding_correct_voxels(self, rng):
        gt = unique_coords(rng.integers(-6, 6, size=(200, 3)))
        pred = gt[:50]
        prev = voxel_iou(pred, gt)
        for k in (100, 150, len(gt)):
            cur = voxel_iou(gt[:k], gt)
            assert cur >= prev
            prev = cur


class TestChamfer:
    def test_identity_zero(self, rng):
        a = unique_coords(rng.integers(-5, 5, size=(60, 3)))
        assert chamfer(a, a, 0.2) == 0.0

    def test_one_cell_offset(self):
        assert abs(chamfer([(0, 0, 0)], [(1, 0, 0)], 0.2) - 0.4) < 1e-12

    def test_symmetry(self, rng):
        a = unique_coords(rng.integers(-8, 8, size=(100, 3)))
        b = unique_coords(rng.integers(-8, 8, size=(120, 3)))
        assert abs(chamfer(a, b, 0.2) - chamfer(b, a, 0.2)) < 1e-12

    def test_matches_brute_force(self, rng):
        from voxcomplete.grid import coords_to_centers

        for trial in range(5):
            a = unique_coords(rng.integers(-10, 10, size=(500, 3)))
            b = unique_coords(rng.integers(-10, 10, size=(500, 3)))
            fast = chamfer(a, b, 0.2, (0.1, 0.2, 0.3))
            ca = coords_to_centers(a, 0.2, (0.1, 0.2, 0.3))
            cb = coords_to_centers(b, 0.2, (0.1, 0.2, 0.3))
            d = np.linalg.norm(ca[:, None, :] - cb[None, :, :], axis=2)
            brute = d.min(axis=1).mean() + d.min(axis=0).mean()
            assert abs(fast - brute) <= 1e-9

    def test_empty_rejected(self):
        with pytest.raises(EmptyInputError):
            chamfer(np.empty((0, 3)), [(0, 0, 0)], 0.2)


class TestMajorityVote:
    def test_majority(self):
        grid, p2v = voxelize([(0.1, 0.1, 0.1)] * 3, 0.2)
        labels = majority_vote_labels([1, 1, 2], grid, p2v)
        assert labels.tolist() == [1]

    def test_tie_breaks_to_smallest(self):
        grid, p2v = voxelize([(0.1, 0.1, 0.1)] * 2, 0.2)
        assert majority_vote_labels([2, 1], grid, p2v).tolist() == [1]

    def test_label_closure(self, rng):
        pts = rng.uniform(0, 2, size=(300, 3))
        labs = rng.integers(0, 4, size=300).astype(np.uint32)
        grid, p2v = voxelize(pts, 0.25)
        vox = majority_vote_labels(labs, grid, p2v)
        for v in range(len(grid)):
            member = labs[p2v == v]
            assert vox[v] in member

    def test_unlabeled_points_dont_vote(self):
        grid, p2v = voxelize([(0.1, 0.1, 0.1)] * 3, 0.2)
        out = majority_vote_labels([UNLABELED, UNLABELED, 3], grid, p2v)
        assert out.tolist() == [3]
        out = majority_vote_labels([UNLABELED] * 3, grid, p2v)
        assert out.tolist() == [UNLABELED]


class TestProp:
    def test_self_propagation(self, rng):
        coords = unique_coords(rng.integers(-5, 5, size=(50, 3)))
        labels = rng.integers(0, 3, size=len(coords)).astype(np.uint32)
        out = prop_labels(coords, labels, coords, 0.2)
        assert (out == labels).all()

    def test_nearest_canonical_wins(self):
        src = np.array([(0, 0, 0)])
        canonical = np.array([(1, 0, 0), (2, 0, 0)])
        out = prop_labels(src, np.array([7], dtype=np.uint32), canonical, 0.2)
        assert out.tolist() == [7, UNLABELED]

    def test_unlabeled_fraction_counting(self, rng):
        src = unique_coords(rng.integers(0, 4, size=(30, 3)))
        labels = np.full(len(src), 2, dtype=np.uint32)
        canonical = unique_coords(rng.integers(0, 6, size=(200, 3)))
        out = prop_labels(src, labels, canonical, 0.2)
        from scipy.spatial import cKDTree

        from voxcomplete.grid import coords_to_centers

        nn = cKDTree(coords_to_centers(canonical, 0.2, (0, 0, 0))).query(
            coords_to_centers(src, 0.2, (0, 0, 0))
        )[1]
        assert (out != UNLABELED).sum() == np.unique(nn).shape[0]

    def test_never_invents_classes(self, rng):
        src = unique_coords(rng.integers(-4, 4, size=(40, 3)))
        labels = rng.choice([3, 9], size=len(src)).astype(np.uint32)
        canonical = unique_coords(rng.integers(-4, 4, size=(80, 3)))
        out = prop_labels(src, labels, canonical, 0.2)
        assert set(np.unique(out)) <= {3, 9, UNLABELED}


class TestProj:
    def test_matching_voxels_identity(self, rng):
        pts = rng.uniform(0, 2, size=(100, 3))
        grid, p2v = voxelize(pts, 0.2)
        vox_labels = rng.integers(0, 3, size=len(grid)).astype(np.uint32)
        out = proj_labels(grid.coords, vox_labels, pts, 0.2)
        assert (out == vox_labels[p2v]).all()

    def test_single_prediction_labels_all(self, rng):
        pts = rng.uniform(0, 1, size=(50, 3))
        out = proj_labels(np.array([(0, 0, 0)]), np.array([4], dtype=np.uint32), pts, 0.2)
        assert (out == 4).all()

    def test_roundtrip_prop_proj(self, rng):
        pts = rng.uniform(0, 2, size=(200, 3))
        labels = rng.integers(0, 3, size=200).astype(np.uint32)
        grid, p2v = voxelize(pts, 0.2)
        vox = majority_vote_labels(labels, grid, p2v)
        # identity completion: canonical set == frame voxel set
        prop = prop_labels(grid.coords, vox, grid.coords, 0.2)
        back = proj_labels(grid.coords, prop, pts, 0.2)
        assert (back == vox[p2v]).all()


class TestSegMiou:
    def test_perfect(self):
        labels = np.array([0, 1, 2, 1], dtype=np.uint32)
        per, mean = seg_miou(labels, labels, [0, 1, 2])
        assert mean == 1.0 and all(v == 1.0 for v in per.values())

    def test_all_wrong_binary(self):
        gt = np.array([0, 1, 0, 1], dtype=np.uint32)
        per, mean = seg_miou(1 - gt, gt, [0, 1])
        assert mean == 0.0

    def test_confusion_counts(self):
        # class 0: TP=3, FP=1, FN=2 -> IoU 0.5
        gt = np.array([0, 0, 0, 0, 0, 1, 1], dtype=np.uint32)
        pred = np.array([0, 0, 0, 1, 1, 0, 1], dtype=np.uint32)
        per, _ = seg_miou(pred, gt, [0, 1])
        assert per[0] == 0.5

    def test_absent_class_excluded(self):
        gt = np.array([0, 0], dtype=np.uint32)
        pred = np.array([0, 1], dtype=np.uint32)
        per, mean = seg_miou(pred, gt, [0, 1, 2])
        assert set(per) == {0}
        assert mean == per[0]

    def test_sentinel_gt_ignored(self):
        gt = np.array([0, UNLABELED, 1], dtype=np.uint32)
        pred = np.array([0, 1, 1], dtype=np.uint32)
        per, mean = seg_miou(pred, gt, [0, 1])
        assert mean == 1.0
