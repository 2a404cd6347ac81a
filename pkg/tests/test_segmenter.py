"""Segmenter: forward shapes, masking, augmentation, training, pipeline closure."""

import numpy as np
import pytest
from conftest import make_surface_cloud

from voxcomplete import autodiff as ad
from voxcomplete.autodiff import ParamStore, Tape
from voxcomplete.grid import unique_coords, voxel_centers, voxelize
from voxcomplete.metrics import UNLABELED, majority_vote_labels
from voxcomplete.segmenter import (
    AdaptFrame,
    SegSample,
    adapt_pipeline,
    augment_cloud,
    seg_forward,
    seg_predict,
    seg_train,
    segmenter_params,
)
from voxcomplete.training import TrainConfig


def labeled_cloud(seed=0, n=500):
    pts = make_surface_cloud(seed=seed, n=n)
    labels = (pts[:, 0] > pts[:, 0].mean()).astype(np.uint32)  # split by x
    return pts, labels


def quick_cfg(**kw):
    base = dict(batch_size=2, max_steps=10, seed=0, val_every=0, ckpt_every=0, lambda_adv=0.0)
    base.update(kw)
    return TrainConfig(**base)


class TestForward:
    def test_output_shape(self, tiny_net, rng):
        coords = unique_coords(rng.integers(-6, 6, size=(150, 3)))
        store = segmenter_params(ParamStore(0), tiny_net, 4)
        logits = seg_forward(None, store, coords, tiny_net)
        assert logits.value.shape == (len(coords), 4)

    def test_zero_params_uniform_argmax_zero(self, tiny_net, rng):
        coords = unique_coords(rng.integers(-4, 4, size=(60, 3)))
        store = segmenter_params(ParamStore(0), tiny_net, 3)
        for p in store:
            p.value[:] = 0.0
        labels = seg_predict(store, coords, tiny_net)
        assert (labels == 0).all()

    def test_logits_finite_on_random_scenes(self, tiny_net):
        for seed in range(3):
            rng = np.random.default_rng(seed)
            coords = unique_coords(rng.integers(-10, 10, size=(300, 3)))
            store = segmenter_params(ParamStore(seed), tiny_net, 5)
            logits = seg_forward(None, store, coords, tiny_net)
            assert np.isfinite(logits.value).all()

    def test_argmax_invariant_to_constant_shift(self, tiny_net, rng):
        coords = unique_coords(rng.integers(-5, 5, size=(80, 3)))
        store = segmenter_params(ParamStore(2), tiny_net, 4)
        logits = seg_forward(None, store, coords, tiny_net)
        a = np.argmax(logits.value, axis=1)
        b = np.argmax(logits.value + 3.7, axis=1)
        assert (a == b).all()


class TestAugmentation:
    def test_zero_rotation_identity_possible(self):
        # a seed whose draws are angle≈0 is not guaranteed; test the math
        # directly by monkeypatching the rng draws
        class FixedRng:
            def uniform(self, lo, hi):
                return 0.0

            def integers(self, lo, hi, size=None):
                return np.zeros(size, dtype=int)

        pts = make_surface_cloud(seed=1, n=100)
        out = augment_cloud(pts, FixedRng())
        assert np.allclose(out, pts)

    def test_rotation_preserves_pairwise_distances(self, rng):
        pts = make_surface_cloud(seed=2, n=80)
        out = augment_cloud(pts, rng)
        d0 = np.linalg.norm(pts[None] - pts[:, None], axis=2)
        d1 = np.linalg.norm(out[None] - out[:, None], axis=2)
        assert np.abs(d0 - d1).max() < 1e-9

    def test_z_unchanged(self, rng):
        pts = make_surface_cloud(seed=3, n=60)
        out = augment_cloud(pts, rng)
        assert (out[:, 2] == pts[:, 2]).all()


class TestTraining:
    def test_better_than_chance(self, tiny_net):
        dataset = [SegSample(f"s{i}", *labeled_cloud(seed=i)) for i in range(5)]
        cfg = quick_cfg(max_steps=60)
        store, history = seg_train(dataset, cfg, tiny_net, num_classes=2, voxel_size=0.2, augment=False)
        assert history[-1]["acc"] > 0.5

    def test_sentinel_voxels_zero_gradient(self, tiny_net, rng):
        coords = unique_coords(rng.integers(-4, 4, size=(50, 3)))
        labels = rng.integers(0, 2, size=len(coords)).astype(np.int64)
        labels[0] = UNLABELED
        store = segmenter_params(ParamStore(1), tiny_net, 2)
        tape = Tape()
        logits = seg_forward(tape, store, coords, tiny_net)
        loss = ad.softmax_cross_entropy(tape, logits, labels, ignore_label=UNLABELED)
        tape.backward(loss)
        assert (logits.grad[0] == 0).all()
        assert np.abs(logits.grad[1:]).max() > 0

    def test_deterministic_without_augmentation(self, tiny_net):
        dataset = [SegSample(f"s{i}", *labeled_cloud(seed=i)) for i in range(3)]
        runs = []
        for _ in range(2):
            store, _ = seg_train(dataset, quick_cfg(max_steps=5), tiny_net, 2, 0.2, augment=False)
            runs.append({n: store[n].value.copy() for n in store.names()})
        for n in runs[0]:
            assert (runs[0][n] == runs[1][n]).all()

    def test_deterministic_with_augmentation(self, tiny_net):
        dataset = [SegSample(f"s{i}", *labeled_cloud(seed=i)) for i in range(3)]
        runs = []
        for _ in range(2):
            store, _ = seg_train(dataset, quick_cfg(max_steps=5), tiny_net, 2, 0.2, augment=True)
            runs.append({n: store[n].value.copy() for n in store.names()})
        for n in runs[0]:
            assert (runs[0][n] == runs[1][n]).all()

    def test_all_sentinel_scene_skipped(self, tiny_net, caplog):
        pts, _ = labeled_cloud(seed=9)
        good = SegSample("good", *labeled_cloud(seed=1))
        bad = SegSample("bad", pts, np.full(len(pts), UNLABELED, dtype=np.uint32))
        store, history = seg_train([good, bad], quick_cfg(max_steps=4, batch_size=2), tiny_net, 2, 0.2, augment=False)
        assert len(history) > 0


class TestPipelineClosure:
    def test_identity_completion_returns_own_voxel_labels(self, tiny_net):
        # with matching voxel sets and identity transfer, the pipeline's
        # target labels are exactly the segmenter's voxel predictions
        pts, labels = labeled_cloud(seed=5)
        src = [AdaptFrame("src0", pts, labels)]
        tgt = [AdaptFrame("tgt0", pts, labels)]
        cfg = quick_cfg(max_steps=8)
        report, store, preds = adapt_pipeline(
            src, tgt, "none", cfg, tiny_net, [0, 1], 0.2, augment=False
        )
        origin = pts.min(axis=0)
        grid, p2v = voxelize(pts, 0.2, origin)
        own = seg_predict(store, grid.coords, tiny_net)
        assert (preds[0] == own[p2v]).all()
        assert report["miou"] is not None

    def test_modes_none_b1_b2_run(self, tiny_net):
        rng = np.random.default_rng(0)
        from voxcomplete.lidar import make_ring_pattern, occlusion_filter, place_sensor, resample

        pat = make_ring_pattern(16, 180, 60, 125)
        frames = []
        for i in range(3):
            pts, labels = labeled_cloud(seed=20 + i, n=800)
            pts = pts * 3  # widen the scene
            sensor = pts.mean(axis=0) + np.array([0, 0, 2.0])
            vis, vidx = occlusion_filter(pts, sensor)
            fr, sel = resample(vis, pat, sensor)
            frames.append(AdaptFrame(f"f{i}", fr, labels[vidx][sel], sensor=sensor, beams=16))
        cfg = quick_cfg(max_steps=6)
        for mode in ("none", "b1", "b2"):
            report, _, _ = adapt_pipeline(
                frames[:2], frames[2:], mode, cfg, tiny_net, [0, 1], 0.2, augment=False,
                target_beams=8, b2_delta=0.3,
            )
            assert report["mode"] == mode
            assert report["miou"] is not None
