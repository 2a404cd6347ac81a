"""Sparse U-Net voxel segmentation and the cross-sensor adaptation pipeline.

The segmenter shares the completion trunk (same filter widths, sparse
unpooling decoder) with a final per-voxel classification layer. The
pipeline trains it in the canonical domain on propagated source labels and
projects its predictions back onto target points; 'aligners' decide what
the canonical domain is (raw voxels, beam-resampled, interpolated, or
learned completion).
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tape, Tensor
from .completion import NUM_LEVELS, NetConfig, _conv_block, _create_decoder, _create_encoder, complete_cloud, encode
from .errors import ConfigError, EmptyInputError, TrainingDiverged
from .grid import build_kernel_map, parent_rows, voxel_centers, voxelize
from .lidar import linear_interp, range_project
from .metrics import UNLABELED, majority_vote_labels, prop_labels, proj_labels, seg_miou
from .training import TrainConfig, batch_order, derive_seed, lr_schedule

log = logging.getLogger(__name__)


def segmenter_params(store: ParamStore, cfg: NetConfig, num_classes: int) -> ParamStore:
    _create_encoder(store, 1, cfg)
    _create_decoder(store, cfg)
    store.create("classify.w", (cfg.dec_pair(0)[1], num_classes), fan_in=cfg.dec_pair(0)[1])
    store.create("classify.b", (num_classes,), zero=True)
    return store


def seg_forward(tape, store, coords, cfg: NetConfig) -> Tensor:
    """Per-voxel class logits over a canonical voxel set (constant-1 input)."""
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    if coords.shape[0] == 0:
        raise EmptyInputError("seg_forward: empty voxel set")
    feats = Tensor(np.ones((coords.shape[0], 1)))
    enc = encode(tape, store, coords, feats, cfg)
    x = enc[6][1]
    for l in range(NUM_LEVELS - 2, -1, -1):
        target_cs, enc_feat = enc[l]
        rows = parent_rows(enc[l + 1][0], target_cs.coords)
        x = ad.sparse_unpool(tape, x, rows)
        x = ad.concat_cols(tape, x, enc_feat)
        km = build_kernel_map(target_cs, target_cs.coords, 3, 1)
        x = _conv_block(tape, store, f"dec{l}.conv1", x, km, cfg)
        x = _conv_block(tape, store, f"dec{l}.conv2", x, km, cfg)
    return ad.linear(tape, x, store["classify.w"], store["classify.b"])


def seg_predict(store, coords, cfg: NetConfig) -> np.ndarray:
    """Argmax voxel labels (ties resolve to the lowest class id)."""
    logits = seg_forward(None, store, coords, cfg)
    return np.argmax(logits.value, axis=1).astype(np.uint32)


def augment_cloud(points, rng):
    """Random z-rotation plus independent x/y flips about the xy centroid."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3).copy()
    center = pts[:, :2].mean(axis=0)
    ang = rng.uniform(0.0, 2 * np.pi)
    flips = rng.integers(0, 2, size=2)
    c, s = np.cos(ang), np.sin(ang)
    xy = pts[:, :2] - center
    xy = xy @ np.array([[c, -s], [s, c]]).T
    if flips[0]:
        xy[:, 0] = -xy[:, 0]
    if flips[1]:
        xy[:, 1] = -xy[:, 1]
    pts[:, :2] = xy + center
    return pts


@dataclass
class SegSample:
    """Canonical-domain labeled points (typically completed voxel centers)."""

    sid: str
    points: np.ndarray
    labels: np.ndarray  # per point; UNLABELED rows carry no supervision


def _voxelized_labels(points, labels, voxel_size):
    origin = points.min(axis=0)
    grid, p2v = voxelize(points, voxel_size, origin)
    vox_labels = majority_vote_labels(labels, grid, p2v)
    return grid, vox_labels


def seg_train(dataset, cfg: TrainConfig, net_cfg: NetConfig, num_classes: int, voxel_size: float, augment: bool = True, log_path=None):
    """Train the segmenter with masked cross-entropy over labeled voxels.

    Augmentation (when on) re-voxelizes each scene after a random rotation
    and flips, so the voxel sets themselves vary across epochs.
    """
    if not dataset:
        raise ConfigError("empty segmentation dataset")
    store = segmenter_params(ParamStore(derive_seed(cfg.seed, "seg")), net_cfg, num_classes)
    data_rng = np.random.default_rng(derive_seed(cfg.seed, "seg.data"))
    aug_rng = np.random.default_rng(derive_seed(cfg.seed, "seg.aug"))
    batches = batch_order(len(dataset), cfg.batch_size, cfg.max_steps, data_rng)
    history = []
    fh = open(log_path, "w") if log_path else None
    t0 = time.monotonic()
    try:
        for step, idx in enumerate(batches):
            tape = Tape()
            terms = []
            correct = total = 0
            sids = [dataset[i].sid for i in idx]
            for i in idx:
                s = dataset[i]
                pts = augment_cloud(s.points, aug_rng) if augment else s.points
                grid, vox_labels = _voxelized_labels(pts, s.labels, voxel_size)
                if (vox_labels == UNLABELED).all():
                    log.warning("step %d: batch scene %s has no labeled voxels, skipped", step, s.sid)
                    continue
                logits = seg_forward(tape, store, grid.coords, net_cfg)
                terms.append(ad.softmax_cross_entropy(tape, logits, vox_labels.astype(np.int64), ignore_label=UNLABELED))
                labeled = vox_labels != UNLABELED
                correct += int((np.argmax(logits.value[labeled], axis=1) == vox_labels[labeled]).sum())
                total += int(labeled.sum())
            if not terms:
                continue
            loss = ad.scale(tape, ad.add_many(tape, terms), 1.0 / len(terms))
            if not np.isfinite(float(loss.value)):
                raise TrainingDiverged(step, sids)
            tape.backward(loss)
            ad.adam_step(store, lr_schedule(step, cfg.lr_gen, cfg.decay_factor, cfg.decay_every), cfg.beta1, cfg.beta2)
            rec = {
                "kind": "train",
                "step": step,
                "loss": float(loss.value),
                "acc": correct / max(total, 1),
                "batch": sids,
                "wall": time.monotonic() - t0,
            }
            history.append(rec)
            if fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
                fh.flush()
    finally:
        if fh:
            fh.close()
    return store, history


# ---------------------------------------------------------------------------
# domain aligners and the end-to-end pipeline


@dataclass
class AdaptFrame:
    """One LiDAR-style frame: points, optional per-point labels, sensor pose."""

    sid: str
    points: np.ndarray
    labels: np.ndarray | None = None
    sensor: np.ndarray = field(default_factory=lambda: np.zeros(3))
    beams: int = 64


def _align_frame(frame: AdaptFrame, mode: str, role: str, opts) -> np.ndarray:
    """Point cloud to voxelize as this frame's canonical-domain footprint."""
    if mode == "none":
        return frame.points
    if mode == "b1":
        if role == "source" and frame.beams != opts["target_beams"]:
            direction = "down" if frame.beams > opts["target_beams"] else "up"
            img = range_project(frame.points, frame.beams, opts["width"], frame.sensor)
            from .lidar import beam_resample

            return beam_resample(img, direction)
        return frame.points
    if mode == "b2":
        img = range_project(frame.points, frame.beams, opts["width"], frame.sensor)
        return linear_interp(img, opts["delta"])
    if mode == "svcn":
        gen_store, refine_store, net_cfg = opts[f"{role}_completer"]
        origin = frame.points.min(axis=0)
        completed = complete_cloud(frame.points, gen_store, refine_store, net_cfg, opts["voxel_size"], origin)
        if len(completed) == 0:
            return frame.points
        return voxel_centers(completed)
    raise ConfigError(f"unknown aligner mode {mode!r}")


def _canonicalize_source(frame: AdaptFrame, mode: str, voxel_size: float, opts) -> SegSample:
    """Aligned canonical points + labels propagated from the raw frame."""
    origin = frame.points.min(axis=0)
    raw_grid, p2v = voxelize(frame.points, voxel_size, origin)
    raw_labels = majority_vote_labels(frame.labels, raw_grid, p2v)
    aligned = _align_frame(frame, mode, "source", opts)
    canon_grid, _ = voxelize(aligned, voxel_size, origin)
    labels = prop_labels(raw_grid.coords, raw_labels, canon_grid.coords, voxel_size, origin)
    return SegSample(sid=frame.sid, points=voxel_centers(canon_grid), labels=labels)


def adapt_pipeline(source_frames, target_frames, mode: str, cfg: TrainConfig, net_cfg: NetConfig, classes, voxel_size: float, completers=None, b2_delta: float = 0.25, range_width: int = 512, target_beams: int | None = None, augment: bool = True, log_path=None):
    """Train on aligned+labeled source frames, label aligned target frames,
    project back to points and score against held-out target labels.

    Returns (report dict, seg store, per-frame predicted labels).
    """
    opts = {
        "voxel_size": voxel_size,
        "delta": b2_delta,
        "width": range_width,
        "target_beams": target_beams or (target_frames[0].beams if target_frames else 32),
    }
    if mode == "svcn":
        if not completers:
            raise ConfigError("svcn mode needs source/target completers")
        opts["source_completer"] = completers["source"]
        opts["target_completer"] = completers["target"]

    train_samples = [_canonicalize_source(f, mode, voxel_size, opts) for f in source_frames]
    train_samples = [s for s in train_samples if (s.labels != UNLABELED).any()]
    if not train_samples:
        raise ConfigError("no labeled source voxels after propagation")
    store, history = seg_train(train_samples, cfg, net_cfg, len(classes), voxel_size, augment=augment, log_path=log_path)

    per_frame = []
    predictions = []
    for frame in target_frames:
        origin = frame.points.min(axis=0)
        aligned = _align_frame(frame, mode, "target", opts)
        canon_grid, _ = voxelize(aligned, voxel_size, origin)
        vox_pred = seg_predict(store, canon_grid.coords, net_cfg)
        point_pred = proj_labels(canon_grid.coords, vox_pred, frame.points, voxel_size, origin)
        predictions.append(point_pred)
        if frame.labels is not None:
            per_class, miou = seg_miou(point_pred, frame.labels, classes)
            per_frame.append(
                {
                    "frame_id": frame.sid,
                    "per_class_iou": {str(k): v for k, v in per_class.items()},
                    "miou": miou,
                }
            )
    report = {
        "mode": mode,
        "frames": per_frame,
        "miou": float(np.mean([f["miou"] for f in per_frame])) if per_frame else None,
    }
    return report, store, predictions
