"""Command-line pipeline: scene synthesis, virtual sampling, training,
completion, and cross-sensor adaptation.

Exit codes: 0 success, 2 usage/config error, 3 data or format error,
4 numeric abort (non-finite loss).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .completion import NetConfig, complete_cloud
from .errors import ConfigError, TrainingDiverged, VoxcompleteError
from .fileio import ensure_labels, load_cloud, save_cloud
from .grid import load_grid, save_grid, voxelize
from .lidar import (
    augment_pattern,
    extract_pattern,
    load_pattern,
    make_ring_pattern,
    occlusion_filter,
    place_sensor,
    resample,
    save_pattern,
)
from .metrics import chamfer, voxel_iou
from .scenes import SceneSpec, gen_scene, palette_classes
from .segmenter import AdaptFrame, adapt_pipeline
from .training import (
    TrainConfig,
    build_pair_sample,
    load_stage_checkpoint,
    train_generation,
    train_refinement,
)

log = logging.getLogger(__name__)

SEED_ENV = "SVCN_SEED"


def _seed_override(seed: int) -> int:
    env = os.environ.get(SEED_ENV)
    return int(env) if env is not None else seed


def _write_json(path, payload):
    with open(path, "w") as f:
        json.dump(payload, f, sort_keys=True, indent=2)
        f.write("\n")


def _load_config(path):
    """Split a pipeline config into (TrainConfig, NetConfig, extras)."""
    with open(path) as f:
        raw = json.load(f)
    train = TrainConfig(**raw.get("train", {}))
    train.seed = _seed_override(train.seed)
    net = NetConfig(**raw.get("net", {}))
    extras = {k: v for k, v in raw.items() if k not in ("train", "net")}
    return train, net, extras


# ---------------------------------------------------------------------------
# scene generation


def _gen_one_scene(args):
    spec_dict, seed, path = args
    spec = SceneSpec(**{**spec_dict, "seed": seed})
    scene = gen_scene(spec)
    save_cloud(path, scene.points, scene.labels)
    return path


def cmd_gen_scenes(args):
    spec = SceneSpec.from_json(args.spec) if args.spec else SceneSpec()
    seed = _seed_override(args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tasks = [
        (spec.to_dict(), seed + i, str(out / f"scene_{i:04d}.pcxl")) for i in range(args.count)
    ]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            for path in pool.map(_gen_one_scene, tasks):
                log.info("wrote %s", path)
    else:
        for t in tasks:
            log.info("wrote %s", _gen_one_scene(t))
    return 0


def cmd_make_pattern(args):
    if args.from_frame:
        points, _ = load_cloud(args.from_frame)
        sensor = np.array([float(v) for v in args.sensor.split(",")]) if args.sensor else np.zeros(3)
        pattern = extract_pattern(points, sensor, source=args.from_frame)
    else:
        pattern = make_ring_pattern(args.rings, args.phi_steps, args.theta_min, args.theta_max)
    save_pattern(args.out, pattern)
    log.info("wrote %s (%d directions)", args.out, len(pattern))
    return 0


# ---------------------------------------------------------------------------
# virtual sampling


def _sample_frame(points, labels, pattern, sensor, augment: bool, rng):
    if augment:
        pattern = augment_pattern(pattern, rng)
    visible, vis_idx = occlusion_filter(points, sensor)
    frame, sel = resample(visible, pattern, sensor)
    frame_labels = labels[vis_idx][sel] if labels is not None else None
    return frame, frame_labels


def cmd_sample(args):
    points, labels = load_cloud(args.scene)
    pattern = load_pattern(args.pattern)
    rng = np.random.default_rng(_seed_override(args.seed))
    if args.sensor:
        sensor = np.array([float(v) for v in args.sensor.split(",")])
    else:
        sensor = place_sensor(points, rng)
    frame, frame_labels = _sample_frame(points, labels, pattern, sensor, args.augment, rng)
    save_cloud(args.out, frame, frame_labels)
    log.info("wrote %s (%d points, sensor %s)", args.out, frame.shape[0], sensor.round(3).tolist())
    return 0


def _pattern_rings(pattern) -> int:
    return int(np.unique(np.round(pattern.theta, 9)).shape[0])


def _make_one_pair(task):
    scene_path, pattern_path, out_frame, seed, augment = task
    points, labels = load_cloud(scene_path)
    pattern = load_pattern(pattern_path)
    rng = np.random.default_rng(seed)
    sensor = place_sensor(points, rng)
    frame, frame_labels = _sample_frame(points, labels, pattern, sensor, augment, rng)
    save_cloud(out_frame, frame, frame_labels)
    origin = points.min(axis=0)
    # scene reference relative to the manifest so pair dirs are relocatable
    # (and byte-identical across runs rooted at different paths)
    rel_scene = os.path.relpath(Path(scene_path).resolve(), Path(out_frame).resolve().parent)
    return {
        "sid": Path(out_frame).stem,
        "frame": Path(out_frame).name,
        "scene": Path(rel_scene).as_posix(),
        "origin": origin.tolist(),
        "sensor": np.asarray(sensor).tolist(),
        "beams": _pattern_rings(pattern),
    }


def cmd_make_pairs(args):
    scenes = sorted(Path(args.scenes).glob("*.pcxl"))
    if not scenes:
        raise ConfigError(f"no .pcxl scenes under {args.scenes}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seed = _seed_override(args.seed)
    tasks = [
        (str(p), args.pattern, str(out / f"pair_{i:04d}.frame.pcxl"), seed + i, args.augment)
        for i, p in enumerate(scenes)
    ]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            entries = list(pool.map(_make_one_pair, tasks))
    else:
        entries = [_make_one_pair(t) for t in tasks]
    manifest = {"voxel_size": args.voxel_size, "pairs": entries}
    _write_json(out / "manifest.json", manifest)
    log.info("wrote %d pairs under %s", len(entries), out)
    return 0


def load_pairs(data_dir):
    """Training pairs from a make-pairs directory; returns (samples, voxel_size, manifest)."""
    data_dir = Path(data_dir)
    try:
        with open(data_dir / "manifest.json") as f:
            manifest = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"{data_dir}: missing manifest.json (run make-pairs first)")
    samples = []
    for e in manifest["pairs"]:
        frame_pts, _ = load_cloud(data_dir / e["frame"])
        scene_pts, _ = load_cloud(data_dir / e["scene"])
        samples.append(
            build_pair_sample(e["sid"], frame_pts, scene_pts, manifest["voxel_size"], e["origin"])
        )
    return samples, manifest["voxel_size"], manifest


# ---------------------------------------------------------------------------
# training commands


def _split_val(samples, extras):
    n_val = int(extras.get("val_count", max(1, len(samples) // 10)))
    n_val = min(n_val, max(len(samples) - 1, 0))
    if n_val == 0:
        return samples, None
    return samples[:-n_val], samples[-n_val:]


def cmd_train_gen(args):
    cfg, net_cfg, extras = _load_config(args.config)
    samples, _, _ = load_pairs(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train, val = _split_val(samples, extras)
    result = train_generation(
        train, cfg, net_cfg, out_dir=str(out), val_set=val, log_path=str(out / "train_gen.log.jsonl")
    )
    log.info("generation training done; final=%s best=%s", result.final_ckpt, result.best_ckpt)
    return 0


def cmd_train_refine(args):
    cfg, net_cfg, extras = _load_config(args.config)
    samples, _, _ = load_pairs(args.data)
    gen_store, _, _ = load_stage_checkpoint(args.gen)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train, val = _split_val(samples, extras)
    result = train_refinement(
        gen_store, train, cfg, net_cfg, out_dir=str(out), val_set=val, log_path=str(out / "train_refine.log.jsonl")
    )
    log.info("refinement training done; final=%s best=%s", result.final_ckpt, result.best_ckpt)
    return 0


def cmd_train_seg(args):
    from .metrics import UNLABELED
    from .segmenter import SegSample, seg_train

    cfg, net_cfg, extras = _load_config(args.config)
    voxel_size = float(extras.get("voxel_size", 0.2))
    classes = palette_classes(extras.get("palette", "five_class"))
    files = sorted(Path(args.data).glob("*.pcxl"))
    if not files:
        raise ConfigError(f"no .pcxl clouds under {args.data}")
    dataset = []
    for p in files:
        pts, labels = load_cloud(p)
        dataset.append(SegSample(sid=p.stem, points=pts, labels=ensure_labels(labels, pts.shape[0])))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    store, _ = seg_train(
        dataset,
        cfg,
        net_cfg,
        num_classes=len(classes),
        voxel_size=voxel_size,
        augment=not extras.get("no_augment", False),
        log_path=str(out / "train_seg.log.jsonl"),
    )
    from .autodiff import save_checkpoint

    path = out / "seg_final.ckpt"
    save_checkpoint(path, store, store.step)
    log.info("segmentation training done; %s", path)
    return 0


# ---------------------------------------------------------------------------
# inference and evaluation


def cmd_complete(args):
    points, _ = load_cloud(args.infile)
    gen_store, _, _ = load_stage_checkpoint(args.gen)
    refine_store, _, _ = load_stage_checkpoint(args.refine)
    net_cfg = NetConfig.from_json(args.net) if args.net else NetConfig()
    origin = points.min(axis=0)
    grid = complete_cloud(points, gen_store, refine_store, net_cfg, args.voxel_size, origin)
    save_grid(args.out, grid)
    log.info("wrote %s (%d voxels)", args.out, len(grid))
    return 0


def cmd_eval_completion(args):
    pred = load_grid(args.pred)
    scene_pts, _ = load_cloud(args.gt)
    gt_grid, _ = voxelize(scene_pts, pred.voxel_size, pred.origin)
    iou = voxel_iou(pred.coords, gt_grid.coords)
    cd = (
        chamfer(pred.coords, gt_grid.coords, pred.voxel_size, pred.origin)
        if len(pred) and len(gt_grid)
        else None
    )
    report = {"frame_id": Path(args.pred).stem, "iou": iou, "cd": cd}
    _write_json(args.report, report)
    log.info("iou=%.4f cd=%s", iou, f"{cd:.4f}" if cd is not None else "n/a")
    return 0


def _load_adapt_frames(data_dir):
    data_dir = Path(data_dir)
    with open(data_dir / "manifest.json") as f:
        manifest = json.load(f)
    frames = []
    for e in manifest["pairs"]:
        pts, labels = load_cloud(data_dir / e["frame"])
        frames.append(
            AdaptFrame(
                sid=e["sid"],
                points=pts,
                labels=labels,
                sensor=np.asarray(e["sensor"], dtype=np.float64),
                beams=int(e.get("beams", 64)),
            )
        )
    return frames, manifest


def cmd_adapt(args):
    cfg, net_cfg, extras = _load_config(args.config)
    classes = palette_classes(extras.get("palette", "five_class"))
    voxel_size = float(extras.get("voxel_size", 0.2))
    source_frames, _ = _load_adapt_frames(args.source_dir)
    target_frames, _ = _load_adapt_frames(args.target_dir)
    completers = None
    if args.mode == "svcn":
        ck = Path(args.ckpts)
        completers = {}
        for role in ("source", "target"):
            gen_store, _, _ = load_stage_checkpoint(ck / f"{role}_gen.ckpt")
            refine_store, _, _ = load_stage_checkpoint(ck / f"{role}_refine.ckpt")
            completers[role] = (gen_store, refine_store, net_cfg)
    report, _, _ = adapt_pipeline(
        source_frames,
        target_frames,
        args.mode,
        cfg,
        net_cfg,
        classes,
        voxel_size,
        completers=completers,
        b2_delta=float(extras.get("b2_delta", 0.25)),
        range_width=int(extras.get("range_width", 512)),
        augment=not extras.get("no_augment", False),
    )
    _write_json(args.report, report)
    log.info("mode=%s miou=%s", args.mode, report["miou"])
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser():
    p = argparse.ArgumentParser(prog="voxcomplete", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-scenes", help="generate labeled synthetic scenes")
    g.add_argument("--spec", help="SceneSpec JSON (defaults used when omitted)")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, default=10)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--jobs", type=int, default=1)
    g.set_defaults(func=cmd_gen_scenes)

    g = sub.add_parser("make-pattern", help="build or extract a sampling pattern")
    g.add_argument("--rings", type=int, default=64)
    g.add_argument("--phi-steps", type=int, default=720)
    g.add_argument("--theta-min", type=float, default=55.0, help="degrees")
    g.add_argument("--theta-max", type=float, default=135.0, help="degrees")
    g.add_argument("--from-frame", help="extract from a PCXL frame instead")
    g.add_argument("--sensor", help="x,y,z of the reference frame's sensor")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_make_pattern)

    g = sub.add_parser("sample", help="resample a scene through a sampling pattern")
    g.add_argument("--scene", required=True)
    g.add_argument("--pattern", required=True)
    g.add_argument("--sensor", help="x,y,z; placed automatically when omitted")
    g.add_argument("--out", required=True)
    g.add_argument("--augment", action="store_true", help="random elevation-bin dropping")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_sample)

    g = sub.add_parser("make-pairs", help="build (incomplete, complete) training pairs")
    g.add_argument("--scenes", required=True)
    g.add_argument("--pattern", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--voxel-size", type=float, default=0.2)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--augment", action="store_true")
    g.add_argument("--jobs", type=int, default=1)
    g.set_defaults(func=cmd_make_pairs)

    g = sub.add_parser("train-gen", help="train the structure generation net")
    g.add_argument("--config", required=True)
    g.add_argument("--data", required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_train_gen)

    g = sub.add_parser("train-refine", help="train the structure refinement net")
    g.add_argument("--config", required=True)
    g.add_argument("--data", required=True)
    g.add_argument("--gen", required=True, help="generation checkpoint")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_train_refine)

    g = sub.add_parser("train-seg", help="train the voxel segmenter")
    g.add_argument("--config", required=True)
    g.add_argument("--data", required=True, help="directory of labeled PCXL clouds")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_train_seg)

    g = sub.add_parser("complete", help="densify one frame with trained nets")
    g.add_argument("--in", dest="infile", required=True)
    g.add_argument("--gen", required=True)
    g.add_argument("--refine", required=True)
    g.add_argument("--net", help="NetConfig JSON")
    g.add_argument("--voxel-size", type=float, default=0.2)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_complete)

    g = sub.add_parser("eval-completion", help="score a completed grid against a scene")
    g.add_argument("--pred", required=True)
    g.add_argument("--gt", required=True)
    g.add_argument("--report", required=True)
    g.set_defaults(func=cmd_eval_completion)

    g = sub.add_parser("adapt", help="end-to-end cross-sensor label transfer")
    g.add_argument("--source-dir", required=True)
    g.add_argument("--target-dir", required=True)
    g.add_argument("--config", required=True)
    g.add_argument("--ckpts", help="directory with {source,target}_{gen,refine}.ckpt")
    g.add_argument("--mode", choices=["none", "b1", "b2", "svcn"], default="svcn")
    g.add_argument("--report", required=True)
    g.set_defaults(func=cmd_adapt)

    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except TrainingDiverged as e:
        log.error("numeric abort: %s", e)
        return 4
    except ConfigError as e:
        log.error("config error: %s", e)
        return 2
    except (VoxcompleteError, OSError, json.JSONDecodeError) as e:
        log.error("%s", e)
        return 3


if __name__ == "__main__":
    sys.exit(main())
