"""Two-stage completion training.

Stage 1 trains the generation net with per-level BCE (candidates vs the
ground-truth pyramid); stage 2 freezes it, switches it to inference mode
and trains the refinement net on its outputs. Either stage can add local
adversarial terms: one discriminator per supervised level, updated once
before each generator update.

Scenes in a batch are independent graphs on one tape; their losses are
averaged. Everything is deterministic given the config seed.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import adversarial as adv
from . import autodiff as ad
from .autodiff import ParamStore, Tape, Tensor
from .completion import (
    NUM_LEVELS,
    GtPyramid,
    NetConfig,
    build_gt_pyramid,
    generation_forward,
    generation_params,
    refinement_forward,
    refinement_params,
)
from .errors import CompletionOverflow, ConfigError, EmptyInputError, TrainingDiverged
from .grid import SparseGrid, membership_mask, voxelize
from .metrics import voxel_iou

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 2
    lr_gen: float = 1e-3
    lr_disc: float = 1e-4
    decay_factor: float = 0.7
    decay_every: int = 200_000  # desk-scale configs override this (e.g. 2000)
    lambda_adv: float = 0.1
    sharpen_k: float = 10.0
    levels_with_adv: tuple = (0, 1, 2)
    seed: int = 0
    max_steps: int = 1000
    val_every: int = 500
    ckpt_every: int = 500
    balance: str = "level_mean"  # or "voxel_mean"
    beta1: float = 0.9
    beta2: float = 0.99

    def __post_init__(self):
        self.levels_with_adv = tuple(int(l) for l in self.levels_with_adv)
        if self.lr_gen <= 0 or self.lr_disc <= 0:
            raise ConfigError("learning rates must be positive")
        if self.decay_every < 1:
            raise ConfigError("decay_every must be >= 1")
        if self.balance not in ("level_mean", "voxel_mean"):
            raise ConfigError(f"unknown balance {self.balance!r}")
        if any(l < 0 or l >= NUM_LEVELS for l in self.levels_with_adv):
            raise ConfigError("levels_with_adv out of range")

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        with open(path) as f:
            return cls(**json.load(f))


def lr_schedule(step: int, base: float, factor: float, every: int) -> float:
    """base * factor ** floor(step / every)."""
    return base * factor ** (step // every)


def derive_seed(base: int, tag: str) -> int:
    """Stable per-component seed so optional components never shift streams."""
    h = hashlib.blake2b(f"{base}:{tag}".encode(), digest_size=8).digest()
    return int.from_bytes(h, "little")


# ---------------------------------------------------------------------------
# dataset


@dataclass
class PairSample:
    """One (incomplete frame, complete scene) training pair, pre-voxelized."""

    sid: str
    grid: SparseGrid
    gt: GtPyramid
    origin: np.ndarray


def build_pair_sample(sid, frame_points, complete_points, voxel_size, origin) -> PairSample:
    origin = np.asarray(origin, dtype=np.float64).reshape(3)
    grid, _ = voxelize(frame_points, voxel_size, origin)
    gt = build_gt_pyramid(complete_points, voxel_size, origin)
    return PairSample(sid=str(sid), grid=grid, gt=gt, origin=origin)


def batch_order(n: int, batch_size: int, steps: int, rng) -> list:
    """Deterministic batch index lists: reshuffled epochs, fixed-size batches."""
    out, pool = [], []
    while len(out) < steps:
        while len(pool) < batch_size:
            pool.extend(rng.permutation(n).tolist())
        out.append([pool.pop(0) for _ in range(batch_size)])
    return out


# ---------------------------------------------------------------------------
# loss assembly


def _np_sharpen(logits: np.ndarray, k: float) -> np.ndarray:
    out = np.empty_like(logits)
    z = k * logits
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def loss_generation(tape, gen_out, cfg: TrainConfig, discs=None):
    """Per-level BCE over candidates plus weighted adversarial terms.

    Levels are balanced by mean normalization ("level_mean": each level
    contributes its mean BCE) or by voxel count ("voxel_mean": one global
    mean over all supervised voxels).
    """
    bce_terms, sizes, bce_vals = [], [], []
    for l in range(NUM_LEVELS):
        lo = gen_out.level(l)
        if lo.targets is None:
            raise ConfigError("loss_generation needs train-mode output")
        if lo.candidates.shape[0] == 0:
            bce_terms.append(Tensor(0.0))
            sizes.append(0)
            bce_vals.append(0.0)
            continue
        term = ad.bce_loss(tape, lo.probs, lo.targets)
        bce_terms.append(term)
        sizes.append(lo.candidates.shape[0])
        bce_vals.append(float(term.value))
    if cfg.balance == "level_mean":
        total = ad.add_many(tape, bce_terms)
    else:
        n_total = max(sum(sizes), 1)
        total = ad.add_many(
            tape, [ad.scale(tape, t, n / n_total) for t, n in zip(bce_terms, sizes)]
        )
    adv_vals = {}
    if discs:
        adv_terms = []
        for l, store in discs.items():
            lo = gen_out.level(l)
            fake_vals = ad.sharpened_sigmoid(tape, lo.logits, cfg.sharpen_k)
            _, scores = adv.disc_forward(tape, store, lo.candidates, fake_vals, prefix=_disc_prefix(l))
            term = adv.loss_adv(tape, scores)
            adv_terms.append(term)
            adv_vals[l] = float(term.value)
        total = ad.add(tape, total, ad.scale(tape, ad.add_many(tape, adv_terms), cfg.lambda_adv))
    return total, {"bce": bce_vals, "adv": adv_vals}


def loss_refinement(tape, coords, probs: Tensor, logits: Tensor, gt: GtPyramid, cfg: TrainConfig, disc=None):
    """Level-0 BCE on the fixed voxel set plus the optional adversarial term."""
    targets = gt.contains(0, coords).astype(np.float64)
    total = ad.bce_loss(tape, probs, targets)
    parts = {"bce": [float(total.value)], "adv": {}}
    if disc is not None:
        fake_vals = ad.sharpened_sigmoid(tape, logits, cfg.sharpen_k)
        _, scores = adv.disc_forward(tape, disc, coords, fake_vals, prefix=_disc_prefix(0))
        term = adv.loss_adv(tape, scores)
        parts["adv"][0] = float(term.value)
        total = ad.add(tape, total, ad.scale(tape, term, cfg.lambda_adv))
    return total, parts


def _disc_prefix(level: int) -> str:
    return f"disc:l{level}:"


def make_discriminators(cfg: TrainConfig, stage: str):
    """One discriminator store per adversarial level (none when unused)."""
    levels = cfg.levels_with_adv if stage == "gen" else (0,)
    discs = {}
    for l in levels:
        store = ParamStore(derive_seed(cfg.seed, f"{stage}.disc{l}"))
        adv.discriminator_params(store, prefix=_disc_prefix(l))
        discs[l] = store
    return discs


# ---------------------------------------------------------------------------
# checkpoints with embedded discriminators


def save_stage_checkpoint(path, store: ParamStore, discs, global_step: int):
    snap = ParamStore(store.seed)
    snap.rng.bit_generator.state = store.rng.bit_generator.state
    snap.step = store.step
    for p in store:
        q = ad.Param(p.name, p.value.copy())
        q.adam_m, q.adam_v = p.adam_m.copy(), p.adam_v.copy()
        snap._params[p.name] = q
    for l in sorted(discs):
        for p in discs[l]:
            q = ad.Param(p.name, p.value.copy())
            q.adam_m, q.adam_v = p.adam_m.copy(), p.adam_v.copy()
            snap._params[p.name] = q
    ad.save_checkpoint(path, snap, global_step)


def load_stage_checkpoint(path):
    """Split a stage checkpoint into (net store, {level: disc store}, step)."""
    merged, gstep = ad.load_checkpoint(path)
    store = ParamStore(merged.seed)
    store.rng.bit_generator.state = merged.rng.bit_generator.state
    store.step = merged.step
    discs = {}
    for p in merged:
        if p.name.startswith("disc:l"):
            level = int(p.name.split(":")[1][1:])
            if level not in discs:
                discs[level] = ParamStore(merged.seed)
                discs[level].step = merged.step
            discs[level]._params[p.name] = p
        else:
            store._params[p.name] = p
    return store, discs, gstep


# ---------------------------------------------------------------------------
# training steps


def _check_finite(value: float, step: int, sids):
    if not np.isfinite(value):
        raise TrainingDiverged(step, sids)


def _discriminator_update(discs, fake_sets, real_sets, lr_d, cfg: TrainConfig, apply_update=True):
    """One loss_d descent step over all level discriminators.

    fake_sets/real_sets: {level: [(coords, values array)] per scene}.
    Returns the per-level pre-update loss values.
    """
    tape = Tape()
    level_losses = {}
    terms = []
    for l, store in discs.items():
        scene_terms = []
        for (f_coords, f_vals), (r_coords, r_vals) in zip(fake_sets[l], real_sets[l]):
            _, fs = adv.disc_forward(tape, store, f_coords, Tensor(f_vals), prefix=_disc_prefix(l))
            _, rs = adv.disc_forward(tape, store, r_coords, Tensor(r_vals), prefix=_disc_prefix(l))
            scene_terms.append(adv.loss_d(tape, fs, rs))
        lvl = ad.scale(tape, ad.add_many(tape, scene_terms), 1.0 / len(scene_terms))
        level_losses[l] = float(lvl.value)
        terms.append(lvl)
    total = ad.add_many(tape, terms)
    tape.backward(total)
    for store in discs.values():
        if apply_update:
            ad.adam_step(store, lr_d, cfg.beta1, cfg.beta2)
        else:
            store.zero_grad()
    return level_losses


def generation_step(gen_store, discs, batch, cfg: TrainConfig, net_cfg: NetConfig, step: int, apply_gen_update: bool = True):
    """One training step: discriminator update (if any), then generator update.

    With ``apply_gen_update=False`` the generator loss is computed (and the
    discriminators still advance) but parameters stay put, which is what
    log replay needs.
    """
    lr_g = lr_schedule(step, cfg.lr_gen, cfg.decay_factor, cfg.decay_every)
    lr_d = lr_schedule(step, cfg.lr_disc, cfg.decay_factor, cfg.decay_every)
    record = {"step": step, "lr": lr_g}
    sids = [s.sid for s in batch]

    if discs:
        fake_sets = {l: [] for l in discs}
        real_sets = {l: [] for l in discs}
        for s in batch:
            out = generation_forward(None, gen_store, s.grid, net_cfg, gt=s.gt, train=True)
            for l in discs:
                lo = out.level(l)
                fake_sets[l].append((lo.candidates, _np_sharpen(lo.logits.value, cfg.sharpen_k)))
                real_sets[l].append((s.gt.coords(l), np.ones((s.gt.coords(l).shape[0], 1))))
        d_losses = _discriminator_update(discs, fake_sets, real_sets, lr_d, cfg)
        for l, v in d_losses.items():
            _check_finite(v, step, sids)
        record["d_loss"] = d_losses

    tape = Tape()
    scene_losses, bce_acc, adv_acc = [], [], []
    for s in batch:
        out = generation_forward(tape, gen_store, s.grid, net_cfg, gt=s.gt, train=True)
        loss_s, parts = loss_generation(tape, out, cfg, discs)
        scene_losses.append(loss_s)
        bce_acc.append(parts["bce"])
        adv_acc.append(parts["adv"])
    total = ad.scale(tape, ad.add_many(tape, scene_losses), 1.0 / len(batch))
    _check_finite(float(total.value), step, sids)
    record["loss"] = float(total.value)
    record["bce"] = np.mean(bce_acc, axis=0).tolist()
    if discs:
        record["adv"] = {l: float(np.mean([a[l] for a in adv_acc])) for l in discs}
    tape.backward(total)
    if apply_gen_update:
        ad.adam_step(gen_store, lr_g, cfg.beta1, cfg.beta2)
    else:
        gen_store.zero_grad()
    for store in (discs or {}).values():
        store.zero_grad()
    record["batch"] = sids
    return record


def refinement_step(refine_store, gen_inputs, discs, batch_idx, samples, cfg: TrainConfig, net_cfg: NetConfig, step: int, apply_update: bool = True):
    """One refinement step over precomputed frozen-generator outputs."""
    lr_g = lr_schedule(step, cfg.lr_gen, cfg.decay_factor, cfg.decay_every)
    lr_d = lr_schedule(step, cfg.lr_disc, cfg.decay_factor, cfg.decay_every)
    record = {"step": step, "lr": lr_g}
    sids = [samples[i].sid for i in batch_idx]

    if discs:
        fake_sets = {0: []}
        real_sets = {0: []}
        for i in batch_idx:
            coords, probs_in = gen_inputs[i]
            logits, _ = refinement_forward(None, refine_store, coords, probs_in, net_cfg)
            fake_sets[0].append((coords, _np_sharpen(logits.value, cfg.sharpen_k)))
            gt0 = samples[i].gt.coords(0)
            real_sets[0].append((gt0, np.ones((gt0.shape[0], 1))))
        d_losses = _discriminator_update(discs, fake_sets, real_sets, lr_d, cfg)
        for v in d_losses.values():
            _check_finite(v, step, sids)
        record["d_loss"] = d_losses

    tape = Tape()
    scene_losses, bce_acc, adv_acc = [], [], []
    for i in batch_idx:
        coords, probs_in = gen_inputs[i]
        logits, probs = refinement_forward(tape, refine_store, coords, probs_in, net_cfg)
        loss_s, parts = loss_refinement(
            tape, coords, probs, logits, samples[i].gt, cfg, (discs or {}).get(0)
        )
        scene_losses.append(loss_s)
        bce_acc.append(parts["bce"])
        adv_acc.append(parts["adv"])
    total = ad.scale(tape, ad.add_many(tape, scene_losses), 1.0 / len(batch_idx))
    _check_finite(float(total.value), step, sids)
    record["loss"] = float(total.value)
    record["bce"] = np.mean(bce_acc, axis=0).tolist()
    if discs:
        record["adv"] = {0: float(np.mean([a.get(0, 0.0) for a in adv_acc]))}
    tape.backward(total)
    if apply_update:
        ad.adam_step(refine_store, lr_g, cfg.beta1, cfg.beta2)
    else:
        refine_store.zero_grad()
    for store in (discs or {}).values():
        store.zero_grad()
    record["batch"] = sids
    return record


# ---------------------------------------------------------------------------
# stage drivers


@dataclass
class TrainResult:
    store: ParamStore
    discs: dict
    history: list = field(default_factory=list)
    best_iou: float = -1.0
    final_ckpt: str | None = None
    best_ckpt: str | None = None


class _JsonlLog:
    def __init__(self, path):
        self.path = path
        self._fh = open(path, "w") if path else None

    def write(self, record: dict):
        if self._fh:
            self._fh.write(json.dumps(record, sort_keys=True) + "\n")
            self._fh.flush()

    def close(self):
        if self._fh:
            self._fh.close()


def generation_val_iou(gen_store, sample: PairSample, net_cfg: NetConfig) -> float:
    """Inference-mode level-0 IoU against the ground-truth pyramid."""
    try:
        out = generation_forward(None, gen_store, sample.grid, net_cfg, train=False)
    except (CompletionOverflow, EmptyInputError):
        return 0.0
    return voxel_iou(out.final_coords, sample.gt.coords(0))


def refinement_val_iou(refine_store, gen_input, sample: PairSample, net_cfg: NetConfig) -> float:
    coords, probs_in = gen_input
    if coords.shape[0] == 0:
        return 0.0
    _, probs = refinement_forward(None, refine_store, coords, probs_in, net_cfg)
    kept = coords[probs.value[:, 0] >= net_cfg.prune_threshold]
    return voxel_iou(kept, sample.gt.coords(0))


def train_generation(dataset, cfg: TrainConfig, net_cfg: NetConfig | None = None, out_dir=None, val_set=None, log_path=None, use_adv: bool | None = None) -> TrainResult:
    """Stage 1: train the generation net; returns stores and history.

    ``use_adv`` defaults to (lambda_adv != 0); pass True to exercise the
    adversarial machinery even at weight zero.
    """
    if not dataset:
        raise ConfigError("empty training dataset")
    net_cfg = net_cfg or NetConfig()
    if use_adv is None:
        use_adv = cfg.lambda_adv != 0.0 and len(cfg.levels_with_adv) > 0
    gen_store = generation_params(ParamStore(derive_seed(cfg.seed, "gen")), net_cfg)
    discs = make_discriminators(cfg, "gen") if use_adv else {}
    rng = np.random.default_rng(derive_seed(cfg.seed, "gen.data"))
    batches = batch_order(len(dataset), cfg.batch_size, cfg.max_steps, rng)
    result = TrainResult(store=gen_store, discs=discs)
    logf = _JsonlLog(log_path)
    t0 = time.monotonic()
    try:
        for step, idx in enumerate(batches):
            batch = [dataset[i] for i in idx]
            try:
                rec = generation_step(gen_store, discs, batch, cfg, net_cfg, step)
            except TrainingDiverged as e:
                logf.write({"kind": "nan_abort", "step": e.step, "batch": e.batch_ids})
                raise
            rec["kind"] = "train"
            rec["wall"] = time.monotonic() - t0
            result.history.append(rec)
            logf.write(rec)
            done = step + 1
            if out_dir and cfg.ckpt_every and done % cfg.ckpt_every == 0:
                path = f"{out_dir}/gen_step{done:06d}.ckpt"
                save_stage_checkpoint(path, gen_store, discs, done)
                result.final_ckpt = path
            if val_set and cfg.val_every and done % cfg.val_every == 0:
                iou = float(np.mean([generation_val_iou(gen_store, s, net_cfg) for s in val_set]))
                logf.write({"kind": "val", "step": done, "iou": iou})
                if iou > result.best_iou:
                    result.best_iou = iou
                    if out_dir:
                        result.best_ckpt = f"{out_dir}/gen_best.ckpt"
                        save_stage_checkpoint(result.best_ckpt, gen_store, discs, done)
        if out_dir:
            result.final_ckpt = f"{out_dir}/gen_final.ckpt"
            save_stage_checkpoint(result.final_ckpt, gen_store, discs, cfg.max_steps)
    finally:
        logf.close()
    return result


def prepare_refinement_inputs(gen_store, dataset, net_cfg: NetConfig):
    """Frozen-generator inference outputs, one (coords, probs) per sample.

    Samples whose generator output is empty or overflows are kept in place
    with empty coords and skipped by the step function.
    """
    inputs = []
    for s in dataset:
        try:
            out = generation_forward(None, gen_store, s.grid, net_cfg, train=False)
            inputs.append((out.final_coords, out.final_probs))
        except (CompletionOverflow, EmptyInputError):
            log.warning("sample %s skipped for refinement (degenerate generator output)", s.sid)
            inputs.append((np.empty((0, 3), dtype=np.int64), np.empty(0)))
    return inputs


def train_refinement(gen_store, dataset, cfg: TrainConfig, net_cfg: NetConfig | None = None, out_dir=None, val_set=None, log_path=None, use_adv: bool | None = None) -> TrainResult:
    """Stage 2: freeze the generator, train the refinement net on its outputs."""
    if not dataset:
        raise ConfigError("empty training dataset")
    net_cfg = net_cfg or NetConfig()
    if use_adv is None:
        use_adv = cfg.lambda_adv != 0.0
    refine_store = refinement_params(ParamStore(derive_seed(cfg.seed, "refine")), net_cfg)
    discs = make_discriminators(cfg, "refine") if use_adv else {}
    gen_inputs = prepare_refinement_inputs(gen_store, dataset, net_cfg)
    usable = [i for i, (c, _) in enumerate(gen_inputs) if c.shape[0] > 0]
    if not usable:
        raise ConfigError("no usable generator outputs for refinement training")
    rng = np.random.default_rng(derive_seed(cfg.seed, "refine.data"))
    batches = batch_order(len(usable), cfg.batch_size, cfg.max_steps, rng)
    result = TrainResult(store=refine_store, discs=discs)
    logf = _JsonlLog(log_path)
    t0 = time.monotonic()
    val_inputs = prepare_refinement_inputs(gen_store, val_set, net_cfg) if val_set else None
    try:
        for step, ridx in enumerate(batches):
            idx = [usable[i] for i in ridx]
            try:
                rec = refinement_step(refine_store, gen_inputs, discs, idx, dataset, cfg, net_cfg, step)
            except TrainingDiverged as e:
                logf.write({"kind": "nan_abort", "step": e.step, "batch": e.batch_ids})
                raise
            rec["kind"] = "train"
            rec["wall"] = time.monotonic() - t0
            result.history.append(rec)
            logf.write(rec)
            done = step + 1
            if out_dir and cfg.ckpt_every and done % cfg.ckpt_every == 0:
                path = f"{out_dir}/refine_step{done:06d}.ckpt"
                save_stage_checkpoint(path, refine_store, discs, done)
                result.final_ckpt = path
            if val_set and cfg.val_every and done % cfg.val_every == 0:
                iou = float(
                    np.mean(
                        [
                            refinement_val_iou(refine_store, gi, s, net_cfg)
                            for gi, s in zip(val_inputs, val_set)
                        ]
                    )
                )
                logf.write({"kind": "val", "step": done, "iou": iou})
                if iou > result.best_iou:
                    result.best_iou = iou
                    if out_dir:
                        result.best_ckpt = f"{out_dir}/refine_best.ckpt"
                        save_stage_checkpoint(result.best_ckpt, refine_store, discs, done)
        if out_dir:
            result.final_ckpt = f"{out_dir}/refine_final.ckpt"
            save_stage_checkpoint(result.final_ckpt, refine_store, discs, cfg.max_steps)
    finally:
        logf.close()
    return result


def replay_generation_loss(ckpt_path, dataset_by_sid, cfg: TrainConfig, net_cfg: NetConfig, batch_sids, step: int) -> float:
    """Recompute a logged step's generator loss from the previous checkpoint.

    Runs the same step (including the discriminator update) on cloned
    stores without applying the generator update.
    """
    store, discs, _ = load_stage_checkpoint(ckpt_path)
    batch = [dataset_by_sid[sid] for sid in batch_sids]
    rec = generation_step(store, discs, batch, cfg, net_cfg, step, apply_gen_update=False)
    return rec["loss"]
