"""Two-stage sparse voxel completion.

The generation net is an encoder-decoder whose decoder grows voxels by
dense 2x upsampling and trims them with per-level existence heads; voxels
that coincide with encoder-active sites are exempt from trimming so the
output always covers the input. The refinement net re-scores the generated
voxel set with a fixed-topology U-Net (sparse unpooling onto its own
encoder levels) without adding voxels.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import CompletionOverflow, ConfigError, EmptyInputError
from .grid import (
    CoordIndex,
    SparseGrid,
    build_kernel_map,
    coarsen_coords,
    dense_upsample_coords,
    membership_mask,
    parent_rows,
    set_diff,
    voxelize,
)

log = logging.getLogger(__name__)

NUM_LEVELS = 7

# (conv1_out, conv2_out) per encoder level 0..6 and per decoder level 5..0
ENCODER_FILTERS = ((24, 24), (24, 32), (32, 48), (48, 64), (64, 80), (80, 96), (96, 112))
DECODER_FILTERS = ((112, 96), (80, 80), (64, 64), (48, 48), (32, 32), (16, 16))

# negative head bias keeps early inference-mode pruning tight; training
# raises it where voxels should survive
HEAD_BIAS_INIT = -2.0


@dataclass
class NetConfig:
    """Architecture/config knobs shared by both sub-nets and the segmenter."""

    encoder_filters: tuple = ENCODER_FILTERS
    decoder_filters: tuple = DECODER_FILTERS
    norm: str = "none"  # "none" | "batch"
    prune_threshold: float = 0.5
    sharpen_k: float = 10.0
    max_voxels_per_level: int = 4_000_000

    def __post_init__(self):
        self.encoder_filters = tuple(tuple(p) for p in self.encoder_filters)
        self.decoder_filters = tuple(tuple(p) for p in self.decoder_filters)
        if len(self.encoder_filters) != NUM_LEVELS:
            raise ConfigError(f"encoder needs {NUM_LEVELS} filter pairs")
        if len(self.decoder_filters) != NUM_LEVELS - 1:
            raise ConfigError(f"decoder needs {NUM_LEVELS - 1} filter pairs")
        if self.norm not in ("none", "batch"):
            raise ConfigError(f"norm must be 'none' or 'batch', got {self.norm!r}")
        if self.sharpen_k < 1:
            raise ConfigError("sharpen_k must be >= 1")

    def dec_pair(self, level: int):
        """Decoder filter pair for resolution level 0..5 (list is stored 5..0)."""
        return self.decoder_filters[NUM_LEVELS - 2 - level]

    @classmethod
    def from_json(cls, path) -> "NetConfig":
        with open(path) as f:
            raw = json.load(f)
        return cls(**raw)

    def to_dict(self) -> dict:
        return {
            "encoder_filters": [list(p) for p in self.encoder_filters],
            "decoder_filters": [list(p) for p in self.decoder_filters],
            "norm": self.norm,
            "prune_threshold": self.prune_threshold,
            "sharpen_k": self.sharpen_k,
            "max_voxels_per_level": self.max_voxels_per_level,
        }


# ---------------------------------------------------------------------------
# ground-truth pyramid


@dataclass
class GtPyramid:
    """Occupied ground-truth coordinate sets for levels 0..6."""

    levels: list = field(default_factory=list)

    def coords(self, level: int) -> np.ndarray:
        return self.levels[level]

    def contains(self, level: int, coords) -> np.ndarray:
        return membership_mask(coords, self.levels[level])

    def sizes(self):
        return [c.shape[0] for c in self.levels]


def build_gt_pyramid(points, base_size: float, origin) -> GtPyramid:
    """Voxelize the complete cloud at the base size and coarsen upward.

    Coarsening level l-1 equals voxelizing at 2**l * base_size directly
    (nested floor division), so either construction is valid.
    """
    if base_size <= 0:
        raise ValueError("base_size must be positive")
    grid, _ = voxelize(points, base_size, origin)
    levels = [grid.coords]
    for _ in range(1, NUM_LEVELS):
        levels.append(coarsen_coords(levels[-1]))
    return GtPyramid(levels=levels)


# ---------------------------------------------------------------------------
# parameter construction


def _create_conv(store: ad.ParamStore, prefix: str, cin: int, cout: int, cfg: NetConfig):
    store.create(f"{prefix}.w", (27, cin, cout), fan_in=27 * cin)
    store.create(f"{prefix}.b", (cout,), zero=True)
    if cfg.norm == "batch":
        g = store.create(f"{prefix}.gamma", (cout,), zero=True)
        g.value[:] = 1.0
        store.create(f"{prefix}.beta", (cout,), zero=True)


def _create_encoder(store, in_channels: int, cfg: NetConfig):
    cin = in_channels
    for l, (a, b) in enumerate(cfg.encoder_filters):
        _create_conv(store, f"enc{l}.conv1", cin, a, cfg)
        _create_conv(store, f"enc{l}.conv2", a, b, cfg)
        cin = b


def _decoder_in_channels(cfg: NetConfig, level: int) -> int:
    above = cfg.encoder_filters[6][1] if level == 5 else cfg.dec_pair(level + 1)[1]
    return above + cfg.encoder_filters[level][1]


def _create_decoder(store, cfg: NetConfig):
    for l in range(NUM_LEVELS - 2, -1, -1):
        a, b = cfg.dec_pair(l)
        _create_conv(store, f"dec{l}.conv1", _decoder_in_channels(cfg, l), a, cfg)
        _create_conv(store, f"dec{l}.conv2", a, b, cfg)


def _create_head(store, name: str, cin: int):
    store.create(f"{name}.w", (cin, 1), fan_in=cin)
    hb = store.create(f"{name}.b", (1,), zero=True)
    hb.value[:] = HEAD_BIAS_INIT


def generation_params(store: ad.ParamStore, cfg: NetConfig, in_channels: int = 1) -> ad.ParamStore:
    """Create all generation-net parameters (encoder, decoder, per-level heads)."""
    _create_encoder(store, in_channels, cfg)
    _create_decoder(store, cfg)
    _create_head(store, "head6", cfg.encoder_filters[6][1])
    for l in range(NUM_LEVELS - 2, -1, -1):
        _create_head(store, f"head{l}", cfg.dec_pair(l)[1])
    return store


def refinement_params(store: ad.ParamStore, cfg: NetConfig) -> ad.ParamStore:
    """Refinement net: same trunk, one head at level 0, probability input."""
    _create_encoder(store, 1, cfg)
    _create_decoder(store, cfg)
    _create_head(store, "head0", cfg.dec_pair(0)[1])
    return store


# ---------------------------------------------------------------------------
# forward passes


def _conv_block(tape, store, prefix, x, kmap, cfg: NetConfig):
    x = ad.sparse_conv(tape, x, kmap, store[f"{prefix}.w"], store[f"{prefix}.b"])
    if cfg.norm == "batch":
        x = ad.batch_norm(tape, x, store[f"{prefix}.gamma"], store[f"{prefix}.beta"])
    return ad.relu(tape, x)


def encode(tape, store, coords, features: Tensor, cfg: NetConfig):
    """Run the 7-level encoder; returns [(CoordIndex, Tensor)] per level."""
    cs = CoordIndex(coords)
    x = features
    levels = []
    for l in range(NUM_LEVELS):
        km = build_kernel_map(cs, cs.coords, 3, 1)
        x = _conv_block(tape, store, f"enc{l}.conv1", x, km, cfg)
        x = _conv_block(tape, store, f"enc{l}.conv2", x, km, cfg)
        levels.append((cs, x))
        if l < NUM_LEVELS - 1:
            plan = ad.build_pool_plan(cs.coords)
            x = ad.max_pool(tape, x, plan)
            cs = CoordIndex(plan.out_coords)
    return levels


@dataclass
class LevelOutput:
    """Decoder state at one resolution level of the generation net."""

    candidates: np.ndarray  # coords scored by the existence head
    logits: Tensor  # head outputs, shape (n, 1)
    probs: Tensor  # sigmoid(logits)
    enc_mask: np.ndarray  # candidate coincides with an encoder-active voxel
    keep_mask: np.ndarray  # survived pruning
    targets: np.ndarray | None  # 1.0 where candidate is ground-truth (train mode)

    @property
    def retained(self) -> np.ndarray:
        return self.candidates[self.keep_mask]


@dataclass
class GenerationOutput:
    levels: list  # LevelOutput per level, index 0..6
    final_coords: np.ndarray
    final_probs: np.ndarray  # detached values aligned with final_coords

    def level(self, l: int) -> LevelOutput:
        return self.levels[l]


def generation_forward(tape, store, grid: SparseGrid, cfg: NetConfig, gt: GtPyramid | None = None, train: bool = False) -> GenerationOutput:
    """Encoder + growing decoder.

    Train mode prunes to ground truth plus the encoder intersection (ground
    truth voxels missing from the bottleneck footprint are injected there
    with zero features, which keeps every deeper ground-truth voxel inside
    the candidate set). Inference mode keeps candidates scoring at or above
    the threshold plus the encoder intersection.
    """
    if len(grid) == 0:
        raise EmptyInputError("generation_forward: empty input grid")
    if train and gt is None:
        raise ConfigError("train mode needs a ground-truth pyramid")
    enc = encode(tape, store, grid.coords, Tensor(grid.features), cfg)

    outputs: list = [None] * NUM_LEVELS

    # bottleneck level: candidates are the encoder set (plus injected GT in train mode)
    cs6, f6 = enc[6]
    if train:
        inject = set_diff(gt.coords(6), cs6.coords)
        candidates = np.concatenate([cs6.coords, inject], axis=0)
        feats = ad.pad_rows(tape, f6, inject.shape[0])
    else:
        candidates = cs6.coords
        feats = f6
    enc_mask = np.zeros(candidates.shape[0], dtype=bool)
    enc_mask[: len(cs6)] = True

    prev_coords = prev_feats = None
    for l in range(NUM_LEVELS - 1, -1, -1):
        if l < NUM_LEVELS - 1:
            if prev_coords.shape[0] == 0:
                log.warning("generation decoder emptied out at level %d", l + 1)
                for m in range(l, -1, -1):
                    outputs[m] = _empty_level()
                break
            candidates = dense_upsample_coords(prev_coords)
            if candidates.shape[0] > cfg.max_voxels_per_level:
                raise CompletionOverflow(
                    f"level {l}: {candidates.shape[0]} candidates exceed cap "
                    f"{cfg.max_voxels_per_level}"
                )
            up = ad.dense_upsample_features(tape, prev_feats)
            enc_cs, enc_feat = enc[l]
            skip_rows = enc_cs.rows_of(candidates)
            enc_mask = skip_rows >= 0
            skip = ad.gather_rows_or_zero(tape, enc_feat, skip_rows, candidates.shape[0])
            x = ad.concat_cols(tape, up, skip)
            ci = CoordIndex(candidates)
            km = build_kernel_map(ci, candidates, 3, 1)
            x = _conv_block(tape, store, f"dec{l}.conv1", x, km, cfg)
            x = _conv_block(tape, store, f"dec{l}.conv2", x, km, cfg)
        else:
            x = feats

        logits = ad.linear(tape, x, store[f"head{l}.w"], store[f"head{l}.b"])
        probs = ad.sigmoid(tape, logits)
        targets = None
        if train:
            targets = gt.contains(l, candidates).astype(np.float64)
            keep = (targets > 0) | enc_mask
        else:
            keep = (probs.value[:, 0] >= cfg.prune_threshold) | enc_mask
        outputs[l] = LevelOutput(
            candidates=candidates,
            logits=logits,
            probs=probs,
            enc_mask=enc_mask,
            keep_mask=keep,
            targets=targets,
        )
        if l > 0:
            rows = np.flatnonzero(keep)
            prev_coords = candidates[rows]
            prev_feats = x if rows.shape[0] == candidates.shape[0] else ad.gather_rows(tape, x, rows)

    lvl0 = outputs[0]
    return GenerationOutput(
        levels=outputs,
        final_coords=lvl0.retained,
        final_probs=lvl0.probs.value[lvl0.keep_mask, 0].copy(),
    )


def _empty_level() -> LevelOutput:
    e = np.empty((0, 3), dtype=np.int64)
    z = Tensor(np.zeros((0, 1)))
    return LevelOutput(
        candidates=e,
        logits=z,
        probs=Tensor(np.zeros((0, 1))),
        enc_mask=np.zeros(0, dtype=bool),
        keep_mask=np.zeros(0, dtype=bool),
        targets=None,
    )


def refinement_forward(tape, store, coords, probs_in, cfg: NetConfig):
    """Re-score a fixed voxel set; input feature is the generation probability.

    Returns (logits Tensor, probs Tensor), one row per input voxel, in
    input order.
    """
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    if coords.shape[0] == 0:
        raise EmptyInputError("refinement_forward: empty voxel set")
    feats = Tensor(np.asarray(probs_in, dtype=np.float64).reshape(-1, 1))
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
    logits = ad.linear(tape, x, store["head0.w"], store["head0.b"])
    return logits, ad.sigmoid(tape, logits)


def complete_cloud(points, gen_store, refine_store, cfg: NetConfig, voxel_size: float, origin=(0.0, 0.0, 0.0)) -> SparseGrid:
    """Full completion: voxelize, generate, refine, threshold at 0.5.

    The returned level-0 grid carries the refined existence probability as
    its single feature channel.
    """
    grid, _ = voxelize(points, voxel_size, origin)
    gen_out = generation_forward(None, gen_store, grid, cfg, train=False)
    if gen_out.final_coords.shape[0] == 0:
        return SparseGrid(0, voxel_size, grid.origin, np.empty((0, 3), dtype=np.int64), np.zeros((0, 1)))
    _, probs = refinement_forward(None, refine_store, gen_out.final_coords, gen_out.final_probs, cfg)
    keep = probs.value[:, 0] >= cfg.prune_threshold
    return SparseGrid(
        level=0,
        voxel_size=voxel_size,
        origin=grid.origin,
        coords=gen_out.final_coords[keep],
        features=probs.value[keep],
    )
