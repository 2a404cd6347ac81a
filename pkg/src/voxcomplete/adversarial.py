"""Local fully-convolutional discriminators over voxel existence values.

A discriminator sees a voxel set whose per-site values serve as both input
feature and convolution confidence at the first layer, so a set of voxels
with existence exactly 1 is indistinguishable from a real occupancy set
and perfectly confident fakes receive no adversarial gradient. Receptive
fields stay local (4 stride-2 convolutions), scoring surface patches
rather than whole scenes.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError
from .grid import CoordIndex, build_kernel_map, coarsen_coords

DISC_CHANNELS = (32, 64, 64, 128)


def discriminator_params(store: ad.ParamStore, prefix: str = "disc:") -> ad.ParamStore:
    """Create the 4 stride-2 conv layers plus the per-site scoring layer."""
    cin = 1
    for i, cout in enumerate(DISC_CHANNELS, start=1):
        store.create(f"{prefix}conv{i}.w", (27, cin, cout), fan_in=27 * cin)
        store.create(f"{prefix}conv{i}.b", (cout,), zero=True)
        cin = cout
    store.create(f"{prefix}final.w", (cin, 1), fan_in=cin)
    store.create(f"{prefix}final.b", (1,), zero=True)
    return store


def disc_forward(tape, store, coords, values: Tensor, prefix: str = "disc:"):
    """Per-site realness scores for a voxel set with existence values.

    Sites whose value is exactly 0.0 are dropped up front: with confidence
    scaling they contribute nothing anywhere, and removing them keeps the
    site chain of a perfectly binary fake identical to the real set's.
    Returns (site_coords, scores) where scores has one sigmoid output per
    surviving site of the 4x-coarsened chain.
    """
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    vals = values.value.reshape(-1)
    if vals.shape[0] != coords.shape[0]:
        raise ConfigError(f"{vals.shape[0]} values for {coords.shape[0]} voxels")
    live = np.flatnonzero(vals != 0.0)
    if live.shape[0] == 0:
        return np.empty((0, 3), dtype=np.int64), Tensor(np.zeros((0, 1)))
    if live.shape[0] != coords.shape[0]:
        coords = coords[live]
        x = ad.gather_rows(tape, _as_column(tape, values), live)
    else:
        x = _as_column(tape, values)

    conf = x
    for i in range(1, len(DISC_CHANNELS) + 1):
        out_coords = coarsen_coords(coords)
        km = build_kernel_map(CoordIndex(coords), out_coords, 3, stride=2)
        w, b = store[f"{prefix}conv{i}.w"], store[f"{prefix}conv{i}.b"]
        if i == 1:
            # existence values act as both feature and confidence here
            x = ad.confidence_conv(tape, x, conf, km, w, b)
        else:
            x = ad.sparse_conv(tape, x, km, w, b)
        x = ad.relu(tape, x)
        coords = out_coords
    logits = ad.linear(tape, x, store[f"{prefix}final.w"], store[f"{prefix}final.b"])
    return coords, ad.sigmoid(tape, logits)


def _as_column(tape, t: Tensor) -> Tensor:
    if t.value.ndim == 2 and t.value.shape[1] == 1:
        return t
    res = Tensor(t.value.reshape(-1, 1))

    def backward():
        if res.grad is not None:
            t.accumulate(res.grad.reshape(t.value.shape))

    ad._rec(tape, backward)
    return res


def loss_d(tape, fake_scores: Tensor, real_scores: Tensor) -> Tensor:
    """Discriminator objective: push fakes to 0 and reals to 1.

    Each side is mean-normalized so the value does not scale with scene
    size; empty sides contribute zero.
    """
    terms = []
    if fake_scores.value.size:
        terms.append(ad.neg_mean_log1m(tape, fake_scores))
    if real_scores.value.size:
        terms.append(ad.neg_mean_log(tape, real_scores))
    if not terms:
        return Tensor(0.0)
    return ad.add_many(tape, terms)


def loss_adv(tape, fake_scores: Tensor) -> Tensor:
    """Generator objective: make the discriminator call fakes real."""
    if fake_scores.value.size == 0:
        return Tensor(0.0)
    return ad.neg_mean_log(tape, fake_scores)


def real_values(coords) -> Tensor:
    """Existence-1 values for a real voxel set."""
    return Tensor(np.ones((np.asarray(coords).reshape(-1, 3).shape[0], 1)))
