"""Reverse-mode autodiff over sparse-grid feature matrices.

A :class:`Tape` records one backward closure per operation; calling
``backward`` replays them in exact reverse order, accumulating gradients
additively into :class:`Tensor` buffers. Passing ``tape=None`` to any op
runs it in inference mode (no recording, no gradient buffers).

Everything is float64. Accumulation order is fixed by construction, so two
runs on identical inputs produce bitwise-identical values and gradients.
"""

from __future__ import annotations

import json

import numpy as np

from .errors import ConfigError, FormatError

PROB_EPS = 1e-7  # clamp for log terms inside losses

CHECKPOINT_MAGIC = b"SVCK"
CHECKPOINT_VERSION = 1


class Tensor:
    """Value plus lazily allocated gradient buffer."""

    __slots__ = ("value", "grad")

    def __init__(self, value):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None

    def accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        self.grad += g

    @property
    def shape(self):
        return self.value.shape


class Param(Tensor):
    """Named trainable tensor with Adam moment buffers."""

    __slots__ = ("name", "adam_m", "adam_v")

    def __init__(self, name, value):
        super().__init__(value)
        self.name = name
        self.adam_m = np.zeros_like(self.value)
        self.adam_v = np.zeros_like(self.value)


class ParamStore:
    """Ordered named parameter set owned by one training loop.

    Creation order is deterministic and initialization draws from the
    store's own seeded generator, so two stores built the same way hold
    bitwise-identical values.
    """

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        self.rng = np.random.default_rng(self.seed)
        self.step = 0
        self._params: dict[str, Param] = {}

    def __iter__(self):
        return iter(self._params.values())

    def __contains__(self, name):
        return name in self._params

    def __getitem__(self, name) -> Param:
        return self._params[name]

    def names(self):
        return list(self._params)

    def num_values(self) -> int:
        return sum(p.value.size for p in self)

    def create(self, name, shape, fan_in=None, zero=False) -> Param:
        """Add a parameter; fan-in-scaled uniform init unless ``zero``."""
        if name in self._params:
            raise ConfigError(f"duplicate parameter name {name!r}")
        shape = tuple(int(s) for s in shape)
        if zero:
            value = np.zeros(shape, dtype=np.float64)
        else:
            if fan_in is None:
                fan_in = int(np.prod(shape[:-1])) if len(shape) > 1 else shape[0]
            bound = 1.0 / np.sqrt(max(fan_in, 1))
            value = self.rng.uniform(-bound, bound, size=shape)
        p = Param(name, value)
        self._params[name] = p
        return p

    def zero_grad(self):
        for p in self:
            p.grad = None

    def clone(self) -> "ParamStore":
        dup = ParamStore(self.seed)
        dup.rng = np.random.default_rng()
        dup.rng.bit_generator.state = self.rng.bit_generator.state
        dup.step = self.step
        for p in self:
            q = Param(p.name, p.value.copy())
            q.adam_m = p.adam_m.copy()
            q.adam_v = p.adam_v.copy()
            dup._params[p.name] = q
        return dup


class Tape:
    """Wengert list of backward closures."""

    def __init__(self):
        self._records = []

    def record(self, fn):
        self._records.append(fn)

    def backward(self, loss: Tensor):
        """Seed d(loss)/d(loss) = 1 and run closures in reverse order."""
        loss.grad = np.ones_like(loss.value)
        for fn in reversed(self._records):
            fn()
        self._records.clear()


def _rec(tape, fn):
    if tape is not None:
        tape.record(fn)


# ---------------------------------------------------------------------------
# structural ops


def sparse_conv(tape, x: Tensor, kmap, weights: Param, bias: Param) -> Tensor:
    """Sparse convolution: out[o] = bias + sum_{(i,o,k)} W_k @ f_i.

    Within each offset group input and output rows are unique, so the
    grouped gather-GEMM-scatter is exact and deterministic.
    """
    wv, bv, xv = weights.value, bias.value, x.value
    if wv.ndim != 3 or wv.shape[0] != kmap.n_offsets:
        raise ConfigError(f"weight shape {wv.shape} does not match {kmap.n_offsets} offsets")
    if xv.shape[1] != wv.shape[1]:
        raise ConfigError(f"input channels {xv.shape[1]} != weight in-channels {wv.shape[1]}")
    if bv.shape != (wv.shape[2],):
        raise ConfigError(f"bias shape {bv.shape} != ({wv.shape[2]},)")
    out = np.repeat(bv[None, :], kmap.n_out, axis=0)
    for k in range(kmap.n_offsets):
        ri, ro = kmap.group(k)
        if len(ri):
            out[ro] += xv[ri] @ wv[k]
    res = Tensor(out)

    def backward():
        g = res.grad
        if g is None:
            return
        bias.accumulate(g.sum(axis=0))
        dx = np.zeros_like(xv)
        dw = np.zeros_like(wv)
        for k in range(kmap.n_offsets):
            ri, ro = kmap.group(k)
            if len(ri):
                go = g[ro]
                dx[ri] += go @ wv[k].T
                dw[k] = xv[ri].T @ go
        x.accumulate(dx)
        weights.accumulate(dw)

    _rec(tape, backward)
    return res


def confidence_conv(tape, x: Tensor, conf: Tensor, kmap, weights: Param, bias: Param) -> Tensor:
    """Sparse convolution with each neighbor contribution scaled by its
    confidence: out[o] = bias + sum_{(i,o,k)} c_i * (W_k @ f_i)."""
    wv, bv, xv = weights.value, bias.value, x.value
    cv = conf.value.reshape(-1)
    if cv.shape[0] != xv.shape[0]:
        raise ConfigError(f"{cv.shape[0]} confidences for {xv.shape[0]} voxels")
    if wv.ndim != 3 or wv.shape[0] != kmap.n_offsets or xv.shape[1] != wv.shape[1]:
        raise ConfigError(f"weight shape {wv.shape} does not match inputs")
    h = cv[:, None] * xv
    out = np.repeat(bv[None, :], kmap.n_out, axis=0)
    for k in range(kmap.n_offsets):
        ri, ro = kmap.group(k)
        if len(ri):
            out[ro] += h[ri] @ wv[k]
    res = Tensor(out)

    def backward():
        g = res.grad
        if g is None:
            return
        bias.accumulate(g.sum(axis=0))
        dh = np.zeros_like(xv)
        dw = np.zeros_like(wv)
        for k in range(kmap.n_offsets):
            ri, ro = kmap.group(k)
            if len(ri):
                go = g[ro]
                dh[ri] += go @ wv[k].T
                dw[k] = h[ri].T @ go
        x.accumulate(cv[:, None] * dh)
        conf.accumulate((dh * xv).sum(axis=1).reshape(conf.value.shape))
        weights.accumulate(dw)

    _rec(tape, backward)
    return res


class PoolPlan:
    """Static structure of a kernel-2 stride-2 max pool over a coordinate set."""

    __slots__ = ("out_coords", "parent_rows", "slots", "n_out")

    def __init__(self, coords, unique_coords_fn):
        parents = np.asarray(coords, dtype=np.int64) >> 1
        self.out_coords, self.parent_rows = unique_coords_fn(parents, return_inverse=True)
        self.n_out = self.out_coords.shape[0]
        order = np.argsort(self.parent_rows, kind="stable")
        counts = np.bincount(self.parent_rows, minlength=self.n_out)
        starts = np.concatenate(([0], np.cumsum(counts)[:-1]))
        slot_sorted = np.arange(len(order)) - np.repeat(starts, counts)
        self.slots = np.empty(len(order), dtype=np.int64)
        self.slots[order] = slot_sorted


def build_pool_plan(coords) -> PoolPlan:
    from .grid import unique_coords

    return PoolPlan(coords, unique_coords)


def max_pool(tape, x: Tensor, plan: PoolPlan) -> Tensor:
    """Channelwise max over the <=8 children of each parent voxel."""
    xv = x.value
    n_in, c = xv.shape
    padded = np.full((plan.n_out, 8, c), -np.inf)
    padded[plan.parent_rows, plan.slots] = xv
    out = padded.max(axis=1)
    arg_slot = padded.argmax(axis=1)
    slot_to_row = np.full((plan.n_out, 8), -1, dtype=np.int64)
    slot_to_row[plan.parent_rows, plan.slots] = np.arange(n_in)
    arg_rows = np.take_along_axis(slot_to_row, arg_slot, axis=1)  # (n_out, c)
    res = Tensor(out)

    def backward():
        g = res.grad
        if g is None:
            return
        dx = np.zeros_like(xv)
        cols = np.broadcast_to(np.arange(c), arg_rows.shape)
        np.add.at(dx, (arg_rows.ravel(), cols.ravel()), g.ravel())
        x.accumulate(dx)

    _rec(tape, backward)
    return res


def dense_upsample_features(tape, x: Tensor) -> Tensor:
    """Copy each parent row onto its 8 children (parent-major order)."""
    xv = x.value
    res = Tensor(np.repeat(xv, 8, axis=0))

    def backward():
        g = res.grad
        if g is None:
            return
        x.accumulate(g.reshape(xv.shape[0], 8, xv.shape[1]).sum(axis=1))

    _rec(tape, backward)
    return res


def sparse_unpool(tape, x: Tensor, parent_rows) -> Tensor:
    """Copy parent features onto given target rows (every target has a parent)."""
    rows = np.asarray(parent_rows, dtype=np.int64)
    res = Tensor(x.value[rows])

    def backward():
        g = res.grad
        if g is None:
            return
        dx = np.zeros_like(x.value)
        from . import kernels

        kernels.scatter_add_rows(dx, rows, g)
        x.accumulate(dx)

    _rec(tape, backward)
    return res


def gather_rows(tape, x: Tensor, rows) -> Tensor:
    """Row subset (used by pruning); rows must be unique."""
    rows = np.asarray(rows, dtype=np.int64)
    res = Tensor(x.value[rows])

    def backward():
        g = res.grad
        if g is None:
            return
        dx = np.zeros_like(x.value)
        dx[rows] = g
        x.accumulate(dx)

    _rec(tape, backward)
    return res


def gather_rows_or_zero(tape, x: Tensor, rows, n_out: int) -> Tensor:
    """Gather with zero fill for rows == -1 (skip connections onto new voxels)."""
    rows = np.asarray(rows, dtype=np.int64)
    hit = np.flatnonzero(rows >= 0)
    out = np.zeros((n_out, x.value.shape[1]))
    out[hit] = x.value[rows[hit]]
    res = Tensor(out)

    def backward():
        g = res.grad
        if g is None:
            return
        dx = np.zeros_like(x.value)
        dx[rows[hit]] = g[hit]
        x.accumulate(dx)

    _rec(tape, backward)
    return res


def pad_rows(tape, x: Tensor, n_extra: int) -> Tensor:
    """Append zero rows (voxels injected with no upstream features)."""
    if n_extra == 0:
        return x
    res = Tensor(np.concatenate([x.value, np.zeros((n_extra, x.value.shape[1]))], axis=0))

    def backward():
        if res.grad is not None:
            x.accumulate(res.grad[: x.value.shape[0]])

    _rec(tape, backward)
    return res


def concat_cols(tape, a: Tensor, b: Tensor) -> Tensor:
    ca = a.value.shape[1]
    res = Tensor(np.concatenate([a.value, b.value], axis=1))

    def backward():
        g = res.grad
        if g is None:
            return
        a.accumulate(g[:, :ca])
        b.accumulate(g[:, ca:])

    _rec(tape, backward)
    return res


# ---------------------------------------------------------------------------
# dense ops


def linear(tape, x: Tensor, weights: Param, bias: Param) -> Tensor:
    wv, bv = weights.value, bias.value
    if x.value.shape[1] != wv.shape[0]:
        raise ConfigError(f"linear input {x.value.shape[1]} != weight rows {wv.shape[0]}")
    res = Tensor(x.value @ wv + bv)

    def backward():
        g = res.grad
        if g is None:
            return
        x.accumulate(g @ wv.T)
        weights.accumulate(x.value.T @ g)
        bias.accumulate(g.sum(axis=0))

    _rec(tape, backward)
    return res


def relu(tape, x: Tensor) -> Tensor:
    mask = x.value > 0
    res = Tensor(np.where(mask, x.value, 0.0))

    def backward():
        if res.grad is not None:
            x.accumulate(res.grad * mask)

    _rec(tape, backward)
    return res


def _stable_sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(tape, x: Tensor) -> Tensor:
    s = _stable_sigmoid(x.value)
    res = Tensor(s)

    def backward():
        if res.grad is not None:
            x.accumulate(res.grad * s * (1.0 - s))

    _rec(tape, backward)
    return res


def sharpened_sigmoid(tape, x: Tensor, k: float) -> Tensor:
    """s(x) = 1 / (1 + exp(-k x)); k >= 1 pushes outputs toward {0, 1}.

    Saturates exactly to 0.0/1.0 in float64 for large |x|, at which point
    the gradient k*s*(1-s) is exactly zero.
    """
    if k < 1:
        raise ConfigError("sharpening factor must be >= 1")
    s = _stable_sigmoid(k * x.value)
    res = Tensor(s)

    def backward():
        if res.grad is not None:
            x.accumulate(res.grad * k * s * (1.0 - s))

    _rec(tape, backward)
    return res


def batch_norm(tape, x: Tensor, gamma: Param, beta: Param, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization over the active voxels of one graph."""
    xv = x.value
    n = xv.shape[0]
    mean = xv.mean(axis=0)
    centered = xv - mean
    var = (centered**2).mean(axis=0)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    res = Tensor(gamma.value * xhat + beta.value)

    def backward():
        g = res.grad
        if g is None:
            return
        gamma.accumulate((g * xhat).sum(axis=0))
        beta.accumulate(g.sum(axis=0))
        gx = g * gamma.value
        dvar = (gx * centered).sum(axis=0) * (-0.5) * inv_std**3
        dmean = -gx.sum(axis=0) * inv_std + dvar * (-2.0) * centered.mean(axis=0)
        x.accumulate(gx * inv_std + dvar * 2.0 * centered / n + dmean / n)

    _rec(tape, backward)
    return res


# ---------------------------------------------------------------------------
# losses and scalar arithmetic


def bce_loss(tape, probs: Tensor, targets, weights=None) -> Tensor:
    """Weighted binary cross-entropy, normalized by total weight.

    Probabilities are clamped to [eps, 1-eps]; clamped entries get zero
    gradient (the loss is locally constant there).
    """
    t = np.asarray(targets, dtype=np.float64).reshape(-1)
    p = probs.value.reshape(-1)
    if weights is None:
        w = np.ones_like(p)
    else:
        w = np.asarray(weights, dtype=np.float64).reshape(-1)
    wsum = w.sum()
    if wsum <= 0:
        raise ConfigError("bce_loss needs positive total weight")
    pc = np.clip(p, PROB_EPS, 1.0 - PROB_EPS)
    loss = -(w * (t * np.log(pc) + (1.0 - t) * np.log1p(-pc))).sum() / wsum
    res = Tensor(loss)

    def backward():
        g = res.grad
        if g is None:
            return
        interior = (p > PROB_EPS) & (p < 1.0 - PROB_EPS)
        dp = np.where(interior, -w * (t / pc - (1.0 - t) / (1.0 - pc)) / wsum, 0.0)
        probs.accumulate((g * dp).reshape(probs.value.shape))

    _rec(tape, backward)
    return res


def softmax_cross_entropy(tape, logits: Tensor, labels, ignore_label=None) -> Tensor:
    """Mean cross-entropy over rows whose label != ignore_label."""
    lv = logits.value
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    mask = np.ones_like(y, dtype=bool) if ignore_label is None else (y != ignore_label)
    n = int(mask.sum())
    if n == 0:
        raise ConfigError("all labels are masked")
    shifted = lv - lv.max(axis=1, keepdims=True)
    ez = np.exp(shifted)
    softmax = ez / ez.sum(axis=1, keepdims=True)
    lse = np.log(ez.sum(axis=1)) + lv.max(axis=1)
    rows = np.flatnonzero(mask)
    loss = (lse[rows] - lv[rows, y[rows]]).sum() / n
    res = Tensor(loss)

    def backward():
        g = res.grad
        if g is None:
            return
        dl = np.zeros_like(lv)
        dl[rows] = softmax[rows]
        dl[rows, y[rows]] -= 1.0
        logits.accumulate(g * dl / n)

    _rec(tape, backward)
    return res


def neg_mean_log(tape, x: Tensor) -> Tensor:
    """-mean(log x) with low clamp; the real/fooling half of the GAN losses."""
    v = x.value.reshape(-1)
    vc = np.clip(v, PROB_EPS, None)
    res = Tensor(-np.log(vc).mean())

    def backward():
        g = res.grad
        if g is None:
            return
        dv = np.where(v > PROB_EPS, -1.0 / (vc * vc.shape[0]), 0.0)
        x.accumulate((g * dv).reshape(x.value.shape))

    _rec(tape, backward)
    return res


def neg_mean_log1m(tape, x: Tensor) -> Tensor:
    """-mean(log(1 - x)) with high clamp; the fake half of the GAN losses."""
    v = x.value.reshape(-1)
    vc = np.clip(v, None, 1.0 - PROB_EPS)
    res = Tensor(-np.log1p(-vc).mean())

    def backward():
        g = res.grad
        if g is None:
            return
        dv = np.where(v < 1.0 - PROB_EPS, 1.0 / ((1.0 - vc) * vc.shape[0]), 0.0)
        x.accumulate((g * dv).reshape(x.value.shape))

    _rec(tape, backward)
    return res


def add(tape, a: Tensor, b: Tensor) -> Tensor:
    res = Tensor(a.value + b.value)

    def backward():
        if res.grad is not None:
            a.accumulate(res.grad)
            b.accumulate(res.grad)

    _rec(tape, backward)
    return res


def scale(tape, x: Tensor, c: float) -> Tensor:
    res = Tensor(c * x.value)

    def backward():
        if res.grad is not None:
            x.accumulate(c * res.grad)

    _rec(tape, backward)
    return res


def add_many(tape, terms) -> Tensor:
    terms = list(terms)
    out = terms[0]
    for t in terms[1:]:
        out = add(tape, out, t)
    return out


# ---------------------------------------------------------------------------
# optimizer


def adam_step(store: ParamStore, lr, beta1=0.9, beta2=0.99, eps=1e-8, step=None):
    """Bias-corrected Adam update over all params; zeroes gradients."""
    t = store.step + 1 if step is None else int(step)
    store.step = t
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for p in store:
        g = p.grad
        if g is None:
            g = np.zeros_like(p.value)
        p.adam_m = beta1 * p.adam_m + (1.0 - beta1) * g
        p.adam_v = beta2 * p.adam_v + (1.0 - beta2) * g**2
        p.value -= lr * (p.adam_m / c1) / (np.sqrt(p.adam_v / c2) + eps)
        p.grad = None


# ---------------------------------------------------------------------------
# checkpoint serialization


def save_checkpoint(path, store: ParamStore, global_step: int | None = None):
    """Write params + Adam state + step + RNG state (little-endian)."""
    gstep = store.step if global_step is None else int(global_step)
    rng_blob = json.dumps(store.rng.bit_generator.state, sort_keys=True).encode()
    names = store.names()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(np.array([CHECKPOINT_VERSION], dtype="<u2").tobytes())
        f.write(np.array([gstep, store.step], dtype="<u8").tobytes())
        f.write(np.array([store.seed], dtype="<u8").tobytes())
        f.write(np.array([len(rng_blob)], dtype="<u4").tobytes())
        f.write(rng_blob)
        f.write(np.array([len(names)], dtype="<u4").tobytes())
        for name in names:
            p = store[name]
            nb = name.encode()
            f.write(np.array([len(nb)], dtype="<u2").tobytes())
            f.write(nb)
            f.write(np.array([p.value.ndim], dtype="<u1").tobytes())
            f.write(np.array(p.value.shape, dtype="<u4").tobytes())
            f.write(p.value.astype("<f8").tobytes())
            f.write(p.adam_m.astype("<f8").tobytes())
            f.write(p.adam_v.astype("<f8").tobytes())


def load_checkpoint(path):
    """Read a checkpoint; returns (store, global_step)."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    version = int(np.frombuffer(raw, "<u2", 1, 4)[0])
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    gstep, adam_t = (int(v) for v in np.frombuffer(raw, "<u8", 2, 6))
    seed = int(np.frombuffer(raw, "<u8", 1, 22)[0])
    blob_len = int(np.frombuffer(raw, "<u4", 1, 30)[0])
    off = 34
    rng_state = json.loads(raw[off : off + blob_len].decode())
    off += blob_len
    count = int(np.frombuffer(raw, "<u4", 1, off)[0])
    off += 4
    store = ParamStore(seed)
    store.rng.bit_generator.state = rng_state
    store.step = adam_t
    for _ in range(count):
        nlen = int(np.frombuffer(raw, "<u2", 1, off)[0])
        off += 2
        name = raw[off : off + nlen].decode()
        off += nlen
        ndim = raw[off]
        off += 1
        shape = tuple(int(v) for v in np.frombuffer(raw, "<u4", ndim, off))
        off += 4 * ndim
        size = int(np.prod(shape)) if shape else 1
        p = Param(name, np.frombuffer(raw, "<f8", size, off).reshape(shape).copy())
        off += 8 * size
        p.adam_m = np.frombuffer(raw, "<f8", size, off).reshape(shape).copy()
        off += 8 * size
        p.adam_v = np.frombuffer(raw, "<f8", size, off).reshape(shape).copy()
        off += 8 * size
        store._params[name] = p
    if off != len(raw):
        raise FormatError(f"{path}: trailing bytes in checkpoint")
    return store, gstep
