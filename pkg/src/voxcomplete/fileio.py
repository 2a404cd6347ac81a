"""PCXL point-cloud files: xyz (f32) with optional per-point class ids."""

from __future__ import annotations

import numpy as np

from .errors import FormatError
from .metrics import UNLABELED

CLOUD_MAGIC = b"PCXL"
CLOUD_VERSION = 1
FLAG_LABELED = 0x1

_PLAIN = np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4")])
_LABELED = np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("c", "<u4")])


def save_cloud(path, points, labels=None):
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    flags = FLAG_LABELED if labels is not None else 0
    rec = np.empty(pts.shape[0], dtype=_LABELED if labels is not None else _PLAIN)
    rec["x"], rec["y"], rec["z"] = pts[:, 0], pts[:, 1], pts[:, 2]
    if labels is not None:
        lab = np.asarray(labels, dtype=np.uint32).reshape(-1)
        if lab.shape[0] != pts.shape[0]:
            raise FormatError("labels and points length mismatch")
        rec["c"] = lab
    with open(path, "wb") as f:
        f.write(CLOUD_MAGIC)
        f.write(np.array([CLOUD_VERSION, flags], dtype="<u2").tobytes())
        f.write(np.array([pts.shape[0]], dtype="<u8").tobytes())
        f.write(rec.tobytes())


def load_cloud(path):
    """Returns (points float64 (n,3), labels uint32 or None)."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != CLOUD_MAGIC:
        raise FormatError(f"{path}: not a point cloud file (bad magic)")
    version, flags = (int(v) for v in np.frombuffer(raw, "<u2", 2, 4))
    if version != CLOUD_VERSION:
        raise FormatError(f"{path}: unsupported cloud version {version}")
    count = int(np.frombuffer(raw, "<u8", 1, 8)[0])
    labeled = bool(flags & FLAG_LABELED)
    dtype = _LABELED if labeled else _PLAIN
    if len(raw) != 16 + count * dtype.itemsize:
        raise FormatError(f"{path}: truncated cloud file")
    rec = np.frombuffer(raw, dtype, count, 16)
    pts = np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(np.float64)
    labels = rec["c"].astype(np.uint32).copy() if labeled else None
    return pts, labels


def ensure_labels(labels, n: int) -> np.ndarray:
    """Labels array or all-UNLABELED fallback of length n."""
    if labels is None:
        return np.full(n, UNLABELED, dtype=np.uint32)
    return labels
