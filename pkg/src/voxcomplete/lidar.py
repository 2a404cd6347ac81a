"""Virtual LiDAR: sampling-pattern extraction and transfer.

A sensor's sampling pattern is the set of (theta, phi) ray directions of a
reference frame. Transferring it to a dense scene means occlusion-filtering
the scene from a chosen sensor location and picking, for every pattern
direction, the visible point with the nearest direction on the unit sphere.
Also hosts the handcrafted range-image baselines: beam decimation /
midpoint insertion and piecewise linear interpolation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import FormatError, VoxcompleteError

PATTERN_MAGIC = b"PATT"
RANGE_IMAGE_MAGIC = b"RIMG"
RANGE_SENTINEL = np.inf


def to_polar(points, sensor=(0.0, 0.0, 0.0)):
    """(r, theta, phi) per point relative to the sensor.

    r = |p|, theta = atan2(hypot(x, y), z) in [0, pi], phi = atan2(y, x).
    """
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3) - np.asarray(sensor, dtype=np.float64)
    r = np.linalg.norm(p, axis=1)
    if (r == 0).any():
        raise VoxcompleteError("to_polar: point coincides with the sensor")
    theta = np.arctan2(np.hypot(p[:, 0], p[:, 1]), p[:, 2])
    phi = np.arctan2(p[:, 1], p[:, 0])
    return r, theta, phi


def from_polar(r, theta, phi, sensor=(0.0, 0.0, 0.0)):
    """Inverse of :func:`to_polar`."""
    r = np.asarray(r, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    st = np.sin(theta)
    out = np.stack([r * st * np.cos(phi), r * st * np.sin(phi), r * np.cos(theta)], axis=-1)
    return out + np.asarray(sensor, dtype=np.float64)


def _unit_dirs(theta, phi) -> np.ndarray:
    st = np.sin(theta)
    return np.stack([st * np.cos(phi), st * np.sin(phi), np.cos(theta)], axis=-1)


@dataclass
class PolarPattern:
    """Ray direction set (theta in [0, pi], phi in (-pi, pi])."""

    theta: np.ndarray
    phi: np.ndarray
    source: str = ""

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64).reshape(-1)
        self.phi = np.asarray(self.phi, dtype=np.float64).reshape(-1)
        # atan2 can return exactly -pi; fold it onto +pi
        self.phi = np.where(self.phi == -np.pi, np.pi, self.phi)
        if self.theta.shape != self.phi.shape:
            raise VoxcompleteError("pattern theta/phi length mismatch")

    def __len__(self):
        return self.theta.shape[0]


def extract_pattern(points, sensor=(0.0, 0.0, 0.0), source: str = "") -> PolarPattern:
    """The sampling pattern of a reference frame."""
    _, theta, phi = to_polar(points, sensor)
    return PolarPattern(theta=theta, phi=phi, source=source)


def make_ring_pattern(rings: int, phi_steps: int, theta_min_deg: float, theta_max_deg: float, source: str = "") -> PolarPattern:
    """Synthetic rotating-beam pattern: evenly spaced elevation rings."""
    thetas = np.deg2rad(np.linspace(theta_min_deg, theta_max_deg, rings))
    phis = -np.pi + (np.arange(1, phi_steps + 1)) * (2 * np.pi / phi_steps)  # in (-pi, pi]
    t, p = np.meshgrid(thetas, phis, indexing="ij")
    return PolarPattern(theta=t.ravel(), phi=p.ravel(), source=source)


def occlusion_filter(points, sensor=(0.0, 0.0, 0.0), theta_res_deg: float = 0.2, phi_res_deg: float = 0.1, depth_tol: float = 0.3):
    """Visible subset via a spherical depth buffer.

    Points bin into a (theta, phi) grid; within each cell only points with
    r <= r_min + depth_tol survive. Returns (visible_points, indices).
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if pts.shape[0] == 0:
        return pts, np.empty(0, dtype=np.int64)
    r, theta, phi = to_polar(pts, sensor)
    n_theta = int(np.ceil(180.0 / theta_res_deg))
    n_phi = int(np.ceil(360.0 / phi_res_deg))
    tb = np.clip((theta / np.deg2rad(theta_res_deg)).astype(np.int64), 0, n_theta - 1)
    pb = np.clip(((phi + np.pi) / np.deg2rad(phi_res_deg)).astype(np.int64), 0, n_phi - 1)
    cell = tb * n_phi + pb
    uniq, inv = np.unique(cell, return_inverse=True)
    rmin = np.full(uniq.shape[0], np.inf)
    np.minimum.at(rmin, inv, r)
    keep = np.flatnonzero(r <= rmin[inv] + depth_tol)
    return pts[keep], keep


def resample(visible_points, pattern: PolarPattern, sensor=(0.0, 0.0, 0.0), cutoff_deg: float = 0.5):
    """Select, per pattern direction, the nearest visible point on the sphere.

    Matching runs purely in direction space (great-circle metric via the
    chordal distance of unit vectors); matches beyond the angular cutoff
    are dropped, duplicate selections collapse. Returns (points, indices
    into visible_points).
    """
    pts = np.asarray(visible_points, dtype=np.float64).reshape(-1, 3)
    if pts.shape[0] == 0:
        return pts.copy(), np.empty(0, dtype=np.int64)
    _, theta, phi = to_polar(pts, sensor)
    tree = cKDTree(_unit_dirs(theta, phi))
    chord_cut = 2.0 * np.sin(np.deg2rad(cutoff_deg) / 2.0)
    dist, nn = tree.query(_unit_dirs(pattern.theta, pattern.phi))
    sel = nn[dist <= chord_cut]
    if sel.shape[0] == 0:
        return np.empty((0, 3)), np.empty(0, dtype=np.int64)
    _, first = np.unique(sel, return_index=True)
    idx = sel[np.sort(first)]
    return pts[idx], idx


def augment_pattern(pattern: PolarPattern, rng, bins: int = 64, keep_fraction: float | None = None) -> PolarPattern:
    """Drop random elevation-bin subsets to diversify the pattern.

    The pattern's theta span is split into equal bins; a random fraction
    (uniform in [0.3, 0.7] unless given) of bins is retained with all their
    directions.
    """
    if bins < 1:
        raise VoxcompleteError("bins must be >= 1")
    if keep_fraction is None:
        keep_fraction = rng.uniform(0.3, 0.7)
    n_keep = max(1, min(bins, int(round(keep_fraction * bins))))
    chosen = rng.choice(bins, size=n_keep, replace=False)
    t0, t1 = pattern.theta.min(), pattern.theta.max()
    width = (t1 - t0) / bins if t1 > t0 else 1.0
    bin_of = np.clip(((pattern.theta - t0) / width).astype(np.int64), 0, bins - 1)
    keep = np.isin(bin_of, chosen)
    return PolarPattern(theta=pattern.theta[keep], phi=pattern.phi[keep], source=pattern.source)


def place_sensor(points, rng, height: float = 1.8):
    """A sensor pose 'height' above a random near-ground point of the scene."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    zmin = pts[:, 2].min()
    ground = pts[np.abs(pts[:, 2] - zmin) <= 0.05]
    if ground.shape[0] == 0:
        base = pts.mean(axis=0)
        base[2] = zmin
    else:
        base = ground[rng.integers(ground.shape[0])]
    return np.array([base[0], base[1], zmin + height])


# ---------------------------------------------------------------------------
# range images and the handcrafted baselines


@dataclass
class RangeImage:
    """Beam-major range raster; +inf marks empty cells.

    The angular calibration (theta span, sensor) is carried in memory for
    point reconstruction; the on-disk format stores only the raster.
    """

    ranges: np.ndarray  # (H, W) float
    theta_min: float = 0.0
    theta_max: float = np.pi
    sensor: np.ndarray = field(default_factory=lambda: np.zeros(3))

    @property
    def shape(self):
        return self.ranges.shape

    def cell_angles(self, row, col):
        h, w = self.ranges.shape
        theta = self.theta_min + (np.asarray(row) + 0.5) * (self.theta_max - self.theta_min) / h
        phi = -np.pi + (np.asarray(col) + 0.5) * (2 * np.pi / w)
        return theta, phi

    def cell_points(self, rows, cols):
        theta, phi = self.cell_angles(rows, cols)
        return from_polar(self.ranges[rows, cols], theta, phi, self.sensor)


def range_project(points, beams: int, width: int = 2048, sensor=(0.0, 0.0, 0.0), theta_range=None) -> RangeImage:
    """Project a frame into a beams x width range image (rows ordered by theta).

    Cell conflicts keep the nearest return. The theta span defaults to the
    frame's own [min, max] so ring frames land one ring per row.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    img = np.full((beams, width), RANGE_SENTINEL)
    if pts.shape[0] == 0:
        return RangeImage(img, 0.0, np.pi, np.asarray(sensor, dtype=np.float64))
    r, theta, phi = to_polar(pts, sensor)
    if theta_range is None:
        t0, t1 = float(theta.min()), float(theta.max())
    else:
        t0, t1 = theta_range
    span = max(t1 - t0, 1e-12)
    rows = np.clip(((theta - t0) / span * beams).astype(np.int64), 0, beams - 1)
    cols = np.clip(((phi + np.pi) / (2 * np.pi) * width).astype(np.int64), 0, width - 1)
    order = np.argsort(-r, kind="stable")  # nearer returns written last win
    img[rows[order], cols[order]] = r[order]
    return RangeImage(img, t0, t1, np.asarray(sensor, dtype=np.float64))


def _filled_cells(img: RangeImage):
    rows, cols = np.nonzero(np.isfinite(img.ranges))
    return rows, cols


def beam_resample(img: RangeImage, mode: str) -> np.ndarray:
    """Beam-count baseline: 'down' keeps every other beam row, 'up' inserts
    the midpoint of each vertically adjacent pair of returns."""
    rows, cols = _filled_cells(img)
    if mode == "down":
        keep = rows % 2 == 0
        return img.cell_points(rows[keep], cols[keep])
    if mode == "up":
        pts = img.cell_points(rows, cols)
        up_r, up_c = np.nonzero(np.isfinite(img.ranges[:-1]) & np.isfinite(img.ranges[1:]))
        a = img.cell_points(up_r, up_c)
        b = img.cell_points(up_r + 1, up_c)
        return np.concatenate([pts, (a + b) / 2.0], axis=0)
    raise VoxcompleteError(f"beam_resample mode must be 'down' or 'up', got {mode!r}")


def linear_interp(img: RangeImage, delta: float) -> np.ndarray:
    """Densify by interpolating each vertically adjacent pair of returns at
    spacing <= delta along the 3D segment."""
    if delta <= 0:
        raise VoxcompleteError("delta must be positive")
    rows, cols = _filled_cells(img)
    pts = [img.cell_points(rows, cols)]
    up_r, up_c = np.nonzero(np.isfinite(img.ranges[:-1]) & np.isfinite(img.ranges[1:]))
    if up_r.shape[0]:
        a = img.cell_points(up_r, up_c)
        b = img.cell_points(up_r + 1, up_c)
        seg = np.linalg.norm(b - a, axis=1)
        # the 1e-9 absorbs float noise when seg is an exact multiple of delta
        n_interior = np.maximum(np.ceil(seg / delta - 1e-9).astype(np.int64) - 1, 0)
        for pair_i in np.flatnonzero(n_interior):
            n = n_interior[pair_i]
            t = (np.arange(1, n + 1) / (n + 1))[:, None]
            pts.append(a[pair_i] + t * (b[pair_i] - a[pair_i]))
    return np.concatenate(pts, axis=0)


# ---------------------------------------------------------------------------
# file formats


def save_pattern(path, pattern: PolarPattern):
    with open(path, "wb") as f:
        f.write(PATTERN_MAGIC)
        f.write(np.array([len(pattern)], dtype="<u8").tobytes())
        f.write(np.stack([pattern.theta, pattern.phi], axis=1).astype("<f8").tobytes())


def load_pattern(path) -> PolarPattern:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != PATTERN_MAGIC:
        raise FormatError(f"{path}: not a pattern file (bad magic)")
    count = int(np.frombuffer(raw, "<u8", 1, 4)[0])
    if len(raw) != 12 + 16 * count:
        raise FormatError(f"{path}: truncated pattern file")
    pairs = np.frombuffer(raw, "<f8", 2 * count, 12).reshape(count, 2)
    return PolarPattern(theta=pairs[:, 0].copy(), phi=pairs[:, 1].copy())


def save_range_image(path, img: RangeImage):
    h, w = img.ranges.shape
    with open(path, "wb") as f:
        f.write(RANGE_IMAGE_MAGIC)
        f.write(np.array([h, w], dtype="<u4").tobytes())
        f.write(img.ranges.astype("<f4").tobytes())


def load_range_image(path) -> RangeImage:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != RANGE_IMAGE_MAGIC:
        raise FormatError(f"{path}: not a range image (bad magic)")
    h, w = (int(v) for v in np.frombuffer(raw, "<u4", 2, 4))
    if len(raw) != 12 + 4 * h * w:
        raise FormatError(f"{path}: truncated range image")
    ranges = np.frombuffer(raw, "<f4", h * w, 12).reshape(h, w).astype(np.float64)
    return RangeImage(ranges)
