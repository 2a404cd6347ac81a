"""Procedural labeled scene generator (the dense canonical-domain source).

Scenes are flat worlds with simple analytic primitives: a ground plane,
yaw-rotated boxes ("vehicle"), vertical cylinders ("pedestrian"), low
strips ("sidewalk") and tall slabs ("wall"). Points are sampled uniformly
per unit surface area, so every point lies exactly on a primitive surface
and carries that primitive's class.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .kernels import pack
from .metrics import UNLABELED

log = logging.getLogger(__name__)

GROUND = "ground"
VEHICLE = "vehicle"
PEDESTRIAN = "pedestrian"
SIDEWALK = "sidewalk"
WALL = "wall"

# class palettes; the five-class palette stands in for the multi-class regime
PALETTES = {
    "two_class": {
        GROUND: UNLABELED,
        VEHICLE: 0,
        PEDESTRIAN: 1,
        SIDEWALK: UNLABELED,
        WALL: UNLABELED,
    },
    "five_class": {GROUND: 0, VEHICLE: 1, PEDESTRIAN: 2, SIDEWALK: 3, WALL: 4},
}


def palette_classes(palette: str):
    try:
        mapping = PALETTES[palette]
    except KeyError:
        raise ConfigError(f"unknown palette {palette!r}; have {sorted(PALETTES)}")
    return sorted({c for c in mapping.values() if c != UNLABELED})


@dataclass
class SceneSpec:
    extent: float = 10.0
    vehicles: int = 3
    pedestrians: int = 3
    sidewalks: int = 1
    walls: int = 1
    density: float = 120.0  # points per square meter
    palette: str = "five_class"
    seed: int = 0

    @classmethod
    def from_json(cls, path) -> "SceneSpec":
        with open(path) as f:
            return cls(**json.load(f))

    def to_dict(self):
        return {
            "extent": self.extent,
            "vehicles": self.vehicles,
            "pedestrians": self.pedestrians,
            "sidewalks": self.sidewalks,
            "walls": self.walls,
            "density": self.density,
            "palette": self.palette,
            "seed": self.seed,
        }


@dataclass
class Primitive:
    kind: str
    center: np.ndarray  # xy center
    yaw: float = 0.0
    dims: tuple = ()  # boxes/strips/slabs: (lx, ly, lz); cylinders: (radius, height)

    def footprint_radius(self) -> float:
        if self.kind == PEDESTRIAN:
            return self.dims[0]
        lx, ly, _ = self.dims
        return float(np.hypot(lx, ly) / 2)

    def footprint(self):
        """('circle', center, r) or ('rect', corners[4,2]) in world xy."""
        if self.kind == PEDESTRIAN:
            return ("circle", self.center, self.dims[0])
        lx, ly, _ = self.dims
        c, s = np.cos(self.yaw), np.sin(self.yaw)
        rot = np.array([[c, -s], [s, c]])
        corners = np.array([[-lx, -ly], [lx, -ly], [lx, ly], [-lx, ly]]) / 2 @ rot.T + self.center
        return ("rect", corners)


def _rects_overlap(a, b, margin):
    """Separating-axis test for two convex quads, inflated by margin."""
    for quad, other in ((a, b), (b, a)):
        for i in range(4):
            edge = quad[(i + 1) % 4] - quad[i]
            axis = np.array([-edge[1], edge[0]])
            axis = axis / np.linalg.norm(axis)
            pa = quad @ axis
            pb = other @ axis
            if pa.max() + margin < pb.min() or pb.max() + margin < pa.min():
                return False
    return True


def _rect_circle_overlap(corners, center, radius, margin):
    # closest point on the rectangle to the circle center, in rect frame
    edge_x = corners[1] - corners[0]
    edge_y = corners[3] - corners[0]
    ex, ey = np.linalg.norm(edge_x), np.linalg.norm(edge_y)
    ux, uy = edge_x / ex, edge_y / ey
    rel = center - corners[0]
    px = np.clip(rel @ ux, 0, ex)
    py = np.clip(rel @ uy, 0, ey)
    closest = corners[0] + px * ux + py * uy
    return np.linalg.norm(center - closest) < radius + margin


def _footprints_overlap(fa, fb, margin=0.25):
    if fa[0] == "circle" and fb[0] == "circle":
        return np.linalg.norm(fa[1] - fb[1]) < fa[2] + fb[2] + margin
    if fa[0] == "rect" and fb[0] == "rect":
        return _rects_overlap(fa[1], fb[1], margin)
    rect = fa if fa[0] == "rect" else fb
    circ = fb if fa[0] == "rect" else fa
    return _rect_circle_overlap(rect[1], circ[1], circ[2], margin)


@dataclass
class Scene:
    points: np.ndarray
    labels: np.ndarray
    primitives: list = field(default_factory=list)
    spec: SceneSpec | None = None


_DIM_RANGES = {
    VEHICLE: ((3.6, 4.8), (1.6, 2.0), (1.3, 1.8)),
    SIDEWALK: ((2.0, 4.0), (1.0, 1.8), (0.15, 0.15)),
    WALL: ((2.0, 4.0), (0.2, 0.4), (2.2, 3.2)),
}


def _place(rng, extent, prim: Primitive, placed, tries=60):
    """Find a collision-free center for prim; None when the scene is full.

    Bodies may overhang the ground edge slightly; only mutual overlap is
    rejected.
    """
    for _ in range(tries):
        prim.center = rng.uniform(0.5, extent - 0.5, size=2)
        fp = prim.footprint()
        if all(not _footprints_overlap(fp, q) for q in placed):
            return prim.center
    return None


def _box_points(rng, center, yaw, dims, z0, n_total):
    """Uniform surface samples over a yaw-rotated box (bottom face skipped)."""
    lx, ly, lz = dims
    faces = [  # (area, sampler in local coords centered at origin)
        (lx * ly, lambda n: np.column_stack([rng.uniform(-lx / 2, lx / 2, n), rng.uniform(-ly / 2, ly / 2, n), np.full(n, lz)])),
        (lx * lz, lambda n: np.column_stack([rng.uniform(-lx / 2, lx / 2, n), np.full(n, -ly / 2), rng.uniform(0, lz, n)])),
        (lx * lz, lambda n: np.column_stack([rng.uniform(-lx / 2, lx / 2, n), np.full(n, ly / 2), rng.uniform(0, lz, n)])),
        (ly * lz, lambda n: np.column_stack([np.full(n, -lx / 2), rng.uniform(-ly / 2, ly / 2, n), rng.uniform(0, lz, n)])),
        (ly * lz, lambda n: np.column_stack([np.full(n, lx / 2), rng.uniform(-ly / 2, ly / 2, n), rng.uniform(0, lz, n)])),
    ]
    areas = np.array([a for a, _ in faces])
    counts = rng.multinomial(n_total, areas / areas.sum())
    local = np.concatenate([s(n) for (_, s), n in zip(faces, counts)], axis=0)
    c, s = np.cos(yaw), np.sin(yaw)
    rot = np.array([[c, -s], [s, c]])
    out = np.empty_like(local)
    out[:, :2] = local[:, :2] @ rot.T + center
    out[:, 2] = local[:, 2] + z0
    return out


def _cylinder_points(rng, center, radius, height, n_total):
    lateral = 2 * np.pi * radius * height
    cap = np.pi * radius**2
    n_side, n_cap = rng.multinomial(n_total, np.array([lateral, cap]) / (lateral + cap))
    ang = rng.uniform(-np.pi, np.pi, n_side)
    side = np.column_stack(
        [center[0] + radius * np.cos(ang), center[1] + radius * np.sin(ang), rng.uniform(0, height, n_side)]
    )
    ang2 = rng.uniform(-np.pi, np.pi, n_cap)
    rad2 = radius * np.sqrt(rng.uniform(0, 1, n_cap))
    top = np.column_stack(
        [center[0] + rad2 * np.cos(ang2), center[1] + rad2 * np.sin(ang2), np.full(n_cap, height)]
    )
    return np.concatenate([side, top], axis=0)


def gen_scene(spec: SceneSpec) -> Scene:
    """Sample a labeled scene; deterministic in the spec's seed."""
    rng = np.random.default_rng(spec.seed)
    class_of = PALETTES.get(spec.palette)
    if class_of is None:
        raise ConfigError(f"unknown palette {spec.palette!r}")

    prims = [Primitive(GROUND, center=np.array([spec.extent / 2, spec.extent / 2]), dims=(spec.extent, spec.extent, 0.0))]
    placed = []
    wanted = [(VEHICLE, spec.vehicles), (PEDESTRIAN, spec.pedestrians), (SIDEWALK, spec.sidewalks), (WALL, spec.walls)]
    for kind, count in wanted:
        for _ in range(count):
            if kind == PEDESTRIAN:
                radius = rng.uniform(0.25, 0.4)
                height = rng.uniform(1.6, 1.9)
                dims = (radius, height)
                yaw = 0.0
            else:
                ranges = _DIM_RANGES[kind]
                dims = tuple(rng.uniform(lo, hi) for lo, hi in ranges)
                yaw = rng.uniform(0, 2 * np.pi)
            prim = Primitive(kind, center=np.zeros(2), yaw=yaw, dims=dims)
            if _place(rng, spec.extent, prim, placed) is None:
                log.warning("scene %d: no room for another %s, skipping", spec.seed, kind)
                continue
            placed.append(prim.footprint())
            prims.append(prim)

    chunks, labels = [], []
    for prim in prims:
        if prim.kind == GROUND:
            area = spec.extent**2
            n = rng.poisson(spec.density * area)
            pts = np.column_stack(
                [rng.uniform(0, spec.extent, n), rng.uniform(0, spec.extent, n), np.zeros(n)]
            )
        elif prim.kind == PEDESTRIAN:
            radius, height = prim.dims
            area = 2 * np.pi * radius * height + np.pi * radius**2
            n = rng.poisson(spec.density * area)
            pts = _cylinder_points(rng, prim.center, radius, height, n)
        else:
            lx, ly, lz = prim.dims
            area = lx * ly + 2 * (lx + ly) * lz
            n = rng.poisson(spec.density * area)
            pts = _box_points(rng, prim.center, prim.yaw, prim.dims, 0.0, n)
        chunks.append(pts)
        labels.append(np.full(pts.shape[0], class_of[prim.kind], dtype=np.uint32))
    return Scene(
        points=np.concatenate(chunks, axis=0),
        labels=np.concatenate(labels),
        primitives=prims,
        spec=spec,
    )


def aggregate_frames(frames, poses, dedup_size: float) -> np.ndarray:
    """Union of pose-transformed frames, voxel-deduplicated (first point wins).

    Poses are (R, t) rigid transforms applied as p @ R.T + t.
    """
    if len(frames) != len(poses):
        raise ConfigError("one pose per frame required")
    moved = []
    for pts, (rot, t) in zip(frames, poses):
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
        moved.append(pts @ np.asarray(rot, dtype=np.float64).T + np.asarray(t, dtype=np.float64))
    allpts = np.concatenate(moved, axis=0)
    cells = np.floor(allpts / dedup_size).astype(np.int64)
    keys = pack(cells)
    _, first = np.unique(keys, return_index=True)
    return allpts[np.sort(first)]


def surface_distance(prim: Primitive, points) -> np.ndarray:
    """Distance of points to the primitive's surface (test oracle)."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if prim.kind == GROUND:
        return np.abs(p[:, 2])
    if prim.kind == PEDESTRIAN:
        radius, height = prim.dims
        d_xy = np.hypot(p[:, 0] - prim.center[0], p[:, 1] - prim.center[1])
        d_side = np.abs(d_xy - radius)
        side = np.where((p[:, 2] >= 0) & (p[:, 2] <= height), d_side, np.inf)
        cap = np.where(d_xy <= radius, np.abs(p[:, 2] - height), np.inf)
        return np.minimum(side, cap)
    lx, ly, lz = prim.dims
    c, s = np.cos(prim.yaw), np.sin(prim.yaw)
    rot = np.array([[c, -s], [s, c]])
    local_xy = (p[:, :2] - prim.center) @ rot
    x, y, z = local_xy[:, 0], local_xy[:, 1], p[:, 2]
    dists = [
        np.where((np.abs(x) <= lx / 2) & (np.abs(y) <= ly / 2), np.abs(z - lz), np.inf),
        np.where((np.abs(x) <= lx / 2) & (z >= 0) & (z <= lz), np.abs(np.abs(y) - ly / 2), np.inf),
        np.where((np.abs(y) <= ly / 2) & (z >= 0) & (z <= lz), np.abs(np.abs(x) - lx / 2), np.inf),
    ]
    return np.minimum.reduce(dists)
