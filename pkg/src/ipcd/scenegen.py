"""Procedural outdoor scenes: ground plus box buildings lit by a directional sun.

Axes: +z up, +y north, +x east. Azimuth is measured clockwise from north,
so east is 90 degrees.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ipcd.pcio import IntrinsicTriplet, PointCloud

AMBIENT = (0.25, 0.27, 0.32)

SUN_PRESETS = {
    "morning": dict(elevation=15.0, azimuth=90.0, color=(1.00, 0.85, 0.65)),
    "noon": dict(elevation=60.0, azimuth=180.0, color=(1.0, 1.0, 1.0)),
    "evening": dict(elevation=12.0, azimuth=270.0, color=(1.00, 0.75, 0.55)),
}

DEFAULT_PALETTE = (
    (0.80, 0.78, 0.72),
    (0.65, 0.35, 0.25),
    (0.45, 0.47, 0.50),
    (0.85, 0.82, 0.60),
    (0.35, 0.40, 0.55),
    (0.55, 0.60, 0.45),
    (0.30, 0.28, 0.26),
    (0.70, 0.55, 0.40),
    (0.60, 0.62, 0.66),
    (0.75, 0.45, 0.40),
)

GROUND, WALL, ROOF = 0, 1, 2


class PlacementError(RuntimeError):
    pass


def direction_from_angles(elevation_deg: float, azimuth_deg: float) -> np.ndarray:
    """Unit vector pointing toward the sky position at (elevation, azimuth)."""
    e, a = np.radians(elevation_deg), np.radians(azimuth_deg)
    return np.array([np.cos(e) * np.sin(a), np.cos(e) * np.cos(a), np.sin(e)])


@dataclass(frozen=True)
class SunConfig:
    direction: tuple  # from the sun toward the scene
    color: tuple
    ambient: tuple
    label: str
    elevation: float
    azimuth: float

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=np.float64)
        if abs(np.linalg.norm(d) - 1.0) > 1e-9:
            raise ValueError("sun direction must be unit length")
        if d[2] >= 0:
            raise ValueError("sun must be above the horizon (direction z < 0)")

    @property
    def toward_sun(self) -> np.ndarray:
        return -np.asarray(self.direction, dtype=np.float64)

    def to_dict(self) -> dict:
        return {
            "direction": list(map(float, self.direction)),
            "color": list(map(float, self.color)),
            "ambient": list(map(float, self.ambient)),
            "label": self.label,
            "elevation": float(self.elevation),
            "azimuth": float(self.azimuth),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SunConfig":
        return cls(tuple(d["direction"]), tuple(d["color"]), tuple(d["ambient"]),
                   d["label"], d["elevation"], d["azimuth"])


def sun_from_time(label: str) -> SunConfig:
    if label not in SUN_PRESETS:
        raise ValueError(f"unknown time label {label!r}; valid labels: {', '.join(SUN_PRESETS)}")
    p = SUN_PRESETS[label]
    toward = direction_from_angles(p["elevation"], p["azimuth"])
    return SunConfig(tuple(-toward), p["color"], AMBIENT, label, p["elevation"], p["azimuth"])


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    building_count: tuple = (1, 4)
    footprint: tuple = (6.0, 16.0)
    height: tuple = (5.0, 25.0)
    palette: tuple = DEFAULT_PALETTE
    ground_extent: float = 30.0  # half-width of the square ground quad
    gable_probability: float = 0.3
    min_gap: float = 2.0
    max_retries: int = 200

    def __post_init__(self):
        for name in ("building_count", "footprint", "height"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < 0:
                raise ValueError(f"{name} range is empty or negative: {(lo, hi)}")
        if not self.palette:
            raise ValueError("palette must not be empty")


# --------------------------------------------------------------------------- BVH

@dataclass
class BVH:
    """Flattened AABB hierarchy over triangles; leaves own ``order[start:start+count]``."""

    box_min: np.ndarray
    box_max: np.ndarray
    left: np.ndarray
    right: np.ndarray
    start: np.ndarray
    count: np.ndarray
    order: np.ndarray

    @classmethod
    def build(cls, tri_vertices: np.ndarray, leaf_size: int = 4) -> "BVH":
        lo_t = tri_vertices.min(axis=1)
        hi_t = tri_vertices.max(axis=1)
        cent = tri_vertices.mean(axis=1)
        box_min, box_max, left, right, start, count = [], [], [], [], [], []
        order: list[int] = []

        def new_node(ids):
            box_min.append(lo_t[ids].min(axis=0))
            box_max.append(hi_t[ids].max(axis=0))
            left.append(-1), right.append(-1), start.append(-1), count.append(0)
            return len(box_min) - 1

        root = new_node(np.arange(len(tri_vertices)))
        stack = [(root, np.arange(len(tri_vertices)))]
        while stack:
            node, ids = stack.pop()
            if len(ids) <= leaf_size:
                start[node] = len(order)
                count[node] = len(ids)
                order.extend(ids.tolist())
                continue
            c = cent[ids]
            axis = int(np.argmax(c.max(axis=0) - c.min(axis=0)))
            srt = ids[np.argsort(c[:, axis], kind="stable")]
            half = len(srt) // 2
            l_node, r_node = new_node(srt[:half]), new_node(srt[half:])
            left[node], right[node] = l_node, r_node
            stack.append((r_node, srt[half:]))
            stack.append((l_node, srt[:half]))
        return cls(np.array(box_min), np.array(box_max), np.array(left), np.array(right),
                   np.array(start), np.array(count), np.array(order, dtype=np.int64))

    def __len__(self) -> int:
        return len(self.order)


def _ray_triangle_t(orig, dirs, v0, e1, e2):
    """Moller-Trumbore for R rays against T triangles -> R x T hit distances (inf = miss)."""
    p = np.cross(dirs[:, None, :], e2[None, :, :])
    det = np.einsum("tk,rtk->rt", e1, p)
    ok = np.abs(det) > 1e-12
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    s = orig[:, None, :] - v0[None, :, :]
    u = np.einsum("rtk,rtk->rt", s, p) * inv
    q = np.cross(s, e1[None, :, :])
    v = np.einsum("rk,rtk->rt", dirs, q) * inv
    t = np.einsum("tk,rtk->rt", e2, q) * inv
    hit = ok & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > 0)
    return np.where(hit, t, np.inf)


# --------------------------------------------------------------------------- scene

@dataclass
class TriMeshScene:
    vertices: np.ndarray
    triangles: np.ndarray
    face_albedo: np.ndarray
    face_normals: np.ndarray
    face_kind: np.ndarray
    footprints: list = field(default_factory=list)  # (xmin, ymin, xmax, ymax, height)
    bvh: BVH | None = None

    def __post_init__(self):
        tv = self.triangle_vertices()
        if np.any(self.triangle_areas() <= 1e-12):
            raise ValueError("scene contains degenerate triangles")
        if self.bvh is None:
            self.bvh = BVH.build(tv)

    def triangle_vertices(self) -> np.ndarray:
        return self.vertices[self.triangles]

    def triangle_areas(self) -> np.ndarray:
        tv = self.triangle_vertices()
        return 0.5 * np.linalg.norm(np.cross(tv[:, 1] - tv[:, 0], tv[:, 2] - tv[:, 0]), axis=1)


def raycast_occluded_many(scene: TriMeshScene, origins: np.ndarray, toward_sun: np.ndarray) -> np.ndarray:
    """Any-hit shadow test for many rays via BVH traversal."""
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    dirs = np.broadcast_to(np.asarray(toward_sun, dtype=np.float64), origins.shape).copy()
    orig = origins + 1e-4 * dirs
    bvh = scene.bvh
    tv = scene.triangle_vertices()
    v0, e1, e2 = tv[:, 0], tv[:, 1] - tv[:, 0], tv[:, 2] - tv[:, 0]

    safe = np.where(np.abs(dirs) < 1e-30, np.copysign(1e-30, dirs), dirs)
    inv = 1.0 / safe
    hit = np.zeros(len(orig), dtype=bool)
    stack = [(0, np.arange(len(orig)))]
    while stack:
        node, ids = stack.pop()
        ids = ids[~hit[ids]]
        if ids.size == 0:
            continue
        t0 = (bvh.box_min[node] - orig[ids]) * inv[ids]
        t1 = (bvh.box_max[node] - orig[ids]) * inv[ids]
        tnear = np.minimum(t0, t1).max(axis=1)
        tfar = np.maximum(t0, t1).min(axis=1)
        ids = ids[(tfar >= np.maximum(tnear, 0.0)) ]
        if ids.size == 0:
            continue
        if bvh.left[node] < 0:
            tri = bvh.order[bvh.start[node]: bvh.start[node] + bvh.count[node]]
            t = _ray_triangle_t(orig[ids], dirs[ids], v0[tri], e1[tri], e2[tri])
            hit[ids[np.isfinite(t).any(axis=1)]] = True
        else:
            stack.append((bvh.right[node], ids))
            stack.append((bvh.left[node], ids))
    return hit


def raycast_occluded(scene: TriMeshScene, origin, toward_sun) -> bool:
    return bool(raycast_occluded_many(scene, np.asarray(origin, dtype=np.float64)[None], toward_sun)[0])


def shade_at(scene: TriMeshScene, points, normals, sun: SunConfig, visibility=None) -> np.ndarray:
    """Lambertian shade ``clamp(ambient + vis * max(0, n.l) * color)``; works on one point or many."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    nrm = np.atleast_2d(np.asarray(normals, dtype=np.float64))
    l = sun.toward_sun
    if visibility is None:
        visibility = ~raycast_occluded_many(scene, pts, l)
    cos = np.maximum(0.0, nrm @ l)
    s = np.asarray(sun.ambient) + (np.asarray(visibility, dtype=np.float64) * cos)[:, None] * np.asarray(sun.color)
    s = np.clip(s, 0.0, 1.0)
    return s[0] if np.ndim(points) == 1 else s


def _quad(a, b, c, d):
    return [(a, b, c), (a, c, d)]


def build_scene(spec: SceneSpec) -> TriMeshScene:
    rng = np.random.default_rng(spec.seed)
    palette = np.asarray(spec.palette, dtype=np.float64)
    verts: list = []
    faces: list = []  # (tri vertex tuple, albedo, kind, outward reference point)

    def add_tris(tris, albedo, kind, ref):
        for tri in tris:
            faces.append((tri, albedo, kind, ref))

    E = spec.ground_extent
    ground = palette[rng.integers(len(palette))]
    g = [np.array(p, dtype=np.float64) for p in ((-E, -E, 0), (E, -E, 0), (E, E, 0), (-E, E, 0))]
    add_tris(_quad(*g), ground, GROUND, np.array([0.0, 0.0, -1.0]))

    n_buildings = int(rng.integers(spec.building_count[0], spec.building_count[1] + 1))
    footprints = []
    for _ in range(n_buildings):
        for _attempt in range(spec.max_retries):
            w = rng.uniform(*spec.footprint)
            d = rng.uniform(*spec.footprint)
            lim_x = E - w / 2 - spec.min_gap
            lim_y = E - d / 2 - spec.min_gap
            if lim_x <= 0 or lim_y <= 0:
                continue
            cx, cy = rng.uniform(-lim_x, lim_x), rng.uniform(-lim_y, lim_y)
            box = (cx - w / 2, cy - d / 2, cx + w / 2, cy + d / 2)
            gap = spec.min_gap
            if all(box[2] + gap <= o[0] or o[2] + gap <= box[0] or box[3] + gap <= o[1] or o[3] + gap <= box[1]
                   for o in footprints):
                break
        else:
            raise PlacementError(
                f"could not place building {len(footprints) + 1} of {n_buildings} without overlap "
                f"after {spec.max_retries} tries")
        h = rng.uniform(*spec.height)
        wall_c = palette[rng.integers(len(palette))]
        roof_c = palette[rng.integers(len(palette))]
        gabled = rng.random() < spec.gable_probability
        x0, y0, x1, y1 = box
        center = np.array([cx, cy, 0.0])
        c = [np.array(p, dtype=np.float64) for p in
             ((x0, y0, 0), (x1, y0, 0), (x1, y1, 0), (x0, y1, 0), (x0, y0, h), (x1, y0, h), (x1, y1, h), (x0, y1, h))]
        for a, b in ((0, 1), (1, 2), (2, 3), (3, 0)):
            add_tris(_quad(c[a], c[b], c[b + 4], c[a + 4]), wall_c, WALL, center)
        if gabled:
            rise = rng.uniform(0.2, 0.5) * min(w, d)
            if w >= d:  # ridge along x
                r0, r1 = np.array([x0, cy, h + rise]), np.array([x1, cy, h + rise])
                add_tris(_quad(c[4], c[5], r1, r0), roof_c, ROOF, center)
                add_tris(_quad(c[6], c[7], r0, r1), roof_c, ROOF, center)
                add_tris([(c[7], c[4], r0), (c[5], c[6], r1)], wall_c, WALL, center)
            else:  # ridge along y
                r0, r1 = np.array([cx, y0, h + rise]), np.array([cx, y1, h + rise])
                add_tris(_quad(c[5], c[6], r1, r0), roof_c, ROOF, center)
                add_tris(_quad(c[7], c[4], r0, r1), roof_c, ROOF, center)
                add_tris([(c[4], c[5], r0), (c[6], c[7], r1)], wall_c, WALL, center)
            top = h + rise
        else:
            add_tris(_quad(c[4], c[5], c[6], c[7]), roof_c, ROOF, center)
            top = h
        footprints.append((*box, top))

    tris = np.array([f[0] for f in faces], dtype=np.float64)  # T x 3 x 3
    normals = np.cross(tris[:, 1] - tris[:, 0], tris[:, 2] - tris[:, 0])
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    refs = np.array([f[3] for f in faces])
    kinds = np.array([f[2] for f in faces], dtype=np.int8)
    # ground faces use an "outward" reference below the plane
    outward = np.einsum("ij,ij->i", normals, tris.mean(axis=1) - refs)
    flip = outward < 0
    tris[flip] = tris[flip][:, [0, 2, 1]]
    normals[flip] *= -1
    vertices = tris.reshape(-1, 3)
    triangles = np.arange(len(vertices)).reshape(-1, 3)
    albedo = np.array([f[1] for f in faces], dtype=np.float64)
    return TriMeshScene(vertices, triangles, albedo, normals, kinds, footprints)


def sample_surface(scene: TriMeshScene, n_points: int, rng: np.random.Generator):
    """Area-weighted uniform surface samples -> (points, face indices)."""
    areas = scene.triangle_areas()
    face = rng.choice(len(areas), size=n_points, p=areas / areas.sum())
    r1 = np.sqrt(rng.random(n_points))
    r2 = rng.random(n_points)
    tv = scene.triangle_vertices()[face]
    pts = ((1 - r1)[:, None] * tv[:, 0] + (r1 * (1 - r2))[:, None] * tv[:, 1]
           + (r1 * r2)[:, None] * tv[:, 2])
    return pts, face


def sample_triplet(scene: TriMeshScene, sun: SunConfig, n_points: int, seed: int) -> IntrinsicTriplet:
    if n_points < 1:
        raise ValueError("n_points must be >= 1")
    rng = np.random.default_rng(seed)
    pts, face = sample_surface(scene, n_points, rng)
    albedo = scene.face_albedo[face]
    shade = shade_at(scene, pts, scene.face_normals[face], sun)
    shade = np.atleast_2d(shade)
    return IntrinsicTriplet(PointCloud(pts, albedo * shade), albedo, shade, sun)
