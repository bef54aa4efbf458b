"""Orthographic point splatting and the projection-based luminance distribution.

A view direction (theta, phi) rotates the cloud by ``R_x(theta) @ R_z(phi)``
and looks at it from a fixed camera on +z. In world coordinates that camera
sits along ``(sin t sin p, sin t cos p, cos t)``, so phi follows the compass
azimuth convention used by :mod:`ipcd.scenegen`.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ipcd.pcio import PointCloud, normalize_cloud

LUMA = np.array([0.2126, 0.7152, 0.0722])


@dataclass(frozen=True)
class HemisphereGrid:
    thetas: np.ndarray
    phis: np.ndarray

    def __post_init__(self):
        th = np.asarray(self.thetas, dtype=np.float64)
        ph = np.asarray(self.phis, dtype=np.float64)
        if th.size == 0 or ph.size == 0:
            raise ValueError("grid needs at least one theta and one phi")
        if np.any(np.diff(th) <= 0) or np.any(np.diff(ph) <= 0):
            raise ValueError("grid angles must be strictly increasing")
        if ph[0] < 0 or ph[-1] >= 360:
            raise ValueError("phis must lie in [0, 360)")
        object.__setattr__(self, "thetas", th)
        object.__setattr__(self, "phis", ph)

    @classmethod
    def regular(cls, theta_step: float = 10.0, phi_step: float = 10.0, theta_max: float = 80.0):
        thetas = np.arange(0.0, theta_max + 1e-9, theta_step)
        phis = np.arange(0.0, 360.0 - 1e-9, phi_step)
        return cls(thetas, phis)

    @property
    def shape(self) -> tuple[int, int]:
        return len(self.thetas), len(self.phis)

    @property
    def K(self) -> int:
        return len(self.thetas) * len(self.phis)

    def band_areas(self) -> np.ndarray:
        """Solid angle of each theta row's band (per cell), normalized to sum to 1 over the grid."""
        th = np.radians(self.thetas)
        half = np.radians(np.diff(self.thetas).mean() / 2) if len(th) > 1 else np.radians(5.0)
        lo = np.maximum(th - half, 0.0)
        hi = np.minimum(th + half, np.pi / 2)
        band = np.cos(lo) - np.cos(hi)
        cells = np.repeat(band[:, None], len(self.phis), axis=1)
        return cells / cells.sum()


@dataclass
class SplatImage:
    pixels: np.ndarray   # H x W x 3
    depth: np.ndarray    # H x W, +inf where uncovered
    covered: np.ndarray  # H x W bool


@dataclass
class PLDMap:
    grid: HemisphereGrid
    values: np.ndarray    # T x P x 3
    coverage: np.ndarray  # T x P


def _rx(theta):
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def _rz(phi):
    c, s = np.cos(phi), np.sin(phi)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rotation_for(theta: float, phi: float) -> np.ndarray:
    """R(theta, phi) = R_x(theta) @ R_z(phi), angles in degrees."""
    return _rx(np.radians(theta)) @ _rz(np.radians(phi))


def view_direction(theta: float, phi: float) -> np.ndarray:
    """World-frame unit vector from the scene toward the camera for view (theta, phi)."""
    return rotation_for(theta, phi).T @ np.array([0.0, 0.0, 1.0])


def _splat_offsets(radius_px: float):
    # neighbor pixel centers sit at least |d| - 0.5 pixels away
    reach = int(np.floor(radius_px + 0.5))
    d = np.arange(-reach, reach + 1)
    du, dv = np.meshgrid(d, d, indexing="xy")
    return du.ravel(), dv.ravel()


def render_ortho(cloud: PointCloud, R: np.ndarray, image_size: int = 64, point_size: float = 0.02) -> SplatImage:
    """Z-buffered orthographic splat of a normalized cloud.

    A point covers every pixel whose center lies within ``point_size`` (NDC)
    of it, and always the pixel that contains it. The largest rotated z wins;
    exact depth ties go to the higher point index.
    """
    if image_size < 8:
        raise ValueError(f"image_size must be >= 8, got {image_size}")
    if point_size <= 0:
        raise ValueError("point_size must be positive")
    W = H = int(image_size)
    q = cloud.positions @ np.asarray(R, dtype=np.float64).T
    u = (q[:, 0] + 1.0) * 0.5 * W
    v = (1.0 - q[:, 1]) * 0.5 * H
    radius_px = point_size * 0.5 * W
    du, dv = _splat_offsets(radius_px)
    iu, iv = np.floor(u).astype(np.int64), np.floor(v).astype(np.int64)

    cu = iu[:, None] + du[None, :]
    cv = iv[:, None] + dv[None, :]
    dist2 = (cu + 0.5 - u[:, None]) ** 2 + (cv + 0.5 - v[:, None]) ** 2
    keep = (dist2 <= radius_px ** 2) | ((du == 0) & (dv == 0))[None, :]
    keep &= (cu >= 0) & (cu < W) & (cv >= 0) & (cv < H)
    point_idx = np.broadcast_to(np.arange(len(q))[:, None], keep.shape)[keep]
    pix = (cv * W + cu)[keep]

    pixels = np.zeros((H, W, 3))
    depth = np.full((H, W), np.inf)
    covered = np.zeros((H, W), dtype=bool)
    if pix.size:
        z = q[point_idx, 2]
        # depth in [-1.5, 1.5] after normalization, so pix*4 keeps groups apart
        order = np.argsort(pix * 4.0 + (z + 1.5), kind="stable")
        sp = pix[order]
        last = np.ones(len(sp), dtype=bool)
        last[:-1] = sp[1:] != sp[:-1]
        win = order[last]
        flat = pix[win]
        pixels.reshape(-1, 3)[flat] = cloud.colors[point_idx[win]]
        depth.reshape(-1)[flat] = z[win]
        covered.reshape(-1)[flat] = True
    return SplatImage(pixels, depth, covered)


def pld_value(img: SplatImage) -> tuple[np.ndarray, float]:
    n_covered = int(img.covered.sum())
    if n_covered == 0:
        return np.zeros(3), 0.0
    mean = img.pixels[img.covered].mean(axis=0)
    return mean, n_covered / img.covered.size


def _canonical(cloud: PointCloud) -> PointCloud:
    p, c = cloud.positions, cloud.colors
    order = np.lexsort((c[:, 2], c[:, 1], c[:, 0], p[:, 2], p[:, 1], p[:, 0]))
    return cloud.take(order)


def compute_pld(
    cloud: PointCloud,
    grid: HemisphereGrid | None = None,
    image_size: int = 64,
    point_size: float = 0.02,
    normalize: bool = True,
) -> PLDMap:
    """Mean covered-pixel color per hemisphere view."""
    grid = grid or HemisphereGrid.regular()
    if normalize:
        cloud, _ = normalize_cloud(cloud)
    cloud = _canonical(cloud)
    T, P = grid.shape
    values = np.zeros((T, P, 3))
    coverage = np.zeros((T, P))
    for i, th in enumerate(grid.thetas):
        for j, ph in enumerate(grid.phis):
            img = render_ortho(cloud, rotation_for(th, ph), image_size, point_size)
            values[i, j], coverage[i, j] = pld_value(img)
    return PLDMap(grid, values, coverage)


def pld_luma(pld: PLDMap) -> np.ndarray:
    return pld.values @ LUMA


def save_pld_csv(pld: PLDMap, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["theta", "phi", "r", "g", "b", "coverage"])
        for i, th in enumerate(pld.grid.thetas):
            for j, ph in enumerate(pld.grid.phis):
                r, g, b = pld.values[i, j]
                w.writerow([repr(float(th)), repr(float(ph)), repr(float(r)), repr(float(g)), repr(float(b)),
                            repr(float(pld.coverage[i, j]))])


def load_pld_csv(path) -> PLDMap:
    rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if rows.shape[1] != 6:
        raise ValueError(f"PLD CSV {path} must have 6 columns (theta, phi, r, g, b, coverage)")
    thetas = np.unique(rows[:, 0])
    phis = np.unique(rows[:, 1])
    if len(rows) != len(thetas) * len(phis):
        raise ValueError(f"PLD CSV {path} is not a full theta x phi grid")
    grid = HemisphereGrid(thetas, phis)
    values = np.zeros((len(thetas), len(phis), 3))
    coverage = np.zeros((len(thetas), len(phis)))
    ti = np.searchsorted(thetas, rows[:, 0])
    pj = np.searchsorted(phis, rows[:, 1])
    values[ti, pj] = rows[:, 2:5]
    coverage[ti, pj] = rows[:, 5]
    return PLDMap(grid, values, coverage)


def save_luma_png(pld: PLDMap, path, cell: int = 8) -> None:
    from PIL import Image

    luma = pld_luma(pld)
    span = luma.max() - luma.min()
    scaled = (luma - luma.min()) / span if span > 0 else np.zeros_like(luma)
    img = np.kron((scaled * 255).astype(np.uint8), np.ones((cell, cell), dtype=np.uint8))
    Image.fromarray(img).save(Path(path))
