"""Colored ICP and the registration-recall harness.

The pose is refined by Gauss-Newton on

    sum (1 - w) * ((T q - p) . n)^2 + w * (C_q - C_p - d_p . (proj(T q) - p))^2

where ``p`` is the nearest target point, ``n`` its normal, ``C`` Rec.709 luma
and ``d_p`` the luma gradient in the tangent plane at ``p``. The linear
model of target luma lets the photometric term pull along the surface,
where the geometric term is blind.
"""

from __future__ import annotations

import itertools
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from ipcd.model import knn_indices
from ipcd.pcio import PointCloud
from ipcd.projection import LUMA

log = logging.getLogger(__name__)

MIN_POINTS = 100
MIN_CORRESPONDENCES = 10


class RegistrationError(RuntimeError):
    pass


@dataclass(frozen=True)
class ICPParams:
    max_iterations: int = 60
    radius: float = 0.08
    color_weight: float = 0.3
    normal_k: int = 16
    tol: float = 1e-8
    stall_patience: int = 5


@dataclass
class ICPResult:
    transform: np.ndarray
    iterations: int
    residual: float
    correspondences: int
    converged: bool
    stalled: bool
    history: list = field(default_factory=list)


def apply_transform(T: np.ndarray, pts: np.ndarray) -> np.ndarray:
    return pts @ T[:3, :3].T + T[:3, 3]


def make_transform(rotvec, translation) -> np.ndarray:
    T = np.eye(4)
    T[:3, :3] = Rotation.from_rotvec(rotvec).as_matrix()
    T[:3, 3] = translation
    return T


def transform_error(estimate: np.ndarray, truth: np.ndarray) -> tuple[float, float]:
    """(rotation error in degrees, translation error)."""
    delta = estimate @ np.linalg.inv(truth)
    cosang = np.clip((np.trace(delta[:3, :3]) - 1.0) / 2.0, -1.0, 1.0)
    return float(np.degrees(np.arccos(cosang))), float(np.linalg.norm(estimate[:3, 3] - truth[:3, 3]))


def estimate_normals(points: np.ndarray, k: int = 16) -> np.ndarray:
    """Unit normals from the smallest principal axis of each k-neighborhood."""
    nbr = knn_indices(points, min(k, len(points) - 1))
    hood = np.concatenate([points[:, None, :], points[nbr]], axis=1)
    centered = hood - hood.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered)
    _, vecs = np.linalg.eigh(cov)
    n = vecs[:, :, 0]
    # orient away from the centroid
    out = points - points.mean(axis=0)
    flip = np.einsum("ij,ij->i", n, out) < 0
    n[flip] *= -1
    return n


def luma_gradients(points: np.ndarray, normals: np.ndarray, luma: np.ndarray, k: int = 16) -> np.ndarray:
    """Least-squares tangent-plane luma gradient per point."""
    nbr = knn_indices(points, min(k, len(points) - 1))
    diff = points[nbr] - points[:, None, :]
    # project neighbor offsets onto the tangent plane
    diff -= np.einsum("nkj,nj->nk", diff, normals)[:, :, None] * normals[:, None, :]
    dl = luma[nbr] - luma[:, None]
    A = np.einsum("nki,nkj->nij", diff, diff) + np.einsum("ni,nj->nij", normals, normals)
    b = np.einsum("nki,nk->ni", diff, dl)
    A += 1e-12 * np.eye(3)
    return np.linalg.solve(A, b[:, :, None])[:, :, 0]


def colored_icp(source: PointCloud, target: PointCloud, init: np.ndarray | None = None,
                params: ICPParams = ICPParams()) -> ICPResult:
    if len(source) < MIN_POINTS or len(target) < MIN_POINTS:
        raise RegistrationError(f"colored ICP needs at least {MIN_POINTS} points per cloud "
                                f"(got {len(source)} and {len(target)})")
    if not 0.0 <= params.color_weight <= 1.0:
        raise ValueError("color_weight must lie in [0, 1]")
    w = params.color_weight
    tgt = target.positions
    normals = estimate_normals(tgt, params.normal_k)
    luma_t = target.colors @ LUMA
    grads = luma_gradients(tgt, normals, luma_t, params.normal_k)
    luma_s = source.colors @ LUMA
    tree = cKDTree(tgt)
    sw_g, sw_c = np.sqrt(1.0 - w), np.sqrt(w)

    T = np.eye(4) if init is None else np.array(init, dtype=np.float64)
    best = (np.inf, T.copy(), 0)
    history = []
    stall = 0
    converged = stalled = False
    it = 0
    for it in range(1, params.max_iterations + 1):
        q = apply_transform(T, source.positions)
        dist, nn = tree.query(q, distance_upper_bound=params.radius)
        ok = np.isfinite(dist)
        count = int(ok.sum())
        if count < MIN_CORRESPONDENCES:
            raise RegistrationError(f"registration diverged: only {count} correspondences within radius "
                                    f"{params.radius} at iteration {it}")
        q, j = q[ok], nn[ok]
        p, n, d = tgt[j], normals[j], grads[j]
        off = q - p
        r_g = np.einsum("ij,ij->i", off, n)
        proj = off - r_g[:, None] * n
        r_c = luma_s[ok] - luma_t[j] - np.einsum("ij,ij->i", d, proj)
        residual = float(np.mean((1.0 - w) * r_g ** 2 + w * r_c ** 2))
        history.append(residual)
        if residual < best[0]:
            best = (residual, T.copy(), count)
            stall = 0
        else:
            stall += 1
            if stall >= params.stall_patience:
                stalled = True
                break

        # rows: d r / d [omega, t] for a left-multiplied small motion
        J_g = np.concatenate([np.cross(q, n), n], axis=1)
        J_c = -np.concatenate([np.cross(q, d), d], axis=1)
        J = np.concatenate([sw_g * J_g, sw_c * J_c])
        r = np.concatenate([sw_g * r_g, sw_c * r_c])
        H = J.T @ J
        g = J.T @ r
        xi = -np.linalg.solve(H + 1e-12 * np.trace(H) * np.eye(6), g)
        T = make_transform(xi[:3], xi[3:]) @ T
        if np.linalg.norm(xi) < params.tol:
            converged = True
            break

    if stalled:
        log.debug("colored ICP stalled after %d iterations; returning best pose", it)
        res, T, count = best
    else:
        q = apply_transform(T, source.positions)
        dist, _ = tree.query(q, distance_upper_bound=params.radius)
        count = int(np.isfinite(dist).sum())
        res = history[-1]
    return ICPResult(T, it, res, count, converged, stalled, history)


def colored_icp_multiscale(source: PointCloud, target: PointCloud, init=None, params: ICPParams = ICPParams(),
                           scales=(4.0, 2.0, 1.0)) -> ICPResult:
    """Coarse-to-fine: run with the radius scaled by each factor in turn."""
    T = np.eye(4) if init is None else init
    result = None
    for s in scales:
        p = ICPParams(params.max_iterations, params.radius * s, params.color_weight, params.normal_k,
                      params.tol, params.stall_patience)
        result = colored_icp(source, target, T, p)
        T = result.transform
    return result


# --------------------------------------------------------------------------- cases and recall

@dataclass
class RegistrationCase:
    name: str
    asset: str
    source_time: str
    target_time: str
    overlap: float
    source_index: np.ndarray   # rows of the source-time triplet
    target_index: np.ndarray   # rows of the target-time triplet
    source_positions: np.ndarray  # perturbed, normalized frame
    target_positions: np.ndarray
    perturbation: np.ndarray

    @property
    def ground_truth(self) -> np.ndarray:
        """The transform that undoes the perturbation."""
        return np.linalg.inv(self.perturbation)

    def clouds(self, source_colors: np.ndarray, target_colors: np.ndarray) -> tuple[PointCloud, PointCloud]:
        """Build the pair with per-point colors taken from full-cloud color arrays."""
        return (PointCloud(self.source_positions, source_colors[self.source_index]),
                PointCloud(self.target_positions, target_colors[self.target_index]))


def _random_rotvec(rng, max_deg):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return axis * np.radians(rng.uniform(0.0, max_deg))


def _random_translation(rng, max_t):
    v = rng.normal(size=3)
    return v / np.linalg.norm(v) * rng.uniform(0.0, max_t)


def make_registration_cases(assets: dict, overlaps=(0.9, 0.7, 0.5), seed: int = 0, max_points: int = 5000,
                            max_rotation: float = 15.0, max_translation: float = 0.2) -> list[RegistrationCase]:
    """Build cases from ``{asset: {time: PointCloud}}`` in a shared frame.

    For overlap o, points are ordered along a random horizontal direction;
    the source keeps the lowest (1 + o) / 2 fraction and the target the
    highest (1 + o) / 2, so the shared band is o of the union.
    """
    rng = np.random.default_rng(seed)
    cases = []
    for asset in sorted(assets):
        times = assets[asset]
        if len(times) < 2:
            warnings.warn(f"asset {asset} has fewer than two time variants; skipped")
            continue
        first = next(iter(times.values()))
        center = first.positions.mean(axis=0)
        scale = np.linalg.norm(first.positions - center, axis=1).max()
        scale = scale if scale > 0 else 1.0
        for ts, tt in itertools.combinations(list(times), 2):
            for o in overlaps:
                if not 0.0 < o <= 1.0:
                    raise ValueError(f"overlap must lie in (0, 1], got {o}")
                ang = rng.uniform(0.0, 2 * np.pi)
                u = np.array([np.cos(ang), np.sin(ang), 0.0])
                src = (times[ts].positions - center) / scale
                tgt = (times[tt].positions - center) / scale
                frac = (1.0 + o) / 2.0
                if o >= 1.0:
                    si, ti = np.arange(len(src)), np.arange(len(tgt))
                else:
                    # both cuts come from the union so the shared band is well defined
                    proj = np.concatenate([src @ u, tgt @ u])
                    hi = np.quantile(proj, frac)
                    lo = np.quantile(proj, 1.0 - frac)
                    si = np.flatnonzero(src @ u <= hi)
                    ti = np.flatnonzero(tgt @ u >= lo)
                if len(si) < MIN_POINTS or len(ti) < MIN_POINTS:
                    warnings.warn(f"overlap {o} infeasible for {asset} {ts}/{tt}; case skipped")
                    continue
                if max_points and len(si) > max_points:
                    si = np.sort(rng.choice(si, max_points, replace=False))
                if max_points and len(ti) > max_points:
                    ti = np.sort(rng.choice(ti, max_points, replace=False))
                P = make_transform(_random_rotvec(rng, max_rotation), _random_translation(rng, max_translation))
                cases.append(RegistrationCase(
                    name=f"{asset}/{ts}-{tt}/o{o:g}", asset=asset, source_time=ts, target_time=tt, overlap=float(o),
                    source_index=si, target_index=ti, source_positions=apply_transform(P, src[si]),
                    target_positions=tgt[ti], perturbation=P))
    return cases


def case_success(estimate: np.ndarray, truth: np.ndarray, rot_deg: float = 5.0, trans: float = 0.05) -> bool:
    r, t = transform_error(estimate, truth)
    return r <= rot_deg and t <= trans


def registration_recall(cases, results, rot_deg: float = 5.0, trans: float = 0.05) -> float:
    """Fraction of cases whose estimate is within both thresholds; None counts as failure."""
    if len(cases) != len(results):
        raise ValueError(f"need one result per case ({len(cases)} cases, {len(results)} results)")
    if not cases:
        return 0.0
    hits = sum(res is not None and case_success(res, c.ground_truth, rot_deg, trans) for c, res in zip(cases, results))
    return hits / len(cases)


def register_cases(cases, colors: dict, params: ICPParams = ICPParams()) -> list:
    """Run colored ICP on every case; ``colors[(asset, time)]`` gives full-cloud colors.

    Divergence yields None for that case.
    """
    out = []
    for c in cases:
        src, tgt = c.clouds(colors[(c.asset, c.source_time)], colors[(c.asset, c.target_time)])
        try:
            out.append(colored_icp_multiscale(src, tgt, None, params).transform)
        except RegistrationError as e:
            log.info("%s: %s", c.name, e)
            out.append(None)
    return out
