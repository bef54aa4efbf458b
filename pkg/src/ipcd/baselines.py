"""Rule-based decompositions: Baseline-A, Baseline-S and a point-graph Retinex.

The Retinex here works on a k-NN graph instead of a pixel grid. Each edge is
labelled by the angle between the RGB chromaticities of its endpoints: a
large angle means an albedo change, a small one a shading change. Log-shade
``s`` is then the least-squares solution of

    sum_shade_edges ((s_i - s_j) - (log L_i - log L_j))^2
  + sum_albedo_edges (s_i - s_j)^2
  + mu * (mean(s) - anchor)^2

with ``L`` the Rec.709 luma and ``anchor`` the log of the 95th-percentile
luma. The gauge term only touches the mean of ``s`` (the Laplacian null
space), so any ``mu > 0`` gives the same minimizer; it is applied per
connected component of the graph.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse
import scipy.sparse.csgraph
import scipy.sparse.linalg

from ipcd.model import Prediction, knn_indices
from ipcd.pcio import PointCloud
from ipcd.projection import LUMA

LOG_FLOOR = 1e-4


class NumericalError(RuntimeError):
    pass


def baseline_a(cloud: PointCloud) -> Prediction:
    return Prediction(albedo=cloud.colors.copy(), shade=np.ones_like(cloud.colors))


def baseline_s(cloud: PointCloud) -> Prediction:
    return Prediction(albedo=np.ones_like(cloud.colors), shade=cloud.colors.copy())


@dataclass
class RetinexSystem:
    edges: np.ndarray        # E x 2, i < j
    albedo_edge: np.ndarray  # E bool
    target: np.ndarray       # E, desired s_i - s_j
    anchor: float
    components: np.ndarray   # N component labels
    n: int

    def incidence(self) -> scipy.sparse.csr_matrix:
        e = len(self.edges)
        rows = np.repeat(np.arange(e), 2)
        cols = self.edges.ravel()
        vals = np.tile([1.0, -1.0], e)
        return scipy.sparse.csr_matrix((vals, (rows, cols)), shape=(e, self.n))


def chromaticity(colors: np.ndarray) -> np.ndarray:
    c = np.maximum(colors, LOG_FLOOR)
    return c / np.linalg.norm(c, axis=1, keepdims=True)


def retinex_system(cloud: PointCloud, k: int = 12, tau: float = 0.1) -> RetinexSystem:
    n = len(cloud)
    if n <= k:
        raise ValueError(f"retinex needs more than k={k} points, got {n}")
    knn = knn_indices(cloud.positions, k)
    pairs = np.stack([np.repeat(np.arange(n), k), knn.ravel()], axis=1)
    pairs = np.unique(np.sort(pairs, axis=1), axis=0)
    log_l = np.log(np.maximum(cloud.colors @ LUMA, LOG_FLOOR))
    chroma = chromaticity(cloud.colors)
    cosang = np.clip(np.einsum("ij,ij->i", chroma[pairs[:, 0]], chroma[pairs[:, 1]]), -1.0, 1.0)
    albedo_edge = np.arccos(cosang) > tau
    target = np.where(albedo_edge, 0.0, log_l[pairs[:, 0]] - log_l[pairs[:, 1]])
    adj = scipy.sparse.coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
    _, comps = scipy.sparse.csgraph.connected_components(adj, directed=False)
    anchor = float(np.log(max(np.percentile(cloud.colors @ LUMA, 95), LOG_FLOOR)))
    return RetinexSystem(pairs, albedo_edge, target, anchor, comps, n)


def solve_log_shade(system: RetinexSystem, rtol: float = 1e-12, maxiter: int | None = None) -> np.ndarray:
    """Conjugate gradient on the graph Laplacian, then per-component gauge shift."""
    D = system.incidence()
    lap = (D.T @ D).tocsr()
    rhs = D.T @ system.target
    deg = lap.diagonal()
    precond = scipy.sparse.diags(1.0 / np.where(deg > 0, deg, 1.0))
    s, info = scipy.sparse.linalg.cg(lap, rhs, rtol=rtol, atol=0.0, M=precond,
                                     maxiter=maxiter or 20 * system.n)
    if info != 0:
        res = np.linalg.norm(lap @ s - rhs) / max(np.linalg.norm(rhs), 1e-300)
        raise NumericalError(f"conjugate gradient did not converge (info={info}, relative residual {res:.3e}, "
                             f"degree range {deg.min():.0f}..{deg.max():.0f})")
    comps = system.components
    means = np.bincount(comps, weights=s) / np.bincount(comps)
    return s - means[comps] + system.anchor


def retinex_points(cloud: PointCloud, k: int = 12, tau: float = 0.1, mu: float = 1e-3) -> Prediction:
    if mu <= 0:
        raise ValueError("gauge weight mu must be positive")
    system = retinex_system(cloud, k, tau)
    s = solve_log_shade(system)
    shade_gray = np.minimum(np.exp(s), 1.0)
    shade = np.repeat(shade_gray[:, None], 3, axis=1)
    albedo = np.clip(cloud.colors / shade, 0.0, 1.0)
    return Prediction(albedo=albedo, shade=shade)
