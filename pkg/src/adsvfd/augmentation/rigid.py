"""Rigid alignment with isotropic scale: anchor-based initialization and CPD."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import ConvexHull, QhullError, cKDTree

from ..geometry import WeightedPointCloud


class DegenerateFitError(RuntimeError):
    """Raised when CPD collapses to a degenerate solution."""


@dataclass
class RigidTransform:
    """Similarity ``x -> scale * R x + translation``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale: float = 1.0

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=float).reshape(3)
        self.scale = float(self.scale)
        R = self.rotation
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-9) or np.linalg.det(R) <= 0:
            raise ValueError("rotation must be orthonormal with determinant +1")
        if not self.scale > 0:
            raise ValueError("scale must be positive")

    def apply(self, points) -> np.ndarray:
        return self.scale * np.asarray(points, dtype=float) @ self.rotation.T + self.translation

    def apply_directions(self, vectors) -> np.ndarray:
        return np.asarray(vectors, dtype=float) @ self.rotation.T

    def compose(self, first: "RigidTransform") -> "RigidTransform":
        """``self ∘ first``."""
        return RigidTransform(self.rotation @ first.rotation,
                              self.scale * self.rotation @ first.translation + self.translation,
                              self.scale * first.scale)

    def inverse(self) -> "RigidTransform":
        Rt = self.rotation.T
        return RigidTransform(Rt, -(Rt @ self.translation) / self.scale, 1.0 / self.scale)

    def apply_cloud(self, cloud: WeightedPointCloud) -> WeightedPointCloud:
        n = None if cloud.normals is None else self.apply_directions(cloud.normals)
        return WeightedPointCloud(self.apply(cloud.points), cloud.weights.copy(), n)


def axis_rotation(axis, theta: float) -> np.ndarray:
    """Rodrigues rotation by ``theta`` radians about ``axis``."""
    k = np.asarray(axis, dtype=float)
    k = k / np.linalg.norm(k)
    Kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + math.sin(theta) * Kx + (1.0 - math.cos(theta)) * (Kx @ Kx)


def max_extent(points) -> float:
    """Largest pairwise distance (attained between convex hull vertices)."""
    P = np.asarray(points, dtype=float)
    try:
        P = P[ConvexHull(P).vertices]
    except (QhullError, ValueError):
        pass
    best = 0.0
    for s in range(0, len(P), 512):
        d = ((P[s:s + 512, None, :] - P[None, :, :]) ** 2).sum(-1)
        best = max(best, float(d.max()))
    return math.sqrt(best)


def _points(c):
    return c.points if isinstance(c, WeightedPointCloud) else np.asarray(c, dtype=float)


def _chamfer_np(a, tree_b, b):
    da, _ = tree_b.query(a)
    db, _ = cKDTree(a).query(b)
    return float((da ** 2).mean() + (db ** 2).mean())


def adhoc_rigid_align(source, target, source_anchors, target_anchors,
                      n_grid: int = 360, tol: float = 1e-4) -> RigidTransform:
    """Initial alignment of ``source`` onto ``target``.

    Matches barycenters and maximal extents, moves the source inlet center
    onto the target one, then rotates about the source outlet normal
    through the inlet center by the angle minimizing chamfer distance
    (grid search refined by golden section).

    Args:
        source, target: clouds or ``(N, 3)`` arrays.
        source_anchors, target_anchors: ``(inlet_center, outlet_normal)``.
    """
    if source_anchors is None or target_anchors is None:
        raise ValueError("inlet centers and outlet normals are required for both shapes")
    X, Y = _points(source), _points(target)
    ext_s, ext_t = max_extent(X), max_extent(Y)
    if ext_s <= 0 or ext_t <= 0:
        raise ValueError("zero extent")
    s = ext_t / ext_s
    a_s = np.asarray(source_anchors[0], dtype=float)
    n_s = np.asarray(source_anchors[1], dtype=float)
    a_t = np.asarray(target_anchors[0], dtype=float)
    # barycenter matching followed by inlet matching composes to x -> s (x - a_s) + a_t
    base = s * (X - a_s)
    tree = cKDTree(Y)

    def cost(theta):
        R = axis_rotation(n_s, theta)
        return _chamfer_np(base @ R.T + a_t, tree, Y)

    grid = 2 * math.pi * np.arange(n_grid) / n_grid
    vals = np.array([cost(t) for t in grid])
    k = int(np.argmin(vals))
    best_t, best_v = grid[k], vals[k]
    lo, hi = grid[k] - 2 * math.pi / n_grid, grid[k] + 2 * math.pi / n_grid
    g = (math.sqrt(5) - 1) / 2
    c, d = hi - g * (hi - lo), lo + g * (hi - lo)
    fc, fd = cost(c), cost(d)
    while hi - lo > tol:
        if fc < fd:
            hi, d, fd = d, c, fc
            c = hi - g * (hi - lo)
            fc = cost(c)
        else:
            lo, c, fc = c, d, fd
            d = lo + g * (hi - lo)
            fd = cost(d)
        for t, v in ((c, fc), (d, fd)):
            if v < best_v:
                best_t, best_v = t, v
    R = axis_rotation(n_s, best_t)
    return RigidTransform(R, a_t - s * R @ a_s, s)


@dataclass
class CpdResult:
    transform: RigidTransform
    sigma2_history: list
    iterations: int
    converged: bool


def cpd_rigid(source, target, init: RigidTransform | None = None, outlier_w: float = 0.05,
              max_iter: int = 150, tol: float = 1e-10, collapse: float = 1e-12) -> CpdResult:
    """Rigid coherent point drift with scale, moving ``source`` onto ``target``.

    EM on an isotropic Gaussian mixture centered at the transformed source
    points plus a uniform outlier component of weight ``outlier_w``. Stops
    when the change of σ² drops below ``tol`` or after ``max_iter``
    iterations. If σ² falls below ``collapse`` the fit is exact and the
    current transform is returned.

    Raises:
        DegenerateFitError: on a vanishing scale or non-finite update.
    """
    if not 0.0 <= outlier_w < 1.0:
        raise ValueError("outlier_w must lie in [0, 1)")
    Y, X = _points(source), _points(target)
    if len(X) == 0 or len(Y) == 0:
        raise ValueError("empty cloud")
    N, M, D = len(X), len(Y), 3
    T = init or RigidTransform()
    R, t, s = T.rotation.copy(), T.translation.copy(), T.scale
    TY = T.apply(Y)
    sigma2 = float(((X[:, None, :] - TY[None, :, :]) ** 2).sum() / (D * M * N))
    history = [sigma2]
    xx = (X ** 2).sum(1)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        d2 = np.maximum(xx[:, None] + (TY ** 2).sum(1)[None, :] - 2.0 * X @ TY.T, 0.0)  # N x M
        logk = -d2 / (2.0 * sigma2)
        mx = logk.max(axis=1)
        if outlier_w > 0:
            c = math.log(outlier_w / (1.0 - outlier_w) * M / N) + 1.5 * math.log(2 * math.pi * sigma2)
            mx = np.maximum(mx, c)
        E = np.exp(logk - mx[:, None])
        den = E.sum(axis=1)
        if outlier_w > 0:
            den += np.exp(c - mx)
        P = (E / den[:, None]).T  # M x N
        Np = P.sum()
        if Np <= 0:
            raise DegenerateFitError("all points classified as outliers")
        mu_x = X.T @ P.sum(0) / Np
        mu_y = Y.T @ P.sum(1) / Np
        Xh, Yh = X - mu_x, Y - mu_y
        A = Xh.T @ P.T @ Yh
        U, _, Vt = np.linalg.svd(A)
        C = np.diag([1.0, 1.0, np.linalg.det(U @ Vt)])
        R = U @ C @ Vt
        trAR = float(np.trace(A.T @ R))
        denom = float((P.sum(1) * (Yh ** 2).sum(1)).sum())
        s = trAR / denom
        if not (np.isfinite(s) and s > 1e-12):
            raise DegenerateFitError(f"scale collapsed to {s:.3e}")
        t = mu_x - s * R @ mu_y
        new = (float((P.sum(0) * (Xh ** 2).sum(1)).sum()) - s * trAR) / (Np * D)
        TY = s * Y @ R.T + t
        if not np.isfinite(new):
            raise DegenerateFitError("non-finite variance")
        if new < collapse:
            history.append(max(new, 0.0))
            converged = True
            break
        change = abs(sigma2 - new)
        sigma2 = new
        history.append(sigma2)
        if change < tol:
            converged = True
            break
    # re-project onto SO(3) to clear round-off
    U, _, Vt = np.linalg.svd(R)
    R = U @ np.diag([1.0, 1.0, np.linalg.det(U @ Vt)]) @ Vt
    return CpdResult(RigidTransform(R, t, s), history, it, converged)


def rotation_angle_deg(R_a, R_b) -> float:
    """Geodesic angle between two rotations, in degrees."""
    c = (np.trace(np.asarray(R_a).T @ np.asarray(R_b)) - 1.0) / 2.0
    return math.degrees(math.acos(min(1.0, max(-1.0, c))))
