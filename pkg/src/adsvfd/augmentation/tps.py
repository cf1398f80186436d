"""Thin-plate spline maps with a Hessian smoothing penalty."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np


class TpsError(np.linalg.LinAlgError):
    """Raised for singular or rank-deficient fitting systems."""


def kernel(r):
    """``r² log r`` with the continuous extension 0 at ``r = 0``."""
    r = np.asarray(r, dtype=float)
    out = np.zeros_like(r)
    m = r > 0
    out[m] = r[m] ** 2 * np.log(r[m])
    return out


def kernel_hessians(x, centers) -> np.ndarray:
    """Hessians of ``κ(‖x - c‖)`` w.r.t. ``x``, shape ``(len(x), len(centers), 3, 3)``.

    ``∇²κ = κ'' ûûᵀ + (κ'/r)(I - ûûᵀ)`` with ``κ'/r = 2 log r + 1`` and
    ``κ'' = 2 log r + 3``. Both diverge logarithmically at ``r = 0``; such
    entries are set to zero.
    """
    d = np.asarray(x, dtype=float)[:, None, :] - np.asarray(centers, dtype=float)[None, :, :]
    r = np.linalg.norm(d, axis=-1)
    H = np.zeros(r.shape + (3, 3))
    m = r > 0
    u = d[m] / r[m][:, None]
    lr = np.log(r[m])
    uu = u[:, :, None] * u[:, None, :]
    H[m] = ((2 * lr + 3)[:, None, None] * uu
            + (2 * lr + 1)[:, None, None] * (np.eye(3) - uu))
    return H


@dataclass
class TpsMap:
    """``g(x) = Σ_j coefficients[j] κ(‖x - centers[j]‖) [+ affine]``."""

    centers: np.ndarray
    coefficients: np.ndarray
    w_H: float = 0.0
    affine: np.ndarray | None = None  # (4, 3): rows for x, y, z, 1
    condition: float = float("nan")

    def __call__(self, points) -> np.ndarray:
        return tps_apply(self, points)


def tps_apply(tmap: TpsMap, points, chunk: int = 4096) -> np.ndarray:
    P = np.asarray(points, dtype=float).reshape(-1, 3)
    out = np.empty((len(P), 3))
    for s in range(0, len(P), chunk):
        q = P[s:s + chunk]
        r = np.linalg.norm(q[:, None, :] - tmap.centers[None, :, :], axis=-1)
        out[s:s + chunk] = kernel(r) @ tmap.coefficients
        if tmap.affine is not None:
            out[s:s + chunk] += q @ tmap.affine[:3] + tmap.affine[3]
    return out


def tps_fit(source, target, w_H: float = 0.0, affine: bool = False,
            cond_limit: float = 1e13) -> TpsMap:
    """Fit ``g`` minimizing ``Σ‖target_j - g(source_j)‖² + w_H Σ‖H_g(source_j)‖_F²``.

    Args:
        source: ``(n, 3)`` centers (also the evaluation points of both terms).
        target: ``(n, 3)`` target positions.
        w_H: Hessian penalty weight.
        affine: add a linear-plus-constant part whose coefficients are not
            penalized; RBF coefficients then satisfy the usual side
            conditions ``Σ g_j = 0`` and ``Σ g_j x_j = 0``.

    Raises:
        TpsError: duplicate centers or a rank-deficient system.
    """
    X = np.asarray(source, dtype=float).reshape(-1, 3)
    Y = np.asarray(target, dtype=float).reshape(-1, 3)
    n = len(X)
    if len(Y) != n:
        raise ValueError("source and target counts differ")
    if n < 4:
        raise TpsError("need at least 4 centers")
    if len(np.unique(np.round(X, 12), axis=0)) < n:
        raise TpsError("duplicate centers make the system singular")
    if np.linalg.matrix_rank(X - X.mean(0), tol=1e-10 * max(1.0, np.abs(X).max())) < 3:
        raise TpsError("centers are coplanar")
    if w_H < 0:
        raise ValueError("w_H must be non-negative")
    Phi = kernel(np.linalg.norm(X[:, None] - X[None], axis=-1))
    Hp = kernel_hessians(X, X).transpose(0, 2, 3, 1).reshape(9 * n, n)
    Q = np.hstack([X, np.ones((n, 1))])
    if affine:
        # coefficients restricted to the null space of Qᵀ
        Nsp = np.linalg.svd(Q.T)[2][4:].T
        top = np.hstack([Phi @ Nsp, Q])
        bottom = np.hstack([np.sqrt(w_H) * Hp @ Nsp, np.zeros((9 * n, 4))])
    else:
        top, bottom = Phi, np.sqrt(w_H) * Hp
    A = np.vstack([top, bottom]) if w_H > 0 else top
    rhs = np.vstack([Y, np.zeros((9 * n, 3))]) if w_H > 0 else Y
    sv = np.linalg.svd(A, compute_uv=False)
    cond = float(sv[0] / sv[-1]) if sv[-1] > 0 else np.inf
    if cond > cond_limit:
        raise TpsError(f"rank-deficient TPS system (condition estimate {cond:.3e})")
    if cond > 1e10:
        warnings.warn(f"ill-conditioned TPS system (condition {cond:.3e})")
    sol = np.linalg.lstsq(A, rhs, rcond=None)[0]
    if affine:
        coef, aff = Nsp @ sol[:-4], sol[-4:]
    else:
        coef, aff = sol, None
    return TpsMap(X.copy(), coef, float(w_H), aff, cond)


def residual(tmap: TpsMap, source, target) -> float:
    """Root-sum-square misfit at the fitting points."""
    return float(np.linalg.norm(tps_apply(tmap, source) - np.asarray(target, dtype=float)))
