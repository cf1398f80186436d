"""Data attachment measures between point clouds and local distance metrics.

Every measure accepts :class:`~adsvfd.geometry.WeightedPointCloud` objects,
:class:`Cloud` tuples of tensors, or bare ``(M, 3)`` arrays, and returns a
0-d torch tensor. Gradients flow to the point positions; nearest-neighbour
assignments are computed without gradient and held fixed (the usual
subgradient of a min).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import torch

from .geometry import WeightedPointCloud


class Cloud(NamedTuple):
    """Tensor view of a weighted cloud used inside the training loop."""

    points: torch.Tensor
    weights: torch.Tensor | None = None
    normals: torch.Tensor | None = None


class SinkhornConvergenceError(RuntimeError):
    def __init__(self, residual: float, iters: int):
        super().__init__(f"Sinkhorn did not converge in {iters} iterations "
                         f"(final dual residual {residual:.3e})")
        self.residual = residual


@dataclass
class NearestResult:
    """Per-point nearest neighbour index and squared distance."""

    index: np.ndarray
    squared_distance: np.ndarray

    def __len__(self):
        return len(self.index)


@dataclass
class SinkhornConfig:
    epsilon: float = 1e-4
    scaling: float = 0.9
    max_iters: int = 500
    tolerance: float = 1e-9
    strict: bool = True

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if not 0.0 < self.scaling < 1.0:
            raise ValueError("scaling must lie in (0, 1)")


def as_cloud(c, dtype=torch.float64) -> Cloud:
    if isinstance(c, Cloud):
        return c
    if isinstance(c, WeightedPointCloud):
        n = None if c.normals is None else torch.as_tensor(c.normals, dtype=dtype)
        return Cloud(torch.as_tensor(c.points, dtype=dtype),
                     torch.as_tensor(c.weights, dtype=dtype), n)
    if isinstance(c, torch.Tensor):
        return Cloud(c)
    return Cloud(torch.as_tensor(np.asarray(c, dtype=float), dtype=dtype))


def _check(*clouds):
    for c in clouds:
        if c.points.shape[0] == 0:
            raise ValueError("empty cloud")


def _uniform(c: Cloud) -> torch.Tensor:
    n = c.points.shape[0]
    return torch.full((n,), 1.0 / n, dtype=c.points.dtype, device=c.points.device)


def _weights(c: Cloud) -> torch.Tensor:
    return _uniform(c) if c.weights is None else c.weights


def _need_normals(c: Cloud, what: str):
    if c.normals is None:
        raise ValueError(f"{what} requires normals on both clouds")


@torch.no_grad()
def nearest_indices(Y: torch.Tensor, Yp: torch.Tensor, chunk: int = 2048):
    """Exhaustive nearest neighbours of rows of ``Y`` among rows of ``Yp``.

    Distances are evaluated as ``dx^2 + dy^2 + dz^2`` (no expansion trick) so
    results match a scalar brute-force scan; ties resolve to the lowest index.
    """
    idx = torch.empty(Y.shape[0], dtype=torch.long)
    d2 = torch.empty(Y.shape[0], dtype=Y.dtype)
    # keep chunk * |Yp| bounded to about 8M entries
    step = max(1, min(chunk, 8_000_000 // max(1, Yp.shape[0])))
    for s in range(0, Y.shape[0], step):
        diff = Y[s:s + step, None, :] - Yp[None, :, :]
        sq = diff[..., 0] ** 2 + diff[..., 1] ** 2 + diff[..., 2] ** 2
        m, i = sq.min(dim=1)
        idx[s:s + step] = i
        d2[s:s + step] = m
    return idx, d2


def nearest_neighbors(Y, Yp) -> NearestResult:
    """For each point of ``Y`` its closest point in ``Yp``."""
    a, b = as_cloud(Y), as_cloud(Yp)
    _check(a, b)
    idx, d2 = nearest_indices(a.points.detach(), b.points.detach())
    return NearestResult(idx.numpy(), d2.numpy())


def _pointwise(a: Cloud, b: Cloud):
    """Differentiable squared nearest distances both ways, plus the indices."""
    fi, _ = nearest_indices(a.points.detach(), b.points.detach())
    bi, _ = nearest_indices(b.points.detach(), a.points.detach())
    fwd = ((a.points - b.points[fi]) ** 2).sum(-1)
    bwd = ((b.points - a.points[bi]) ** 2).sum(-1)
    return fwd, bwd, fi, bi


def chamfer_terms(Y, Yp):
    """Pointwise forward and backward squared distances (differentiable)."""
    a, b = as_cloud(Y), as_cloud(Yp)
    _check(a, b)
    fwd, bwd, _, _ = _pointwise(a, b)
    return fwd, bwd


def chamfer(Y, Yp) -> torch.Tensor:
    """Mean squared nearest distance from ``Y`` to ``Yp`` plus the reverse."""
    fwd, bwd = chamfer_terms(Y, Yp)
    return fwd.mean() + bwd.mean()


def chamfer_weighted(Y, Yp) -> torch.Tensor:
    """Chamfer distance with each point's term weighted by its cloud weight.

    Weights sum to one per cloud, so uniform weights give :func:`chamfer`.
    """
    a, b = as_cloud(Y), as_cloud(Yp)
    _check(a, b)
    fwd, bwd, _, _ = _pointwise(a, b)
    return (_weights(a) * fwd).sum() + (_weights(b) * bwd).sum()


def chamfer_normals(Y, Yp, w_n: float = 1e-2, weighted: bool = False) -> torch.Tensor:
    """Chamfer distance plus a penalty on misaligned normals of matched points."""
    a, b = as_cloud(Y), as_cloud(Yp)
    _check(a, b)
    _need_normals(a, "chamfer_normals")
    _need_normals(b, "chamfer_normals")
    fwd, bwd, fi, bi = _pointwise(a, b)
    pf = (1.0 - (a.normals * b.normals[fi]).sum(-1)) ** 2
    pb = (1.0 - (b.normals * a.normals[bi]).sum(-1)) ** 2
    if weighted:
        wa, wb = _weights(a), _weights(b)
        return ((wa * fwd).sum() + (wb * bwd).sum()
                + 0.5 * w_n * ((wa * pf).sum() + (wb * pb).sum()))
    return fwd.mean() + bwd.mean() + 0.5 * w_n * (pf.mean() + pb.mean())


def point_to_plane_terms(Y, Yp):
    a, b = as_cloud(Y), as_cloud(Yp)
    _check(a, b)
    _need_normals(a, "chamfer_point_to_plane")
    _need_normals(b, "chamfer_point_to_plane")
    _, _, fi, bi = _pointwise(a, b)
    fwd = (((a.points - b.points[fi]) * a.normals).sum(-1)) ** 2
    bwd = (((a.points[bi] - b.points) * b.normals).sum(-1)) ** 2
    return fwd, bwd


def chamfer_point_to_plane(Y, Yp, weighted: bool = False) -> torch.Tensor:
    """Squared residuals to the nearest neighbour, projected on the own normal."""
    fwd, bwd = point_to_plane_terms(Y, Yp)
    if weighted:
        a, b = as_cloud(Y), as_cloud(Yp)
        return (_weights(a) * fwd).sum() + (_weights(b) * bwd).sum()
    return fwd.mean() + bwd.mean()


# --------------------------------------------------------------------------
# debiased Sinkhorn divergence

def _softmin(eps, C, h):
    # -eps * log sum_j exp(h_j - C_ij / eps)
    return -eps * torch.logsumexp(h[None, :] - C / eps, dim=1)


def _sinkhorn_potentials(x, y, a, b, cfg: SinkhornConfig, eps_list, symmetric=False):
    """Log-domain Sinkhorn with epsilon annealing; returns converged duals."""
    Cxy = ((x[:, None, :] - y[None, :, :]) ** 2).sum(-1)
    Cyx = Cxy.T
    la, lb = a.log(), b.log()
    f = torch.zeros_like(a)
    g = torch.zeros_like(b)
    residual = math.inf
    it = 0
    for level, eps in enumerate(eps_list):
        last = level == len(eps_list) - 1
        for it in range(cfg.max_iters):
            if symmetric:
                f_new = 0.5 * (f + _softmin(eps, Cxy, la + f / eps))
                g_new = f_new
            else:
                f_new = _softmin(eps, Cxy, lb + g / eps)
                g_new = _softmin(eps, Cyx, la + f_new / eps)
            residual = max(float((f_new - f).abs().max()), float((g_new - g).abs().max()))
            f, g = f_new, g_new
            if residual < cfg.tolerance:
                break
            if not last and it >= 0 and residual < max(cfg.tolerance, eps * 1e-3):
                break
        if last and residual >= cfg.tolerance:
            if cfg.strict:
                raise SinkhornConvergenceError(residual, it + 1)
            warnings.warn(f"Sinkhorn stopped at dual residual {residual:.3e}", RuntimeWarning)
    return f, g


def _eps_schedule(x, y, cfg: SinkhornConfig):
    pts = torch.cat([x, y]).detach()
    diam2 = float(((pts.max(0).values - pts.min(0).values) ** 2).sum())
    eps = max(diam2, cfg.epsilon)
    out = []
    while eps > cfg.epsilon:
        out.append(eps)
        eps *= cfg.scaling
    out.append(cfg.epsilon)
    return out


def _ot_eps(x, y, a, b, cfg, eps_list, symmetric=False):
    """Entropic OT value, with one final differentiable extrapolation step."""
    with torch.no_grad():
        f, g = _sinkhorn_potentials(x.detach(), y.detach(), a.detach(), b.detach(),
                                    cfg, eps_list, symmetric)
    eps = eps_list[-1]
    Cxy = ((x[:, None, :] - y[None, :, :]) ** 2).sum(-1)
    # envelope theorem: gradients through one softmin at the fixed point
    if symmetric:
        f = _softmin(eps, Cxy, a.log() + f / eps)
        return 2.0 * (a * f).sum()
    f1 = _softmin(eps, Cxy, b.log() + g / eps)
    g1 = _softmin(eps, Cxy.T, a.log() + f / eps)
    return (a * f1).sum() + (b * g1).sum()


def sinkhorn_divergence(Y, Yp, cfg: SinkhornConfig | None = None,
                        weighted: bool = True) -> torch.Tensor:
    """Debiased entropic OT divergence with squared Euclidean ground cost.

    ``OT(Y, Yp) - OT(Y, Y)/2 - OT(Yp, Yp)/2`` where OT is the entropic cost
    at temperature ``cfg.epsilon``, reached by geometric annealing from the
    squared diameter of the joint cloud. ``weighted=False`` ignores the cloud
    weights and uses uniform masses.
    """
    cfg = cfg or SinkhornConfig()
    a, b = as_cloud(Y), as_cloud(Yp)
    _check(a, b)
    wa = _weights(a) if weighted else _uniform(a)
    wb = _weights(b) if weighted else _uniform(b)
    eps_list = _eps_schedule(a.points, b.points, cfg)
    ot_ab = _ot_eps(a.points, b.points, wa, wb, cfg, eps_list)
    ot_aa = _ot_eps(a.points, a.points, wa, wa, cfg, eps_list, symmetric=True)
    ot_bb = _ot_eps(b.points, b.points, wb, wb, cfg, eps_list, symmetric=True)
    return ot_ab - 0.5 * ot_aa - 0.5 * ot_bb


# --------------------------------------------------------------------------
# diagnostics

def local_distances(mapped, target):
    """Forward (mapped -> target) and backward (target -> mapped) Euclidean
    nearest distances, as numpy arrays."""
    a, b = as_cloud(mapped), as_cloud(target)
    _check(a, b)
    _, f2 = nearest_indices(a.points.detach(), b.points.detach())
    _, b2 = nearest_indices(b.points.detach(), a.points.detach())
    return np.sqrt(f2.numpy()), np.sqrt(b2.numpy())


def summarize(fld, bld) -> dict:
    return {"fld_mean": float(np.mean(fld)), "fld_max": float(np.max(fld)),
            "bld_mean": float(np.mean(bld)), "bld_max": float(np.max(bld))}


MEASURES = ("cd", "cdw", "ncd", "ncdw", "pcd", "pcdw", "sd", "sdw")


def attachment(name: str, Y, Yp, w_n: float = 1e-2,
               sinkhorn: SinkhornConfig | None = None) -> torch.Tensor:
    """Dispatch a data attachment measure by name (case-insensitive)."""
    key = name.lower()
    if key == "cd":
        return chamfer(Y, Yp)
    if key == "cdw":
        return chamfer_weighted(Y, Yp)
    if key in ("ncd", "ncdw"):
        return chamfer_normals(Y, Yp, w_n, weighted=key == "ncdw")
    if key in ("pcd", "pcdw"):
        return chamfer_point_to_plane(Y, Yp, weighted=key == "pcdw")
    if key in ("sd", "sdw"):
        return sinkhorn_divergence(Y, Yp, sinkhorn, weighted=key == "sdw")
    raise ValueError(f"unknown attachment measure {name!r}")
