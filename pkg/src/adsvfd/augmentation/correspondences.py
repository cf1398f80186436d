"""Matched landmark sampling on vessel models and pruning near parent vessels."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import ConvexHull, QhullError, cKDTree

from ..geometry import VesselModel
from .rigid import max_extent


@dataclass
class CorrespondenceSet:
    """Paired landmarks ``source[j] <-> target[j]`` with portion labels."""

    source: np.ndarray
    target: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.source = np.asarray(self.source, dtype=float).reshape(-1, 3)
        self.target = np.asarray(self.target, dtype=float).reshape(-1, 3)
        self.labels = np.asarray(self.labels)
        if not len(self.source) == len(self.target) == len(self.labels):
            raise ValueError("source, target and labels must have equal counts")

    def __len__(self):
        return len(self.source)

    def select(self, mask) -> "CorrespondenceSet":
        return CorrespondenceSet(self.source[mask], self.target[mask], self.labels[mask])

    def portion(self, name) -> "CorrespondenceSet":
        return self.select(self.labels == name)


def portion_samples(model: VesselModel, name: str, M_p: int, M_c: int) -> np.ndarray:
    """Centerline samples followed by their contour samples, ``M_p`` in total.

    ``M_p // (M_c + 1)`` centerline points sit at uniform arclength
    fractions; each carries ``M_c`` contour points at uniform Bishop angles.
    """
    p = model.portion(name)
    n = M_p // (M_c + 1)
    if n < 2:
        raise ValueError("M_p too small for the requested contour count")
    fr = np.linspace(0.0, 1.0, n)
    centers = p.centerline(fr)
    if M_c == 0:
        return centers
    return np.concatenate([centers, p.ring(fr, M_c).reshape(-1, 3)])


def outside_distance(points, hull_points) -> np.ndarray:
    """Max halfspace violation of each point w.r.t. the hull of ``hull_points``.

    Non-positive values mean inside; positive values are a lower bound on
    the Euclidean distance to the hull.
    """
    try:
        eq = ConvexHull(hull_points).equations
    except (QhullError, ValueError):
        return np.full(len(points), np.inf)
    return (points @ eq[:, :3].T + eq[:, 3]).max(axis=1)


def prune_mask(model: VesselModel, name: str, samples: np.ndarray, tau: float,
               k: int = 1000, surface=None) -> np.ndarray:
    """True for samples of a child portion to keep.

    A sample is dropped when it lies inside the convex hull of its ``k``
    nearest parent surface points or outside it by less than ``tau * D_p``
    (``D_p`` the child's maximal extent).
    """
    p = model.portion(name)
    if p.parent is None:
        return np.ones(len(samples), dtype=bool)
    surface = surface if surface is not None else model.surface_points()
    parent = surface[p.parent]
    D_p = max_extent(surface[name])
    kk = min(k, len(parent))
    tree = cKDTree(parent)
    keep = np.ones(len(samples), dtype=bool)
    for j, x in enumerate(samples):
        _, nn = tree.query(x, k=kk)
        keep[j] = outside_distance(x[None], parent[np.atleast_1d(nn)])[0] >= tau * D_p
    return keep


def sample_correspondences(model_a: VesselModel, model_b: VesselModel, M_p: int = 250,
                           M_c: int = 4, tau: float = 5e-3, k: int = 1000,
                           portions=None) -> CorrespondenceSet:
    """Matched landmarks on two models with identical portion topology.

    Pairs whose point is pruned in either model are removed from both.
    """
    topo_a = {p.name: p.parent for p in model_a.portions}
    topo_b = {p.name: p.parent for p in model_b.portions}
    if topo_a != topo_b:
        raise ValueError(f"portion topology mismatch: {topo_a} vs {topo_b}")
    names = list(portions) if portions is not None else model_a.names
    surf_a, surf_b = model_a.surface_points(), model_b.surface_points()
    src, tgt, lab = [], [], []
    for name in names:
        xa = portion_samples(model_a, name, M_p, M_c)
        xb = portion_samples(model_b, name, M_p, M_c)
        keep = (prune_mask(model_a, name, xa, tau, k, surf_a)
                & prune_mask(model_b, name, xb, tau, k, surf_b))
        src.append(xa[keep])
        tgt.append(xb[keep])
        lab += [name] * int(keep.sum())
    return CorrespondenceSet(np.concatenate(src), np.concatenate(tgt), np.array(lab))
