"""Scaled-Jacobian mesh quality gate."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..geometry import TriangleMesh

MIN_THRESHOLD = 0.0
DECILE_THRESHOLD = 0.1


@dataclass
class QualityReport:
    min_scaled_jacobian: float
    bottom_decile_mean: float
    passed: bool
    per_face: np.ndarray


def scaled_jacobians(vertices, faces, reference_normals=None) -> np.ndarray:
    """Per-triangle ``|e₁ × e₂|`` over the product of the two longest edges.

    With ``reference_normals`` the value is negated for triangles whose
    normal points against the reference (inverted elements).
    """
    v = np.asarray(vertices, dtype=float)[np.asarray(faces)]
    e = np.stack([v[:, 1] - v[:, 0], v[:, 2] - v[:, 1], v[:, 0] - v[:, 2]], axis=1)
    lengths = np.sort(np.linalg.norm(e, axis=-1), axis=1)
    cross = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
    denom = lengths[:, 2] * lengths[:, 1]
    sj = np.zeros(len(v))
    ok = denom > 0
    sj[ok] = np.linalg.norm(cross[ok], axis=1) / denom[ok]
    if reference_normals is not None:
        sign = np.sign((cross * np.asarray(reference_normals, dtype=float)).sum(1))
        sj = np.where(sign < 0, -sj, sj)
    return sj


def bottom_decile_mean(values) -> float:
    """Mean of the smallest ``ceil(10%)`` values."""
    v = np.sort(np.asarray(values, dtype=float))
    k = max(1, math.ceil(0.1 * len(v)))
    return float(v[:k].mean())


def passes_gate(min_sj: float, decile_mean: float) -> bool:
    """Strict thresholds: minimum above 0 and bottom-decile mean above 0.1."""
    return bool(min_sj > MIN_THRESHOLD and decile_mean > DECILE_THRESHOLD)


def mesh_quality(mesh: TriangleMesh, reference: TriangleMesh | None = None) -> QualityReport:
    """Gate: every scaled Jacobian > 0 and bottom-decile mean > 0.1.

    ``reference`` is the undeformed mesh with the same connectivity; when
    given, inverted triangles count as negative.
    """
    if len(mesh.faces) == 0:
        raise ValueError("empty mesh")
    ref = None
    if reference is not None:
        rv = reference.vertices[reference.faces]
        ref = np.cross(rv[:, 1] - rv[:, 0], rv[:, 2] - rv[:, 0])
    sj = scaled_jacobians(mesh.vertices, mesh.faces, ref)
    mn, dec = float(sj.min()), bottom_decile_mean(sj)
    return QualityReport(mn, dec, passes_gate(mn, dec), sj)
