"""Synthetic fixtures shared by unit and acceptance tests."""

import numpy as np

from adsvfd.augmentation import axis_rotation
from adsvfd.geometry import WeightedPointCloud, sweep_model, tube_model


def fibonacci_sphere(n):
    """Near-uniform unit-sphere points on a golden-angle spiral."""
    i = np.arange(n) + 0.5
    z = 1 - 2 * i / n
    r = np.sqrt(1 - z * z)
    th = np.pi * (1 + 5 ** 0.5) * i
    return np.stack([r * np.cos(th), r * np.sin(th), z], 1)


def sphere_and_ellipsoid(n=500, axes=(1.2, 1.0, 0.8)):
    """Uniform-weight sphere cloud and its image under ``diag(axes)``, with normals."""
    u = fibonacci_sphere(n)
    a = np.asarray(axes, dtype=float)
    w = np.full(n, 1 / n)
    nrm = u / a
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    return WeightedPointCloud(u, w, u), WeightedPointCloud(u * a, w, nrm)


def coaxial_tubes(r_a=0.1, radii_b=(0.13, 0.09, 0.12), length=1.0):
    """A straight tube and a coaxial tube of varying radius, models and meshes.

    The radius profile of the second tube makes the morph non-affine.
    """
    ma, mb = tube_model(radius=r_a, length=length), tube_model(radii=radii_b, length=length)
    return ma, sweep_model(ma), mb, sweep_model(mb)


def cpd_fixture(seed=0, n=300, angle_deg=35.0, scale=1.3, outliers=0.0, noise=0.0):
    """Source cloud, transformed target and the true ``(R, t, s)``."""
    rng = np.random.default_rng(seed)
    src = rng.standard_normal((n, 3)) * [1.0, 0.6, 0.3]
    R = axis_rotation(rng.standard_normal(3), np.radians(angle_deg))
    t = rng.standard_normal(3)
    tgt = scale * src @ R.T + t
    if noise:
        tgt = tgt + noise * rng.standard_normal(tgt.shape)
    if outliers:
        k = int(round(outliers * n))
        lo, hi = tgt.min(0), tgt.max(0)
        tgt = np.vstack([tgt, rng.uniform(lo, hi, (k, 3))])
    return src, tgt, (R, t, scale)


def cohort_shapes():
    """Three tube models and three ellipsoids, plus a near-spherical template.

    Returns ``(template_mesh, meshes, models)`` where ``models[i]`` is the
    vessel model of ``meshes[i]`` or None for ellipsoids.
    """
    from adsvfd.geometry import ellipsoid_mesh

    tubes = [tube_model(radius=0.14, length=0.7, start=(0, 0, -0.35)),
             tube_model(radius=0.18, length=0.6, start=(0, 0, -0.3)),
             tube_model(radii=[0.18, 0.11], length=0.7, start=(0, 0, -0.35))]
    ells = [ellipsoid_mesh(a) for a in ((0.3, 0.25, 0.35), (0.35, 0.3, 0.25), (0.25, 0.35, 0.3))]
    meshes = [sweep_model(m) for m in tubes] + ells
    return ellipsoid_mesh((0.3, 0.3, 0.32)), meshes, tubes + [None] * 3
