"""Latent code statistics, sampling, interpolation and shape generation."""

from __future__ import annotations

import csv
import html
from dataclasses import dataclass

import numpy as np
import torch

from .flow import integrate_backward_modified
from .geometry import WeightedPointCloud
from .network import reshape_code


@dataclass
class CodeMatrix:
    """Training codes as rows, with unique shape ids."""

    codes: np.ndarray
    ids: list

    def __post_init__(self):
        self.codes = np.atleast_2d(np.asarray(self.codes, dtype=float))
        self.ids = [str(i) for i in self.ids]
        if len(self.ids) != len(self.codes):
            raise ValueError("one id per code row is required")
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("shape ids must be unique")

    def __len__(self):
        return len(self.codes)

    def row(self, shape_id) -> np.ndarray:
        return self.codes[self.ids.index(str(shape_id))]


def _as_matrix(codes) -> np.ndarray:
    if isinstance(codes, CodeMatrix):
        return codes.codes
    if torch.is_tensor(codes):
        codes = codes.detach().cpu().numpy()
    return np.atleast_2d(np.asarray(codes, dtype=float))


def empirical_covariance(codes) -> np.ndarray:
    """Unbiased covariance ``Σ (z - z̄)(z - z̄)ᵀ / (N_s - 1)``."""
    Z = _as_matrix(codes)
    if len(Z) < 2:
        raise ValueError("covariance needs at least two codes")
    D = Z - Z.mean(axis=0)
    C = D.T @ D / (len(Z) - 1)
    return 0.5 * (C + C.T)


def sample_codes(cov, n: int, seed: int = 0, floor_tol: float = 1e-8) -> np.ndarray:
    """Draw ``n`` codes from ``N(0, cov)``.

    Negative eigenvalues above ``-floor_tol * max(1, λ_max)`` are set to zero.

    Raises:
        ValueError: if ``cov`` is not symmetric or is indefinite beyond the floor.
    """
    cov = np.asarray(cov, dtype=float)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise ValueError("covariance must be square")
    if not np.allclose(cov, cov.T, atol=1e-10):
        raise ValueError("covariance must be symmetric")
    lam, V = np.linalg.eigh(cov)
    scale = max(1.0, float(np.abs(lam).max(initial=0.0)))
    if lam.min(initial=0.0) < -floor_tol * scale:
        raise ValueError(f"covariance not positive semidefinite (eigenvalue {lam.min():.3e})")
    L = V * np.sqrt(np.clip(lam, 0.0, None))
    rng = np.random.default_rng(seed)
    return rng.standard_normal((n, len(lam))) @ L.T


def interpolate_codes(z_a, z_b, t: float) -> np.ndarray:
    """``(1 - t) z_a + t z_b``."""
    z_a, z_b = np.asarray(z_a, dtype=float), np.asarray(z_b, dtype=float)
    if z_a.shape != z_b.shape:
        raise ValueError(f"dimension mismatch: {z_a.shape} vs {z_b.shape}")
    return (1.0 - t) * z_a + t * z_b


@dataclass
class PcaResult:
    projections: np.ndarray
    explained_variance: np.ndarray
    components: np.ndarray
    mean: np.ndarray

    def project(self, codes) -> np.ndarray:
        return (_as_matrix(codes) - self.mean) @ self.components.T


def pca_project(codes, dims: int = 2) -> PcaResult:
    """Project centered codes on their top ``dims`` principal directions.

    Each component is signed so that its largest-magnitude loading is
    positive. Explained variances use the unbiased divisor.
    """
    Z = _as_matrix(codes)
    if len(Z) < max(dims, 2):
        raise ValueError(f"need at least {max(dims, 2)} codes for {dims} components")
    mean = Z.mean(axis=0)
    U, S, Vt = np.linalg.svd(Z - mean, full_matrices=False)
    comps = Vt[:dims].copy()
    var = S ** 2 / (len(Z) - 1)
    if len(var) < dims:
        pad = dims - len(var)
        var = np.concatenate([var, np.zeros(pad)])
        comps = np.vstack([comps, np.zeros((pad, Z.shape[1]))])
    for c in comps:
        k = np.argmax(np.abs(c))
        if c[k] < 0:
            c *= -1
    return PcaResult((Z - mean) @ comps.T, var[:dims], comps, mean)


def generate_shape(code, template: WeightedPointCloud, net, K: int = 10) -> WeightedPointCloud:
    """Deform the template by the inverse map of ``code``; weights are copied."""
    dtype = net.dtype
    z = torch.as_tensor(np.asarray(code, dtype=float), dtype=dtype)
    grid = reshape_code(z, net.arch.g_z)
    with torch.no_grad():
        res = integrate_backward_modified(torch.as_tensor(template.points, dtype=dtype),
                                          grid, net, K)
    return WeightedPointCloud(res.states[0].double().numpy(), template.weights.copy())


# --------------------------------------------------------------------------
# scatter output

def write_scatter_csv(path, ids, points, kinds) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "kind", "pc1", "pc2"])
        for i, p, k in zip(ids, points, kinds):
            w.writerow([i, k, repr(float(p[0])), repr(float(p[1]))])


def write_scatter_svg(path, points, kinds, labels=None, size: int = 480) -> None:
    """Minimal standalone SVG scatter: training codes as dots, samples as crosses."""
    P = np.asarray(points, dtype=float).reshape(-1, 2)
    pad = 40
    lo = P.min(axis=0) if len(P) else np.zeros(2)
    hi = P.max(axis=0) if len(P) else np.ones(2)
    span = np.where(hi - lo > 0, hi - lo, 1.0)

    def xy(p):
        u = pad + (p - lo) / span * (size - 2 * pad)
        return u[0], size - u[1]

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
           f'viewBox="0 0 {size} {size}">',
           f'<rect width="{size}" height="{size}" fill="white"/>',
           f'<line x1="{pad}" y1="{size - pad}" x2="{size - pad}" y2="{size - pad}" stroke="black"/>',
           f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{size - pad}" stroke="black"/>',
           f'<text x="{size / 2}" y="{size - 8}" text-anchor="middle" font-size="12">PC1</text>',
           f'<text x="12" y="{size / 2}" font-size="12" transform="rotate(-90 12 {size / 2})">PC2</text>']
    for j, (p, k) in enumerate(zip(P, kinds)):
        x, y = xy(p)
        title = f"<title>{html.escape(str(labels[j]))}</title>" if labels is not None else ""
        if k == "train":
            out.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="4" fill="steelblue">{title}</circle>')
        else:
            out.append(f'<g stroke="crimson" stroke-width="2">{title}'
                       f'<line x1="{x - 4:.2f}" y1="{y - 4:.2f}" x2="{x + 4:.2f}" y2="{y + 4:.2f}"/>'
                       f'<line x1="{x - 4:.2f}" y1="{y + 4:.2f}" x2="{x + 4:.2f}" y2="{y - 4:.2f}"/></g>')
    out.append("</svg>")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(out) + "\n")
