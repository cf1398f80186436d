"""Dataset augmentation by partial TPS morphing between pairs of vessel shapes."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from ..geometry import TriangleMesh, VesselModel, mesh_to_weighted_cloud
from .correspondences import sample_correspondences
from .quality import mesh_quality
from .rigid import DegenerateFitError, RigidTransform, adhoc_rigid_align, cpd_rigid
from .tps import TpsError, tps_fit

log = logging.getLogger(__name__)


@dataclass
class AugmentConfig:
    M_p: int = 250
    M_c: int = 4
    tau: float = 5e-3
    hull_neighbors: int = 1000
    w_H: float = 1e-6
    affine: bool = True
    outlier_w: float = 0.05
    portions_min: int = 1
    portions_max: int = 2
    match_min: float = 0.5
    match_max: float = 1.0
    anchor_unselected: bool = True
    cpd_points: int = 500
    max_attempts: int = 0  # 0 means 10 * N

    def __post_init__(self):
        if not 0.0 <= self.match_min <= self.match_max <= 1.0:
            raise ValueError("matching factors must satisfy 0 <= min <= max <= 1")
        if not 1 <= self.portions_min <= self.portions_max:
            raise ValueError("portion counts must satisfy 1 <= min <= max")
        if self.w_H < 0 or self.tau < 0:
            raise ValueError("w_H and tau must be non-negative")


@dataclass
class AugmentResult:
    dataset: list
    generated: list
    report: list = field(default_factory=list)
    exhausted: bool = False


REPORT_FIELDS = ("attempt", "alpha", "beta", "L", "portions", "C", "min_sj",
                 "bottom_decile", "accepted", "reason")


def write_report(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow(r)


def _subsample(points, n, rng):
    if len(points) <= n:
        return points
    return points[rng.choice(len(points), n, replace=False)]


def rigid_align_shapes(model_a: VesselModel, mesh_a: TriangleMesh, model_b: VesselModel,
                       mesh_b: TriangleMesh, cfg: AugmentConfig, rng) -> RigidTransform:
    """Anchor-based initialization refined by CPD, mapping shape a onto shape b."""
    pa = _subsample(mesh_to_weighted_cloud(mesh_a).points, cfg.cpd_points, rng)
    pb = _subsample(mesh_to_weighted_cloud(mesh_b).points, cfg.cpd_points, rng)
    init = adhoc_rigid_align(pa, pb, model_a.anchors(), model_b.anchors())
    return cpd_rigid(pa, pb, init, cfg.outlier_w).transform


def morph_pair(model_a: VesselModel, mesh_a: TriangleMesh, model_b: VesselModel,
               portions, factors, cfg: AugmentConfig):
    """TPS-deform ``mesh_a`` so selected portions move a fraction toward ``model_b``.

    Both inputs must already share a frame. Returns ``(mesh, tps_map)``.
    """
    factors = dict(zip(portions, factors))
    names = model_a.names if cfg.anchor_unselected else list(portions)
    corr = sample_correspondences(model_a, model_b, cfg.M_p, cfg.M_c, cfg.tau,
                                  cfg.hull_neighbors, names)
    C = np.array([factors.get(lab, 0.0) for lab in corr.labels])[:, None]
    targets = (1.0 - C) * corr.source + C * corr.target
    tmap = tps_fit(corr.source, targets, cfg.w_H, affine=cfg.affine)
    return TriangleMesh(tmap(mesh_a.vertices), mesh_a.faces.copy()), tmap


def augment_dataset(models: list, meshes: list, N: int, cfg: AugmentConfig | None = None,
                    seed: int = 0) -> AugmentResult:
    """Generate ``N`` new meshes by partial morphing of random shape pairs.

    Each attempt picks ``α ≠ β``, aligns ``α`` onto ``β`` rigidly, picks
    ``L`` portions and matching factors ``C_ℓ``, fits a TPS from the aligned
    landmarks of ``α`` to ``(1 - C_ℓ) X_α + C_ℓ X_β`` and deforms the aligned
    mesh of ``α``. Candidates failing the quality gate are discarded.
    Stops after ``cfg.max_attempts`` attempts (default ``10 N``).
    """
    cfg = cfg or AugmentConfig()
    if len(models) != len(meshes):
        raise ValueError("one vessel model per mesh is required")
    result = AugmentResult(list(meshes), [])
    if N <= 0:
        return result
    if len(models) < 2:
        raise ValueError("augmentation needs at least two shapes")
    rng = np.random.default_rng(seed)
    budget = cfg.max_attempts or 10 * N
    attempt = 0
    while len(result.generated) < N:
        if attempt >= budget:
            result.exhausted = True
            log.warning("augmentation budget exhausted: %d of %d accepted",
                        len(result.generated), N)
            break
        attempt += 1
        a, b = (int(i) for i in rng.choice(len(models), 2, replace=False))
        names = models[a].names
        hi = min(cfg.portions_max, len(names))
        L = int(rng.integers(min(cfg.portions_min, hi), hi + 1))
        portions = [names[i] for i in sorted(rng.choice(len(names), L, replace=False))]
        factors = rng.uniform(cfg.match_min, cfg.match_max, L)
        row = {"attempt": attempt, "alpha": a, "beta": b, "L": L,
               "portions": ";".join(portions),
               "C": ";".join(f"{c:.6f}" for c in factors),
               "min_sj": "", "bottom_decile": "", "accepted": False, "reason": ""}
        try:
            T = rigid_align_shapes(models[a], meshes[a], models[b], meshes[b], cfg, rng)
            model_al = models[a].transformed(T.rotation, T.translation, T.scale)
            mesh_al = TriangleMesh(T.apply(meshes[a].vertices), meshes[a].faces)
            new, _ = morph_pair(model_al, mesh_al, models[b], portions, factors, cfg)
            q = mesh_quality(new, reference=mesh_al)
        except (TpsError, DegenerateFitError, ValueError) as exc:
            row["reason"] = str(exc)
            result.report.append(row)
            continue
        row.update(min_sj=f"{q.min_scaled_jacobian:.6f}",
                   bottom_decile=f"{q.bottom_decile_mean:.6f}", accepted=q.passed,
                   reason="" if q.passed else "quality gate")
        result.report.append(row)
        if q.passed:
            result.generated.append(new)
            result.dataset.append(new)
    return result


def config_dict(cfg: AugmentConfig) -> dict:
    return asdict(cfg)
