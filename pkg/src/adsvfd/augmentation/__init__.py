"""Rigid alignment, landmark correspondences, TPS morphing and quality gating."""

from .correspondences import CorrespondenceSet, portion_samples, prune_mask, sample_correspondences
from .pipeline import AugmentConfig, AugmentResult, augment_dataset, morph_pair, write_report
from .quality import (QualityReport, bottom_decile_mean, mesh_quality, passes_gate,
                      scaled_jacobians)
from .rigid import (CpdResult, DegenerateFitError, RigidTransform, adhoc_rigid_align,
                    axis_rotation, cpd_rigid, rotation_angle_deg)
from .tps import TpsError, TpsMap, kernel, kernel_hessians, tps_apply, tps_fit

__all__ = [
    "AugmentConfig", "AugmentResult", "CorrespondenceSet", "CpdResult", "DegenerateFitError",
    "QualityReport", "RigidTransform", "TpsError", "TpsMap", "adhoc_rigid_align",
    "augment_dataset", "axis_rotation", "bottom_decile_mean", "cpd_rigid", "kernel",
    "kernel_hessians", "mesh_quality", "morph_pair", "passes_gate", "portion_samples", "prune_mask",
    "rotation_angle_deg", "sample_correspondences", "scaled_jacobians", "tps_apply",
    "tps_fit", "write_report",
]
