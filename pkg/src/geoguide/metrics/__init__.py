from .fidelity import DISPLAY_SCALE, FidelityReport, conditional_fidelity, fidelity_from_moments, sample_moments
from .morph import (
    MorphRow,
    Standardizer,
    frechet_distance,
    morph_report,
    morph_vector,
    morph_vectors,
    precision_recall,
)
from .pointcloud import (
    PointCloudReport,
    SinkhornConfig,
    divergence_matrix,
    farthest_point_sample,
    label_clouds,
    mmd_cov,
    one_nna,
    pointcloud_metrics,
    sinkhorn_divergence,
)

__all__ = [
    "DISPLAY_SCALE", "FidelityReport", "conditional_fidelity", "fidelity_from_moments", "sample_moments",
    "MorphRow", "Standardizer", "frechet_distance", "morph_report", "morph_vector", "morph_vectors",
    "precision_recall", "PointCloudReport", "SinkhornConfig", "divergence_matrix", "farthest_point_sample",
    "label_clouds", "mmd_cov", "one_nna", "pointcloud_metrics", "sinkhorn_divergence",
]
