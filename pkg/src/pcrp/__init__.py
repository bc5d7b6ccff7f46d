"""Point cloud retrieval and pose estimation against a pre-aligned gallery."""

from .frpointhop import FrPointHopModel, HopConfig, PointFeatureSet, extract_features, fit_model
from .geometry import RigidTransform, chamfer_distance, normalize_to_unit_sphere, random_rigid_transform
from .registration import (
    PoseEstimate,
    RegistrationConfig,
    estimate_pose,
    icp_baseline,
    register_clouds,
    rotation_error_deg,
)
from .retrieval import GalleryIndex, VladCodebook, build_gallery, compute_vlad, fit_codebook, retrieve

__version__ = "0.1.0"
