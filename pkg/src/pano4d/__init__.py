"""Panoramic space-time reconstruction toolkit.

Aligns affine-ambiguous per-view depth against a shared spherical
geometric field, extends the alignment through time along motion
regions, lifts the result into a timestamped point cloud, and prepares
panoramic training data: camera rigs, depth-warped views, seam-safe
frames and shot-consistent clips.
"""

from .alignment import (
    AlignConfig,
    FirstFrameResult,
    OptimizationError,
    ViewAffine,
    align_first_frame,
)
from .curator import ClipManifest, CuratorConfig, slice_video
from .field import Adam, GeometricField, load_field, save_field
from .geometry import (
    ICOSAHEDRON_COVERAGE_FOV_DEG,
    PerspectiveCamera,
    backproject,
    icosahedron_rig,
    make_direction_grid,
    project,
)
from .lifting import (
    Cloud4D,
    active_points,
    export_cloud,
    import_cloud,
    lift,
    render_pano,
    render_points,
    texture_variation_mask,
)
from .motion import block_matching_flow, per_frame_regions, select_views
from .oracle import DepthPerturbation, OracleScene, perturb_views, render_video
from .seam import alternating_blend, circular_crop, circular_extend, seam_metric
from .spacetime import VideoDepthResult, align_video
from .warping import TrainingRig, build_training_rig, warp_view
from .workspace import RunConfig, Workspace

__version__ = "0.1.0"

__all__ = [
    "AlignConfig",
    "Adam",
    "ClipManifest",
    "Cloud4D",
    "CuratorConfig",
    "DepthPerturbation",
    "FirstFrameResult",
    "GeometricField",
    "ICOSAHEDRON_COVERAGE_FOV_DEG",
    "OptimizationError",
    "OracleScene",
    "PerspectiveCamera",
    "RunConfig",
    "TrainingRig",
    "VideoDepthResult",
    "ViewAffine",
    "Workspace",
    "active_points",
    "align_first_frame",
    "align_video",
    "alternating_blend",
    "backproject",
    "block_matching_flow",
    "build_training_rig",
    "circular_crop",
    "circular_extend",
    "export_cloud",
    "icosahedron_rig",
    "import_cloud",
    "lift",
    "load_field",
    "make_direction_grid",
    "per_frame_regions",
    "perturb_views",
    "project",
    "render_pano",
    "render_points",
    "render_video",
    "save_field",
    "seam_metric",
    "select_views",
    "slice_video",
    "texture_variation_mask",
    "warp_view",
    "__version__",
]
