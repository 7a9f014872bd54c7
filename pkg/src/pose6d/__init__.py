"""Unseen-object 6D pose estimation from reference views.

The package implements a two-stage pipeline: a coarse stage matches a
query crop against a rendered template set and votes per-pixel object
coordinates for a robust PnP solve, and a refinement stage iterates
render-and-compare updates against a reference view.  Everything is
plain numpy and deterministic for a given seed.
"""

from .errors import (DegenerateConfiguration, DimMismatch, EmptyInput,
                     EmptyIntersection, EmptyMask, EmptyRender,
                     EmptySequence, ImageTooSmall, InconsistentBands,
                     InsufficientCorrespondences, KTooLarge, LengthMismatch,
                     NaNGuard, NonPositiveDepth, Pose6DError)
from .geometry import (CameraIntrinsics, Pose, PoseGrid, compose,
                       geodesic_distance, identity_pose, inverse, project,
                       sample_template_poses, unproject)
from .meshes import TriangleMesh, generate_procedural_mesh, load_mesh, save_mesh
from .pnp import RansacConfig, solve_pnp_ransac
from .render import (CropTransform, GeometryMap, ImageBuffer, crop_and_resize,
                     render)

__version__ = "0.1.0"

__all__ = [
    "CameraIntrinsics", "CropTransform", "DegenerateConfiguration",
    "DimMismatch", "EmptyInput", "EmptyIntersection", "EmptyMask",
    "EmptyRender", "EmptySequence", "GeometryMap", "ImageBuffer",
    "ImageTooSmall", "InconsistentBands", "InsufficientCorrespondences",
    "KTooLarge", "LengthMismatch", "NaNGuard", "NonPositiveDepth", "Pose",
    "Pose6DError", "PoseGrid", "RansacConfig", "TriangleMesh", "compose",
    "crop_and_resize", "generate_procedural_mesh", "geodesic_distance",
    "identity_pose", "inverse", "load_mesh", "project", "render",
    "sample_template_poses", "save_mesh", "solve_pnp_ransac", "unproject",
]
