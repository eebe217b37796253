"""Dense point-cloud generation machinery: view fusion, pseudo-rendering,
projection losses, shape metrics and a small fitting harness."""

from ._validation import ContractViolation, DegenerateMeshError, MeshIndexError, ParseError
from .geometry import (
    CameraIntrinsics,
    RigidTransform,
    ViewMaps,
    camera_to_image,
    compose_effective,
    fixed_cube_viewpoints,
    fuse_views,
    image_to_camera,
    random_rotation,
)
from .mesh import SurfaceSamples, TriangleMesh, densify, icosphere, load_obj, surface_area, unit_cube
from .render_oracle import DepthImage, MaskImage, rasterize, render_dataset
from .pseudo_render import (
    ProjectedPoints,
    SplatConfig,
    WinnerMap,
    full_backward,
    pseudo_render_view,
    splat,
    splat_backward,
)
from .losses import LossWeights, depth_loss, mask_loss, total_loss
from .metrics import NnIndex, ShapeError, build_index, mean_nn_distance, shape_error
from .fit import (
    AdamState,
    DensePointCloudFitter,
    FitConfig,
    FitReport,
    adam_update,
    finetune_stage,
    fit_shape,
    pretrain_stage,
)

__version__ = "0.1.0"
