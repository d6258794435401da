"""occkit: voxel occupancy pipeline toolkit.

Grid data model, masked mIoU evaluation, probability ensembling,
detection-box to occupancy conversion, cutout augmentation, and a small
differentiable occupancy head with verified analytic gradients.
"""

__version__ = "0.1.0"

from .augment import CutoutSpec, ImageSet, cutout
from .det2occ import (
    ConversionConfig,
    DetectionBox,
    box_to_points,
    boxes_to_probgrid,
    det_to_probgrid,
    filter_boxes,
    point_in_box,
    voxelize_boxes,
)
from .ensemble import EnsembleWeights, max_prob_fuse, vote_fuse, weighted_average
from .errors import (
    FormatError,
    OcckitError,
    ShapeError,
    SpecMismatchError,
    ValidationError,
)
from .grid import (
    DEFAULT_CLASS_TABLE,
    DEFAULT_GRID_SPEC,
    NUSCENES_CLASS_NAMES,
    ClassTable,
    GridSpec,
    LabelGrid,
    ProbGrid,
    VoxelMask,
    argmax_labels,
)
from .head import (
    BevQueryGrid,
    HeadConfig,
    HeadParams,
    VoxelFeatureVolume,
    backward,
    ce_loss,
    classify,
    dice_loss,
    head_logits,
    init_head_params,
    mlp_decode,
    named_parameters,
    sgd_step,
    total_loss,
    unet3d_forward,
)
from .io import (
    FORMAT_VERSION,
    RunConfig,
    load_run_config,
    read_boxes,
    read_grid,
    read_head_params,
    read_image_set,
    read_tensors,
    write_boxes,
    write_grid,
    write_head_params,
    write_image_set,
    write_tensors,
)
from .metrics import IoUReport, evaluate, evaluate_prob

__all__ = [name for name in dir() if not name.startswith("_")]
