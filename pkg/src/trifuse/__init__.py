"""Three-branch RGB + 3D fusion segmentation: preprocessing, network,
training methodology and road-benchmark evaluation."""

__version__ = "0.1.0"

from .elevation import (
    Calibration,
    ElevationFilterConfig,
    PointCloud,
    dilate,
    filter_points,
    generate_elvdiff,
    normalize_elevation,
    project_points,
    rasterize,
)
from .disparity import DisparityMap, complete_disparity, decode_cityscapes_disparity, to_network_channel
from .net import NetworkConfig, TriFuseNet, count_trainable_parameters
from .schedules import cyclical_lr, poly_lr
from .crossval import CrossValidationPlan, monte_carlo_split
from .training import TrainConfig, kaiming_init, train
from .augment import AugmentConfig, augment
from .metrics import ConfusionMatrix, RoadSweep, evaluate_dataset, miou, road_metrics
from .data import BevConfig, SampleRecord, bev_transform, encode_cityscapes_labels, index_cityscapes, index_kitti_road
