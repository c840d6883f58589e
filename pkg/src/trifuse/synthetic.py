"""Deterministic synthetic mini-datasets in the real directory layouts.

Desk-scale stand-ins for the two supported datasets: a straight road on
a flat ground plane, a LiDAR-like point grid, and color-coded ground
truth, all generated from one seed. Useful for smoke runs, demos and the
test suite; nothing here is meant to resemble real imagery.
"""

from pathlib import Path

import numpy as np

from .data import imwrite
from .elevation import Calibration, PointCloud, save_kitti_calib, save_velodyne

CAMERA_HEIGHT = 1.65
ROAD_HALF_WIDTH = 3.0
ROAD_X_RANGE = (5.0, 40.0)
VALID_X_RANGE = (4.0, 45.0)
VALID_HALF_WIDTH = 7.5


def mini_calibration(image_size):
    """KITTI-style calibration: LiDAR x-forward frame into a pinhole camera."""
    width, height = image_size
    f = 100.0 * width / 192.0
    cx, cy = width / 2.0, height * 0.375
    p = np.array([[f, 0.0, cx, 0.0], [0.0, f, cy, 0.0], [0.0, 0.0, 1.0, 0.0]])
    r_rect = np.eye(4)
    t = np.zeros((4, 4))
    t[0, 1] = -1.0  # x_cam = -y_lidar
    t[1, 2] = -1.0  # y_cam = -z_lidar
    t[2, 0] = 1.0   # z_cam =  x_lidar
    t[3, 3] = 1.0
    return Calibration(p, r_rect, t)


def _ground_geometry(image_size, calib):
    """Per-pixel forward/lateral ground coordinates (NaN above horizon)."""
    width, height = image_size
    f, cx, cy = calib.p[0, 0], calib.p[0, 2], calib.p[1, 2]
    u = np.arange(width)[None, :] + 0.0
    v = np.arange(height)[:, None] + 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        forward = np.where(v > cy + 1.0, f * CAMERA_HEIGHT / (v - cy), np.nan)
        lateral = -(u - cx) * forward / f  # y_lidar, left positive
    return np.broadcast_to(forward, (height, width)), lateral


def _frame_masks(image_size, calib, road_offset):
    forward, lateral = _ground_geometry(image_size, calib)
    with np.errstate(invalid="ignore"):
        valid = (
            (forward >= VALID_X_RANGE[0]) & (forward <= VALID_X_RANGE[1])
            & (np.abs(lateral - road_offset) <= VALID_HALF_WIDTH)
        )
        road = (
            valid
            & (forward >= ROAD_X_RANGE[0]) & (forward <= ROAD_X_RANGE[1])
            & (np.abs(lateral - road_offset) <= ROAD_HALF_WIDTH)
        )
    return road, valid


def _render_rgb(image_size, road, valid, rng):
    width, height = image_size
    img = np.zeros((height, width, 3), dtype=np.float64)
    img[:] = (135.0, 170.0, 230.0)                      # sky
    ground = valid | (np.arange(height)[:, None] > height * 0.45) * np.ones(width, bool)
    img[ground] = (70.0, 125.0, 70.0)                   # off-road ground
    img[road] = (105.0, 105.0, 110.0)                   # asphalt
    img += rng.normal(0.0, 6.0, img.shape)
    return np.clip(img, 0, 255).astype(np.uint8)


def _frame_cloud(road_offset, rng):
    xs = np.arange(ROAD_X_RANGE[0], ROAD_X_RANGE[1], 0.5)
    ys = np.arange(-9.0, 9.0, 0.25)
    xg, yg = np.meshgrid(xs, ys)
    ground = np.column_stack(
        [
            xg.reshape(-1),
            (yg + road_offset).reshape(-1),
            rng.normal(-CAMERA_HEIGHT, 0.02, xg.size),
        ]
    )
    poles = []
    for px, py in ((12.0, road_offset + 5.0), (20.0, road_offset - 5.0), (30.0, road_offset + 5.5)):
        zs = np.arange(-CAMERA_HEIGHT, 1.2, 0.1)
        poles.append(np.column_stack([np.full_like(zs, px), np.full_like(zs, py), zs]))
    xyz = np.vstack([ground] + poles)
    return PointCloud(xyz, rng.random(xyz.shape[0]))


def make_mini_kitti(root, frames=5, image_size=(192, 64), seed=0):
    """Write a KITTI-road-layout tree of synthetic frames; returns the ids."""
    root = Path(root)
    rng = np.random.default_rng(seed)
    calib = mini_calibration(image_size)
    categories = ["um", "um", "umm", "umm", "uu"]
    offsets = [0.0, 1.5, -1.5, 0.8, -0.8]
    counters = {}
    ids = []
    for i in range(frames):
        category = categories[i % len(categories)]
        offset = offsets[i % len(offsets)]
        number = counters.get(category, 0)
        counters[category] = number + 1
        frame = f"{category}_{number:06d}"
        ids.append(frame)
        road, valid = _frame_masks(image_size, calib, offset)
        rgb = _render_rgb(image_size, road, valid, rng)
        gt = np.zeros(rgb.shape, dtype=np.uint8)
        gt[valid, 0] = 255
        gt[road, 2] = 255
        imwrite(root / "training" / "image_2" / f"{frame}.png", rgb)
        imwrite(root / "training" / "gt_image_2" / f"{category}_road_{number:06d}.png", gt)
        (root / "training" / "calib").mkdir(parents=True, exist_ok=True)
        save_kitti_calib(root / "training" / "calib" / f"{frame}.txt", calib)
        (root / "training" / "velodyne").mkdir(parents=True, exist_ok=True)
        save_velodyne(root / "training" / "velodyne" / f"{frame}.bin", _frame_cloud(offset, rng))
    return ids


def make_mini_cityscapes(root, cities=("aachen", "bochum"), frames_per_city=2,
                         image_size=(128, 64), seed=0):
    """Write a Cityscapes-layout tree with 16-bit disparity and raw labels."""
    root = Path(root)
    rng = np.random.default_rng(seed)
    width, height = image_size
    ids = []
    for city in cities:
        for i in range(frames_per_city):
            base = f"{city}_{i:06d}_{19:06d}"
            ids.append(base)
            rgb = rng.integers(0, 255, (height, width, 3), dtype=np.uint8)
            # plausible storage values: zeros (invalid) plus smooth positives
            disp = (rng.random((height, width)) * 20000).astype(np.uint16)
            disp[rng.random((height, width)) < 0.3] = 0
            label = np.full((height, width), 23, dtype=np.uint8)  # sky
            label[height // 2:, :] = 7                            # road
            label[height // 2:, : width // 4] = 8                 # sidewalk
            label[: height // 4, : width // 8] = 0                # unlabeled
            imwrite(root / "leftImg8bit" / "train" / city / f"{base}_leftImg8bit.png", rgb)
            imwrite(root / "disparity" / "train" / city / f"{base}_disparity.png", disp)
            imwrite(root / "gtFine" / "train" / city / f"{base}_gtFine_labelIds.png", label)
    return ids
