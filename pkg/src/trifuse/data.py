"""Dataset ingestion: KITTI road and Cityscapes fine layouts, label
encodings and the bird's-eye-view reprojection of the road plane."""

import json
import importlib.resources
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import cv2
import numpy as np


class DatasetIndexError(RuntimeError):
    """A frame is missing one of its companion files."""


@dataclass(frozen=True)
class SampleRecord:
    id: str
    rgb_path: Path
    threed_path: Path | None
    label_path: Path | None
    calib_path: Path | None
    category: str  # um / umm / uu / cityscapes


def imread_rgb(path):
    img = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if img is None:
        raise FileNotFoundError(f"unreadable image: {path}")
    return cv2.cvtColor(img, cv2.COLOR_BGR2RGB)


def imread_unchanged(path):
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise FileNotFoundError(f"unreadable image: {path}")
    return img


def imwrite(path, img):
    img = np.asarray(img)
    if img.ndim == 3:
        img = cv2.cvtColor(img, cv2.COLOR_RGB2BGR)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), img):
        raise IOError(f"failed to write {path}")


def index_kitti_road(root, split="training", need_calib=True, need_velodyne=True):
    """One record per frame of the road layout, lexicographic order.

    Expects {split}/{image_2,gt_image_2,calib,velodyne}; the testing
    split carries no ground truth. The frame category (um/umm/uu) comes
    from the filename prefix. A frame missing a companion file raises
    DatasetIndexError naming it. The need_* switches cover derived trees
    (e.g. BEV caches) that carry no calibration or point clouds.
    """
    root = Path(root)
    image_dir = root / split / "image_2"
    if not image_dir.is_dir():
        return []
    records = []
    for rgb_path in sorted(image_dir.glob("*.png")):
        frame = rgb_path.stem
        category, _, number = frame.partition("_")
        if category not in ("um", "umm", "uu"):
            raise DatasetIndexError(f"unrecognized frame name {frame!r}")
        calib = root / split / "calib" / f"{frame}.txt"
        velo = root / split / "velodyne" / f"{frame}.bin"
        gt = root / split / "gt_image_2" / f"{category}_road_{number}.png"
        missing = []
        if need_calib and not calib.exists():
            missing.append(calib.name)
        if need_velodyne and not velo.exists():
            missing.append(velo.name)
        has_gt = split == "training"
        if has_gt and not gt.exists():
            missing.append(gt.name)
        if missing:
            raise DatasetIndexError(f"frame {frame}: missing {', '.join(missing)}")
        records.append(
            SampleRecord(
                id=frame,
                rgb_path=rgb_path,
                threed_path=velo if need_velodyne else None,
                label_path=gt if has_gt else None,
                calib_path=calib if need_calib else None,
                category=category,
            )
        )
    return records


def index_cityscapes(root, split, cities=None):
    """Pair left images with disparity maps and fine labels per frame."""
    root = Path(root)
    img_root = root / "leftImg8bit" / split
    if not img_root.is_dir():
        return []
    records = []
    for city_dir in sorted(p for p in img_root.iterdir() if p.is_dir()):
        if cities is not None and city_dir.name not in cities:
            continue
        for rgb_path in sorted(city_dir.glob("*_leftImg8bit.png")):
            base = rgb_path.name[: -len("_leftImg8bit.png")]
            disp = root / "disparity" / split / city_dir.name / f"{base}_disparity.png"
            label = root / "gtFine" / split / city_dir.name / f"{base}_gtFine_labelIds.png"
            missing = [p.name for p in (disp, label) if not p.exists()]
            if missing:
                raise DatasetIndexError(f"frame {base}: missing {', '.join(missing)}")
            records.append(
                SampleRecord(
                    id=base,
                    rgb_path=rgb_path,
                    threed_path=disp,
                    label_path=label,
                    calib_path=None,
                    category="cityscapes",
                )
            )
    return records


@lru_cache(maxsize=1)
def load_label_table():
    """The bundled, versioned id -> train-id table."""
    text = importlib.resources.files("trifuse").joinpath("cityscapes_labels.json").read_text()
    return json.loads(text)


@lru_cache(maxsize=1)
def _label_lut():
    table = load_label_table()
    lut = np.full(256, -1, dtype=np.int32)
    for entry in table["labels"]:
        if entry["id"] >= 0:
            lut[entry["id"]] = entry["train_id"]
    lut.setflags(write=False)
    return lut


def encode_cityscapes_labels(raw):
    """Official id -> train id; non-training classes map to 255."""
    raw = np.asarray(raw)
    lut = _label_lut()
    known = lut >= 0
    values = raw.astype(np.int64)
    bad = (values < 0) | (values >= 256) | ~known[np.clip(values, 0, 255)]
    if bad.any():
        raise ValueError(f"unknown raw label id(s): {sorted(np.unique(values[bad]).tolist())[:10]}")
    return lut[values].astype(np.uint8)


def train_id_names():
    """Names of the 19 training classes, indexed by train id."""
    table = load_label_table()
    names = {}
    for entry in table["labels"]:
        if entry["train_id"] != table["ignore_train_id"]:
            names[entry["train_id"]] = entry["name"]
    return [names[i] for i in sorted(names)]


def kitti_gt_to_binary(gt_image):
    """Road/valid masks from the official color-coded ground truth.

    Road pixels have the blue channel set; the red channel marks the
    valid evaluation area.
    """
    gt_image = np.asarray(gt_image)
    if gt_image.ndim != 3 or gt_image.shape[2] != 3:
        raise ValueError(f"expected a 3-channel gt image, got shape {gt_image.shape}")
    road = gt_image[:, :, 2] > 0
    valid = gt_image[:, :, 0] > 0
    return road, valid


@dataclass(frozen=True)
class BevConfig:
    """Metric window of the road plane mapped onto the BEV raster.

    Rows span the longitudinal range (row 0 farthest), columns the
    lateral range (left to right); the ground plane sits camera_height
    meters below the rectified camera origin.
    """

    out_width: int = 400
    out_height: int = 800
    long_range: tuple = (6.0, 46.0)
    lat_range: tuple = (-10.0, 10.0)
    camera_height: float = 1.65

    def __post_init__(self):
        if self.out_width <= 0 or self.out_height <= 0:
            raise ValueError("output dims must be positive")
        if not self.long_range[0] < self.long_range[1]:
            raise ValueError("long_range must satisfy min < max")
        if not self.lat_range[0] < self.lat_range[1]:
            raise ValueError("lat_range must satisfy min < max")

    def tag(self):
        import hashlib

        doc = json.dumps(
            [self.out_width, self.out_height, self.long_range, self.lat_range, self.camera_height]
        )
        return hashlib.sha1(doc.encode()).hexdigest()[:8]


def _bev_source_coords(calib, cfg):
    """Source-image (u, v) sample position for every BEV pixel."""
    h, w = cfg.out_height, cfg.out_width
    near, far = cfg.long_range
    left, right = cfg.lat_range
    rows = np.arange(h) + 0.5
    cols = np.arange(w) + 0.5
    z_cam = far - rows * (far - near) / h          # row 0 farthest
    x_cam = left + cols * (right - left) / w
    xg, zg = np.meshgrid(x_cam, z_cam)
    p = calib.p
    # homography columns for the ground plane y = camera_height
    hmat = np.column_stack([p[:, 0], p[:, 2], p[:, 1] * cfg.camera_height + p[:, 3]])
    if abs(np.linalg.det(hmat)) < 1e-12 * max(1.0, np.abs(hmat).max()) ** 3:
        raise ValueError("degenerate ground-plane homography")
    denom = hmat[2, 0] * xg + hmat[2, 1] * zg + hmat[2, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = (hmat[0, 0] * xg + hmat[0, 1] * zg + hmat[0, 2]) / denom
        v = (hmat[1, 0] * xg + hmat[1, 1] * zg + hmat[1, 2]) / denom
    behind = denom <= 0
    u[behind] = -1.0
    v[behind] = -1.0
    return u.astype(np.float32), v.astype(np.float32)


def bev_transform(img, calib, cfg=None, interpolation="bilinear"):
    """Inverse-perspective map of an image onto the road plane.

    Every BEV pixel back-projects to a metric ground point, which is
    projected through the calibration and sampled from the source image;
    pixels outside the visible footprint (bev_valid_mask) are exactly 0.
    Labels must use nearest interpolation.
    """
    cfg = cfg or BevConfig()
    img = np.asarray(img)
    h, w = img.shape[:2]
    u, v = _bev_source_coords(calib, cfg)
    flags = {"bilinear": cv2.INTER_LINEAR, "nearest": cv2.INTER_NEAREST}[interpolation]
    src = img
    cast_back = None
    if src.dtype not in (np.uint8, np.uint16, np.float32):
        cast_back = src.dtype
        src = src.astype(np.float32)
    out = cv2.remap(src, u, v, flags, borderMode=cv2.BORDER_CONSTANT, borderValue=0)
    visible = (u >= 0) & (u <= w - 1) & (v >= 0) & (v <= h - 1)
    out[~visible] = 0
    if cast_back is not None:
        out = out.astype(cast_back)
    return out


def bev_valid_mask(calib, cfg, src_dims):
    """BEV pixels whose ground point is visible in the source image.

    Conservative: the sample position must sit fully inside the pixel
    grid, so interpolation never mixes in the zero border.
    """
    cfg = cfg or BevConfig()
    width, height = src_dims
    u, v = _bev_source_coords(calib, cfg)
    return (u >= 0) & (u <= width - 1) & (v >= 0) & (v <= height - 1)


def _unit_scale(img):
    """Stored integer channel back to float32 in [0, 1]."""
    if img.dtype == np.uint16:
        return img.astype(np.float32) / 65535.0
    return img.astype(np.float32) / 255.0


def resize_sample(rgb, threed, label, size_wh):
    """Bilinear for the image planes, nearest for labels."""
    w, h = size_wh
    rgb = cv2.resize(rgb, (w, h), interpolation=cv2.INTER_LINEAR)
    threed = cv2.resize(threed.astype(np.float32), (w, h), interpolation=cv2.INTER_LINEAR)
    if label is not None:
        label = cv2.resize(label.astype(np.float32), (w, h),
                           interpolation=cv2.INTER_NEAREST).astype(np.int64)
    return rgb, threed, label


class RoadSamples:
    """Lazy (rgb, threed, label) sequence over KITTI road records.

    The 3D channel comes from a preprocessed elevation-image directory
    when given, otherwise it is generated from the velodyne file on the
    fly. Labels are road=1 / other=0 with 255 outside the valid area.
    """

    def __init__(self, records, threed_dir=None, elevation_cfg=None, resize=None,
                 ignore_index=255):
        from .elevation import ElevationFilterConfig

        self.records = list(records)
        self.threed_dir = Path(threed_dir) if threed_dir else None
        self.elevation_cfg = elevation_cfg or ElevationFilterConfig()
        self.resize = resize
        self.ignore_index = ignore_index

    def __len__(self):
        return len(self.records)

    def load_threed(self, record, image_dims):
        from .elevation import generate_elvdiff, load_kitti_calib, load_velodyne

        if self.threed_dir is not None:
            path = self.threed_dir / f"{record.id}.png"
            return _unit_scale(imread_unchanged(path))
        cloud = load_velodyne(record.threed_path)
        calib = load_kitti_calib(record.calib_path)
        return generate_elvdiff(cloud, calib, self.elevation_cfg, image_dims).astype(np.float32) / 255.0

    def __getitem__(self, i):
        record = self.records[i]
        rgb = imread_rgb(record.rgb_path)
        h, w = rgb.shape[:2]
        threed = self.load_threed(record, (w, h))
        label = None
        if record.label_path is not None:
            road, valid = kitti_gt_to_binary(imread_rgb(record.label_path))
            label = road.astype(np.int64)
            label[~valid] = self.ignore_index
        if self.resize is not None:
            rgb, threed, label = resize_sample(rgb, threed, label, self.resize)
        return rgb, threed, label


class CityscapesSamples:
    """Lazy (rgb, threed, label) sequence over Cityscapes records.

    Disparity is read from a preprocessed 8-bit cache when given,
    otherwise decoded, hole-completed and normalized on the fly; raw
    label ids are encoded to train ids.
    """

    def __init__(self, records, threed_dir=None, resize=None, completion_iters=100):
        self.records = list(records)
        self.threed_dir = Path(threed_dir) if threed_dir else None
        self.resize = resize
        self.completion_iters = completion_iters

    def __len__(self):
        return len(self.records)

    def __getitem__(self, i):
        from .disparity import complete_disparity, decode_cityscapes_disparity, to_network_channel

        record = self.records[i]
        rgb = imread_rgb(record.rgb_path)
        if self.threed_dir is not None:
            threed = _unit_scale(imread_unchanged(self.threed_dir / f"{record.id}.png"))
        else:
            raw = imread_unchanged(record.threed_path)
            completed = complete_disparity(decode_cityscapes_disparity(raw), self.completion_iters)
            threed = to_network_channel(completed).astype(np.float32)
        label = None
        if record.label_path is not None:
            label = encode_cityscapes_labels(imread_unchanged(record.label_path)).astype(np.int64)
        if self.resize is not None:
            rgb, threed, label = resize_sample(rgb, threed, label, self.resize)
        return rgb, threed, label
