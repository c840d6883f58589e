import shutil

import numpy as np
import pytest

from trifuse.data import (
    BevConfig,
    CityscapesSamples,
    DatasetIndexError,
    RoadSamples,
    bev_transform,
    bev_valid_mask,
    encode_cityscapes_labels,
    imread_rgb,
    imread_unchanged,
    index_cityscapes,
    index_kitti_road,
    kitti_gt_to_binary,
    load_label_table,
    train_id_names,
)
from trifuse.runs import dataset_fingerprint
from trifuse.synthetic import make_mini_kitti, mini_calibration


# ----------------------------------------------------------------- indexing

def test_kitti_index_structure(mini_kitti):
    root, ids = mini_kitti
    records = index_kitti_road(root)
    assert [r.id for r in records] == sorted(ids)
    assert {r.category for r in records} == {"um", "umm", "uu"}
    for r in records:
        assert r.rgb_path.exists() and r.threed_path.exists()
        assert r.label_path.exists() and r.calib_path.exists()


def test_kitti_index_empty_root(tmp_path):
    assert index_kitti_road(tmp_path) == []


def test_kitti_index_missing_velodyne_names_frame(tmp_path):
    make_mini_kitti(tmp_path, frames=3, image_size=(96, 48), seed=1)
    victim = sorted((tmp_path / "training" / "velodyne").glob("*.bin"))[1]
    frame = victim.stem
    victim.unlink()
    with pytest.raises(DatasetIndexError, match=frame):
        index_kitti_road(tmp_path)


def test_kitti_index_derived_tree_without_velodyne(tmp_path):
    make_mini_kitti(tmp_path, frames=2, image_size=(96, 48), seed=1)
    shutil.rmtree(tmp_path / "training" / "velodyne")
    shutil.rmtree(tmp_path / "training" / "calib")
    records = index_kitti_road(tmp_path, need_calib=False, need_velodyne=False)
    assert len(records) == 2
    assert records[0].threed_path is None


def test_cityscapes_index(mini_cityscapes):
    root, ids = mini_cityscapes
    records = index_cityscapes(root, "train")
    assert [r.id for r in records] == sorted(ids)
    assert all(r.category == "cityscapes" for r in records)


def test_cityscapes_city_filter(mini_cityscapes):
    root, _ = mini_cityscapes
    records = index_cityscapes(root, "train", cities=("aachen",))
    assert records
    assert all(r.id.startswith("aachen") for r in records)


def test_index_is_order_stable(mini_kitti):
    root, _ = mini_kitti
    a = index_kitti_road(root)
    b = index_kitti_road(root)
    assert [r.id for r in a] == [r.id for r in b]


def test_dataset_fingerprint_deterministic(mini_kitti):
    root, _ = mini_kitti
    records = index_kitti_road(root)
    fp1 = dataset_fingerprint(records)
    fp2 = dataset_fingerprint(records)
    assert fp1 == fp2
    assert fp1["file_count"] == 4 * len(records)


# ------------------------------------------------------------ label encoding

def test_encode_official_anchors():
    raw = np.array([[7, 0], [26, 33]], dtype=np.uint8)
    out = encode_cityscapes_labels(raw)
    assert out[0, 0] == 0      # road
    assert out[0, 1] == 255    # unlabeled
    assert out[1, 0] == 13     # car
    assert out[1, 1] == 18     # bicycle


def test_encode_train_subset_injective():
    table = load_label_table()
    train_raw = [e["id"] for e in table["labels"] if e["train_id"] != 255]
    assert len(train_raw) == 19
    encoded = encode_cityscapes_labels(np.array(train_raw))
    assert sorted(encoded.tolist()) == list(range(19))


def test_encode_total_over_official_ids():
    ids = np.arange(0, 34)
    out = encode_cityscapes_labels(ids)
    assert out.shape == ids.shape


def test_encode_unknown_id_rejected():
    with pytest.raises(ValueError):
        encode_cityscapes_labels(np.array([34]))
    with pytest.raises(ValueError):
        encode_cityscapes_labels(np.array([200]))


def test_train_id_names():
    names = train_id_names()
    assert len(names) == 19
    assert names[0] == "road"


# ------------------------------------------------------------------ road gt

def test_gt_all_road():
    gt = np.zeros((4, 4, 3), dtype=np.uint8)
    gt[..., 0] = 255
    gt[..., 2] = 255
    road, valid = kitti_gt_to_binary(gt)
    assert road.all() and valid.all()


def test_gt_black_image():
    road, valid = kitti_gt_to_binary(np.zeros((4, 4, 3), dtype=np.uint8))
    assert not road.any() and not valid.any()


def test_gt_channel_decode_oracle(mini_kitti):
    root, _ = mini_kitti
    gt_path = sorted((root / "training" / "gt_image_2").glob("*.png"))[0]
    img = imread_rgb(gt_path)
    road, valid = kitti_gt_to_binary(img)
    assert int(road.sum()) == int((img[..., 2] > 0).sum())
    assert int(valid.sum()) == int((img[..., 0] > 0).sum())
    assert road.sum() > 0


def test_gt_rejects_single_channel():
    with pytest.raises(ValueError):
        kitti_gt_to_binary(np.zeros((4, 4), dtype=np.uint8))


# ---------------------------------------------------------------------- BEV

def test_bev_constant_image_constant_inside_footprint():
    calib = mini_calibration((192, 64))
    cfg = BevConfig(out_width=100, out_height=200)
    img = np.full((64, 192), 77, dtype=np.uint8)
    out = bev_transform(img, calib, cfg, "nearest")
    mask = bev_valid_mask(calib, cfg, (192, 64))
    assert out.shape == (200, 100)
    assert mask.any()
    assert (out[mask] == 77).all()
    assert not out[~mask].any()


def test_bev_lane_through_center_maps_to_vertical_line():
    calib = mini_calibration((192, 64))
    src = np.zeros((64, 192), dtype=np.uint8)
    # paint the projection of the centerline (lateral 0) of the ground plane
    for x in np.linspace(7, 44, 400):
        hom = calib.p @ (calib.r_rect @ (calib.t_velo_to_cam @ np.array([x, 0.0, -1.65, 1.0])))
        u, v = hom[0] / hom[2], hom[1] / hom[2]
        if 0 <= round(u) < 192 and 0 <= round(v) < 64:
            src[int(round(v)), int(round(u))] = 255
    cfg = BevConfig(out_width=100, out_height=200)
    out = bev_transform(src, calib, cfg, "nearest")
    rows, cols = np.nonzero(out)
    assert rows.size > 20
    assert cols.max() - cols.min() <= 2  # collinear, near-vertical
    assert abs(cols.mean() - 50) <= 2    # centered laterally


def test_bev_nearest_preserves_value_set(rng):
    calib = mini_calibration((192, 64))
    label = rng.integers(0, 4, (64, 192)).astype(np.uint8)
    out = bev_transform(label, calib, BevConfig(out_width=64, out_height=128), "nearest")
    assert set(np.unique(out)) <= set(np.unique(label)) | {0}


def test_bev_rejects_degenerate_homography():
    from trifuse.elevation import Calibration

    p = np.zeros((3, 4))
    p[2, 2] = 1.0
    calib = Calibration(p, np.eye(4), np.eye(4))
    with pytest.raises(ValueError):
        bev_transform(np.zeros((8, 8), dtype=np.uint8), calib, BevConfig())


def test_bev_config_validation_and_tag():
    with pytest.raises(ValueError):
        BevConfig(long_range=(46.0, 6.0))
    assert BevConfig().tag() != BevConfig(out_width=401).tag()


# ------------------------------------------------------------ sample loading

def test_road_samples_on_the_fly(mini_kitti):
    root, _ = mini_kitti
    samples = RoadSamples(index_kitti_road(root))
    rgb, threed, label = samples[0]
    assert rgb.shape == (64, 192, 3) and rgb.dtype == np.uint8
    assert threed.shape == (64, 192) and 0.0 <= threed.min() and threed.max() <= 1.0
    assert set(np.unique(label)) <= {0, 1, 255}
    assert (label == 1).sum() > 0


def test_road_samples_resize(mini_kitti):
    root, _ = mini_kitti
    samples = RoadSamples(index_kitti_road(root), resize=(96, 32))
    rgb, threed, label = samples[0]
    assert rgb.shape == (32, 96, 3)
    assert threed.shape == (32, 96)
    assert set(np.unique(label)) <= {0, 1, 255}


def test_cityscapes_samples(mini_cityscapes):
    root, _ = mini_cityscapes
    samples = CityscapesSamples(index_cityscapes(root, "train"), completion_iters=5)
    rgb, threed, label = samples[0]
    assert rgb.shape == (64, 128, 3)
    assert 0.0 <= threed.min() and threed.max() <= 1.0
    assert set(np.unique(label)) <= set(range(19)) | {255}
