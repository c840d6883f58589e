"""End-to-end desk-scale demo on a synthetic 5-frame road dataset.

Generates the dataset, derives elevation images, trains a small model,
evaluates per-category road metrics and writes a prediction overlay,
all through the CLI entry points. Runs on CPU in a few minutes.

Usage: python scripts/toy_experiment.py [workdir]
"""

import sys
import tempfile
from pathlib import Path

import yaml

from trifuse.cli import main
from trifuse.synthetic import make_mini_kitti


def run(workdir):
    workdir = Path(workdir)
    data_root = workdir / "data"
    make_mini_kitti(data_root, frames=5, image_size=(192, 64), seed=0)
    elvdiff = workdir / "elvdiff"
    assert main(["preprocess", "--mode", "elvdiff", "--root", str(data_root),
                 "--out", str(elvdiff)]) == 0

    config = workdir / "config.yaml"
    config.write_text(yaml.safe_dump({
        "schema_version": 1,
        "model": {"backbone_depth": 18, "num_classes": 2,
                  "first_layer_padding": 1, "threed_source": "elvdiff"},
        "train": {"optimizer": "asgd", "base_lr": 0.0625, "schedule": "poly",
                  "minibatch": 2, "epochs": 8, "seed": 0},
        "data": {"kind": "kitti_road", "root": str(data_root),
                 "threed_dir": str(elvdiff), "holdout": 1, "split_seed": 0},
    }))
    assert main(["train", "--config", str(config), "--out", str(workdir / "runs")]) == 0
    run_dir = next(p for p in (workdir / "runs").iterdir() if p.is_dir())
    ckpt = run_dir / "checkpoints" / "best.pt"

    assert main(["eval", "--checkpoint", str(ckpt), "--root", str(data_root),
                 "--threed-dir", str(elvdiff), "--mode", "road_bev",
                 "--out", str(workdir / "reports")]) == 0

    frame = sorted((data_root / "training" / "image_2").glob("*.png"))[0]
    category, _, number = frame.stem.partition("_")
    gt = data_root / "training" / "gt_image_2" / f"{category}_road_{number}.png"
    assert main(["predict", "--checkpoint", str(ckpt), "--rgb", str(frame),
                 "--threed", str(elvdiff / f"{frame.stem}.png"), "--gt", str(gt),
                 "--out", str(workdir / "prediction")]) == 0
    print(f"\nartifacts under {workdir}")


if __name__ == "__main__":
    if len(sys.argv) > 1:
        run(sys.argv[1])
    else:
        with tempfile.TemporaryDirectory() as tmp:
            run(tmp)
