"""Operator surface: preprocess / train / eval / predict / split / param-count.

Exit codes: 0 success, 1 validation error, 2 partial data failure.
"""

import argparse
import dataclasses
import json
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .config import DATA_ROOT_ENV, ConfigError, load_run_config, run_config_to_dict
from .crossval import monte_carlo_split
from .data import (
    BevConfig,
    CityscapesSamples,
    DatasetIndexError,
    RoadSamples,
    bev_transform,
    imread_rgb,
    imread_unchanged,
    imwrite,
    index_cityscapes,
    index_kitti_road,
    kitti_gt_to_binary,
    train_id_names,
)
from .disparity import complete_disparity, decode_cityscapes_disparity, to_network_channel
from .elevation import ElevationFilterConfig, generate_elvdiff, load_kitti_calib, load_velodyne
from .metrics import MiouReport, RoadSweep, evaluate_dataset, render_report, report_records
from .net import (
    NetworkConfig,
    TriFuseNet,
    count_trainable_parameters,
    load_checkpoint,
    model_from_checkpoint,
)
from .runs import append_manifest, code_version, create_run_dir, dataset_fingerprint
from .training import kaiming_init, train


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message)


def _resolve_root(root):
    env = os.environ.get(DATA_ROOT_ENV)
    if env:
        return env
    if root is None:
        raise CliError(f"dataset root required (flag or ${DATA_ROOT_ENV})")
    return root


def _now():
    return datetime.now(timezone.utc).isoformat()


def _needs_refresh(dst, sources, force):
    if force or not dst.exists():
        return True
    dst_mtime = dst.stat().st_mtime
    return any(src.stat().st_mtime > dst_mtime for src in sources if src is not None)


def cmd_preprocess(args):
    root = Path(_resolve_root(args.root))
    out = Path(args.out)
    done = skipped = 0
    failures = []
    if args.mode == "elvdiff":
        records = index_kitti_road(root, args.split)
        cfg = ElevationFilterConfig()
        for rec in records:
            dst = out / f"{rec.id}.png"
            if not _needs_refresh(dst, [rec.threed_path, rec.calib_path], args.force):
                skipped += 1
                continue
            try:
                cloud = load_velodyne(rec.threed_path)
                calib = load_kitti_calib(rec.calib_path)
                h, w = imread_rgb(rec.rgb_path).shape[:2]
                imwrite(dst, generate_elvdiff(cloud, calib, cfg, (w, h)))
                done += 1
            except Exception as exc:
                failures.append((rec.id, str(exc)))
    elif args.mode == "disparity":
        records = index_cityscapes(root, args.split)
        for rec in records:
            dst = out / f"{rec.id}.png"
            if not _needs_refresh(dst, [rec.threed_path], args.force):
                skipped += 1
                continue
            try:
                raw = imread_unchanged(rec.threed_path)
                completed = complete_disparity(decode_cityscapes_disparity(raw))
                channel = to_network_channel(completed)
                if args.bits == 16:
                    imwrite(dst, np.round(channel * 65535.0).astype(np.uint16))
                else:
                    imwrite(dst, np.round(channel * 255.0).astype(np.uint8))
                done += 1
            except Exception as exc:
                failures.append((rec.id, str(exc)))
    elif args.mode == "bev":
        records = index_kitti_road(root, args.split)
        bev_cfg = BevConfig()
        out = out / f"bev-{bev_cfg.tag()}"
        (out / "training").mkdir(parents=True, exist_ok=True)
        with open(out / "bev_config.json", "w") as fh:
            json.dump(dataclasses.asdict(bev_cfg), fh, indent=2)
        for rec in records:
            dst_rgb = out / args.split / "image_2" / f"{rec.id}.png"
            category, _, number = rec.id.partition("_")
            dst_gt = out / args.split / "gt_image_2" / f"{category}_road_{number}.png"
            dst_threed = out / "threed" / f"{rec.id}.png"
            sources = [rec.rgb_path, rec.calib_path, rec.label_path]
            threed_src = Path(args.threed_dir) / f"{rec.id}.png" if args.threed_dir else None
            if threed_src is not None:
                sources.append(threed_src)
            if not _needs_refresh(dst_rgb, sources, args.force):
                skipped += 1
                continue
            try:
                calib = load_kitti_calib(rec.calib_path)
                imwrite(dst_rgb, bev_transform(imread_rgb(rec.rgb_path), calib, bev_cfg, "bilinear"))
                if rec.label_path is not None:
                    imwrite(dst_gt, bev_transform(imread_rgb(rec.label_path), calib, bev_cfg, "nearest"))
                if threed_src is not None:
                    imwrite(dst_threed, bev_transform(imread_unchanged(threed_src), calib, bev_cfg, "bilinear"))
                done += 1
            except Exception as exc:
                failures.append((rec.id, str(exc)))
    else:
        raise CliError(f"unknown preprocess mode {args.mode!r}")
    print(f"preprocess {args.mode}: {done} written, {skipped} up to date, {len(failures)} failed")
    for frame, reason in failures:
        print(f"  FAILED {frame}: {reason}", file=sys.stderr)
    return 2 if failures else 0


def _load_samples(cfg):
    root = cfg.data.root
    if not root:
        raise CliError(f"data.root not set (config or ${DATA_ROOT_ENV})")
    if cfg.data.kind == "kitti_road":
        derived = cfg.data.threed_dir is not None
        records = index_kitti_road(root, cfg.data.split,
                                   need_calib=not derived, need_velodyne=not derived)
        make = lambda recs: RoadSamples(recs, threed_dir=cfg.data.threed_dir, resize=cfg.data.resize)
    else:
        records = index_cityscapes(root, cfg.data.split, cfg.data.cities)
        make = lambda recs: CityscapesSamples(recs, threed_dir=cfg.data.threed_dir, resize=cfg.data.resize)
    if not records:
        raise CliError(f"no samples indexed under {root}")
    return records, make


def _split_records(records, cfg):
    ids = [r.id for r in records]
    if cfg.data.holdout == 0:
        return records, []
    plan = monte_carlo_split(ids, cfg.data.holdout, 1, cfg.data.split_seed)
    train_ids, val_ids = plan.splits[0]
    by_id = {r.id: r for r in records}
    return [by_id[i] for i in train_ids], [by_id[i] for i in val_ids]


def cmd_train(args):
    try:
        cfg = load_run_config(args.config)
    except ConfigError as exc:
        raise CliError(str(exc)) from exc
    if args.seed is not None:
        cfg.train.seed = args.seed
    records, make = _load_samples(cfg)
    train_records, val_records = _split_records(records, cfg)
    model = TriFuseNet(cfg.model)
    resume_payload = None
    if args.resume:
        run_dir = Path(args.resume)
        latest = run_dir / "checkpoints" / "latest.pt"
        if not latest.exists():
            raise CliError(f"no checkpoint to resume from at {latest}")
        resume_payload = load_checkpoint(latest)
    else:
        run_dir = create_run_dir(args.out or "runs")
        generator = torch.Generator().manual_seed(cfg.train.seed)
        for module in model.fresh_modules():
            kaiming_init(module, generator)
    append_manifest(run_dir, {
        "event": "start",
        "start_time": _now(),
        "seed": cfg.train.seed,
        "config": run_config_to_dict(cfg),
        "dataset": dataset_fingerprint(records),
        "code_version": code_version(),
        "resumed": bool(args.resume),
    })
    result = train(model, make(train_records), make(val_records), cfg.train,
                   run_dir=run_dir, resume=resume_payload,
                   log_fn=lambda rec: print(
                       f"epoch {rec['epoch']:3d}  lr {rec['lr']:.5f}  "
                       f"loss {rec['loss']:.4f}  metric {rec['metric']:.4f}"))
    artifacts = {"log": str(run_dir / "log.jsonl")}
    if result.best_path:
        artifacts["best_checkpoint"] = str(result.best_path)
    if result.latest_path:
        artifacts["latest_checkpoint"] = str(result.latest_path)
    append_manifest(run_dir, {
        "event": "completed",
        "end_time": _now(),
        "best_metric": result.best_metric,
        "best_epoch": result.best_epoch,
        "artifacts": artifacts,
    })
    print(f"run directory: {run_dir}")
    return 0


def _road_probability(model, sample):
    rgb, threed, label = sample
    from .training import sample_to_tensors

    rgb_t, threed_t, _ = sample_to_tensors((rgb, threed, np.zeros(rgb.shape[:2], np.int64)))
    with torch.no_grad():
        logits = model(rgb_t[None], threed_t[None])
        probs = torch.softmax(logits, dim=1)[0]
    return probs.numpy(), label


def cmd_eval(args):
    payload = load_checkpoint(args.checkpoint)
    model = model_from_checkpoint(payload)
    model.eval()
    num_classes = model.cfg.num_classes
    root = _resolve_root(args.root)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.mode == "miou":
        if args.kind == "kitti_road" and num_classes != 2:
            raise CliError(f"checkpoint has {num_classes} classes; kitti_road needs 2")
        if args.kind == "kitti_road":
            derived = args.threed_dir is not None
            records = index_kitti_road(root, args.split, need_calib=not derived,
                                       need_velodyne=not derived)
            samples = RoadSamples(records, threed_dir=args.threed_dir, resize=None)
        else:
            records = index_cityscapes(root, args.split)
            samples = CityscapesSamples(records, threed_dir=args.threed_dir)
        def pairs():
            for i in range(len(samples)):
                probs, label = _road_probability(model, samples[i])
                if label is None:
                    raise CliError(f"no ground truth for frame {records[i].id}")
                yield probs.argmax(axis=0), label
        report = evaluate_dataset(pairs(), "miou", num_classes=num_classes)
        names = train_id_names() if num_classes == 19 else None
        _write_reports(out, {"ALL": report}, names)
        return 0
    if args.mode == "road_bev":
        if num_classes != 2:
            raise CliError(f"road_bev mode needs a 2-class checkpoint, got {num_classes}")
        derived = args.threed_dir is not None
        records = index_kitti_road(root, args.split, need_calib=not derived,
                                   need_velodyne=not derived)
        samples = RoadSamples(records, threed_dir=args.threed_dir, resize=None)
        sweeps = {}
        for i, rec in enumerate(records):
            probs, label = _road_probability(model, samples[i])
            if label is None:
                raise CliError(f"no ground truth for frame {rec.id}")
            score = probs[1]
            gt = label == 1
            valid = label != 255
            sweeps.setdefault(rec.category.upper(), RoadSweep()).update(score, gt, valid)
        urban = None
        for sweep in sweeps.values():
            urban = sweep if urban is None else urban + sweep
        rows = {cat: sweeps[cat].report() for cat in sorted(sweeps)}
        rows["URBAN"] = urban.report()
        _write_reports(out, rows, None)
        return 0
    raise CliError(f"unknown eval mode {args.mode!r}")


def _write_reports(out, rows, class_names):
    text_lines = []
    json_rows = {}
    for name, report in rows.items():
        text_lines.append(name)
        text_lines.append(render_report(report, class_names))
        text_lines.append("")
        json_rows[name] = report_records(report)
    (out / "report.txt").write_text("\n".join(text_lines))
    with open(out / "report.json", "w") as fh:
        json.dump(json_rows, fh, indent=2)
        fh.write("\n")
    print((out / "report.txt").read_text())


def _class_palette(num_classes):
    if num_classes == 2:
        return np.array([[0, 0, 0], [0, 255, 0]], dtype=np.uint8)
    rng = np.random.default_rng(0)
    palette = rng.integers(40, 255, (num_classes, 3))
    return palette.astype(np.uint8)


def road_overlay(rgb, pred_road, road_gt, valid):
    """TP green, FP blue, FN red over the camera image."""
    overlay = rgb.copy()
    overlay[pred_road & road_gt & valid] = (0, 255, 0)
    overlay[pred_road & ~road_gt & valid] = (0, 0, 255)
    overlay[~pred_road & road_gt & valid] = (255, 0, 0)
    return overlay


def class_overlay(rgb, pred, num_classes):
    overlay = rgb.copy()
    palette = _class_palette(num_classes)
    colored = pred > 0 if num_classes == 2 else np.ones_like(pred, bool)
    overlay[colored] = palette[pred[colored]]
    return overlay


def cmd_predict(args):
    model = model_from_checkpoint(load_checkpoint(args.checkpoint))
    model.eval()
    rgb = imread_rgb(args.rgb)
    raw = imread_unchanged(args.threed)
    if raw.dtype == np.uint16:
        threed = to_network_channel(complete_disparity(decode_cityscapes_disparity(raw)))
    else:
        threed = raw.astype(np.float32) / 255.0
    if threed.shape[:2] != rgb.shape[:2]:
        raise CliError(
            f"rgb {rgb.shape[:2]} and 3D source {threed.shape[:2]} shapes differ"
        )
    probs, _ = _road_probability(model, (rgb, threed, None))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    np.save(out / "scores.npy", probs.astype(np.float32))
    pred = probs.argmax(axis=0)
    if args.gt and model.cfg.num_classes == 2:
        road_gt, valid = kitti_gt_to_binary(imread_rgb(args.gt))
        overlay = road_overlay(rgb, pred == 1, road_gt, valid)
    else:
        overlay = class_overlay(rgb, pred, model.cfg.num_classes)
    imwrite(out / "overlay.png", overlay)
    print(f"wrote {out / 'scores.npy'} and {out / 'overlay.png'}")
    return 0


def cmd_split(args):
    root = os.environ.get(DATA_ROOT_ENV) or args.root
    if args.num_ids:
        ids = [f"id_{i:06d}" for i in range(args.num_ids)]
    elif root:
        records = index_kitti_road(root, args.split)
        ids = [r.id for r in records]
    else:
        raise CliError("either --root or --num-ids is required")
    plan = monte_carlo_split(ids, args.holdout, args.iterations, args.seed)
    if args.out:
        plan.to_json(args.out)
        print(f"wrote {args.out}")
    else:
        print(plan.to_json())
    return 0


def cmd_param_count(args):
    if args.config:
        try:
            cfg = load_run_config(args.config).model
        except ConfigError as exc:
            raise CliError(str(exc)) from exc
    else:
        cfg = NetworkConfig(backbone_depth=args.depth, num_classes=args.num_classes)
    model = TriFuseNet(cfg)
    print(f"backbone {cfg.backbone_depth}: {count_trainable_parameters(model)} trainable parameters")
    return 0


def build_parser():
    parser = _Parser(prog="trifuse", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="derive elvdiff/disparity/BEV images")
    p.add_argument("--mode", required=True, choices=["elvdiff", "disparity", "bev"])
    p.add_argument("--root", default=None)
    p.add_argument("--split", default="training")
    p.add_argument("--out", required=True)
    p.add_argument("--threed-dir", default=None, help="elvdiff cache for BEV mode")
    p.add_argument("--bits", type=int, default=8, choices=[8, 16],
                   help="disparity cache bit depth")
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_preprocess)

    p = sub.add_parser("train", help="run training from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--resume", default=None, help="run directory to continue")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--root", default=None)
    p.add_argument("--split", default="training")
    p.add_argument("--kind", default="kitti_road", choices=["kitti_road", "cityscapes"])
    p.add_argument("--mode", required=True, choices=["miou", "road_bev"])
    p.add_argument("--threed-dir", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("predict", help="score map + overlay for one frame")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--rgb", required=True)
    p.add_argument("--threed", required=True)
    p.add_argument("--gt", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_predict)

    p = sub.add_parser("split", help="emit a Monte Carlo cross-validation plan")
    p.add_argument("--root", default=None)
    p.add_argument("--split", default="training")
    p.add_argument("--num-ids", type=int, default=None)
    p.add_argument("--holdout", type=int, default=30)
    p.add_argument("--iterations", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_split)

    p = sub.add_parser("param-count", help="trainable parameter count")
    p.add_argument("--config", default=None)
    p.add_argument("--depth", type=int, default=18)
    p.add_argument("--num-classes", type=int, default=19)
    p.set_defaults(fn=cmd_param_count)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        return args.fn(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ConfigError, DatasetIndexError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entrypoint():
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
