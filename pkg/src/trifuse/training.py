"""Training methodology: config, initialization, the loop, epoch logging.

The loop minimizes per-pixel cross-entropy (ignore_index excluded) over
minibatches, steps the configured optimizer under the configured
learning-rate schedule, evaluates the validation split each epoch, and
persists the best-metric checkpoint. With a fixed seed the metric
trajectory is reproducible on a fixed device.
"""

import json
import math
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .augment import AugmentConfig, augment
from .metrics import ConfusionMatrix, miou
from .net import save_checkpoint
from .schedules import poly_lr, cyclical_lr

OPTIMIZERS = ("sgd", "adam", "asgd")
SCHEDULES = ("constant", "poly", "cyc_triangular", "cyc_triangular_decreasing")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    optimizer: str = "asgd"
    base_lr: float = 0.03125
    schedule: str = "poly"
    poly_power: float = 0.9
    cyc_bounds: tuple = (0.0001, 0.25)
    cyc_step_size: int = 500
    minibatch: int = 2  # Cityscapes default; KITTI runs use 4
    epochs: int = 10
    max_iters: int | None = None
    ignore_index: int = 255
    seed: int = 0
    reduced_precision: bool = False
    momentum: float = 0.9
    weight_decay: float = 0.0
    freeze_backbone_epochs: int = 0  # warm-up under memory pressure
    val_metric: str = "pixel_acc"  # or "miou"
    aux_loss_weight: float = 0.4
    augment: AugmentConfig | None = None

    def __post_init__(self):
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}, got {self.schedule!r}")
        if self.base_lr < 0:
            raise ValueError(f"base_lr must be >= 0, got {self.base_lr}")
        lo, hi = self.cyc_bounds
        if not lo < hi:
            raise ValueError(f"cyc_bounds lower must be < upper, got {self.cyc_bounds}")
        if self.minibatch < 1:
            raise ValueError(f"minibatch must be positive, got {self.minibatch}")
        if self.val_metric not in ("pixel_acc", "miou"):
            raise ValueError(f"val_metric must be pixel_acc or miou, got {self.val_metric!r}")


def kaiming_init(model, generator=None):
    """Fan-in scaled normal init for rectifier networks; biases zero.

    Conv/linear weights draw from N(0, 2/fan_in); normalization layers
    reset to weight 1, bias 0. Deterministic given the generator.
    """
    for m in model.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            fan_in = m.weight.shape[1] * (
                m.weight.shape[2] * m.weight.shape[3] if m.weight.dim() == 4 else 1
            )
            std = math.sqrt(2.0 / fan_in)
            with torch.no_grad():
                m.weight.normal_(0.0, std, generator=generator)
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, (nn.BatchNorm2d, nn.GroupNorm)):
            with torch.no_grad():
                m.weight.fill_(1.0)
                m.bias.zero_()
    return model


def build_optimizer(model, cfg):
    params = model.parameters()
    if cfg.optimizer == "sgd":
        return torch.optim.SGD(params, lr=cfg.base_lr, momentum=cfg.momentum,
                               weight_decay=cfg.weight_decay)
    if cfg.optimizer == "adam":
        return torch.optim.Adam(params, lr=cfg.base_lr, weight_decay=cfg.weight_decay)
    return torch.optim.ASGD(params, lr=cfg.base_lr, weight_decay=cfg.weight_decay)


def schedule_lr(cfg, iteration, max_iters):
    if cfg.schedule == "constant":
        return cfg.base_lr
    if cfg.schedule == "poly":
        return poly_lr(cfg.base_lr, iteration, max_iters, cfg.poly_power)
    lo, hi = cfg.cyc_bounds
    decreasing = cfg.schedule == "cyc_triangular_decreasing"
    return cyclical_lr(lo, hi, cfg.cyc_step_size, iteration, decreasing)


def sample_to_tensors(sample):
    """(rgb uint8 HWC, threed float HW, label int HW) -> model tensors."""
    rgb, threed, label = sample
    rgb_t = torch.from_numpy(np.ascontiguousarray(rgb)).permute(2, 0, 1).float() / 255.0
    threed_t = torch.from_numpy(np.ascontiguousarray(threed, dtype=np.float32))[None]
    label_t = torch.from_numpy(np.ascontiguousarray(label, dtype=np.int64))
    return rgb_t, threed_t, label_t


def _batch(samples):
    rgbs, threeds, labels = zip(*(sample_to_tensors(s) for s in samples))
    return torch.stack(rgbs), torch.stack(threeds), torch.stack(labels)


def pixel_accuracy(pred, label, ignore_index=255):
    scored = label != ignore_index
    if scored.sum() == 0:
        return float("nan")
    return float((pred[scored] == label[scored]).float().mean())


@torch.no_grad()
def evaluate_split(model, dataset, cfg, num_classes):
    model.eval()
    if len(dataset) == 0:
        return float("nan")
    if cfg.val_metric == "miou":
        cm = ConfusionMatrix(num_classes)
        for sample in dataset:
            rgb, threed, label = _batch([sample])
            pred = model(rgb, threed).argmax(dim=1)
            cm.update(pred.numpy(), label.numpy(), cfg.ignore_index)
        return miou(cm)[1]
    accs = []
    for sample in dataset:
        rgb, threed, label = _batch([sample])
        pred = model(rgb, threed).argmax(dim=1)
        accs.append(pixel_accuracy(pred, label, cfg.ignore_index))
    accs = [a for a in accs if not math.isnan(a)]
    return float(np.mean(accs)) if accs else float("nan")


@dataclass
class TrainResult:
    history: list = field(default_factory=list)
    best_metric: float = float("-inf")
    best_epoch: int = 0
    best_path: Path | None = None
    latest_path: Path | None = None


def train(model, train_set, val_set, cfg, run_dir=None, resume=None, log_fn=None):
    """Run the loop; returns a TrainResult with one history record per epoch.

    Each record carries epoch, split sizes, last lr, mean loss, the
    validation metric and wall time; with run_dir set the records also go
    to log.jsonl and checkpoints land in run_dir/checkpoints. A trailing
    1-sample batch is dropped when minibatch > 1 (gate normalization
    needs batch statistics); reshuffling re-includes the sample later.
    """
    if len(train_set) == 0:
        raise ValueError("empty training set")
    torch.manual_seed(cfg.seed)
    num_classes = model.cfg.num_classes
    optimizer = build_optimizer(model, cfg)
    start_epoch = 0
    if resume is not None:
        model.load_state_dict(resume["model_state"])
        if resume.get("optimizer_state"):
            optimizer.load_state_dict(resume["optimizer_state"])
        start_epoch = resume.get("epoch", 0)
    loss_fn = nn.CrossEntropyLoss(ignore_index=cfg.ignore_index)
    steps_per_epoch = math.ceil(len(train_set) / cfg.minibatch)
    max_iters = cfg.max_iters or cfg.epochs * steps_per_epoch
    shuffle_rng = np.random.default_rng(cfg.seed)
    # keep the resumed shuffle stream aligned with the uninterrupted run
    for _ in range(start_epoch):
        shuffle_rng.permutation(len(train_set))

    result = TrainResult()
    log_path = None
    ckpt_dir = None
    if run_dir is not None:
        run_dir = Path(run_dir)
        ckpt_dir = run_dir / "checkpoints"
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        log_path = run_dir / "log.jsonl"

    iteration = start_epoch * steps_per_epoch
    for epoch in range(start_epoch + 1, cfg.epochs + 1):
        tic = time.monotonic()
        frozen = 0 < epoch <= cfg.freeze_backbone_epochs
        if hasattr(model, "backbone_parameters"):
            for p in model.backbone_parameters():
                p.requires_grad_(not frozen)
        model.train()
        order = shuffle_rng.permutation(len(train_set))
        losses, lr = [], cfg.base_lr
        for start in range(0, len(order), cfg.minibatch):
            idxs = order[start:start + cfg.minibatch]
            if len(idxs) == 1 and cfg.minibatch > 1:
                continue  # batch statistics need >1 sample; trailing remainder dropped
            samples = []
            for idx in idxs:
                sample = train_set[int(idx)]
                if cfg.augment is not None:
                    rng = np.random.default_rng([cfg.seed, epoch, int(idx)])
                    sample = augment(*sample, cfg.augment, rng)
                samples.append(sample)
            rgb, threed, label = _batch(samples)
            lr = schedule_lr(cfg, min(iteration, max_iters), max_iters)
            for group in optimizer.param_groups:
                group["lr"] = lr
            optimizer.zero_grad(set_to_none=True)
            if cfg.reduced_precision:
                with torch.autocast("cpu", dtype=torch.bfloat16):
                    loss = _forward_loss(model, rgb, threed, label, loss_fn, cfg)
            else:
                loss = _forward_loss(model, rgb, threed, label, loss_fn, cfg)
            loss.backward()
            optimizer.step()
            losses.append(float(loss.detach()))
            iteration += 1
        if not losses:
            raise ValueError(
                f"no runnable batches: {len(train_set)} samples at minibatch {cfg.minibatch}"
            )
        if all(math.isnan(v) for v in losses):
            raise TrainingDiverged(f"loss was NaN for the whole of epoch {epoch}")
        val_metric = evaluate_split(model, val_set, cfg, num_classes)
        record = {
            "epoch": epoch,
            "train_size": len(train_set),
            "val_size": len(val_set),
            "minibatch": cfg.minibatch,
            "lr": lr,
            "loss": float(np.nanmean(losses)) if losses else float("nan"),
            "metric": val_metric,
            "wall_time": time.monotonic() - tic,
        }
        result.history.append(record)
        if log_path is not None:
            with open(log_path, "a") as fh:
                fh.write(json.dumps(record) + "\n")
        if log_fn is not None:
            log_fn(record)
        if ckpt_dir is not None:
            seeds = {"seed": cfg.seed}
            save_checkpoint(ckpt_dir / "latest.pt", model, optimizer, epoch, seeds,
                            extra={"train_config": asdict(cfg)})
            result.latest_path = ckpt_dir / "latest.pt"
        comparable = val_metric if not math.isnan(val_metric) else float("-inf")
        if comparable >= result.best_metric:
            result.best_metric = comparable
            result.best_epoch = epoch
            if ckpt_dir is not None:
                save_checkpoint(ckpt_dir / "best.pt", model, optimizer, epoch,
                                {"seed": cfg.seed}, extra={"train_config": asdict(cfg)})
                result.best_path = ckpt_dir / "best.pt"
    if hasattr(model, "backbone_parameters"):
        for p in model.backbone_parameters():
            p.requires_grad_(True)
    return result


def _forward_loss(model, rgb, threed, label, loss_fn, cfg):
    out = model(rgb, threed)
    if isinstance(out, tuple):
        main, *aux = out
        loss = loss_fn(main, label)
        for a in aux:
            loss = loss + cfg.aux_loss_weight * loss_fn(a, label)
        return loss
    return loss_fn(out, label)
