"""Segmentation scoring.

Multi-class mIoU over an accumulated confusion matrix, and the road
threshold-sweep metrics (MaxF, AP, PRE, REC, FPR, FNR). Both accumulators
are mergeable values, so shards computed in parallel can simply be
summed before scoring; dataset-level scores aggregate pixel counts
first, they are not means of per-image scores.
"""

import json
import logging
from dataclasses import dataclass, asdict

import numpy as np

logger = logging.getLogger(__name__)

DEFAULT_THRESHOLDS = 256


class ConfusionMatrix:
    """C x C pixel counts, rows ground truth, cols prediction."""

    def __init__(self, num_classes, counts=None):
        self.num_classes = num_classes
        if counts is None:
            counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        self.counts = np.asarray(counts, dtype=np.int64)
        if self.counts.shape != (num_classes, num_classes):
            raise ValueError("counts shape does not match num_classes")

    def update(self, pred, gt, ignore_index=255):
        pred = np.asarray(pred).reshape(-1)
        gt = np.asarray(gt).reshape(-1)
        if pred.shape != gt.shape:
            raise ValueError("pred and gt shapes differ")
        scored = gt != ignore_index
        pred, gt = pred[scored], gt[scored]
        if pred.size and (pred.min() < 0 or pred.max() >= self.num_classes):
            raise ValueError(f"prediction ids outside [0, {self.num_classes})")
        if gt.size and (gt.min() < 0 or gt.max() >= self.num_classes):
            raise ValueError(f"ground-truth ids outside [0, {self.num_classes})")
        flat = self.num_classes * gt.astype(np.int64) + pred.astype(np.int64)
        self.counts += np.bincount(flat, minlength=self.num_classes**2).reshape(
            self.num_classes, self.num_classes
        )
        return self

    def __add__(self, other):
        if other.num_classes != self.num_classes:
            raise ValueError("cannot merge matrices with different class counts")
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    @property
    def total(self):
        return int(self.counts.sum())


def miou(cm):
    """Per-class IoU and mean, in percent.

    IoU_c = TP / (TP + FP + FN); classes with an empty union are NaN in
    the per-class vector and excluded from the mean.
    """
    counts = cm.counts.astype(np.float64)
    tp = np.diag(counts)
    union = counts.sum(axis=0) + counts.sum(axis=1) - tp
    per_class = np.full(cm.num_classes, np.nan)
    nonempty = union > 0
    per_class[nonempty] = tp[nonempty] / union[nonempty] * 100.0
    mean = float(np.nanmean(per_class)) if nonempty.any() else float("nan")
    return per_class, mean


@dataclass
class MiouReport:
    per_class: list
    mean: float
    mode: str = "miou"


@dataclass
class RoadScoreReport:
    max_f: float
    ap: float
    precision: float
    recall: float
    fpr: float
    fnr: float
    threshold_at_max: float
    mode: str = "road"


class RoadSweep:
    """Per-threshold TP/FP/TN/FN accumulator over road-probability maps.

    Thresholds default to 256 evenly spaced values in [0, 1]; a pixel is
    predicted road at threshold t when score >= t. Counting uses score
    histograms with the thresholds as bin edges, so a full sweep costs one
    pass per image.
    """

    def __init__(self, thresholds=None):
        if thresholds is None:
            thresholds = np.linspace(0.0, 1.0, DEFAULT_THRESHOLDS)
        thresholds = np.asarray(thresholds, dtype=np.float64)
        if thresholds.ndim != 1 or thresholds.size < 1 or np.any(np.diff(thresholds) <= 0):
            raise ValueError("thresholds must be a finite increasing 1-D list")
        self.thresholds = thresholds
        t = thresholds.size
        self.tp = np.zeros(t, dtype=np.int64)
        self.fp = np.zeros(t, dtype=np.int64)
        self.pos = 0
        self.neg = 0

    def update(self, score, gt, valid_mask=None):
        score = np.asarray(score, dtype=np.float64).reshape(-1)
        gt = np.asarray(gt).astype(bool).reshape(-1)
        if score.shape != gt.shape:
            raise ValueError("score and gt shapes differ")
        if valid_mask is not None:
            valid = np.asarray(valid_mask).astype(bool).reshape(-1)
            score, gt = score[valid], gt[valid]
        if score.size and (score.min() < 0 or score.max() > 1):
            raise ValueError("scores must lie in [0, 1]")
        edges = np.append(self.thresholds, np.inf)
        pos_hist, _ = np.histogram(score[gt], bins=edges)
        neg_hist, _ = np.histogram(score[~gt], bins=edges)
        # suffix sums: count of pixels with score >= threshold[i]
        self.tp += np.cumsum(pos_hist[::-1])[::-1]
        self.fp += np.cumsum(neg_hist[::-1])[::-1]
        self.pos += int(gt.sum())
        self.neg += int((~gt).sum())
        return self

    def __add__(self, other):
        if not np.array_equal(self.thresholds, other.thresholds):
            raise ValueError("cannot merge sweeps over different threshold grids")
        out = RoadSweep(self.thresholds)
        out.tp = self.tp + other.tp
        out.fp = self.fp + other.fp
        out.pos = self.pos + other.pos
        out.neg = self.neg + other.neg
        return out

    def curves(self):
        """Precision, recall, F1, FPR, FNR arrays over the threshold grid."""
        if self.pos == 0:
            raise ValueError("ground truth has no positive pixels; recall undefined")
        tp, fp = self.tp.astype(np.float64), self.fp.astype(np.float64)
        fn = self.pos - tp
        tn = self.neg - fp
        predicted = tp + fp
        precision = np.zeros_like(tp)
        nonzero = predicted > 0
        if not nonzero.all():
            logger.warning(
                "%d thresholds with zero predicted positives; precision defined as 0 there",
                int((~nonzero).sum()),
            )
        precision[nonzero] = tp[nonzero] / predicted[nonzero]
        recall = tp / self.pos
        denom = precision + recall
        f1 = np.zeros_like(tp)
        ok = denom > 0
        f1[ok] = 2 * precision[ok] * recall[ok] / denom[ok]
        fpr = fp / self.neg if self.neg > 0 else np.zeros_like(fp)
        fnr = fn / self.pos
        return precision, recall, f1, fpr, fnr

    def report(self):
        precision, recall, f1, fpr, fnr = self.curves()
        best = int(np.argmax(f1))
        ap = average_precision_11pt(precision, recall)
        return RoadScoreReport(
            max_f=float(f1[best] * 100.0),
            ap=float(ap * 100.0),
            precision=float(precision[best] * 100.0),
            recall=float(recall[best] * 100.0),
            fpr=float(fpr[best] * 100.0),
            fnr=float(fnr[best] * 100.0),
            threshold_at_max=float(self.thresholds[best]),
        )


def average_precision_11pt(precision, recall):
    """11-point interpolated AP: mean over r in {0, 0.1, .., 1.0} of the
    best precision among operating points with recall >= r."""
    precision = np.asarray(precision, dtype=np.float64)
    recall = np.asarray(recall, dtype=np.float64)
    total = 0.0
    for r in np.linspace(0.0, 1.0, 11):
        attained = recall >= r - 1e-12
        total += precision[attained].max() if attained.any() else 0.0
    return total / 11.0


def road_metrics(score, gt, valid_mask=None, thresholds=None):
    """One-shot threshold sweep over a single road-probability map."""
    sweep = RoadSweep(thresholds)
    sweep.update(score, gt, valid_mask)
    return sweep.report()


def evaluate_dataset(pairs, mode, num_classes=None, ignore_index=255, thresholds=None,
                     per_image_average=False):
    """Aggregate pixel counts over a whole split, then score once.

    mode "miou": pairs of (pred_labels, gt_labels).
    mode "road_bev": pairs of (score, gt) or (score, gt, valid_mask),
    already in BEV space. per_image_average switches road mode to the
    mean of per-image scores instead of the dataset-level aggregate.
    """
    if mode == "miou":
        if num_classes is None:
            raise ValueError("num_classes required for miou mode")
        cm = ConfusionMatrix(num_classes)
        n = 0
        for pred, gt in pairs:
            cm.update(pred, gt, ignore_index)
            n += 1
        if n == 0:
            raise ValueError("empty dataset")
        per_class, mean = miou(cm)
        return MiouReport(per_class=per_class.tolist(), mean=mean)
    if mode == "road_bev":
        if per_image_average:
            reports = []
            for pair in pairs:
                reports.append(road_metrics(*pair, thresholds=thresholds))
            if not reports:
                raise ValueError("empty dataset")
            mean = lambda attr: float(np.mean([getattr(r, attr) for r in reports]))
            return RoadScoreReport(
                max_f=mean("max_f"), ap=mean("ap"), precision=mean("precision"),
                recall=mean("recall"), fpr=mean("fpr"), fnr=mean("fnr"),
                threshold_at_max=mean("threshold_at_max"),
            )
        sweep = RoadSweep(thresholds)
        n = 0
        for pair in pairs:
            sweep.update(*pair)
            n += 1
        if n == 0:
            raise ValueError("empty dataset")
        return sweep.report()
    raise ValueError(f"unknown evaluation mode {mode!r}")


def render_report(report, class_names=None):
    """Human-readable report, percentages with two decimals."""
    lines = []
    if isinstance(report, MiouReport):
        lines.append(f"{'class':<20} {'IoU %':>8}")
        for i, v in enumerate(report.per_class):
            name = class_names[i] if class_names else f"class {i}"
            cell = f"{v:8.2f}" if np.isfinite(v) else "     n/a"
            lines.append(f"{name:<20} {cell}")
        lines.append(f"{'mean IoU':<20} {report.mean:8.2f}")
    elif isinstance(report, RoadScoreReport):
        lines.append(f"{'MaxF':>8} {'AP':>8} {'PRE':>8} {'REC':>8} {'FPR':>8} {'FNR':>8}")
        lines.append(
            f"{report.max_f:8.2f} {report.ap:8.2f} {report.precision:8.2f} "
            f"{report.recall:8.2f} {report.fpr:8.2f} {report.fnr:8.2f}"
        )
    else:
        raise TypeError(f"unknown report type {type(report)!r}")
    return "\n".join(lines)


def report_records(report):
    """Machine-readable key-value form of a report."""
    doc = asdict(report)
    if isinstance(report, MiouReport):
        doc["per_class"] = [None if not np.isfinite(v) else v for v in report.per_class]
    return doc


def write_report(path_txt, path_json, report, class_names=None):
    with open(path_txt, "w") as fh:
        fh.write(render_report(report, class_names) + "\n")
    with open(path_json, "w") as fh:
        json.dump(report_records(report), fh, indent=2)
        fh.write("\n")
