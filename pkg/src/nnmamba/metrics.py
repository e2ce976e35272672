"""Evaluation metrics: Dice, HD95, landmark radial error, binary classification scores."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.stats import rankdata

from .errors import DimensionError, UndefinedMetricError

# 6-connectivity (face neighbours)
_FACES = ndimage.generate_binary_structure(3, 1)


@dataclass
class MetricReport:
    values: dict = field(default_factory=dict)
    counts: dict | None = None
    flags: list = field(default_factory=list)

    def __getitem__(self, key):
        return self.values[key]

    def to_dict(self) -> dict:
        out = {"values": self.values}
        if self.counts is not None:
            out["counts"] = self.counts
        if self.flags:
            out["flags"] = list(self.flags)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, allow_nan=True)

    def csv_header(self) -> list[str]:
        return list(self.values) + list(self.counts or {})

    def to_csv_row(self, header: bool = False) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        if header:
            writer.writerow(self.csv_header())
        row = {**self.values, **(self.counts or {})}
        writer.writerow([_fmt(row[k]) for k in self.csv_header()])
        return buf.getvalue()


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


# ---------------------------------------------------------------- segmentation


def dice(pred, gt) -> float:
    """``2|P & G| / (|P| + |G|)``; 1.0 when both masks are empty."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise DimensionError(f"dice: shapes {pred.shape} and {gt.shape} differ")
    total = int(pred.sum()) + int(gt.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(pred, gt).sum()) / total


def boundary(mask) -> np.ndarray:
    """Mask voxels with at least one face neighbour outside the mask (or the volume)."""
    mask = np.asarray(mask, dtype=bool)
    return mask & ~ndimage.binary_erosion(mask, structure=_FACES, border_value=0)


def surface_distances(pred, gt, spacing=(1.0, 1.0, 1.0)) -> np.ndarray:
    """Pooled boundary-to-boundary nearest distances in both directions (mm)."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise DimensionError(f"hd95: shapes {pred.shape} and {gt.shape} differ")
    if not pred.any() or not gt.any():
        raise UndefinedMetricError("undefined-distance: a mask is empty")
    bp, bg = boundary(pred), boundary(gt)
    sampling = tuple(float(s) for s in spacing)
    to_g = ndimage.distance_transform_edt(~bg, sampling=sampling)
    to_p = ndimage.distance_transform_edt(~bp, sampling=sampling)
    return np.concatenate([to_g[bp], to_p[bg]])


def hd95(pred, gt, spacing=(1.0, 1.0, 1.0)) -> float:
    """95th percentile (linear interpolation) of the pooled symmetric surface distances."""
    return float(np.percentile(surface_distances(pred, gt, spacing), 95))


def hausdorff(pred, gt, spacing=(1.0, 1.0, 1.0)) -> float:
    return float(surface_distances(pred, gt, spacing).max())


def seg_report(pred_labels, gt_labels, num_regions: int, spacing=(1.0, 1.0, 1.0)) -> MetricReport:
    """Dice and HD95 for nested regions ``label >= k``, ``k = 1..num_regions``.

    ``pred_labels``/``gt_labels`` may be a single volume or a batch of them;
    metrics are averaged over volumes. An undefined HD95 (empty mask) is
    recorded as NaN and left out of the averages, with a flag.
    """
    pred_labels = np.asarray(pred_labels)
    gt_labels = np.asarray(gt_labels)
    if pred_labels.ndim == 3:
        pred_labels, gt_labels = pred_labels[None], gt_labels[None]
    dices = np.zeros((len(pred_labels), num_regions))
    dists = np.full((len(pred_labels), num_regions), np.nan)
    for i, (p, g) in enumerate(zip(pred_labels, gt_labels)):
        for k in range(1, num_regions + 1):
            dices[i, k - 1] = dice(p >= k, g >= k)
            try:
                dists[i, k - 1] = hd95(p >= k, g >= k, spacing)
            except UndefinedMetricError:
                pass
    values = {}
    for k in range(num_regions):
        values[f"dice_region{k + 1}"] = float(dices[:, k].mean())
    values["dice_mean"] = float(dices.mean())
    flags = []
    for k in range(num_regions):
        col = dists[:, k]
        values[f"hd95_region{k + 1}"] = float(np.nanmean(col)) if np.isfinite(col).any() else float("nan")
    values["hd95_mean"] = float(np.nanmean(dists)) if np.isfinite(dists).any() else float("nan")
    undefined = int(np.isnan(dists).sum())
    if undefined:
        flags.append(f"hd95_undefined:{undefined}")
    return MetricReport(values, flags=flags)


# ---------------------------------------------------------------- landmarks


def heatmap_argmax(heatmaps) -> np.ndarray:
    """Voxel index of each heatmap's maximum; ties go to the lowest linear index."""
    heatmaps = np.asarray(heatmaps)
    flat = heatmaps.reshape(heatmaps.shape[0], -1)
    idx = flat.argmax(axis=1)
    return np.stack(np.unravel_index(idx, heatmaps.shape[1:]), axis=1)


def mre(pred_heatmaps, gt_coords, spacing=(1.0, 1.0, 1.0)):
    """Radial error per landmark and its mean, both in mm.

    Coordinates are in array-axis order, ``coord_mm = index * spacing``.
    """
    gt = np.asarray(gt_coords, dtype=np.float64)
    pred = heatmap_argmax(pred_heatmaps) * np.asarray(spacing, dtype=np.float64)
    if pred.shape != gt.shape:
        raise DimensionError(f"mre: {len(pred)} heatmaps vs {len(gt)} landmarks")
    errors = np.linalg.norm(pred - gt, axis=1)
    return errors, float(errors.mean())


def landmark_report(errors, names=None) -> MetricReport:
    """``errors`` is ``[samples, landmarks]`` in mm."""
    errors = np.atleast_2d(np.asarray(errors, dtype=np.float64))
    names = names or [f"landmark{i}" for i in range(errors.shape[1])]
    values = {f"mre_{n}": float(errors[:, i].mean()) for i, n in enumerate(names)}
    values["mre_mean"] = float(errors.mean())
    return MetricReport(values)


# ---------------------------------------------------------------- classification


def auc(scores, labels) -> float:
    """ROC AUC as the Mann-Whitney statistic; tied scores count 1/2."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC undefined: only one class present")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def _ratio(num, den, name, flags):
    if den == 0:
        flags.append(f"{name}_zero_denominator")
        return 0.0
    return num / den


def cls_metrics(scores, labels, threshold: float = 0.5) -> MetricReport:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(int)
    if scores.shape != labels.shape:
        raise DimensionError(f"cls_metrics: {scores.shape} scores vs {labels.shape} labels")
    pred = scores >= threshold
    pos = labels == 1
    tp = int(np.sum(pred & pos))
    fp = int(np.sum(pred & ~pos))
    tn = int(np.sum(~pred & ~pos))
    fn = int(np.sum(~pred & pos))
    flags = []
    total = tp + fp + tn + fn
    precision = _ratio(tp, tp + fp, "precision", flags)
    recall = _ratio(tp, tp + fn, "recall", flags)
    values = {
        "accuracy": _ratio(tp + tn, total, "accuracy", flags),
        "recall": recall,
        "specificity": _ratio(tn, tn + fp, "specificity", flags),
        "precision": precision,
        "f1": _ratio(2 * precision * recall, precision + recall, "f1", flags),
    }
    try:
        values["auc"] = auc(scores, labels)
    except UndefinedMetricError:
        values["auc"] = float("nan")
        flags.append("auc_undefined")
    return MetricReport(values, counts={"tp": tp, "fp": fp, "tn": tn, "fn": fn}, flags=flags)
