"""COCO-style average precision with 101-point interpolation."""
from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .geometry import Box, pairwise_iou

COCO_THRESHOLDS = tuple(np.round(np.linspace(0.5, 0.95, 10), 2).tolist())


@dataclass(frozen=True)
class Detection:
    image_id: int
    class_id: int
    box: Box
    confidence: float

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ContractError(f"confidence {self.confidence} outside [0, 1]")


@dataclass(frozen=True)
class GroundTruth:
    image_id: int
    class_id: int
    box: Box


def _check_threshold(t: float) -> None:
    if not 0.0 < t < 1.0:
        raise ContractError(f"IoU threshold must lie in (0, 1), got {t}")


def greedy_match(dets: list[Detection], gts: list[GroundTruth], iou_threshold: float) -> np.ndarray:
    """TP flags for ``dets`` in confidence order (stable on ties).

    Each detection takes the unmatched ground truth of its image and class
    with the highest IoU at or above the threshold.
    """
    order = sorted(range(len(dets)), key=lambda i: -dets[i].confidence)
    by_key: dict[tuple, list[int]] = defaultdict(list)
    for j, g in enumerate(gts):
        by_key[(g.image_id, g.class_id)].append(j)
    gt_arr = {k: np.array([gts[j].box.as_array() for j in v]) for k, v in by_key.items()}
    taken = {k: np.zeros(len(v), dtype=bool) for k, v in by_key.items()}
    tp = np.zeros(len(dets), dtype=bool)
    for rank, i in enumerate(order):
        d = dets[i]
        key = (d.image_id, d.class_id)
        if key not in gt_arr:
            continue
        ious = pairwise_iou(d.box.as_array(), gt_arr[key])[0]
        ious = np.where(taken[key] | (ious < iou_threshold), -1.0, ious)
        best = int(np.argmax(ious))
        if ious[best] >= 0:
            taken[key][best] = True
            tp[rank] = True
    return tp


def interpolated_ap(tp: np.ndarray, num_gt: int) -> float:
    """101-point interpolated AP from TP flags in rank order.

    Recall levels are compared in integers (100 * tp >= j * num_gt) so the
    boundary points 0.5, 0.25, ... are hit exactly.
    """
    tp = np.asarray(tp, dtype=bool)
    if num_gt == 0 or len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    precision = ctp / (ctp + cfp)
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(100 * ctp, np.arange(101) * num_gt, side="left")
    q = np.where(idx < len(precision), precision[np.minimum(idx, len(precision) - 1)], 0.0)
    return math.fsum(q) / 101


def average_precision(dets: list[Detection], gts: list[GroundTruth], iou_threshold: float = 0.5) -> float:
    """AP over the given detections and ground truths; 0 when there are no ground truths."""
    _check_threshold(iou_threshold)
    return interpolated_ap(greedy_match(dets, gts, iou_threshold), len(gts))


def map_range(dets: list[Detection], gts: list[GroundTruth],
              thresholds: tuple[float, ...] = COCO_THRESHOLDS) -> dict:
    """Class-averaged AP over IoU 0.50:0.05:0.95, plus AP50 and AP75.

    Classes without ground truth are skipped; with no ground truth at all
    every metric is 0.
    """
    for t in thresholds:
        _check_threshold(t)
    classes = sorted({g.class_id for g in gts})
    per_class_thr = {}
    for c in classes:
        d_c = [d for d in dets if d.class_id == c]
        g_c = [g for g in gts if g.class_id == c]
        per_class_thr[c] = [average_precision(d_c, g_c, t) for t in thresholds]
    if not classes:
        return {"AP": 0.0, "AP50": 0.0, "AP75": 0.0, "per_class": {}}
    table = np.array([per_class_thr[c] for c in classes])  # (classes, thresholds)
    thr = list(thresholds)

    def at(t):
        return float(table[:, thr.index(t)].mean()) if t in thr else float("nan")

    return {
        "AP": float(table.mean()),
        "AP50": at(0.5),
        "AP75": at(0.75),
        "per_class": {str(c): float(np.mean(per_class_thr[c])) for c in classes},
    }
