"""Detection quality metrics and diagnostic tables.

Matching is always greedy by descending score with deterministic tie-breaks
(stable sort on the input order; among ground truths, highest IoU first, then
lowest index). AP uses all-point interpolation — the exact area under the
precision envelope over achieved recall.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .boxes import Box, iou_matrix, pair_iou

__all__ = [
    "Detection",
    "GroundTruth",
    "iou",
    "average_precision",
    "mean_average_precision",
    "precision_recall_vs_confidence",
    "confidence_iou_pairs",
    "error_breakdown",
]


@dataclass(frozen=True)
class Detection:
    image_id: str
    class_id: int
    box: Box
    score: float


@dataclass(frozen=True)
class GroundTruth:
    image_id: str
    class_id: int
    box: Box


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes."""
    return pair_iou(a, b)


def _sorted_dets(dets: list[Detection]) -> list[Detection]:
    order = np.argsort([-d.score for d in dets], kind="stable")
    return [dets[i] for i in order]


def _greedy_matches(dets: list[Detection], gts: list[GroundTruth], iou_thresh: float):
    """One-to-one greedy matching; returns per-detection TP flags (score order)."""
    matched = [False] * len(gts)
    flags = []
    for det in dets:
        best_j, best_iou = -1, 0.0
        for j, gt in enumerate(gts):
            if matched[j] or gt.image_id != det.image_id or gt.class_id != det.class_id:
                continue
            v = pair_iou(det.box, gt.box)
            if v >= iou_thresh and v > best_iou:
                best_j, best_iou = j, v
        if best_j >= 0:
            matched[best_j] = True
            flags.append(True)
        else:
            flags.append(False)
    return flags


def average_precision(dets: list[Detection], gts: list[GroundTruth], iou_thresh: float = 0.5) -> float:
    """All-point interpolated AP for one class (callers filter by class).

    Detections are ranked by descending score (ties keep input order), matched
    greedily one-to-one within their image at IoU >= iou_thresh. With no
    ground truth the AP is 0 by definition.
    """
    if not gts:
        return 0.0
    if not dets:
        return 0.0
    ranked = _sorted_dets(dets)
    flags = _greedy_matches(ranked, gts, iou_thresh)
    n_gt = len(gts)
    tp = 0
    recalls, precisions = [], []
    for k, is_tp in enumerate(flags, start=1):
        tp += int(is_tp)
        recalls.append(tp / n_gt)
        precisions.append(tp / k)
    # precision envelope (suffix max), integrated left to right over recall
    env = precisions[:]
    for i in range(len(env) - 2, -1, -1):
        env[i] = max(env[i], env[i + 1])
    ap = 0.0
    prev_r = 0.0
    for r, p in zip(recalls, env):
        ap += (r - prev_r) * p
        prev_r = r
    return ap


def mean_average_precision(dets: list[Detection], gts: list[GroundTruth], iou_thresh: float = 0.5) -> float:
    """Mean AP over the classes that appear in the ground truth."""
    classes = sorted({g.class_id for g in gts})
    if not classes:
        return 0.0
    total = 0.0
    for c in classes:
        total += average_precision(
            [d for d in dets if d.class_id == c],
            [g for g in gts if g.class_id == c],
            iou_thresh,
        )
    return total / len(classes)


def precision_recall_vs_confidence(
    dets: list[Detection], gts: list[GroundTruth], thresholds, iou_thresh: float = 0.5
):
    """Coverage-style precision/recall of the detections at score >= t.

    A kept detection is correct if some same-image, same-class ground truth
    overlaps it at IoU >= iou_thresh; a ground truth is recalled if some kept
    detection covers it the same way (no one-to-one consumption). Returns rows
    (threshold, precision, recall, n_kept); precision is NaN when nothing is
    kept (documented sentinel), recall is 0.0 when there is no ground truth.
    """
    rows = []
    for t in thresholds:
        kept = [d for d in dets if d.score >= t]
        if kept:
            correct = sum(1 for d in kept if _covered(d, gts, iou_thresh))
            precision = correct / len(kept)
        else:
            precision = math.nan
        if gts:
            recalled = sum(1 for g in gts if _recalled(g, kept, iou_thresh))
            recall = recalled / len(gts)
        else:
            recall = 0.0
        rows.append((float(t), precision, recall, len(kept)))
    return rows


def _covered(det: Detection, gts: list[GroundTruth], iou_thresh: float) -> bool:
    return any(
        g.image_id == det.image_id
        and g.class_id == det.class_id
        and pair_iou(det.box, g.box) >= iou_thresh
        for g in gts
    )


def _recalled(gt: GroundTruth, dets: list[Detection], iou_thresh: float) -> bool:
    return any(
        d.image_id == gt.image_id
        and d.class_id == gt.class_id
        and pair_iou(d.box, gt.box) >= iou_thresh
        for d in dets
    )


def confidence_iou_pairs(dets: list[Detection], gts: list[GroundTruth]):
    """Per detection (input order): (score, best same-class IoU, 0.0 if none)."""
    rows = []
    for det in dets:
        best = 0.0
        for g in gts:
            if g.image_id == det.image_id and g.class_id == det.class_id:
                best = max(best, pair_iou(det.box, g.box))
        rows.append((float(det.score), best))
    return rows


def error_breakdown(
    dets: list[Detection], gts: list[GroundTruth], iou_thresh: float = 0.5, loc_thresh: float = 0.1
) -> dict:
    """Reduced TIDE-style error taxonomy.

    Detections in score order become exactly one of: TP (unmatched same-class
    GT at IoU >= iou_thresh, consuming it), Cls (IoU >= iou_thresh with a GT
    of another class; consumes nothing), Loc (same class, loc_thresh <= IoU <
    iou_thresh; consumes nothing), else FP. Unconsumed GTs count as Miss, so
    tp+cls+loc+fp == len(dets) and tp+miss == len(gts).
    """
    matched = [False] * len(gts)
    counts = {"tp": 0, "cls": 0, "loc": 0, "fp": 0, "miss": 0}
    for det in _sorted_dets(dets):
        img_gts = [(j, g) for j, g in enumerate(gts) if g.image_id == det.image_id]
        best_j, best_iou = -1, 0.0
        other_hit = False
        loc_hit = False
        for j, g in img_gts:
            v = pair_iou(det.box, g.box)
            if g.class_id == det.class_id:
                if not matched[j] and v >= iou_thresh and v > best_iou:
                    best_j, best_iou = j, v
                if loc_thresh <= v < iou_thresh:
                    loc_hit = True
            elif v >= iou_thresh:
                other_hit = True
        if best_j >= 0:
            matched[best_j] = True
            counts["tp"] += 1
        elif other_hit:
            counts["cls"] += 1
        elif loc_hit:
            counts["loc"] += 1
        else:
            counts["fp"] += 1
    counts["miss"] = len(gts) - counts["tp"]
    counts["n_dets"] = len(dets)
    counts["n_gts"] = len(gts)
    return counts
