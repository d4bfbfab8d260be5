"""Dense pseudo-label machinery.

The teacher's raw multi-level grids are turned into per-anchor training
targets without NMS and without IoU-based assignment: the top k% of anchors
by max class score become soft foregrounds carrying the teacher's post-sigmoid
scores and decoded boxes, uncertainty-rejected candidates are ignored, and
everything else is suppressed to background. The classic confidence-threshold
+ NMS + IoU-assignment route is also provided as the comparison baseline; both
`nms` and `assign_iou` bump call counters so tests can prove the dense path
never touches them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .boxes import Box, box_array, iou_matrix
from .errors import InvalidBoxError, InvalidInputError
from .util import sigmoid

__all__ = [
    "ROLE_BACKGROUND",
    "ROLE_SOFT_FG",
    "ROLE_IGNORE",
    "CALL_COUNTS",
    "AnchorLayout",
    "DensePred",
    "PseudoTarget",
    "AssignResult",
    "decode_box",
    "encode_box",
    "decode_array",
    "encode_array",
    "nms",
    "assign_iou",
    "topk_ratio_mask",
    "uncertainty_gate",
    "dense_targets",
    "max_class_scores",
]

ROLE_BACKGROUND = 0
ROLE_SOFT_FG = 1
ROLE_IGNORE = 2

# Call instrumentation: the dense pseudo-label path must keep these untouched.
CALL_COUNTS = {"nms": 0, "assign_iou": 0}

_DELTA_CLIP = 4.0  # |dw|,|dh| cap inside exp(), standard detector practice
_MIN_EXTENT = 1e-3  # smallest side a clamped box may collapse to


@dataclass(frozen=True)
class AnchorLayout:
    """Anchor grid geometry shared by predictions, targets, and the detector.

    Cell (r, c) at a level of stride s centers its anchors at
    ((c+0.5)*s, (r+0.5)*s); anchor (scale, ratio) has width base*s*scale*sqrt(ratio)
    and height base*s*scale/sqrt(ratio). Anchor index = scale_idx*len(ratios)+ratio_idx.
    """

    canvas_h: int = 32
    canvas_w: int = 32
    strides: tuple[int, ...] = (4, 8)
    ratios: tuple[float, ...] = (0.5, 1.0, 2.0)
    scales: tuple[float, ...] = (1.0,)
    base_scale: float = 2.0

    @property
    def num_levels(self) -> int:
        return len(self.strides)

    @property
    def anchors_per_cell(self) -> int:
        return len(self.ratios) * len(self.scales)

    def level_dims(self, level: int) -> tuple[int, int]:
        s = self.strides[level]
        return (-(-self.canvas_h // s), -(-self.canvas_w // s))

    def level_sizes(self) -> list[int]:
        return [h * w * self.anchors_per_cell for h, w in map(self.level_dims, range(self.num_levels))]

    @property
    def total_anchors(self) -> int:
        return sum(self.level_sizes())

    def anchor_boxes(self, level: int) -> np.ndarray:
        """All anchors of one level as [h, w, A, 4] corner boxes."""
        h, w = self.level_dims(level)
        s = float(self.strides[level])
        cy = (np.arange(h, dtype=np.float64) + 0.5) * s
        cx = (np.arange(w, dtype=np.float64) + 0.5) * s
        sizes = []
        for sc in self.scales:
            for ar in self.ratios:
                base = self.base_scale * s * sc
                sizes.append((base * math.sqrt(ar), base / math.sqrt(ar)))
        out = np.empty((h, w, len(sizes), 4), dtype=np.float64)
        for a, (aw, ah) in enumerate(sizes):
            out[:, :, a, 0] = cx[None, :] - aw / 2.0
            out[:, :, a, 1] = cy[:, None] - ah / 2.0
            out[:, :, a, 2] = cx[None, :] + aw / 2.0
            out[:, :, a, 3] = cy[:, None] + ah / 2.0
        return out

    def all_anchor_boxes(self) -> np.ndarray:
        """Flat [M, 4] anchors in (level, row, col, anchor) order."""
        return np.concatenate(
            [self.anchor_boxes(l).reshape(-1, 4) for l in range(self.num_levels)], axis=0
        )


@dataclass
class DensePred:
    """Raw per-image detector output: multi-level logit grids (float32).

    cls_logits[l]: [h, w, A, K]; reg_deltas[l]: [h, w, A, 4];
    evidence_logits[l]: [h, w, A] raw λ head outputs.
    """

    layout: AnchorLayout
    num_classes: int
    cls_logits: list[np.ndarray] = field(default_factory=list)
    reg_deltas: list[np.ndarray] = field(default_factory=list)
    evidence_logits: list[np.ndarray] = field(default_factory=list)
    image_id: str = ""

    def __post_init__(self):
        lay = self.layout
        if len(self.cls_logits) != lay.num_levels:
            raise InvalidInputError("one cls grid per level required")
        if len(self.reg_deltas) != lay.num_levels or len(self.evidence_logits) != lay.num_levels:
            raise InvalidInputError("one reg/evidence grid per level required")
        a, k = lay.anchors_per_cell, self.num_classes
        for l in range(lay.num_levels):
            h, w = lay.level_dims(l)
            cls = np.ascontiguousarray(np.asarray(self.cls_logits[l]), dtype=np.float32)
            reg = np.ascontiguousarray(np.asarray(self.reg_deltas[l]), dtype=np.float32)
            ev = np.ascontiguousarray(np.asarray(self.evidence_logits[l]), dtype=np.float32)
            if cls.shape != (h, w, a, k):
                raise InvalidInputError(f"level {l} cls shape {cls.shape} != {(h, w, a, k)}")
            if reg.shape != (h, w, a, 4):
                raise InvalidInputError(f"level {l} reg shape {reg.shape} != {(h, w, a, 4)}")
            if ev.shape != (h, w, a):
                raise InvalidInputError(f"level {l} evidence shape {ev.shape} != {(h, w, a)}")
            for name, arr in (("cls", cls), ("reg", reg), ("evidence", ev)):
                if not np.all(np.isfinite(arr)):
                    raise InvalidInputError(f"level {l} {name} grid has non-finite values")
            self.cls_logits[l] = cls
            self.reg_deltas[l] = reg
            self.evidence_logits[l] = ev

    def flat_cls_logits(self) -> np.ndarray:
        return np.concatenate([g.reshape(-1, self.num_classes) for g in self.cls_logits], axis=0)

    def flat_reg_deltas(self) -> np.ndarray:
        return np.concatenate([g.reshape(-1, 4) for g in self.reg_deltas], axis=0)

    def flat_evidence(self) -> np.ndarray:
        return np.concatenate([g.reshape(-1) for g in self.evidence_logits], axis=0)


@dataclass
class PseudoTarget:
    """Per-anchor dense training targets, flat in (level, row, col, anchor) order."""

    layout: AnchorLayout
    num_classes: int
    roles: np.ndarray  # [M] int8: 0 background / 1 soft foreground / 2 ignore
    scores: np.ndarray  # [M, K] float64 soft class targets
    boxes: np.ndarray  # [M, 4] float64, zeros unless soft foreground
    weights: np.ndarray  # [M] float64 teacher max score, zeros unless soft fg

    def __post_init__(self):
        m = self.layout.total_anchors
        self.roles = np.asarray(self.roles, dtype=np.int8).reshape(m)
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(m, self.num_classes)
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(m, 4)
        self.weights = np.asarray(self.weights, dtype=np.float64).reshape(m)
        if not np.all(np.isin(self.roles, (ROLE_BACKGROUND, ROLE_SOFT_FG, ROLE_IGNORE))):
            raise InvalidInputError("roles must be 0, 1, or 2")
        for name, arr in (("scores", self.scores), ("boxes", self.boxes), ("weights", self.weights)):
            if not np.all(np.isfinite(arr)):
                raise InvalidInputError(f"target {name} must be finite")


def _anchor_geometry(anchors: np.ndarray):
    aw = anchors[..., 2] - anchors[..., 0]
    ah = anchors[..., 3] - anchors[..., 1]
    if np.any(aw <= 0) or np.any(ah <= 0):
        raise InvalidBoxError("anchor boxes must have positive extent")
    acx = anchors[..., 0] + aw / 2.0
    acy = anchors[..., 1] + ah / 2.0
    return acx, acy, aw, ah


def decode_array(anchors, deltas, canvas: tuple[int, int] | None = None) -> np.ndarray:
    """Vectorized delta decoding; clamps into the canvas when given.

    deltas are (dx, dy, dw, dh): center offsets in anchor-size units and
    log-scale factors (capped at ±4).
    """
    anchors = np.asarray(anchors, dtype=np.float64)
    deltas = np.asarray(deltas, dtype=np.float64)
    acx, acy, aw, ah = _anchor_geometry(anchors)
    if not np.all(np.isfinite(deltas)):
        raise InvalidInputError("deltas must be finite")
    cx = acx + deltas[..., 0] * aw
    cy = acy + deltas[..., 1] * ah
    w = aw * np.exp(np.clip(deltas[..., 2], -_DELTA_CLIP, _DELTA_CLIP))
    h = ah * np.exp(np.clip(deltas[..., 3], -_DELTA_CLIP, _DELTA_CLIP))
    out = np.stack([cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0], axis=-1)
    if canvas is not None:
        cw, ch = float(canvas[0]), float(canvas[1])
        out[..., 0] = np.clip(out[..., 0], 0.0, cw)
        out[..., 2] = np.clip(out[..., 2], 0.0, cw)
        out[..., 1] = np.clip(out[..., 1], 0.0, ch)
        out[..., 3] = np.clip(out[..., 3], 0.0, ch)
        for lo, hi, limit in ((0, 2, cw), (1, 3, ch)):
            narrow = out[..., hi] - out[..., lo] < _MIN_EXTENT
            if np.any(narrow):
                mid = np.clip(
                    (out[..., lo] + out[..., hi]) / 2.0, _MIN_EXTENT / 2, limit - _MIN_EXTENT / 2
                )
                out[..., lo] = np.where(narrow, mid - _MIN_EXTENT / 2, out[..., lo])
                out[..., hi] = np.where(narrow, mid + _MIN_EXTENT / 2, out[..., hi])
    return out


def encode_array(boxes, anchors) -> np.ndarray:
    """Inverse of decode_array (no clamping)."""
    boxes = np.asarray(boxes, dtype=np.float64)
    anchors = np.asarray(anchors, dtype=np.float64)
    acx, acy, aw, ah = _anchor_geometry(anchors)
    bw = boxes[..., 2] - boxes[..., 0]
    bh = boxes[..., 3] - boxes[..., 1]
    if np.any(bw <= 0) or np.any(bh <= 0):
        raise InvalidBoxError("boxes must have positive extent")
    bcx = boxes[..., 0] + bw / 2.0
    bcy = boxes[..., 1] + bh / 2.0
    return np.stack(
        [(bcx - acx) / aw, (bcy - acy) / ah, np.log(bw / aw), np.log(bh / ah)], axis=-1
    )


def decode_box(anchor: Box, deltas, canvas: tuple[int, int] | None = None) -> Box:
    """Decode one box from (dx, dy, dw, dh) deltas relative to an anchor."""
    out = decode_array(anchor.as_array(), np.asarray(deltas, dtype=np.float64), canvas=canvas)
    return Box(*[float(v) for v in out])


def encode_box(box: Box, anchor: Box) -> np.ndarray:
    """Deltas that decode back to `box` from `anchor` (exact round trip)."""
    return encode_array(box.as_array(), anchor.as_array())


def nms(boxes, scores, iou_thresh: float = 0.5) -> list[int]:
    """Greedy suppression by descending score; ties keep the lower index.

    Returns kept indices in pick order. Counted in CALL_COUNTS for the
    assignment-free instrumentation.
    """
    CALL_COUNTS["nms"] += 1
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if boxes.shape[0] != scores.shape[0]:
        raise InvalidInputError("boxes/scores length mismatch")
    order = np.argsort(-scores, kind="stable")
    kept: list[int] = []
    alive = np.ones(len(order), dtype=bool)
    for pos, idx in enumerate(order):
        if not alive[pos]:
            continue
        kept.append(int(idx))
        rest = order[pos + 1 :]
        if len(rest) == 0:
            break
        ious = iou_matrix(boxes[idx : idx + 1], boxes[rest])[0]
        alive[pos + 1 :] &= ~(ious > iou_thresh)
    return kept


@dataclass
class AssignResult:
    """Per-anchor IoU assignment: roles use the same 0/1/2 coding as targets."""

    roles: np.ndarray  # [M] int8 (1 = foreground here)
    gt_index: np.ndarray  # [M] int64, -1 outside foreground
    classes: np.ndarray  # [M] int64, -1 outside foreground
    boxes: np.ndarray  # [M, 4] float64 matched GT box, zeros outside foreground


def assign_iou(gt_boxes, gt_classes, anchors, fg_thresh: float = 0.5, bg_thresh: float = 0.4) -> AssignResult:
    """Classic one-stage assignment: fg at IoU >= 0.5, bg in [0, 0.4), else ignore.

    Counted in CALL_COUNTS for the assignment-free instrumentation.
    """
    CALL_COUNTS["assign_iou"] += 1
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    gt_boxes = box_array(gt_boxes)
    gt_classes = np.asarray(gt_classes, dtype=np.int64).reshape(-1)
    m = anchors.shape[0]
    roles = np.full(m, ROLE_BACKGROUND, dtype=np.int8)
    gt_index = np.full(m, -1, dtype=np.int64)
    classes = np.full(m, -1, dtype=np.int64)
    boxes = np.zeros((m, 4), dtype=np.float64)
    if gt_boxes.shape[0] == 0:
        return AssignResult(roles, gt_index, classes, boxes)
    if gt_boxes.shape[0] != gt_classes.shape[0]:
        raise InvalidInputError("gt boxes/classes length mismatch")
    ious = iou_matrix(anchors, gt_boxes)
    best = np.argmax(ious, axis=1)
    best_iou = ious[np.arange(m), best]
    fg = best_iou >= fg_thresh
    ignore = (~fg) & (best_iou >= bg_thresh)
    roles[fg] = ROLE_SOFT_FG
    roles[ignore] = ROLE_IGNORE
    gt_index[fg] = best[fg]
    classes[fg] = gt_classes[best[fg]]
    boxes[fg] = gt_boxes[best[fg]]
    return AssignResult(roles, gt_index, classes, boxes)


def max_class_scores(pred: DensePred) -> np.ndarray:
    """Flat [M] max post-sigmoid class score per anchor (float64)."""
    return np.max(sigmoid(pred.flat_cls_logits()), axis=1)


def topk_ratio_mask(scores, k_percent: float) -> np.ndarray:
    """Mark the ceil(k% * M) highest-scoring anchors.

    Ties resolve toward the earlier flat index, i.e. (lower level, row-major
    location, lower anchor index), so the mask is stable under permutation of
    the input's construction.
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(scores)):
        raise InvalidInputError("scores must be finite")
    if not 0.0 <= k_percent <= 100.0:
        raise InvalidInputError(f"k_percent must be in [0, 100], got {k_percent}")
    n = math.ceil(k_percent / 100.0 * scores.shape[0])
    mask = np.zeros(scores.shape[0], dtype=bool)
    if n > 0:
        order = np.argsort(-scores, kind="stable")
        mask[order[:n]] = True
    return mask


def uncertainty_gate(candidates, p, u, tau_u: float) -> np.ndarray:
    """Keep candidates whose uncertainty is strictly below tau_u."""
    candidates = np.asarray(candidates, dtype=bool).reshape(-1)
    p = np.asarray(p, dtype=np.float64).reshape(-1)
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    if not (candidates.shape == p.shape == u.shape):
        raise InvalidInputError("candidates/p/u must have equal length")
    if not 0.0 < tau_u <= 0.25:
        raise InvalidInputError(f"tau_u must be in (0, 0.25], got {tau_u}")
    if not np.all(np.isfinite(u)):
        raise InvalidInputError("uncertainty values must be finite")
    return candidates & (u < tau_u)


def dense_targets(teacher: DensePred, gated, rejected) -> PseudoTarget:
    """Soft targets from raw teacher grids: no NMS, no IoU assignment.

    gated anchors become soft foregrounds carrying the teacher's post-sigmoid
    scores and decoded (canvas-clamped) boxes; rejected anchors are ignored;
    everything else is background with all-zero score targets.
    """
    gated = np.asarray(gated, dtype=bool).reshape(-1)
    rejected = np.asarray(rejected, dtype=bool).reshape(-1)
    m = teacher.layout.total_anchors
    if gated.shape[0] != m or rejected.shape[0] != m:
        raise InvalidInputError("mask length must equal total anchor count")
    if np.any(gated & rejected):
        raise InvalidInputError("gated and rejected masks must be disjoint")
    probs = sigmoid(teacher.flat_cls_logits())
    roles = np.full(m, ROLE_BACKGROUND, dtype=np.int8)
    roles[rejected] = ROLE_IGNORE
    roles[gated] = ROLE_SOFT_FG
    scores = np.zeros((m, teacher.num_classes), dtype=np.float64)
    scores[gated] = probs[gated]
    boxes = np.zeros((m, 4), dtype=np.float64)
    weights = np.zeros(m, dtype=np.float64)
    if np.any(gated):
        anchors = teacher.layout.all_anchor_boxes()
        canvas = (teacher.layout.canvas_w, teacher.layout.canvas_h)
        boxes[gated] = decode_array(anchors[gated], teacher.flat_reg_deltas()[gated], canvas=canvas)
        weights[gated] = np.max(probs[gated], axis=1)
    return PseudoTarget(teacher.layout, teacher.num_classes, roles, scores, boxes, weights)
