"""Synthetic detection world and a tiny differentiable anchor detector.

The world renders class-keyed Gaussian blobs (amplitude = salience, classes 1
and 2 share a leaky channel signature) plus log-size/offset encodings onto a
two-level feature pyramid over a 32x32 canvas. The target domain reduces
contrast, adds noise, and skews objects smaller and fainter.

The detector is a linear projection with ReLU feeding per-cell linear heads
(classification, box deltas, evidence) and an optional shift head that remaps
the regression features within and across scales. Forward and backward are
hand-written numpy; `detector_backward` returns the exact gradient of the
assembled scalar loss and is finite-difference checked in the tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import remap as rm
from .boxes import Box
from .edl import softplus_lambda
from .errors import InvalidInputError
from .grid import FeatureMap, Pyramid
from .losses import focal_loss, giou_loss, target_cls_loss
from .metrics import Detection, GroundTruth, mean_average_precision
from .pseudo import (
    ROLE_IGNORE,
    ROLE_SOFT_FG,
    AnchorLayout,
    AssignResult,
    DensePred,
    PseudoTarget,
    decode_array,
    nms,
)
from .rng import parallel_map, substream
from .util import sigmoid

__all__ = [
    "SceneObject",
    "ToyScene",
    "gen_dataset",
    "featurize",
    "DetectorSpec",
    "ToyDetectorParams",
    "detector_forward",
    "detector_backward",
    "forward_arrays",
    "backward_arrays",
    "source_image_loss",
    "dense_image_loss",
    "regu_image_loss",
    "detections_from_pred",
    "evaluate",
    "EvalResult",
    "DEFAULT_SEEDS",
]

CANVAS = 32
NUM_CLASSES = 3
IN_CHANNELS = 8  # 3 class + objectness + 2 log-size + 2 center-offset
HIDDEN = 16
SHIFT_HIDDEN = 4
DEFAULT_SEEDS = (0, 1, 2, 3, 4)

SCORE_FLOOR = 0.05
NMS_IOU = 0.5
EVAL_IOU = 0.5

_AMP = 3.0
_TARGET_CONTRAST = 0.55
_NOISE = {"source": 0.06, "target": 0.10}
_SIZE_LOG_RANGE = {"source": (math.log(6.0), math.log(15.0)), "target": (math.log(5.0), math.log(13.0))}
_SALIENCE_RANGE = {"source": (0.55, 1.0), "target": (0.25, 0.85)}
_SIZE_BASE = 8.0  # log-size channels encode log(extent / this)
# class -> class-channel signature; classes 1 and 2 leak into each other
_SIGNATURE = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.45], [0.0, 0.45, 1.0]])
_CLASS_BLEED = 0.25
# target objects borrow part of the next class's appearance, so class
# boundaries fitted on source data transfer imperfectly
_SIGNATURE_TARGET = (1.0 - _CLASS_BLEED) * _SIGNATURE + _CLASS_BLEED * np.roll(
    _SIGNATURE, -1, axis=0
)


@dataclass(frozen=True)
class SceneObject:
    class_id: int
    box: Box
    salience: float


@dataclass
class ToyScene:
    domain: str
    objects: list[SceneObject]
    canvas_h: int = CANVAS
    canvas_w: int = CANVAS

    def __post_init__(self):
        if self.domain not in ("source", "target"):
            raise InvalidInputError(f"domain must be source|target, got {self.domain!r}")
        if not 1 <= len(self.objects) <= 8:
            raise InvalidInputError(f"scene must hold 1..8 objects, got {len(self.objects)}")
        for obj in self.objects:
            if not 0 <= obj.class_id < NUM_CLASSES:
                raise InvalidInputError(f"class {obj.class_id} out of range")
            b = obj.box
            if b.x1 < 0 or b.y1 < 0 or b.x2 > self.canvas_w or b.y2 > self.canvas_h:
                raise InvalidInputError("object box must lie inside the canvas")
            if not 0.0 < obj.salience <= 1.0:
                raise InvalidInputError(f"salience must be in (0, 1], got {obj.salience}")

    def to_dict(self) -> dict:
        return {
            "canvas": [self.canvas_h, self.canvas_w],
            "domain": self.domain,
            "objects": [
                {
                    "class": o.class_id,
                    "box": [o.box.x1, o.box.y1, o.box.x2, o.box.y2],
                    "salience": o.salience,
                }
                for o in self.objects
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ToyScene":
        objs = [
            SceneObject(int(o["class"]), Box(*[float(v) for v in o["box"]]), float(o["salience"]))
            for o in d["objects"]
        ]
        return cls(domain=d["domain"], objects=objs, canvas_h=int(d["canvas"][0]), canvas_w=int(d["canvas"][1]))

    def gt_arrays(self):
        boxes = np.array([[o.box.x1, o.box.y1, o.box.x2, o.box.y2] for o in self.objects])
        classes = np.array([o.class_id for o in self.objects], dtype=np.int64)
        return boxes, classes


def gen_dataset(seed: int, n_images: int, domain: str, tag: str = "train") -> list[ToyScene]:
    """Sample n_images single-object scenes; target draws smaller, fainter objects."""
    if domain not in _SIZE_LOG_RANGE:
        raise InvalidInputError(f"domain must be source|target, got {domain!r}")
    scenes = []
    lo_s, hi_s = _SIZE_LOG_RANGE[domain]
    lo_a, hi_a = _SALIENCE_RANGE[domain]
    for i in range(n_images):
        rng = substream(seed, f"scene/{domain}/{tag}", i)
        size = math.exp(rng.uniform(lo_s, hi_s))
        ar = math.exp(rng.uniform(math.log(0.6), math.log(1.6)))
        w = min(size * math.sqrt(ar), CANVAS - 0.5)
        h = min(size / math.sqrt(ar), CANVAS - 0.5)
        cx = rng.uniform(w / 2, CANVAS - w / 2)
        cy = rng.uniform(h / 2, CANVAS - h / 2)
        obj = SceneObject(
            class_id=int(rng.integers(0, NUM_CLASSES)),
            box=Box(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2),
            salience=float(rng.uniform(lo_a, hi_a)),
        )
        scenes.append(ToyScene(domain=domain, objects=[obj]))
    return scenes


def _scene_noise_rng(scene: ToyScene) -> np.random.Generator:
    # Noise is keyed by scene content so featurize(scene) is a pure function
    # that survives serialization round trips.
    parts = [scene.domain, str(scene.canvas_h), str(scene.canvas_w)]
    for o in scene.objects:
        parts.append(f"{o.class_id}:{o.box.x1!r},{o.box.y1!r},{o.box.x2!r},{o.box.y2!r}:{o.salience!r}")
    import hashlib

    digest = hashlib.blake2b("|".join(parts).encode(), digest_size=16).digest()
    key = np.frombuffer(digest, dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def featurize(scene: ToyScene, layout: AnchorLayout | None = None, noise: bool = True) -> Pyramid:
    """Render a scene onto the feature pyramid (deterministic).

    Rendering is linear in salience; the target domain multiplies object
    response by a contrast factor, bleeds class appearance toward the next
    class, and adds stronger per-cell noise.
    """
    layout = layout or AnchorLayout(canvas_h=scene.canvas_h, canvas_w=scene.canvas_w)
    contrast = _TARGET_CONTRAST if scene.domain == "target" else 1.0
    sig_mat = _SIGNATURE_TARGET if scene.domain == "target" else _SIGNATURE
    levels = []
    for l in range(layout.num_levels):
        h, w = layout.level_dims(l)
        stride = float(layout.strides[l])
        grid = np.zeros((h, w, IN_CHANNELS), dtype=np.float64)
        rows = np.arange(h, dtype=np.float64)[:, None]
        cols = np.arange(w, dtype=np.float64)[None, :]
        for obj in scene.objects:
            bw = obj.box.x2 - obj.box.x1
            bh = obj.box.y2 - obj.box.y1
            ucx = (obj.box.x1 + bw / 2) / stride - 0.5
            ucy = (obj.box.y1 + bh / 2) / stride - 0.5
            d2 = ((rows - ucy) ** 2) + ((cols - ucx) ** 2)
            # appearance: sharp, salience-scaled peaks (these carry the domain
            # gap); geometry: salience-free indicator footprint so cells near
            # the center read exact offset/log-size values in either domain
            sig_a = max(0.5, 0.22 * math.sqrt(bw * bh) / stride)
            blob_a = np.exp(-d2 / (2 * sig_a * sig_a))
            foot = (d2 <= 2.25).astype(np.float64)
            amp = _AMP * obj.salience * contrast
            grid[:, :, :3] += (amp * blob_a)[:, :, None] * sig_mat[obj.class_id]
            grid[:, :, 3] += amp * blob_a
            grid[:, :, 4] += foot * math.log(bw / _SIZE_BASE)
            grid[:, :, 5] += foot * math.log(bh / _SIZE_BASE)
            grid[:, :, 6] += foot * (ucx - cols)
            grid[:, :, 7] += foot * (ucy - rows)
        levels.append(grid)
    if noise:
        rng = _scene_noise_rng(scene)
        sd = _NOISE[scene.domain]
        for grid in levels:
            grid += rng.normal(0.0, sd, size=grid.shape)
    return Pyramid([FeatureMap(g) for g in levels], layout.strides)


# ---------------------------------------------------------------------------
# Detector parameters


@dataclass(frozen=True)
class DetectorSpec:
    layout: AnchorLayout = field(default_factory=AnchorLayout)
    num_classes: int = NUM_CLASSES
    in_channels: int = IN_CHANNELS
    hidden: int = HIDDEN
    shift_hidden: int = SHIFT_HIDDEN
    tca_enabled: bool = True

    @property
    def shift_spec(self) -> rm.ShiftHeadSpec:
        return rm.ShiftHeadSpec(channels=self.hidden, hidden=self.shift_hidden)

    def sections(self) -> list[tuple[str, int]]:
        a = self.layout.anchors_per_cell
        parts = [
            ("proj_w", self.in_channels * self.hidden),
            ("proj_b", self.hidden),
            ("cls_w", self.hidden * a * self.num_classes),
            ("cls_b", a * self.num_classes),
            ("reg_w", self.hidden * a * 4),
            ("reg_b", a * 4),
            ("ev_w", self.hidden * a),
            ("ev_b", a),
        ]
        if self.tca_enabled:
            parts.append(("shift", self.shift_spec.n_params))
        return parts

    @property
    def n_params(self) -> int:
        return sum(size for _, size in self.sections())

    def manifest(self) -> list[dict]:
        rows, offset = [], 0
        for name, size in self.sections():
            rows.append({"name": name, "offset": offset, "size": size})
            offset += size
        return rows


@dataclass
class ToyDetectorParams:
    """Flat float64 parameter vector with a named-section manifest."""

    spec: DetectorSpec
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if self.values.shape[0] != self.spec.n_params:
            raise InvalidInputError(
                f"expected {self.spec.n_params} params, got {self.values.shape[0]}"
            )
        if not np.all(np.isfinite(self.values)):
            raise InvalidInputError("parameters must be finite")

    def section(self, name: str) -> np.ndarray:
        offset = 0
        for sec_name, size in self.spec.sections():
            if sec_name == name:
                return self.values[offset : offset + size]
            offset += size
        raise InvalidInputError(f"unknown section {name!r}")

    @classmethod
    def init(cls, spec: DetectorSpec, seed: int) -> "ToyDetectorParams":
        rng = substream(seed, "init")
        a = spec.layout.anchors_per_cell
        vec = []
        # factorized projection init: half the hidden units read the geometry
        # channels (both signs, so ReLU keeps the full range representable),
        # the other half mix the appearance channels
        proj = np.zeros((spec.in_channels, spec.hidden))
        ng = spec.in_channels - 4
        for j in range(4):
            proj[ng + j, j] = 1.0
            proj[ng + j, 4 + j] = -1.0
        proj[:ng, 8:] = rng.normal(0.0, 0.3, (ng, spec.hidden - 8))
        vec.append(proj.reshape(-1))
        vec.append(np.zeros(spec.hidden))
        # zero-init heads: predictions start at the biased-background /
        # anchor-box / softplus(0) fixed point instead of init noise
        vec.append(np.zeros(spec.hidden * a * spec.num_classes))
        vec.append(np.full(a * spec.num_classes, -2.0))  # start near background
        vec.append(np.zeros(spec.hidden * a * 4))
        vec.append(np.zeros(a * 4))
        vec.append(np.zeros(spec.hidden * a))
        vec.append(np.zeros(a))
        if spec.tca_enabled:
            ss = spec.shift_spec
            # small first layer keeps the remap close to identity through
            # early training instead of co-adapting with the box head
            w1 = rng.normal(0.0, 0.05, ss.fan_in * ss.hidden)
            # zero final conv => identity remap at initialization
            vec.extend([w1, np.zeros(ss.hidden), np.zeros(9 * ss.hidden * 3), np.zeros(3)])
        return cls(spec, np.concatenate(vec))


def _unpack(spec: DetectorSpec, values: np.ndarray) -> dict[str, np.ndarray]:
    a = spec.layout.anchors_per_cell
    out, offset = {}, 0
    shapes = {
        "proj_w": (spec.in_channels, spec.hidden),
        "proj_b": (spec.hidden,),
        "cls_w": (spec.hidden, a * spec.num_classes),
        "cls_b": (a * spec.num_classes,),
        "reg_w": (spec.hidden, a * 4),
        "reg_b": (a * 4,),
        "ev_w": (spec.hidden, a),
        "ev_b": (a,),
    }
    for name, size in spec.sections():
        chunk = values[offset : offset + size]
        out[name] = chunk if name == "shift" else chunk.reshape(shapes[name])
        offset += size
    return out


# ---------------------------------------------------------------------------
# Forward / backward


def forward_arrays(spec: DetectorSpec, values: np.ndarray, pyr_levels: list[np.ndarray]):
    """Array-level forward pass.

    Returns (outs, cache) where outs has per-level float64 grids:
    cls [h,w,A,K], reg [h,w,A,4], ev [h,w,A].
    """
    p = _unpack(spec, np.asarray(values, dtype=np.float64))
    a, k = spec.layout.anchors_per_cell, spec.num_classes
    pre, hid = [], []
    for lvl in pyr_levels:
        z = np.asarray(lvl, dtype=np.float64) @ p["proj_w"] + p["proj_b"]
        pre.append(z)
        hid.append(np.maximum(z, 0.0))
    if spec.tca_enabled:
        shifts, head_cache = rm.shift_head_forward(hid, hid, spec.shift_spec, p["shift"])
        within, within_cache = rm.remap_within_arrays(hid, shifts)
        reg_feat, cross_cache = rm.remap_cross_arrays(within, shifts, list(spec.layout.strides))
        tca_cache = (head_cache, within_cache, cross_cache, [w.shape for w in within])
    else:
        reg_feat, tca_cache = hid, None
    cls, reg, ev = [], [], []
    for h_l, g_l in zip(hid, reg_feat):
        hh, ww = h_l.shape[0], h_l.shape[1]
        cls.append((h_l @ p["cls_w"] + p["cls_b"]).reshape(hh, ww, a, k))
        reg.append((g_l @ p["reg_w"] + p["reg_b"]).reshape(hh, ww, a, 4))
        ev.append((h_l @ p["ev_w"] + p["ev_b"]).reshape(hh, ww, a))
    outs = {"cls": cls, "reg": reg, "ev": ev}
    cache = {"parts": p, "pre": pre, "hid": hid, "reg_feat": reg_feat, "tca": tca_cache, "pyr": pyr_levels}
    return outs, cache


def backward_arrays(spec: DetectorSpec, cache, dcls, dreg, dev) -> np.ndarray:
    """Exact gradient of sum(dcls*cls + dreg*reg + dev*ev) w.r.t. the params."""
    p = cache["parts"]
    a, k = spec.layout.anchors_per_cell, spec.num_classes
    g = {name: np.zeros_like(arr) for name, arr in p.items()}
    dhid = [np.zeros_like(h) for h in cache["hid"]]
    dreg_feat = [np.zeros_like(h) for h in cache["reg_feat"]]
    for l, (h_l, g_l) in enumerate(zip(cache["hid"], cache["reg_feat"])):
        hh, ww = h_l.shape[0], h_l.shape[1]
        dc = np.asarray(dcls[l], dtype=np.float64).reshape(hh, ww, a * k)
        dr = np.asarray(dreg[l], dtype=np.float64).reshape(hh, ww, a * 4)
        de = np.asarray(dev[l], dtype=np.float64).reshape(hh, ww, a)
        g["cls_w"] += np.einsum("hwd,hwo->do", h_l, dc)
        g["cls_b"] += dc.sum(axis=(0, 1))
        g["reg_w"] += np.einsum("hwd,hwo->do", g_l, dr)
        g["reg_b"] += dr.sum(axis=(0, 1))
        g["ev_w"] += np.einsum("hwd,hwo->do", h_l, de)
        g["ev_b"] += de.sum(axis=(0, 1))
        dhid[l] += dc @ p["cls_w"].T + de @ p["ev_w"].T
        dreg_feat[l] += dr @ p["reg_w"].T
    if spec.tca_enabled:
        head_cache, within_cache, cross_cache, within_shapes = cache["tca"]
        dwithin, dsh_cross = rm.remap_cross_vjp(cross_cache, dreg_feat, within_shapes)
        dhid_w, dsh_within = rm.remap_within_vjp(within_cache, dwithin)
        dshifts = [x + y for x, y in zip(dsh_cross, dsh_within)]
        dcls_f, dreg_f, g["shift"] = rm.shift_head_vjp(head_cache, dshifts)
        dhid = [h0 + h1 + h2 + h3 for h0, h1, h2, h3 in zip(dhid, dhid_w, dcls_f, dreg_f)]
    else:
        dhid = [h0 + h1 for h0, h1 in zip(dhid, dreg_feat)]
    for l, lvl in enumerate(cache["pyr"]):
        dz = np.where(cache["pre"][l] > 0.0, dhid[l], 0.0)
        g["proj_w"] += np.einsum("hwc,hwd->cd", np.asarray(lvl, dtype=np.float64), dz)
        g["proj_b"] += dz.sum(axis=(0, 1))
    flat = []
    for name, _ in spec.sections():
        flat.append(g[name].reshape(-1))
    return np.concatenate(flat)


def detector_forward(params: ToyDetectorParams, pyramid: Pyramid, image_id: str = "") -> DensePred:
    """Pure forward pass producing the float32 DensePred container."""
    levels = [lvl.data.astype(np.float64) for lvl in pyramid.levels]
    outs, _ = forward_arrays(params.spec, params.values, levels)
    return DensePred(
        layout=params.spec.layout,
        num_classes=params.spec.num_classes,
        cls_logits=[c for c in outs["cls"]],
        reg_deltas=[r for r in outs["reg"]],
        evidence_logits=[e for e in outs["ev"]],
        image_id=image_id,
    )


def detector_backward(
    params: ToyDetectorParams, cache, dcls, dreg, dev, weight_decay: float = 1e-4
) -> np.ndarray:
    """Parameter gradient including the (wd/2)·||θ||² decay term."""
    grad = backward_arrays(params.spec, cache, dcls, dreg, dev)
    return grad + weight_decay * params.values


# ---------------------------------------------------------------------------
# Loss assembly (per image); every function returns loss pieces + adjoints
# shaped like the forward outputs so backward_arrays can consume them.


def _flat(outs_key: list[np.ndarray], last: int) -> np.ndarray:
    return np.concatenate([o.reshape(-1, last) for o in outs_key], axis=0)


def _unflat(flat: np.ndarray, spec: DetectorSpec, last: int) -> list[np.ndarray]:
    sizes = spec.layout.level_sizes()
    out, start = [], 0
    a = spec.layout.anchors_per_cell
    for l, size in enumerate(sizes):
        h, w = spec.layout.level_dims(l)
        shape = (h, w, a, last) if last > 1 else (h, w, a)
        out.append(flat[start : start + size].reshape(shape))
        start += size
    return out


def _decode_grad(anchors: np.ndarray, deltas: np.ndarray):
    """Unclamped decode with a pullback from box-corner grads to delta grads."""
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    acx = anchors[:, 0] + aw / 2
    acy = anchors[:, 1] + ah / 2
    dwc = np.clip(deltas[:, 2], -4.0, 4.0)
    dhc = np.clip(deltas[:, 3], -4.0, 4.0)
    w = aw * np.exp(dwc)
    h = ah * np.exp(dhc)
    cx = acx + deltas[:, 0] * aw
    cy = acy + deltas[:, 1] * ah
    boxes = np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)
    mask_w = (deltas[:, 2] > -4.0) & (deltas[:, 2] < 4.0)
    mask_h = (deltas[:, 3] > -4.0) & (deltas[:, 3] < 4.0)

    def pullback(dbox: np.ndarray) -> np.ndarray:
        ddx = (dbox[:, 0] + dbox[:, 2]) * aw
        ddy = (dbox[:, 1] + dbox[:, 3]) * ah
        ddw = (dbox[:, 2] - dbox[:, 0]) * (w / 2) * mask_w
        ddh = (dbox[:, 3] - dbox[:, 1]) * (h / 2) * mask_h
        return np.stack([ddx, ddy, ddw, ddh], axis=1)

    return boxes, pullback


def source_image_loss(spec: DetectorSpec, outs, assign: AssignResult, gamma: float, alpha_balance: float = 0.5):
    """Supervised focal + GIoU loss against an IoU assignment.

    Classification and regression are each normalized by max(1, #foreground).
    Returns (cls_loss, reg_loss, dcls_flat [M,K], dreg_flat [M,4],
    per_anchor_cls [M] top-class cross entropies for the evidence
    regularizer).
    """
    layout, k = spec.layout, spec.num_classes
    m = layout.total_anchors
    logits = _flat(outs["cls"], k)
    deltas = _flat(outs["reg"], 4)
    y = np.zeros((m, k), dtype=np.float64)
    fg = assign.roles == ROLE_SOFT_FG
    y[fg, assign.classes[fg]] = 1.0
    active = assign.roles != ROLE_IGNORE
    loss_elem, grad_elem = focal_loss(logits, y, gamma, alpha_balance)
    loss_elem = np.where(active[:, None], loss_elem, 0.0)
    grad_elem = np.where(active[:, None], grad_elem, 0.0)
    per_anchor = top_class_ce(logits, y, active)
    n_fg = max(1, int(fg.sum()))
    cls_loss = float(loss_elem.sum()) / n_fg
    dcls = grad_elem / n_fg

    dreg = np.zeros((m, 4), dtype=np.float64)
    reg_loss = 0.0
    if fg.any():
        anchors = layout.all_anchor_boxes()[fg]
        boxes, pullback = _decode_grad(anchors, deltas[fg])
        g_loss, g_box = giou_loss(boxes, assign.boxes[fg])
        reg_loss = float(np.sum(g_loss)) / n_fg
        dreg[fg] = pullback(g_box) / n_fg
    return cls_loss, reg_loss, dcls, dreg, per_anchor


def top_class_ce(logits: np.ndarray, y: np.ndarray, active: np.ndarray) -> np.ndarray:
    """Per-anchor cross entropy of the highest-logit class, zero where inactive.

    This is the (detached) reliability signal handed to the evidence
    regularizer: an anchor whose dominant class disagrees with its label keeps
    a large value, so the regularizer learns small evidence there.
    """
    m = logits.shape[0]
    idx = np.argmax(logits, axis=1)
    p = np.clip(sigmoid(logits[np.arange(m), idx]), 1e-7, 1.0 - 1e-7)
    y_top = y[np.arange(m), idx]
    ce = -(y_top * np.log(p) + (1.0 - y_top) * np.log(1.0 - p))
    return np.where(active, ce, 0.0)


def dense_image_loss(spec: DetectorSpec, outs, targets: PseudoTarget, gamma: float):
    """Distillation loss against dense soft targets.

    Classification is the plain qfl sum over non-ignored anchors x classes;
    regression is GIoU on soft foregrounds, each weighted by the teacher's max
    score. Returns (cls_loss, reg_loss, dcls_flat, dreg_flat, per_anchor_cls
    top-class cross entropies).
    """
    k = spec.num_classes
    logits = _flat(outs["cls"], k)
    deltas = _flat(outs["reg"], 4)
    cls_loss, dcls, _ = target_cls_loss(logits, targets, gamma)
    per_anchor = top_class_ce(logits, targets.scores, targets.roles != ROLE_IGNORE)
    m = spec.layout.total_anchors
    dreg = np.zeros((m, 4), dtype=np.float64)
    reg_loss = 0.0
    fg = targets.roles == ROLE_SOFT_FG
    if fg.any():
        anchors = spec.layout.all_anchor_boxes()[fg]
        boxes, pullback = _decode_grad(anchors, deltas[fg])
        g_loss, g_box = giou_loss(boxes, targets.boxes[fg])
        w = targets.weights[fg]
        reg_loss = float(np.sum(w * g_loss))
        dreg[fg] = pullback(g_box * w[:, None])
    return cls_loss, reg_loss, dcls, dreg, per_anchor


def regu_image_loss(spec: DetectorSpec, outs, l_anchor: np.ndarray):
    """Evidence regularizer for one image, normalized by the anchor count.

    l_anchor is the (detached) per-anchor classification loss. Returns
    (loss, dev_flat [M]).
    """
    from .edl import evidence_regularizer

    ev = _flat([e[..., None] for e in outs["ev"]], 1).reshape(-1)
    lam, dlam = softplus_lambda(ev)
    m = ev.shape[0]
    loss, dreg_dlam = evidence_regularizer(np.asarray(l_anchor, dtype=np.float64), lam)
    return loss / m, (dreg_dlam * dlam) / m


# ---------------------------------------------------------------------------
# Evaluation


@dataclass
class EvalResult:
    map: float
    dets: list[Detection]
    gts: list[GroundTruth]


def detections_from_pred(pred: DensePred, score_floor: float = SCORE_FLOOR, nms_iou: float = NMS_IOU):
    """Decode + per-class NMS over raw grids -> (boxes [n,4], classes [n], scores [n]).

    Detections come out grouped by class in NMS pick order (descending score).
    """
    layout = pred.layout
    scores = sigmoid(pred.flat_cls_logits())
    boxes = decode_array(
        layout.all_anchor_boxes(), pred.flat_reg_deltas(), canvas=(layout.canvas_w, layout.canvas_h)
    )
    out_b, out_c, out_s = [], [], []
    for c in range(pred.num_classes):
        keep = scores[:, c] >= score_floor
        if not np.any(keep):
            continue
        cand_boxes = boxes[keep]
        cand_scores = scores[keep, c]
        for idx in nms(cand_boxes, cand_scores, nms_iou):
            out_b.append(cand_boxes[idx])
            out_c.append(c)
            out_s.append(float(cand_scores[idx]))
    if not out_b:
        return np.zeros((0, 4)), np.zeros(0, dtype=np.int64), np.zeros(0)
    return np.stack(out_b), np.array(out_c, dtype=np.int64), np.array(out_s)


def _scene_detections(params: ToyDetectorParams, scene: ToyScene, pyramid: Pyramid | None, image_id: str):
    pyr = pyramid if pyramid is not None else featurize(scene, params.spec.layout)
    pred = detector_forward(params, pyr, image_id)
    boxes, classes, scores = detections_from_pred(pred)
    return [
        Detection(image_id, int(c), Box(*[float(v) for v in b]), float(s))
        for b, c, s in zip(boxes, classes, scores)
    ]


def evaluate(
    params: ToyDetectorParams,
    scenes: list[ToyScene],
    pyramids: list[Pyramid] | None = None,
    iou_thresh: float = EVAL_IOU,
) -> EvalResult:
    """Decode + NMS inference over scenes, scored with mean AP at IoU 0.5.

    Scenes are processed independently (parallel over CALIGN_THREADS) and
    reduced in input order, so the result is deterministic.
    """
    ids = [f"img{i}" for i in range(len(scenes))]
    pyrs = pyramids if pyramids is not None else [None] * len(scenes)
    results = parallel_map(
        lambda args: _scene_detections(params, args[0], args[1], args[2]),
        list(zip(scenes, pyrs, ids)),
    )
    dets = [d for chunk in results for d in chunk]
    gts = [
        GroundTruth(ids[i], o.class_id, o.box) for i, s in enumerate(scenes) for o in s.objects
    ]
    return EvalResult(map=mean_average_precision(dets, gts, iou_thresh), dets=dets, gts=gts)
