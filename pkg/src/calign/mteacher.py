"""Teacher-student mutual learning on the synthetic detection world.

A burn-in phase trains the student on labeled source scenes; the teacher is
then initialized from the student and, per joint iteration, labels weak target
views while the student learns from strong views, with the teacher tracking
the student as an exponential moving average. The target supervision route is
selected by mode:

  source_only     keep training on source batches only
  assign@TAU      teacher detections (NMS + confidence TAU) -> IoU assignment
  fca             dense top-k% soft targets, no NMS / no assignment
  fca+cca         fca plus evidence-based uncertainty gating
  fca+tca         fca plus the scale/task remap head in the detector
  mgcamt          fca + cca + tca

All randomness flows through named substreams of the run seed, so a run is a
pure function of its config.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .edl import beta_from_logit, softplus_lambda, uncertainty
from .formats import RunConfig, parse_mode
from .pseudo import (
    DensePred,
    PseudoTarget,
    assign_iou,
    dense_targets,
    max_class_scores,
    topk_ratio_mask,
    uncertainty_gate,
)
from .rng import substream
from .toysim import (
    DetectorSpec,
    ToyDetectorParams,
    backward_arrays,
    dense_image_loss,
    detections_from_pred,
    evaluate,
    featurize,
    forward_arrays,
    gen_dataset,
    regu_image_loss,
    source_image_loss,
)
from .util import sigmoid

__all__ = [
    "TeacherState",
    "ema_update",
    "MomentumSGD",
    "augment_strong",
    "jitter_arrays",
    "teacher_uncertainty",
    "build_dense_targets",
    "HistoryRow",
    "RunResult",
    "run_mutual_learning",
    "N_SOURCE_TRAIN",
    "N_TARGET_TRAIN",
    "N_TARGET_EVAL",
]

N_SOURCE_TRAIN = 60
N_TARGET_TRAIN = 90
N_TARGET_EVAL = 40
BATCH_SOURCE = 16
BATCH_TARGET = 8
WEIGHT_DECAY = 1e-4
MOMENTUM = 0.9
ALPHA_BALANCE = 0.5


@dataclass
class TeacherState:
    """EMA copy of the student parameters."""

    values: np.ndarray

    def as_params(self, spec: DetectorSpec) -> ToyDetectorParams:
        return ToyDetectorParams(spec, self.values.copy())


def ema_update(teacher: TeacherState, student_values: np.ndarray, decay: float) -> None:
    """teacher <- decay * teacher + (1 - decay) * student, in place."""
    teacher.values *= decay
    teacher.values += (1.0 - decay) * student_values


class MomentumSGD:
    """Classic momentum SGD: v <- mu*v + g; theta <- theta - lr*v."""

    def __init__(self, n_params: int, lr: float, momentum: float = MOMENTUM):
        self.lr = lr
        self.momentum = momentum
        self.velocity = np.zeros(n_params, dtype=np.float64)

    def step(self, values: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.velocity = self.momentum * self.velocity + grad
        return values - self.lr * self.velocity


def augment_strong(levels: list[np.ndarray], rng: np.random.Generator) -> list[np.ndarray]:
    """Strong photometric view: appearance dimming, additive noise, cell dropout.

    One amplitude scalar dims the appearance channels (the last four channels
    carry rendered geometry and keep their values so box-consistency targets
    stay valid under the view change).  Draw order is fixed (scale, then per
    level noise then dropout) so results depend only on the generator state.
    """
    c = levels[0].shape[2]
    scale = np.ones(c)
    scale[: c - 4] = rng.uniform(0.5, 1.0)
    out = []
    for lvl in levels:
        noisy = lvl * scale + rng.normal(0.0, 0.05, size=lvl.shape)
        keep = rng.random(lvl.shape[:2]) >= 0.03
        out.append(noisy * keep[:, :, None])
    return out


def _shift_grid(grid: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """Translate a [h, w, ...] grid, filling vacated cells with zeros."""
    out = np.zeros_like(grid)
    h, w = grid.shape[0], grid.shape[1]
    src_r = slice(max(0, -dy), min(h, h - dy))
    dst_r = slice(max(0, dy), min(h, h + dy))
    src_c = slice(max(0, -dx), min(w, w - dx))
    dst_c = slice(max(0, dx), min(w, w + dx))
    out[dst_r, dst_c] = grid[src_r, src_c]
    return out


def jitter_arrays(levels: list[np.ndarray], strides, cells_coarse: tuple[int, int]):
    """Translate all levels by a coarsest-level-aligned cell offset.

    cells_coarse = (dy, dx) in coarsest-level cells; finer levels move by the
    stride ratio so the translation is consistent in image units. Returns the
    shifted levels and the image-unit offset (tx, ty).
    """
    dy_c, dx_c = cells_coarse
    s_max = max(strides)
    out = []
    for lvl, s in zip(levels, strides):
        ratio = s_max // s
        out.append(_shift_grid(lvl, dy_c * ratio, dx_c * ratio))
    return out, (dx_c * s_max, dy_c * s_max)


def jitter_targets(t: PseudoTarget, cells_coarse: tuple[int, int]) -> PseudoTarget:
    """Shift dense targets to match jittered features; vacated cells go background."""
    lay = t.layout
    s_max = max(lay.strides)
    tx, ty = cells_coarse[1] * s_max, cells_coarse[0] * s_max
    roles, scores, boxes, weights = [], [], [], []
    start = 0
    a = lay.anchors_per_cell
    for l, size in enumerate(lay.level_sizes()):
        h, w = lay.level_dims(l)
        ratio = s_max // lay.strides[l]
        dy, dx = cells_coarse[0] * ratio, cells_coarse[1] * ratio
        sl = slice(start, start + size)
        roles.append(_shift_grid(t.roles[sl].reshape(h, w, a), dy, dx).reshape(-1))
        scores.append(_shift_grid(t.scores[sl].reshape(h, w, a, -1), dy, dx).reshape(size, -1))
        b = _shift_grid(t.boxes[sl].reshape(h, w, a, 4), dy, dx).reshape(size, 4)
        fg = roles[-1] == 1
        b[fg] += np.array([tx, ty, tx, ty], dtype=np.float64)
        np.clip(b[:, 0::2], 0.0, float(lay.canvas_w), out=b[:, 0::2])
        np.clip(b[:, 1::2], 0.0, float(lay.canvas_h), out=b[:, 1::2])
        boxes.append(b)
        weights.append(_shift_grid(t.weights[sl].reshape(h, w, a), dy, dx).reshape(-1))
        start += size
    roles = np.concatenate(roles)
    boxes = np.concatenate(boxes)
    sc = np.concatenate(scores)
    wt = np.concatenate(weights)
    # boxes squeezed to nothing by the canvas clip lose their foreground role
    degen = (boxes[:, 2] - boxes[:, 0] <= 1e-6) | (boxes[:, 3] - boxes[:, 1] <= 1e-6)
    drop = (roles == 1) & degen
    roles[drop] = 0
    boxes[drop] = 0.0
    sc[drop] = 0.0
    wt[drop] = 0.0
    return PseudoTarget(lay, t.num_classes, roles, sc, boxes, wt)


def teacher_uncertainty(pred: DensePred) -> tuple[np.ndarray, np.ndarray]:
    """Per-anchor (max class probability, Beta-evidential uncertainty)."""
    logits = pred.flat_cls_logits().astype(np.float64)
    top = np.max(logits, axis=1)
    lam, _ = softplus_lambda(pred.flat_evidence().astype(np.float64))
    beta = beta_from_logit(top, lam)
    return sigmoid(top), uncertainty(beta)


def build_dense_targets(pred: DensePred, k_percent: float, tau_u: float, cca: bool) -> PseudoTarget:
    """Dense pseudo-label pipeline: top-k% scores, optional uncertainty gate."""
    candidates = topk_ratio_mask(max_class_scores(pred), k_percent)
    if cca:
        p, u = teacher_uncertainty(pred)
        gated = uncertainty_gate(candidates, p, u, tau_u)
        rejected = candidates & ~gated
    else:
        gated = candidates
        rejected = np.zeros_like(candidates)
    return dense_targets(pred, gated, rejected)


@dataclass
class HistoryRow:
    iteration: int
    l_s: float
    l_t: float | None
    l_regu: float | None
    map: float | None


@dataclass
class RunResult:
    config: RunConfig
    spec: DetectorSpec
    history: list[HistoryRow]
    student: ToyDetectorParams
    teacher: ToyDetectorParams | None
    burnin: ToyDetectorParams
    final_map: float | None


def _effective_flags(kind: str, config: RunConfig) -> tuple[bool, bool]:
    """(tca, cca) implied by the mode; plain modes honor the config switches."""
    pinned = {
        "fca": (False, False),
        "fca+cca": (False, True),
        "fca+tca": (True, False),
        "mgcamt": (True, True),
    }
    if kind in pinned:
        return pinned[kind]
    return config.tca_enabled, config.cca_enabled


def _assign_from_teacher(pred: DensePred, tau: float):
    boxes, classes, scores = detections_from_pred(pred)
    keep = scores >= tau
    return assign_iou(boxes[keep], classes[keep], pred.layout.all_anchor_boxes())


def _split_levels(flat: np.ndarray, spec: DetectorSpec) -> list[np.ndarray]:
    """Flat per-anchor array -> per-level grids shaped like forward outputs."""
    sizes = spec.layout.level_sizes()
    a = spec.layout.anchors_per_cell
    out, start = [], 0
    for l, size in enumerate(sizes):
        h, w = spec.layout.level_dims(l)
        chunk = flat[start : start + size]
        if flat.ndim == 2:
            out.append(chunk.reshape(h, w, a, flat.shape[1]))
        else:
            out.append(chunk.reshape(h, w, a))
        start += size
    return out


def run_mutual_learning(
    config: RunConfig,
    *,
    eval_enabled: bool = True,
    geometric_jitter: bool = False,
) -> RunResult:
    """Run burn-in + mutual learning; returns history and all parameter states.

    The run is deterministic given the config: data, initialization, batching,
    and augmentation each consume a named substream of config.seed. The final
    reported quality is always the student's.
    """
    kind, tau = parse_mode(config.mode)
    tca, cca = _effective_flags(kind, config)
    spec = DetectorSpec(tca_enabled=tca)
    layout = spec.layout
    seed = config.seed

    src_scenes = gen_dataset(seed, N_SOURCE_TRAIN, "source", "train")
    tgt_scenes = gen_dataset(seed, N_TARGET_TRAIN, "target", "train")
    eval_scenes = gen_dataset(seed, N_TARGET_EVAL, "target", "eval")

    src_feats = [[lvl.data.astype(np.float64) for lvl in featurize(s, layout).levels] for s in src_scenes]
    tgt_feats = [[lvl.data.astype(np.float64) for lvl in featurize(s, layout).levels] for s in tgt_scenes]
    eval_pyrs = [featurize(s, layout) for s in eval_scenes]

    anchors = layout.all_anchor_boxes()
    src_assign = [assign_iou(*s.gt_arrays(), anchors) for s in src_scenes]

    values = ToyDetectorParams.init(spec, seed).values
    # the evidence regularizer tunes the evidence head alone; it must not
    # steer the shared trunk or the task heads
    ev_mask = np.zeros(spec.n_params, dtype=bool)
    offset = 0
    for name, size in spec.sections():
        if name in ("ev_w", "ev_b"):
            ev_mask[offset : offset + size] = True
        offset += size
    zero_cls = _split_levels(np.zeros((layout.total_anchors, spec.num_classes)), spec)
    zero_reg = _split_levels(np.zeros((layout.total_anchors, 4)), spec)
    zero_ev = _split_levels(np.zeros(layout.total_anchors), spec)
    opt = MomentumSGD(spec.n_params, config.lr)
    teacher: TeacherState | None = None
    burnin_values: np.ndarray | None = None
    if config.burn_in == 0:
        # no burn-in: the teacher starts from the initialization
        teacher = TeacherState(values.copy())
        burnin_values = values.copy()
    total_iters = config.burn_in + config.iterations
    history: list[HistoryRow] = []
    final_map: float | None = None

    def source_terms(idx):
        """Mean supervised loss + gradient over a source batch."""
        n = len(idx)
        loss_sum, regu_sum = 0.0, 0.0
        grad = np.zeros_like(values)
        for i in idx:
            outs, cache = forward_arrays(spec, values, src_feats[i])
            cls_l, reg_l, dcls, dreg, per_anchor = source_image_loss(
                spec, outs, src_assign[i], config.gamma, ALPHA_BALANCE
            )
            loss_sum += cls_l + reg_l
            grad += backward_arrays(
                spec,
                cache,
                _split_levels(dcls / n, spec),
                _split_levels(dreg / n, spec),
                zero_ev,
            )
            if cca:
                r_l, r_dev = regu_image_loss(spec, outs, per_anchor)
                regu_sum += r_l
                g_ev = backward_arrays(
                    spec, cache, zero_cls, zero_reg, _split_levels(r_dev / n, spec)
                )
                grad += np.where(ev_mask, g_ev, 0.0)
        return loss_sum / n, regu_sum / n, grad

    def target_terms(idx, it):
        """Mean distillation loss + gradient over a target batch."""
        n = len(idx)
        loss_sum, regu_sum = 0.0, 0.0
        grad = np.zeros_like(values)
        rng_aug = substream(seed, "aug", it)
        for i in idx:
            t_outs, _ = forward_arrays(spec, teacher.values, tgt_feats[i])
            pred = DensePred(
                layout,
                spec.num_classes,
                list(t_outs["cls"]),
                list(t_outs["reg"]),
                list(t_outs["ev"]),
                image_id=f"tgt{i}",
            )
            strong = augment_strong(tgt_feats[i], rng_aug)
            if geometric_jitter:
                rng_j = substream(seed, "jitter", it, int(i))
                cells = (int(rng_j.integers(-1, 2)), int(rng_j.integers(-1, 2)))
            else:
                cells = (0, 0)
            if kind == "assign":
                p_boxes, p_classes, p_scores = detections_from_pred(pred)
                keep = p_scores >= tau
                p_boxes, p_classes = p_boxes[keep], p_classes[keep]
                if cells != (0, 0):
                    strong, (tx, ty) = jitter_arrays(strong, layout.strides, cells)
                    p_boxes = p_boxes + np.array([tx, ty, tx, ty], dtype=np.float64)
                    np.clip(p_boxes[:, 0::2], 0.0, float(layout.canvas_w), out=p_boxes[:, 0::2])
                    np.clip(p_boxes[:, 1::2], 0.0, float(layout.canvas_h), out=p_boxes[:, 1::2])
                    ok = (p_boxes[:, 2] - p_boxes[:, 0] > 1e-6) & (p_boxes[:, 3] - p_boxes[:, 1] > 1e-6)
                    p_boxes, p_classes = p_boxes[ok], p_classes[ok]
                assign = assign_iou(p_boxes, p_classes, anchors)
                outs, cache = forward_arrays(spec, values, strong)
                cls_l, reg_l, dcls, dreg, per_anchor = source_image_loss(
                    spec, outs, assign, config.gamma, ALPHA_BALANCE
                )
            else:
                targets = build_dense_targets(pred, config.k_percent, config.tau_u, cca)
                if cells != (0, 0):
                    strong, _ = jitter_arrays(strong, layout.strides, cells)
                    targets = jitter_targets(targets, cells)
                outs, cache = forward_arrays(spec, values, strong)
                cls_l, reg_l, dcls, dreg, per_anchor = dense_image_loss(
                    spec, outs, targets, config.gamma
                )
            loss_sum += cls_l + reg_l
            scale = config.omega / n
            grad += backward_arrays(
                spec,
                cache,
                _split_levels(dcls * scale, spec),
                _split_levels(dreg * scale, spec),
                zero_ev,
            )
            if cca:
                r_l, r_dev = regu_image_loss(spec, outs, per_anchor)
                regu_sum += r_l
                g_ev = backward_arrays(
                    spec, cache, zero_cls, zero_reg, _split_levels(r_dev / n, spec)
                )
                grad += np.where(ev_mask, g_ev, 0.0)
        return loss_sum / n, regu_sum / n, grad

    for it in range(1, total_iters + 1):
        rng_b = substream(seed, "batch", it)
        src_idx = rng_b.integers(0, N_SOURCE_TRAIN, BATCH_SOURCE)
        l_s, regu_s, grad = source_terms(src_idx)
        l_t, regu_t = None, 0.0
        if it > config.burn_in and kind != "source_only":
            tgt_idx = rng_b.integers(0, N_TARGET_TRAIN, BATCH_TARGET)
            l_t, regu_t, g_t = target_terms(tgt_idx, it)
            grad += g_t
        grad += WEIGHT_DECAY * values
        values = opt.step(values, grad)
        if it > config.burn_in and teacher is not None:
            ema_update(teacher, values, config.ema_decay)
        if it == config.burn_in:
            teacher = TeacherState(values.copy())
            burnin_values = values.copy()
        l_regu = (regu_s + regu_t) if cca else None
        row_map = None
        if eval_enabled and (it % config.eval_interval == 0 or it == config.burn_in or it == total_iters):
            row_map = evaluate(ToyDetectorParams(spec, values.copy()), eval_scenes, eval_pyrs).map
            final_map = row_map
        history.append(HistoryRow(it, l_s, l_t, l_regu, row_map))

    student = ToyDetectorParams(spec, values)
    return RunResult(
        config=config,
        spec=spec,
        history=history,
        student=student,
        teacher=None if teacher is None else teacher.as_params(spec),
        burnin=ToyDetectorParams(spec, burnin_values if burnin_values is not None else values.copy()),
        final_map=final_map,
    )
