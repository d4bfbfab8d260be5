"""Detection losses with closed-form gradients.

Every op returns (loss, gradient) pairs; gradients are exact derivatives of
the implemented scalar (verified against central finite differences in the
test suite). Probabilities are clamped to [1e-7, 1-1e-7] before any log; the
clamp zeroes the incoming gradient where it binds.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidBoxError, InvalidInputError
from .pseudo import DensePred, PseudoTarget, ROLE_IGNORE
from .util import sigmoid

__all__ = [
    "LossReport",
    "focal_loss",
    "qfl",
    "qfl_value",
    "giou_loss",
    "target_cls_loss",
    "total_loss",
]

_P_CLAMP = 1e-7


def _clamped_sigmoid(logit):
    logit = np.asarray(logit, dtype=np.float64)
    if not np.all(np.isfinite(logit)):
        raise InvalidInputError("logits must be finite")
    p_raw = np.asarray(sigmoid(logit), dtype=np.float64)
    p = np.clip(p_raw, _P_CLAMP, 1.0 - _P_CLAMP)
    # d p_clamped / d logit: sigmoid slope where the clamp is inactive
    dp = np.where(p_raw == p, p_raw * (1.0 - p_raw), 0.0)
    return p, dp


def focal_loss(logit, y, gamma: float = 2.0, alpha_balance: float = 0.25):
    """Binary focal loss -α_t (1-p_t)^γ log(p_t), elementwise.

    Returns (loss, d_loss/d_logit) with the same shape as the inputs.
    """
    if gamma < 0:
        raise InvalidInputError(f"gamma must be >= 0, got {gamma}")
    if not 0.0 <= alpha_balance <= 1.0:
        raise InvalidInputError(f"alpha_balance must be in [0, 1], got {alpha_balance}")
    y = np.asarray(y, dtype=np.float64)
    if not np.all((y == 0.0) | (y == 1.0)):
        raise InvalidInputError("focal labels must be binary")
    p, dp = _clamped_sigmoid(logit)
    y, p, dp = np.broadcast_arrays(y, p, dp)
    pt = np.where(y == 1.0, p, 1.0 - p)
    at = np.where(y == 1.0, alpha_balance, 1.0 - alpha_balance)
    one_m = 1.0 - pt
    loss = -at * one_m**gamma * np.log(pt)
    # d/dpt of -(1-pt)^γ log(pt), then chain through pt = ±p and the sigmoid.
    # The clamp keeps pt and 1-pt >= 1e-7, so the γ-1 power is always finite.
    dl_dpt = at * (gamma * one_m ** (gamma - 1.0) * np.log(pt) - one_m**gamma / pt)
    dl_dlogit = dl_dpt * np.where(y == 1.0, 1.0, -1.0) * dp
    if loss.ndim == 0:
        return float(loss), float(dl_dlogit)
    return loss, dl_dlogit


def _qfl_pieces(p_raw, y, gamma: float):
    """Shared qfl arithmetic on probabilities.

    The modulating factor uses the raw probability so that y == p gives an
    exact zero; only the log arguments are clamped.
    """
    p_c = np.clip(p_raw, _P_CLAMP, 1.0 - _P_CLAMP)
    diff = p_raw - y
    absd = np.abs(diff)
    mod = absd**gamma
    ce = -(y * np.log(p_c) + (1.0 - y) * np.log(1.0 - p_c))
    mod1 = np.where(absd == 0.0, 0.0, absd ** (gamma - 1.0)) if gamma != 1.0 else np.ones_like(absd)
    dmod = gamma * mod1 * np.sign(diff)
    dce = np.where(p_raw == p_c, -y / p_c + (1.0 - y) / (1.0 - p_c), 0.0)
    return mod * ce, dmod * ce + mod * dce


def _check_soft_targets(y):
    y = np.asarray(y, dtype=np.float64)
    if np.any(y < 0.0) or np.any(y > 1.0) or not np.all(np.isfinite(y)):
        raise InvalidInputError("qfl targets must lie in [0, 1]")
    return y


def qfl(logit, y, gamma: float = 2.0):
    """Quality focal loss |y-p|^γ · BCE(y, p) for soft labels y ∈ [0, 1].

    Returns (loss, d_loss/d_logit). With binary y it coincides with the
    unbalanced focal loss.
    """
    if gamma < 0:
        raise InvalidInputError(f"gamma must be >= 0, got {gamma}")
    y = _check_soft_targets(y)
    logit = np.asarray(logit, dtype=np.float64)
    if not np.all(np.isfinite(logit)):
        raise InvalidInputError("logits must be finite")
    p_raw = np.asarray(sigmoid(logit), dtype=np.float64)
    y, p_raw = np.broadcast_arrays(y, p_raw)
    loss, dl_dp = _qfl_pieces(p_raw, y, gamma)
    dl_dlogit = dl_dp * p_raw * (1.0 - p_raw)
    if loss.ndim == 0:
        return float(loss), float(dl_dlogit)
    return loss, dl_dlogit


def qfl_value(p, y, gamma: float = 2.0):
    """qfl evaluated directly on probabilities (no gradient).

    This is the reporting path: callers that already quantized p keep exact
    zeros when p == y.
    """
    if gamma < 0:
        raise InvalidInputError(f"gamma must be >= 0, got {gamma}")
    y = _check_soft_targets(y)
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < 0.0) or np.any(p > 1.0) or not np.all(np.isfinite(p)):
        raise InvalidInputError("probabilities must lie in [0, 1]")
    y, p = np.broadcast_arrays(y, p)
    loss, _ = _qfl_pieces(p, y, gamma)
    return float(loss) if loss.ndim == 0 else loss


def giou_loss(pred, target):
    """1 - GIoU between corner boxes, with the gradient w.r.t. pred.

    pred/target are [..., 4] arrays (x1, y1, x2, y2); returns
    (loss [...], d_loss/d_pred [..., 4]).
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape[-1] != 4 or target.shape[-1] != 4:
        raise InvalidBoxError("boxes must have 4 coordinates")
    if not (np.all(np.isfinite(pred)) and np.all(np.isfinite(target))):
        raise InvalidBoxError("box coordinates must be finite")
    pred, target = np.broadcast_arrays(pred, target)
    px1, py1, px2, py2 = (pred[..., i] for i in range(4))
    tx1, ty1, tx2, ty2 = (target[..., i] for i in range(4))
    pw, ph = px2 - px1, py2 - py1
    tw, th = tx2 - tx1, ty2 - ty1
    if np.any(pw <= 0) or np.any(ph <= 0) or np.any(tw <= 0) or np.any(th <= 0):
        raise InvalidBoxError("degenerate box in giou_loss")
    area_p = pw * ph
    area_t = tw * th

    iw = np.minimum(px2, tx2) - np.maximum(px1, tx1)
    ih = np.minimum(py2, ty2) - np.maximum(py1, ty1)
    has = (iw > 0) & (ih > 0)
    iw_c = np.where(has, iw, 0.0)
    ih_c = np.where(has, ih, 0.0)
    inter = iw_c * ih_c
    union = area_p + area_t - inter
    cw = np.maximum(px2, tx2) - np.minimum(px1, tx1)
    ch = np.maximum(py2, ty2) - np.minimum(py1, ty1)
    enc = cw * ch
    iou = inter / union
    loss = 2.0 - iou - union / enc

    # partials of pred area / intersection / enclosure per coordinate
    d_area = np.stack([-ph, -pw, ph, pw], axis=-1)
    d_inter = np.stack(
        [
            np.where(has & (px1 >= tx1), -ih_c, 0.0),
            np.where(has & (py1 >= ty1), -iw_c, 0.0),
            np.where(has & (px2 <= tx2), ih_c, 0.0),
            np.where(has & (py2 <= ty2), iw_c, 0.0),
        ],
        axis=-1,
    )
    d_union = d_area - d_inter
    d_enc = np.stack(
        [
            np.where(px1 <= tx1, -ch, 0.0),
            np.where(py1 <= ty1, -cw, 0.0),
            np.where(px2 >= tx2, ch, 0.0),
            np.where(py2 >= ty2, cw, 0.0),
        ],
        axis=-1,
    )
    u = union[..., None]
    e = enc[..., None]
    d_iou = (d_inter * u - inter[..., None] * d_union) / (u * u)
    d_ratio = (d_union * e - u * d_enc) / (e * e)
    grad = -d_iou - d_ratio
    if loss.ndim == 0:
        return float(loss), grad.reshape(4)
    return loss, grad


def target_cls_loss(pred, targets: PseudoTarget, gamma: float = 2.0):
    """Dense distillation classification loss: sum of qfl over every
    non-ignored anchor × class against the soft target scores.

    pred may be a DensePred (float32 container, CLI path) or a flat
    [M, K] float64 logit array (training path). Returns
    (loss, d_loss/d_logit [M, K], per_anchor_loss [M]); ignored anchors
    contribute zero loss, zero gradient.
    """
    if isinstance(pred, DensePred):
        logits = pred.flat_cls_logits().astype(np.float64)
    else:
        logits = np.asarray(pred, dtype=np.float64)
    m, k = targets.layout.total_anchors, targets.num_classes
    if logits.shape != (m, k):
        raise InvalidInputError(f"logits shape {logits.shape} != {(m, k)}")
    active = targets.roles != ROLE_IGNORE
    loss_elem, grad_elem = qfl(logits, targets.scores, gamma)
    loss_elem = np.where(active[:, None], loss_elem, 0.0)
    grad = np.where(active[:, None], grad_elem, 0.0)
    per_anchor = np.sum(loss_elem, axis=1)
    return float(np.sum(per_anchor)), grad, per_anchor


@dataclass
class LossReport:
    """Per-batch (or per-image) loss components; total = cls + reg."""

    cls_loss: float
    reg_loss: float
    regu_loss: float = 0.0
    grad: np.ndarray | None = None

    @property
    def total(self) -> float:
        return self.cls_loss + self.reg_loss


def total_loss(source: LossReport, target: LossReport | None, omega: float, regu: float) -> float:
    """Joint objective: source total + ω · target total + regularizer."""
    if omega < 0:
        raise InvalidInputError(f"omega must be >= 0, got {omega}")
    t = target.total if target is not None else 0.0
    return source.total + omega * t + regu
