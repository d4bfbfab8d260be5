"""Command line interface.

Every subcommand is a thin wrapper over one library pipeline: it reads packed
array files / JSON, runs the corresponding module, and writes CSV/JSON with
repr-exact float formatting so reruns are byte-identical. Exit codes: 0 on
success, 2 for validation problems (bad config, malformed manifests, value
domain errors), 1 for I/O failures. Worker threads for scene evaluation come
from the CALIGN_THREADS environment variable.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import formats
from .edl import beta_from_logit, evidence_regularizer, softplus_lambda, uncertainty
from .errors import CalignError, FormatError, InvalidInputError
from .losses import giou_loss, qfl_value
from .metrics import (
    average_precision,
    confidence_iou_pairs,
    error_breakdown,
    mean_average_precision,
    precision_recall_vs_confidence,
)
from .mteacher import build_dense_targets, run_mutual_learning, teacher_uncertainty
from .pseudo import ROLE_IGNORE, ROLE_SOFT_FG, decode_array, max_class_scores, topk_ratio_mask, uncertainty_gate
from .remap import remap
from .toysim import ToyDetectorParams
from .util import fmt, sigmoid

__all__ = ["main"]

_PR_THRESHOLDS = [i * 0.05 for i in range(20)]


def _anchor_coords(layout):
    """(level, row, col, anchor) tuples in flat anchor order."""
    for l in range(layout.num_levels):
        h, w = layout.level_dims(l)
        for r in range(h):
            for c in range(w):
                for a in range(layout.anchors_per_cell):
                    yield l, r, c, a


def _write_text(path, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(text)


def cmd_uncertainty(args) -> int:
    pred = formats.read_dense_pred(args.pred)
    logits = pred.flat_cls_logits().astype(np.float64)
    cls_idx = np.argmax(logits, axis=1)
    top = np.max(logits, axis=1)
    lam, _ = softplus_lambda(pred.flat_evidence().astype(np.float64))
    score = sigmoid(top)
    u = uncertainty(beta_from_logit(top, lam))
    lines = ["level,row,col,anchor,class,score,lam,uncertainty"]
    for i, (l, r, c, a) in enumerate(_anchor_coords(pred.layout)):
        lines.append(
            f"{l},{r},{c},{a},{cls_idx[i]},{fmt(score[i])},{fmt(lam[i])},{fmt(u[i])}"
        )
    _write_text(args.out, "\n".join(lines) + "\n")
    return 0


def cmd_select(args) -> int:
    pred = formats.read_dense_pred(args.pred)
    scores = max_class_scores(pred)
    candidates = topk_ratio_mask(scores, args.k_percent)
    p, u = teacher_uncertainty(pred)
    if args.no_gate:
        selected = candidates
    else:
        selected = uncertainty_gate(candidates, p, u, args.tau_u)
    lines = ["level,row,col,anchor,score,uncertainty,candidate,selected"]
    for i, (l, r, c, a) in enumerate(_anchor_coords(pred.layout)):
        lines.append(
            f"{l},{r},{c},{a},{fmt(scores[i])},{fmt(u[i])},{int(candidates[i])},{int(selected[i])}"
        )
    _write_text(args.out, "\n".join(lines) + "\n")
    return 0


def cmd_pseudo(args) -> int:
    pred = formats.read_dense_pred(args.pred)
    targets = build_dense_targets(pred, args.k_percent, args.tau_u, cca=not args.no_gate)
    formats.write_targets(targets, args.out)
    return 0


def cmd_loss(args) -> int:
    pred = formats.read_dense_pred(args.pred)
    targets = formats.read_targets(args.targets)
    if pred.layout != targets.layout or pred.num_classes != targets.num_classes:
        raise InvalidInputError("prediction and target files describe different anchor grids")
    layout = pred.layout
    m = layout.total_anchors
    # scores cross the float32 wire format, so quantize the student's
    # post-sigmoid probabilities the same way before comparing
    p = sigmoid(pred.flat_cls_logits().astype(np.float64)).astype(np.float32).astype(np.float64)
    elem = qfl_value(p, targets.scores, args.gamma)
    active = targets.roles != ROLE_IGNORE
    elem = np.where(active[:, None], elem, 0.0)
    cls_loss = float(np.sum(elem))
    # the regularizer reads top-class cross entropies, not the focal values
    idx = np.argmax(pred.flat_cls_logits(), axis=1)
    p_top = np.clip(p[np.arange(m), idx], 1e-7, 1.0 - 1e-7)
    y_top = targets.scores[np.arange(m), idx]
    per_anchor = np.where(
        active, -(y_top * np.log(p_top) + (1.0 - y_top) * np.log(1.0 - p_top)), 0.0
    )
    fg = targets.roles == ROLE_SOFT_FG
    reg_loss = 0.0
    if np.any(fg):
        boxes = decode_array(
            layout.all_anchor_boxes()[fg], pred.flat_reg_deltas().astype(np.float64)[fg]
        )
        g, _ = giou_loss(boxes, targets.boxes[fg])
        reg_loss = float(np.sum(targets.weights[fg] * g))
    lam, _ = softplus_lambda(pred.flat_evidence().astype(np.float64))
    regu_raw, _ = evidence_regularizer(per_anchor, lam)
    report = formats.loss_report_json(cls_loss, reg_loss, regu_raw / m)
    if args.out:
        _write_text(args.out, report)
    else:
        sys.stdout.write(report)
    return 0


def cmd_remap(args) -> int:
    pyr = formats.read_pyramid(args.pyramid)
    with open(args.head_params, "r", encoding="utf-8") as f:
        try:
            raw = json.load(f)
        except json.JSONDecodeError as e:
            raise FormatError(f"head params file is not valid JSON: {e}") from None
    if not isinstance(raw, dict) or "values" not in raw or not isinstance(raw["values"], list):
        raise FormatError('head params file must hold {"values": [...]}')
    values = np.asarray(raw["values"], dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise FormatError("head params must be finite numbers")
    out = remap(pyr, pyr, values)
    formats.write_pyramid(out, args.out)
    return 0


def cmd_train_toy(args) -> int:
    config = formats.load_config(args.config)
    if args.seed is not None:
        config.seed = args.seed
        config.validate()
    result = run_mutual_learning(config)
    os.makedirs(args.out, exist_ok=True)
    _write_text(os.path.join(args.out, "history.csv"), formats.history_csv(result.history))
    formats.write_params(result.student, os.path.join(args.out, "params.bin"))
    _write_text(
        os.path.join(args.out, "config.json"),
        json.dumps(config.to_dict(), sort_keys=True) + "\n",
    )
    return 0


def cmd_analyze(args) -> int:
    dets = formats.load_detections(args.detections)
    gts = formats.load_ground_truths(args.ground_truths)
    os.makedirs(args.out, exist_ok=True)
    classes = sorted({g.class_id for g in gts})
    per_class = {
        c: average_precision([d for d in dets if d.class_id == c], [g for g in gts if g.class_id == c])
        for c in classes
    }
    _write_text(os.path.join(args.out, "ap.csv"), formats.ap_csv(per_class, mean_average_precision(dets, gts)))
    _write_text(
        os.path.join(args.out, "pr_vs_conf.csv"),
        formats.pr_conf_csv(precision_recall_vs_confidence(dets, gts, _PR_THRESHOLDS)),
    )
    _write_text(
        os.path.join(args.out, "confidence_iou.csv"),
        formats.conf_iou_csv(confidence_iou_pairs(dets, gts)),
    )
    _write_text(
        os.path.join(args.out, "error_breakdown.csv"),
        formats.breakdown_csv(error_breakdown(dets, gts)),
    )
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="calign", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("uncertainty", help="per-anchor evidential uncertainty CSV")
    p.add_argument("--pred", required=True, help="packed prediction file")
    p.add_argument("--out", required=True, help="output CSV path")
    p.set_defaults(func=cmd_uncertainty)

    p = sub.add_parser("select", help="top-k%% candidate selection CSV")
    p.add_argument("--pred", required=True)
    p.add_argument("--k-percent", type=float, default=1.0)
    p.add_argument("--tau-u", type=float, default=0.12)
    p.add_argument("--no-gate", action="store_true", help="skip the uncertainty gate")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("pseudo", help="build dense training targets from a prediction file")
    p.add_argument("--pred", required=True)
    p.add_argument("--k-percent", type=float, default=1.0)
    p.add_argument("--tau-u", type=float, default=0.12)
    p.add_argument("--no-gate", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pseudo)

    p = sub.add_parser("loss", help="loss report for a student prediction against targets")
    p.add_argument("--pred", required=True, help="student prediction file")
    p.add_argument("--targets", required=True, help="packed target file")
    p.add_argument("--gamma", type=float, default=2.0)
    p.add_argument("--out", default=None, help="output JSON path (default: stdout)")
    p.set_defaults(func=cmd_loss)

    p = sub.add_parser("remap", help="shift-head remap of a feature pyramid")
    p.add_argument("--pyramid", required=True, help="packed pyramid file")
    p.add_argument("--head-params", required=True, help='JSON file {"values": [...]}')
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_remap)

    p = sub.add_parser("train-toy", help="run mutual learning on the synthetic world")
    p.add_argument("--config", required=True, help="run config JSON")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("analyze", help="metric tables from detections + ground truths")
    p.add_argument("--detections", required=True)
    p.add_argument("--ground-truths", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_analyze)
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CalignError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
