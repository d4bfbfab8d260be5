"""Confidence-aligned mean-teacher adaptation for dense detectors, toy scale.

The package trains a small anchor detector on a synthetic labeled source
domain and adapts it to a shifted target domain with teacher-student mutual
learning. Pseudo labels stay dense (top-k% anchors, no NMS/assignment), are
gated by Beta-evidential uncertainty, and the detector can remap regression
features across tasks and scales. Everything is numpy with hand-written
gradients, checked against finite differences and closed-form oracles.
"""

from .boxes import Box, box_array, iou_matrix, pair_iou
from .edl import (
    BetaParams,
    beta_from_logit,
    edl_marginal_nll,
    evidence_regularizer,
    quadrature_marginal_nll,
    softplus_lambda,
    uncertainty,
)
from .errors import (
    CalignError,
    ConfigError,
    DataError,
    FormatError,
    InvalidBoxError,
    InvalidEvidenceError,
    InvalidInputError,
)
from .formats import (
    RunConfig,
    load_config,
    load_scenes,
    parse_mode,
    read_dense_pred,
    read_params,
    read_pyramid,
    read_targets,
    save_scenes,
    write_dense_pred,
    write_params,
    write_pyramid,
    write_targets,
)
from .grid import FeatureMap, Pyramid, bilinear_sample, resize, sample_grad
from .losses import LossReport, focal_loss, giou_loss, qfl, qfl_value, target_cls_loss, total_loss
from .metrics import (
    Detection,
    GroundTruth,
    average_precision,
    confidence_iou_pairs,
    error_breakdown,
    iou,
    mean_average_precision,
    precision_recall_vs_confidence,
)
from .mteacher import (
    HistoryRow,
    MomentumSGD,
    RunResult,
    TeacherState,
    augment_strong,
    build_dense_targets,
    ema_update,
    run_mutual_learning,
    teacher_uncertainty,
)
from .pseudo import (
    CALL_COUNTS,
    ROLE_BACKGROUND,
    ROLE_IGNORE,
    ROLE_SOFT_FG,
    AnchorLayout,
    AssignResult,
    DensePred,
    PseudoTarget,
    assign_iou,
    decode_array,
    decode_box,
    dense_targets,
    encode_array,
    encode_box,
    max_class_scores,
    nms,
    topk_ratio_mask,
    uncertainty_gate,
)
from .remap import ShiftField, ShiftHeadSpec, predict_shift, remap, remap_cross, remap_within
from .rng import parallel_map, substream, thread_count
from .toysim import (
    DetectorSpec,
    EvalResult,
    SceneObject,
    ToyDetectorParams,
    ToyScene,
    detections_from_pred,
    detector_backward,
    detector_forward,
    evaluate,
    featurize,
    gen_dataset,
)

__version__ = "0.1.0"
