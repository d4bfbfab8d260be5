"""Trainer pieces: EMA teacher, optimizer, strong views, jitter, tiny runs."""

from __future__ import annotations

import numpy as np

from calign.formats import RunConfig
from calign.mteacher import (
    BATCH_TARGET,
    N_SOURCE_TRAIN,
    MomentumSGD,
    TeacherState,
    _effective_flags,
    augment_strong,
    build_dense_targets,
    ema_update,
    jitter_arrays,
    jitter_targets,
    run_mutual_learning,
    teacher_uncertainty,
)
from calign.pseudo import (
    CALL_COUNTS,
    ROLE_BACKGROUND,
    ROLE_IGNORE,
    ROLE_SOFT_FG,
    AnchorLayout,
    DensePred,
    PseudoTarget,
)
from calign.toysim import DetectorSpec, ToyDetectorParams
from calign.util import sigmoid

# ---------------------------------------------------------------------------
# EMA teacher


def test_ema_fixed_point():
    rng = np.random.default_rng(0)
    student = rng.normal(size=50)
    teacher = TeacherState(student.copy())
    ema_update(teacher, student, 0.9995)
    np.testing.assert_allclose(teacher.values, student, rtol=1e-14, atol=0.0)


def test_ema_single_step_from_zero():
    teacher = TeacherState(np.zeros(4))
    ema_update(teacher, np.ones(4), 0.9995)
    assert np.all(teacher.values == 1.0 - 0.9995)


def test_ema_thousand_steps_closed_form():
    teacher = TeacherState(np.zeros(3))
    student = np.ones(3)
    for _ in range(1000):
        ema_update(teacher, student, 0.9995)
    np.testing.assert_allclose(teacher.values, 1.0 - 0.9995**1000, rtol=1e-9)


def test_ema_decay_zero_copies_student():
    rng = np.random.default_rng(1)
    student = rng.normal(size=10)
    teacher = TeacherState(rng.normal(size=10))
    ema_update(teacher, student, 0.0)
    assert np.array_equal(teacher.values, student)


# ---------------------------------------------------------------------------
# Optimizer


def test_momentum_sgd_two_step_recursion():
    opt = MomentumSGD(3, lr=0.1, momentum=0.9)
    x0 = np.array([1.0, 2.0, 3.0])
    g1 = np.array([1.0, 0.0, -1.0])
    x1 = opt.step(x0, g1)
    np.testing.assert_allclose(x1, x0 - 0.1 * g1, atol=1e-15)
    g2 = np.array([0.0, 1.0, 0.0])
    x2 = opt.step(x1, g2)
    v2 = 0.9 * g1 + g2
    np.testing.assert_allclose(opt.velocity, v2, atol=1e-15)
    np.testing.assert_allclose(x2, x1 - 0.1 * v2, atol=1e-15)


def test_momentum_sgd_zero_grad_keeps_coasting():
    # with momentum, a zero gradient still moves the iterate
    opt = MomentumSGD(1, lr=1.0, momentum=0.5)
    x = opt.step(np.zeros(1), np.ones(1))
    x = opt.step(x, np.zeros(1))
    np.testing.assert_allclose(opt.velocity, [0.5], atol=1e-15)
    np.testing.assert_allclose(x, [-1.5], atol=1e-15)


def test_momentum_sgd_default_momentum():
    assert MomentumSGD(2, lr=0.5).momentum == 0.9


# ---------------------------------------------------------------------------
# Strong augmentation


class _FixedRng:
    """Generator stand-in: fixed dimming draw, no noise, optional dropout cell."""

    def __init__(self, amp: float, drop_cell=None):
        self.amp = amp
        self.drop_cell = drop_cell

    def uniform(self, lo, hi):
        return self.amp

    def normal(self, loc, scale, size=None):
        return np.zeros(size)

    def random(self, shape):
        keep = np.ones(shape)
        if self.drop_cell is not None:
            keep[self.drop_cell] = 0.0
        return keep


def _demo_levels(seed=3):
    rng = np.random.default_rng(seed)
    return [rng.normal(size=(8, 8, 8)), rng.normal(size=(4, 4, 8))]


def test_augment_strong_dims_appearance_channels_only():
    levels = _demo_levels()
    out = augment_strong(levels, _FixedRng(0.5))
    for lvl, o in zip(levels, out):
        np.testing.assert_allclose(o[:, :, :4], 0.5 * lvl[:, :, :4], atol=1e-15)
        # the trailing geometry channels keep their values
        np.testing.assert_allclose(o[:, :, 4:], lvl[:, :, 4:], atol=1e-15)


def test_augment_strong_dropout_zeroes_whole_cells():
    levels = _demo_levels()
    out = augment_strong(levels, _FixedRng(1.0, drop_cell=(2, 3)))
    assert np.all(out[0][2, 3] == 0.0)
    assert np.all(out[1][2, 3] == 0.0)
    assert np.any(out[0][0, 0] != 0.0)


def test_augment_strong_deterministic_given_state():
    levels = _demo_levels()
    a = augment_strong(levels, np.random.default_rng(11))
    b = augment_strong(levels, np.random.default_rng(11))
    for x, y in zip(a, b):
        assert np.array_equal(x, y)
    c = augment_strong(levels, np.random.default_rng(12))
    assert not np.array_equal(a[0], c[0])


# ---------------------------------------------------------------------------
# Geometric jitter


def test_jitter_arrays_shifts_levels_by_stride_ratio():
    levels = _demo_levels(seed=4)
    out, (tx, ty) = jitter_arrays(levels, (4, 8), (1, 0))
    assert (tx, ty) == (0, 8)
    # coarse level moves one row, fine level two; vacated rows are zero
    assert np.array_equal(out[1][1:], levels[1][:-1])
    assert np.all(out[1][0] == 0.0)
    assert np.array_equal(out[0][2:], levels[0][:-2])
    assert np.all(out[0][:2] == 0.0)


def test_jitter_arrays_negative_column_shift():
    levels = _demo_levels(seed=5)
    out, (tx, ty) = jitter_arrays(levels, (4, 8), (0, -1))
    assert (tx, ty) == (-8, 0)
    assert np.array_equal(out[1][:, :-1], levels[1][:, 1:])
    assert np.all(out[1][:, -1] == 0.0)
    assert np.array_equal(out[0][:, :-2], levels[0][:, 2:])
    assert np.all(out[0][:, -2:] == 0.0)


def _one_fg_target(box):
    lay = AnchorLayout()
    m = lay.total_anchors
    roles = np.zeros(m, dtype=np.int8)
    scores = np.zeros((m, 3))
    boxes = np.zeros((m, 4))
    weights = np.zeros(m)
    i = (3 * 8 + 3) * 3 + 1  # level 0, cell (3, 3), anchor 1
    roles[i] = ROLE_SOFT_FG
    scores[i, 2] = 0.7
    boxes[i] = box
    weights[i] = 0.7
    return PseudoTarget(lay, 3, roles, scores, boxes, weights), i


def test_jitter_targets_identity():
    t, _ = _one_fg_target([10.0, 10.0, 18.0, 18.0])
    out = jitter_targets(t, (0, 0))
    assert np.array_equal(out.roles, t.roles)
    assert np.array_equal(out.scores, t.scores)
    assert np.array_equal(out.boxes, t.boxes)
    assert np.array_equal(out.weights, t.weights)


def test_jitter_targets_moves_foreground_with_boxes():
    t, i = _one_fg_target([10.0, 10.0, 18.0, 18.0])
    out = jitter_targets(t, (1, 0))
    j = (5 * 8 + 3) * 3 + 1  # two fine-level rows down
    assert out.roles[i] == ROLE_BACKGROUND
    assert out.roles[j] == ROLE_SOFT_FG
    assert int(np.sum(out.roles == ROLE_SOFT_FG)) == 1
    np.testing.assert_allclose(out.boxes[j], [10.0, 18.0, 18.0, 26.0], atol=1e-12)
    assert out.scores[j, 2] == 0.7
    assert out.weights[j] == 0.7


def test_jitter_targets_drops_boxes_squeezed_by_canvas():
    t, _ = _one_fg_target([10.0, 28.5, 18.0, 31.5])
    out = jitter_targets(t, (1, 0))  # box pushed past the 32-px canvas edge
    assert int(np.sum(out.roles == ROLE_SOFT_FG)) == 0
    assert np.all(out.boxes == 0.0)
    assert np.all(out.weights == 0.0)
    assert np.all(out.scores == 0.0)


# ---------------------------------------------------------------------------
# Teacher confidence and dense target selection


def _tiny_pred():
    lay = AnchorLayout(canvas_h=4, canvas_w=4)  # one cell per level, M = 6
    cls = [np.full((1, 1, 3, 3), -5.0), np.full((1, 1, 3, 3), -5.0)]
    reg = [np.zeros((1, 1, 3, 4)), np.zeros((1, 1, 3, 4))]
    ev = [np.zeros((1, 1, 3)), np.zeros((1, 1, 3))]
    cls[0][0, 0, 0, 1] = 0.0  # flat anchor 0: confident, vague evidence
    ev[0][0, 0, 0] = -10.0
    cls[0][0, 0, 1, 2] = 0.25  # flat anchor 1: confident, sharp evidence
    ev[0][0, 0, 1] = 10.0
    return DensePred(lay, 3, cls, reg, ev, image_id="t")


def test_teacher_uncertainty_closed_form():
    pred = _tiny_pred()
    p, u = teacher_uncertainty(pred)
    top = pred.flat_cls_logits().astype(np.float64).max(axis=1)
    lam = np.log1p(np.exp(pred.flat_evidence().astype(np.float64)))
    np.testing.assert_allclose(p, sigmoid(top), atol=1e-12)
    np.testing.assert_allclose(u, p * (1.0 - p) / (lam + 1.0), atol=1e-12)
    assert u[0] > 0.2 and u[1] < 0.03  # weak evidence -> high uncertainty


def test_build_dense_targets_gate_marks_vague_picks_ignore():
    pred = _tiny_pred()
    t = build_dense_targets(pred, k_percent=33.0, tau_u=0.12, cca=True)
    assert t.roles[0] == ROLE_IGNORE
    assert t.roles[1] == ROLE_SOFT_FG
    assert np.all(t.roles[2:] == ROLE_BACKGROUND)
    # kept rows carry the teacher's post-sigmoid class vector
    row = sigmoid(pred.flat_cls_logits().astype(np.float64)[1])
    assert np.array_equal(t.scores[1], row)


def test_build_dense_targets_no_gate_keeps_all_candidates():
    t = build_dense_targets(_tiny_pred(), k_percent=33.0, tau_u=0.12, cca=False)
    assert np.all(t.roles[:2] == ROLE_SOFT_FG)
    assert not np.any(t.roles == ROLE_IGNORE)


# ---------------------------------------------------------------------------
# Mode flag resolution


def test_effective_flags_pinned_by_mode():
    on = RunConfig(mode="source_only", tca_enabled=True, cca_enabled=True)
    off = RunConfig(mode="source_only", tca_enabled=False, cca_enabled=False)
    assert _effective_flags("fca", on) == (False, False)
    assert _effective_flags("fca+cca", on) == (False, True)
    assert _effective_flags("fca+tca", off) == (True, False)
    assert _effective_flags("mgcamt", off) == (True, True)
    # plain modes honor the switches
    assert _effective_flags("source_only", on) == (True, True)
    assert _effective_flags("assign", off) == (False, False)


# ---------------------------------------------------------------------------
# Tiny end-to-end runs


def _micro_config(**kw):
    base = dict(
        seed=0,
        mode="fca",
        burn_in=1,
        iterations=1,
        eval_interval=400,
        tca_enabled=False,
        cca_enabled=False,
    )
    base.update(kw)
    return RunConfig(**base)


def test_run_source_only_has_no_target_terms():
    res = run_mutual_learning(
        _micro_config(mode="source_only", burn_in=2, iterations=3), eval_enabled=False
    )
    assert [r.iteration for r in res.history] == [1, 2, 3, 4, 5]
    assert all(r.l_t is None for r in res.history)
    assert all(r.l_regu is None for r in res.history)
    assert all(r.map is None for r in res.history)
    assert res.final_map is None
    assert all(r.l_s > 0.0 for r in res.history)
    assert res.teacher is not None
    assert res.spec.tca_enabled is False


def test_run_ema_decay_one_freezes_teacher_at_burn_in():
    res = run_mutual_learning(
        _micro_config(burn_in=1, iterations=2, ema_decay=1.0), eval_enabled=False
    )
    assert np.array_equal(res.teacher.values, res.burnin.values)
    assert not np.array_equal(res.student.values, res.teacher.values)


def test_run_burn_in_zero_seeds_teacher_from_init():
    res = run_mutual_learning(
        _micro_config(burn_in=0, iterations=1, ema_decay=1.0), eval_enabled=False
    )
    init = ToyDetectorParams.init(DetectorSpec(tca_enabled=False), 0)
    assert np.array_equal(res.burnin.values, init.values)
    assert np.array_equal(res.teacher.values, init.values)
    assert len(res.history) == 1 and res.history[0].l_t is not None


def test_run_repeats_bitwise_identical():
    cfg = dict(mode="mgcamt", burn_in=1, iterations=1, eval_interval=2, seed=3)
    a = run_mutual_learning(_micro_config(**cfg))
    b = run_mutual_learning(_micro_config(**cfg))
    assert np.array_equal(a.student.values, b.student.values)
    assert np.array_equal(a.teacher.values, b.teacher.values)
    assert a.final_map == b.final_map
    rows = lambda r: [(h.iteration, h.l_s, h.l_t, h.l_regu, h.map) for h in r.history]
    assert rows(a) == rows(b)
    assert all(h.l_regu is not None for h in a.history)


def test_run_eval_cadence_and_final_map():
    res = run_mutual_learning(_micro_config(burn_in=2, iterations=4, eval_interval=3))
    have = [r.iteration for r in res.history if r.map is not None]
    assert have == [2, 3, 6]  # burn-in snapshot, interval hit, last iteration
    assert res.final_map == res.history[-1].map
    assert 0.0 <= res.final_map <= 1.0


def test_run_mode_pins_detector_remap_head():
    res = run_mutual_learning(
        _micro_config(mode="fca+tca", burn_in=0, iterations=1), eval_enabled=False
    )
    assert res.spec.tca_enabled is True
    assert res.history[0].l_regu is None

    res2 = run_mutual_learning(
        _micro_config(mode="fca+cca", burn_in=0, iterations=1), eval_enabled=False
    )
    assert res2.spec.tca_enabled is False
    assert res2.history[0].l_regu is not None and res2.history[0].l_regu > 0.0


def test_run_fca_path_is_nms_and_assignment_free():
    before = dict(CALL_COUNTS)
    run_mutual_learning(_micro_config(burn_in=1, iterations=1), eval_enabled=False)
    assert CALL_COUNTS["nms"] == before["nms"]
    # the only box assignment is the labeled-source precompute
    assert CALL_COUNTS["assign_iou"] == before["assign_iou"] + N_SOURCE_TRAIN


def test_run_assign_mode_uses_nms_and_assignment():
    cfg = _micro_config(mode="assign@0.9", burn_in=0, iterations=1)
    before = dict(CALL_COUNTS)
    res = run_mutual_learning(cfg, eval_enabled=False)
    # per target image: one NMS per class, one assignment over all anchors
    assert CALL_COUNTS["nms"] == before["nms"] + BATCH_TARGET * 3
    assert CALL_COUNTS["assign_iou"] == before["assign_iou"] + N_SOURCE_TRAIN + BATCH_TARGET
    assert res.history[0].l_t is not None


def test_run_geometric_jitter_deterministic():
    cfg = dict(burn_in=0, iterations=1, seed=5)
    a = run_mutual_learning(_micro_config(**cfg), eval_enabled=False, geometric_jitter=True)
    b = run_mutual_learning(_micro_config(**cfg), eval_enabled=False, geometric_jitter=True)
    assert np.array_equal(a.student.values, b.student.values)
    assert a.history[0].l_t == b.history[0].l_t
