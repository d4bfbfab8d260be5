"""Shift-field prediction and scale-aware feature remapping."""

import hashlib

import numpy as np
import pytest

from calign.errors import InvalidInputError
from calign.grid import FeatureMap, Pyramid, resize
from calign.remap import (
    ShiftField,
    ShiftHeadSpec,
    head_spec_for,
    predict_shift,
    remap,
    remap_cross,
    remap_vjp,
    remap_within,
)
from calign.rng import substream

from helpers import assert_grad_close


def _lattice(rng, shape):
    # multiples of 1/64 in [-2, 2]: exactly representable in float32, and
    # closed under the pairwise sums the linearity tests form
    return rng.integers(-128, 129, shape).astype(np.float64) / 64.0


def _pyramids(rng, channels=5, strides=(4, 8), dims=((4, 4), (2, 2)), lattice=False):
    draw = (lambda s: _lattice(rng, s)) if lattice else (lambda s: rng.normal(0.0, 1.0, s))
    levels = [draw((h, w, channels)) for h, w in dims]
    return Pyramid([FeatureMap(a) for a in levels], strides)


def test_head_spec_layout():
    spec = ShiftHeadSpec(channels=5, hidden=4)
    assert spec.fan_in == 30
    assert spec.n_params == 30 * 4 + 4 + 9 * 4 * 3 + 3
    parts = spec.unpack(np.arange(spec.n_params, dtype=np.float64))
    assert parts["w1"].shape == (30, 4)
    assert parts["w2"].shape == (3, 3, 4, 3)
    np.testing.assert_array_equal(spec.pack(parts), np.arange(spec.n_params))
    with pytest.raises(InvalidInputError):
        spec.unpack(np.zeros(spec.n_params - 1))


def test_head_spec_for_inverts_param_count():
    for channels in (1, 3, 5, 8):
        for hidden in (1, 2, 4, 7):
            spec = ShiftHeadSpec(channels, hidden)
            got = head_spec_for(channels, np.zeros(spec.n_params))
            assert got == spec
    with pytest.raises(InvalidInputError):
        head_spec_for(5, np.zeros(236))  # one param too many for any hidden width


def test_shift_field_validates_level_range():
    ShiftField([np.zeros((2, 2, 3)), np.zeros((1, 1, 3))])
    ok = np.zeros((2, 2, 3))
    ok[:, :, 2] = 1.0  # level 0 of 2 may look one level up
    ShiftField([ok, np.zeros((1, 1, 3))])
    bad = np.zeros((2, 2, 3))
    bad[0, 0, 2] = -0.5  # below the pyramid
    with pytest.raises(InvalidInputError):
        ShiftField([bad, np.zeros((1, 1, 3))])
    with pytest.raises(InvalidInputError):
        ShiftField([np.zeros((2, 2, 4))])


def test_predict_shift_zero_params_gives_zero_field():
    rng = substream(5, "remap/zero")
    feat = _pyramids(rng)
    cls = _pyramids(rng)
    field = predict_shift(cls, feat, np.zeros(ShiftHeadSpec(5, 4).n_params))
    for s in field.shifts:
        assert np.all(s == 0.0)


def test_predict_shift_constant_features_give_constant_field():
    rng = substream(5, "remap/const")
    params = rng.normal(0.0, 0.3, ShiftHeadSpec(3, 4).n_params)
    levels = [np.full((4, 4, 3), 0.75), np.full((2, 2, 3), 0.75)]
    pyr = Pyramid([FeatureMap(a) for a in levels], (4, 8))
    field = predict_shift(pyr, pyr, params)
    for s in field.shifts:
        # replicate padding + half-pixel resizing keep constants constant
        np.testing.assert_allclose(s, np.broadcast_to(s[0, 0], s.shape), rtol=0, atol=1e-12)


def test_predict_shift_golden_values():
    rng = substream(0, "test/shift-golden")
    cls_levels = [rng.normal(0.0, 1.0, (4, 4, 5)), rng.normal(0.0, 1.0, (2, 2, 5))]
    feat_levels = [rng.normal(0.0, 1.0, (4, 4, 5)), rng.normal(0.0, 1.0, (2, 2, 5))]
    params = rng.normal(0.0, 0.3, ShiftHeadSpec(5, 4).n_params)
    cls_pyr = Pyramid([FeatureMap(a) for a in cls_levels], (4, 8))
    feat_pyr = Pyramid([FeatureMap(a) for a in feat_levels], (4, 8))
    field = predict_shift(cls_pyr, feat_pyr, params)
    h = hashlib.blake2b(digest_size=8)
    for s in field.shifts:
        h.update(np.ascontiguousarray(s).tobytes())
    assert h.hexdigest() == "194f4ff2ffc21263"
    np.testing.assert_allclose(
        field.shifts[0][0, 0], [-0.22094929086498785, -1.179303452793658, 0.0], rtol=0, atol=1e-13
    )
    np.testing.assert_allclose(
        field.shifts[0][2, 3], [3.4517580274842357, 0.18076470573130865, 0.0], rtol=0, atol=1e-13
    )
    np.testing.assert_allclose(
        field.shifts[1][1, 1], [0.577225551705276, -0.06645777369531622, -1.0], rtol=0, atol=1e-13
    )

    out = remap(feat_pyr, cls_pyr, params)
    h2 = hashlib.blake2b(digest_size=8)
    for lvl in out.levels:
        h2.update(np.ascontiguousarray(lvl.data).tobytes())
    assert h2.hexdigest() == "0c68f0bb2b335109"
    np.testing.assert_array_equal(
        out.levels[0].data[1, 2],
        np.array(
            [-0.9994109869003296, -1.2483073472976685, 0.47986599802970886,
             0.0921945571899414, 0.24866439402103424],
            dtype=np.float32,
        ),
    )
    np.testing.assert_array_equal(
        out.levels[1].data[0, 1],
        np.array(
            [-0.13496078550815582, -0.6670417785644531, 0.1557943969964981,
             -0.9902992844581604, 0.04410598799586296],
            dtype=np.float32,
        ),
    )


def _zero_field(dims):
    return ShiftField([np.zeros((h, w, 3)) for h, w in dims])


def test_remap_within_identity_at_zero_shift():
    rng = substream(5, "remap/wid")
    feat = _pyramids(rng)
    out = remap_within(feat, _zero_field(((4, 4), (2, 2))))
    for got, src in zip(out.levels, feat.levels):
        np.testing.assert_array_equal(got.data, src.data)


def test_remap_within_integer_shift_translates_with_edge_clamp():
    rng = substream(5, "remap/wtrans")
    feat = _pyramids(rng)
    shifts = [np.zeros((4, 4, 3)), np.zeros((2, 2, 3))]
    shifts[0][:, :, 0] = 1.0  # read one row down
    out = remap_within(feat, ShiftField(shifts))
    src = feat.levels[0].data
    expect = src[np.minimum(np.arange(4) + 1, 3)]
    np.testing.assert_array_equal(out.levels[0].data, expect)
    np.testing.assert_array_equal(out.levels[1].data, feat.levels[1].data)


def test_remap_within_half_shift_averages_neighbors():
    rng = substream(5, "remap/whalf")
    feat = _pyramids(rng, lattice=True)
    shifts = [np.zeros((4, 4, 3)), np.zeros((2, 2, 3))]
    shifts[0][:, :, 1] = 0.5
    out = remap_within(feat, ShiftField(shifts))
    src = feat.levels[0].data.astype(np.float64)
    cols = np.minimum(np.arange(4) + 1, 3)
    expect = 0.5 * (src + src[:, cols])
    np.testing.assert_allclose(out.levels[0].data, expect, rtol=0, atol=1e-12)


def test_remap_cross_zero_is_identity():
    rng = substream(5, "remap/c0")
    feat = _pyramids(rng)
    out = remap_cross(feat, _zero_field(((4, 4), (2, 2))))
    for got, src in zip(out.levels, feat.levels):
        np.testing.assert_array_equal(got.data, src.data)


def test_remap_cross_unit_shift_reads_resized_next_level():
    rng = substream(5, "remap/c1")
    feat = _pyramids(rng)
    shifts = [np.zeros((4, 4, 3)), np.zeros((2, 2, 3))]
    shifts[0][:, :, 2] = 1.0  # level 0 reads entirely from level 1
    out = remap_cross(feat, ShiftField(shifts))
    # stride-ratio half-pixel correspondence == plain half-pixel resize here
    oracle = resize(feat.levels[1], 4, 4)
    np.testing.assert_allclose(out.levels[0].data, oracle.data, rtol=0, atol=1e-6)
    np.testing.assert_array_equal(out.levels[1].data, feat.levels[1].data)


def test_remap_cross_fractional_shift_blends():
    rng = substream(5, "remap/chalf")
    feat = _pyramids(rng, lattice=True)
    shifts = [np.zeros((4, 4, 3)), np.zeros((2, 2, 3))]
    shifts[0][:, :, 2] = 0.5
    out = remap_cross(feat, ShiftField(shifts))
    own = feat.levels[0].data.astype(np.float64)
    other = resize(feat.levels[1], 4, 4).data.astype(np.float64)
    np.testing.assert_allclose(out.levels[0].data, 0.5 * own + 0.5 * other, rtol=0, atol=1e-6)


def test_remap_zero_head_is_identity():
    rng = substream(5, "remap/id")
    feat = _pyramids(rng)
    cls = _pyramids(rng)
    out = remap(feat, cls, np.zeros(ShiftHeadSpec(5, 4).n_params))
    for got, src in zip(out.levels, feat.levels):
        np.testing.assert_array_equal(got.data, src.data)
    assert out.strides == feat.strides


def test_remap_linear_in_features_for_fixed_field():
    from calign.remap import remap_cross_arrays, remap_within_arrays

    rng = substream(5, "remap/lin")
    a = [rng.normal(0.0, 1.0, (4, 4, 5)), rng.normal(0.0, 1.0, (2, 2, 5))]
    b = [rng.normal(0.0, 1.0, (4, 4, 5)), rng.normal(0.0, 1.0, (2, 2, 5))]
    both = [x + y for x, y in zip(a, b)]
    shifts = [rng.uniform(-1.0, 1.0, (4, 4, 3)), rng.uniform(-1.0, 1.0, (2, 2, 3))]
    shifts[0][:, :, 2] = rng.uniform(0.0, 1.0, (4, 4))
    shifts[1][:, :, 2] = rng.uniform(-1.0, 0.0, (2, 2))
    ops = (
        lambda lv: remap_within_arrays(lv, shifts)[0],
        lambda lv: remap_cross_arrays(lv, shifts, (4, 8))[0],
    )
    for op in ops:
        for lo, la, lb in zip(op(both), op(a), op(b)):
            np.testing.assert_allclose(lo, la + lb, rtol=0, atol=1e-12)


def _fd_setup():
    """Inputs placed away from every non-smooth locus of the pipeline:
    b2 biases put (s0, s1) mid-cell and s2 mid-range, so no sampled coordinate
    or level blend sits within an FD step of a floor/clamp boundary."""
    rng = substream(5, "remap/fd")
    spec = ShiftHeadSpec(channels=3, hidden=4)
    feat = [rng.normal(0.0, 1.0, (4, 4, 3)), rng.normal(0.0, 1.0, (2, 2, 3))]
    cls = [rng.normal(0.0, 1.0, (4, 4, 3)), rng.normal(0.0, 1.0, (2, 2, 3))]
    params = rng.normal(0.0, 0.05, spec.n_params)
    parts = spec.unpack(params)
    parts["b2"] = np.array([0.3, 0.35, 0.5])
    params = spec.pack(parts)
    douts = [rng.normal(0.0, 1.0, (4, 4, 3)), rng.normal(0.0, 1.0, (2, 2, 3))]
    return spec, feat, cls, params, douts


def _margins(spec, feat, cls, params):
    """Distance of every raw shift from the nearest non-smooth locus.

    Clamp boundaries and integer (floor / cell-crossing) points are only a
    problem when the raw conv output sits close enough for an FD step to cross
    them; saturated cells far past a boundary are fine (both probes clamp).
    """
    from calign.remap import shift_head_forward

    shifts, (_, caches, _, _) = shift_head_forward(cls, feat, spec, params)
    worst = np.inf
    for o, s in enumerate(shifts):
        raw = caches[o][3]
        lo, hi = float(-o), float(len(shifts) - 1 - o)
        worst = min(worst, np.min(np.abs(raw[:, :, 2] - lo)), np.min(np.abs(raw[:, :, 2] - hi)))
        open_ = (raw[:, :, 2] > lo) & (raw[:, :, 2] < hi)
        if np.any(open_):
            s2 = s[:, :, 2][open_]
            worst = min(worst, np.min(np.abs(s2 - np.round(s2))))
        for ch in (0, 1):
            worst = min(worst, np.min(np.abs(s[:, :, ch] - np.round(s[:, :, ch]))))
    return worst


def test_remap_vjp_matches_finite_differences():
    spec, feat, cls, params, douts = _fd_setup()
    assert _margins(spec, feat, cls, params) > 0.05  # draw stays off non-smooth loci

    def scalar(feat_l, cls_l, p):
        outs, _, _, _ = remap_vjp(feat_l, cls_l, spec, p, douts, (4, 8))
        return float(sum(np.sum(d * o) for d, o in zip(douts, outs)))

    _, dfeat, dcls, dparams = remap_vjp(feat, cls, spec, params, douts, (4, 8))

    fd_params = np.zeros_like(params)
    for i in range(params.size):
        e = np.zeros_like(params)
        e[i] = 1e-3
        fd_params[i] = (scalar(feat, cls, params + e) - scalar(feat, cls, params - e)) / 2e-3
    assert_grad_close(dparams, fd_params, rtol=1e-4, atol=1e-7, what="remap dparams")

    for which, levels, grads in (("feat", feat, dfeat), ("cls", cls, dcls)):
        for o in range(len(levels)):
            fd = np.zeros_like(levels[o])
            it = np.nditer(levels[o], flags=["multi_index"])
            while not it.finished:
                idx = it.multi_index
                orig = levels[o][idx]
                levels[o][idx] = orig + 1e-3
                hi = scalar(feat, cls, params)
                levels[o][idx] = orig - 1e-3
                lo = scalar(feat, cls, params)
                levels[o][idx] = orig
                fd[idx] = (hi - lo) / 2e-3
                it.iternext()
            assert_grad_close(grads[o], fd, rtol=1e-4, atol=1e-6, what=f"remap d{which}[{o}]")
