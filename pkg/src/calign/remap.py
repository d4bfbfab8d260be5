"""Task/scale-aligned feature remapping.

A small head predicts, per pyramid location, a 3-channel shift field
s = (row shift, col shift, level shift). Features are then re-sampled within
their level by (s0, s1) and blended across adjacent levels by the fractional
part of s2, using stride-ratio coordinate correspondence with half-pixel
centers. Everything is differentiable: the VJPs below are hand-derived and
checked against finite differences in the tests.

Head structure per level: concatenate the classification and regression
features with both adjacent levels' features resized to the current dims
(edge levels duplicate their single neighbor), then 1x1 linear -> ReLU ->
3x3 linear (replicate padding) -> 3 channels. The level-shift channel is
clamped so o + s2 stays inside the pyramid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError
from .grid import (
    FeatureMap,
    Pyramid,
    resize_plane,
    resize_plane_vjp,
    sample_plane,
    sample_plane_vjp,
)

__all__ = [
    "ShiftField",
    "ShiftHeadSpec",
    "head_spec_for",
    "predict_shift",
    "remap_within",
    "remap_cross",
    "remap",
    "remap_vjp",
    "shift_head_forward",
    "shift_head_vjp",
    "remap_within_arrays",
    "remap_within_vjp",
    "remap_cross_arrays",
    "remap_cross_vjp",
    "conv3x3_replicate",
    "conv3x3_replicate_vjp",
]


@dataclass
class ShiftField:
    """Per-level [h, w, 3] shift grids; channel 2 is pre-clamped to the level range."""

    shifts: list[np.ndarray]

    def __post_init__(self):
        n = len(self.shifts)
        for o, s in enumerate(self.shifts):
            s = np.asarray(s, dtype=np.float64)
            if s.ndim != 3 or s.shape[2] != 3:
                raise InvalidInputError(f"shift grid must be [h][w][3], got {s.shape}")
            if not np.all(np.isfinite(s)):
                raise InvalidInputError("shift field must be finite")
            if np.any(s[:, :, 2] < -o - 1e-9) or np.any(s[:, :, 2] > (n - 1 - o) + 1e-9):
                raise InvalidInputError(f"level shift at level {o} outside [{-o}, {n - 1 - o}]")
            self.shifts[o] = s


@dataclass(frozen=True)
class ShiftHeadSpec:
    """Parameter layout of the shift head for feature pyramids of `channels`.

    Flat parameter order: w1 [6C, hidden], b1 [hidden], w2 [3, 3, hidden, 3],
    b2 [3]. Fan-in is 6C: (below, current, above) slots of the concatenated
    (cls, reg) features.
    """

    channels: int
    hidden: int = 4

    @property
    def fan_in(self) -> int:
        return 6 * self.channels

    @property
    def n_params(self) -> int:
        return self.fan_in * self.hidden + self.hidden + 9 * self.hidden * 3 + 3

    def unpack(self, params) -> dict[str, np.ndarray]:
        params = np.asarray(params, dtype=np.float64).reshape(-1)
        if params.shape[0] != self.n_params:
            raise InvalidInputError(
                f"shift head expects {self.n_params} params, got {params.shape[0]}"
            )
        i = 0
        w1 = params[i : i + self.fan_in * self.hidden].reshape(self.fan_in, self.hidden)
        i += w1.size
        b1 = params[i : i + self.hidden]
        i += self.hidden
        w2 = params[i : i + 9 * self.hidden * 3].reshape(3, 3, self.hidden, 3)
        i += w2.size
        b2 = params[i : i + 3]
        return {"w1": w1, "b1": b1, "w2": w2, "b2": b2}

    def pack(self, parts: dict[str, np.ndarray]) -> np.ndarray:
        return np.concatenate(
            [parts["w1"].reshape(-1), parts["b1"].reshape(-1), parts["w2"].reshape(-1), parts["b2"].reshape(-1)]
        )


def _tap_indices(n: int, d: int) -> np.ndarray:
    return np.clip(np.arange(n) + d, 0, n - 1)


def conv3x3_replicate(z: np.ndarray, w2: np.ndarray, b2: np.ndarray) -> np.ndarray:
    """3x3 convolution with replicate (edge-clamp) padding.

    Replicate padding keeps the stage translation-equivariant on constant
    inputs, matching the sampler's edge convention.
    """
    h, w = z.shape[0], z.shape[1]
    out = np.broadcast_to(b2, (h, w, b2.shape[0])).astype(np.float64).copy()
    for dr in (-1, 0, 1):
        rows = _tap_indices(h, dr)
        for dc in (-1, 0, 1):
            cols = _tap_indices(w, dc)
            view = z[rows][:, cols]
            out += np.einsum("hwi,io->hwo", view, w2[dr + 1, dc + 1])
    return out


def conv3x3_replicate_vjp(z: np.ndarray, w2: np.ndarray, dout: np.ndarray):
    """Backward of conv3x3_replicate -> (dz, dw2, db2)."""
    h, w = z.shape[0], z.shape[1]
    dz = np.zeros_like(z)
    dw2 = np.zeros_like(w2)
    db2 = np.sum(dout, axis=(0, 1))
    for dr in (-1, 0, 1):
        rows = _tap_indices(h, dr)
        for dc in (-1, 0, 1):
            cols = _tap_indices(w, dc)
            view = z[rows][:, cols]
            dw2[dr + 1, dc + 1] = np.einsum("hwi,hwo->io", view, dout)
            dview = np.einsum("hwo,io->hwi", dout, w2[dr + 1, dc + 1])
            np.add.at(dz, (rows[:, None], cols[None, :]), dview)
    return dz, dw2, db2


def _neighbor_indices(num_levels: int, o: int) -> tuple[int, int]:
    below = o - 1 if o > 0 else (o + 1 if num_levels > 1 else o)
    above = o + 1 if o < num_levels - 1 else (o - 1 if num_levels > 1 else o)
    return below, above


def _check_aligned(cls_levels, reg_levels):
    if len(cls_levels) != len(reg_levels):
        raise InvalidInputError("cls/reg pyramids must have the same level count")
    for o, (a, b) in enumerate(zip(cls_levels, reg_levels)):
        if a.shape != b.shape:
            raise InvalidInputError(f"level {o} dims differ: {a.shape} vs {b.shape}")


def shift_head_forward(cls_levels, reg_levels, spec: ShiftHeadSpec, params):
    """Array-level shift head. Returns (shift arrays, cache for the VJP)."""
    _check_aligned(cls_levels, reg_levels)
    parts = spec.unpack(params)
    n = len(cls_levels)
    base = [
        np.concatenate(
            [np.asarray(c, dtype=np.float64), np.asarray(r, dtype=np.float64)], axis=2
        )
        for c, r in zip(cls_levels, reg_levels)
    ]
    shifts, caches = [], []
    for o in range(n):
        h, w = base[o].shape[0], base[o].shape[1]
        below, above = _neighbor_indices(n, o)
        rb, cache_b = resize_plane(base[below], h, w)
        ra, cache_a = resize_plane(base[above], h, w)
        x = np.concatenate([rb, base[o], ra], axis=2)
        pre = x @ parts["w1"] + parts["b1"]
        z = np.maximum(pre, 0.0)
        raw = conv3x3_replicate(z, parts["w2"], parts["b2"])
        s = raw.copy()
        lo, hi = float(-o), float(n - 1 - o)
        s[:, :, 2] = np.clip(raw[:, :, 2], lo, hi)
        clamp_open = (raw[:, :, 2] > lo) & (raw[:, :, 2] < hi)
        shifts.append(s)
        caches.append((x, pre, z, raw, clamp_open, cache_b, cache_a, below, above))
    return shifts, (base, caches, parts, spec)


def shift_head_vjp(cache, dshifts):
    """Backward of shift_head_forward -> (d_cls levels, d_reg levels, d_params)."""
    base, caches, parts, spec = cache
    n = len(base)
    c_half = base[0].shape[2] // 2
    dbase = [np.zeros_like(b) for b in base]
    dw1 = np.zeros_like(parts["w1"])
    db1 = np.zeros_like(parts["b1"])
    dw2 = np.zeros_like(parts["w2"])
    db2 = np.zeros_like(parts["b2"])
    for o in range(n):
        x, pre, z, raw, clamp_open, cache_b, cache_a, below, above = caches[o]
        ds = np.asarray(dshifts[o], dtype=np.float64).copy()
        ds[:, :, 2] = np.where(clamp_open, ds[:, :, 2], 0.0)
        dz, dw2_o, db2_o = conv3x3_replicate_vjp(z, parts["w2"], ds)
        dw2 += dw2_o
        db2 += db2_o
        dpre = np.where(pre > 0.0, dz, 0.0)
        dw1 += np.einsum("hwi,hwo->io", x, dpre)
        db1 += np.sum(dpre, axis=(0, 1))
        dx = dpre @ parts["w1"].T
        k = base[o].shape[2]
        dbase[below] += resize_plane_vjp(cache_b, dx[:, :, :k])
        dbase[o] += dx[:, :, k : 2 * k]
        dbase[above] += resize_plane_vjp(cache_a, dx[:, :, 2 * k :])
    dcls = [d[:, :, :c_half] for d in dbase]
    dreg = [d[:, :, c_half:] for d in dbase]
    dparams = spec.pack({"w1": dw1, "b1": db1, "w2": dw2, "b2": db2})
    return dcls, dreg, dparams


def remap_within_arrays(levels, shifts):
    """Per-level resample at (row + s0, col + s1). Returns (outs, cache)."""
    outs, caches = [], []
    for arr, s in zip(levels, shifts):
        arr = np.asarray(arr, dtype=np.float64)
        h, w = arr.shape[0], arr.shape[1]
        u = np.arange(h, dtype=np.float64)[:, None] + s[:, :, 0]
        v = np.arange(w, dtype=np.float64)[None, :] + s[:, :, 1]
        out, cache = sample_plane(arr, u, v)
        outs.append(out)
        caches.append(cache)
    return outs, caches


def remap_within_vjp(caches, douts):
    """Backward -> (d_levels, d_shifts with zero level-shift channel)."""
    dlevels, dshifts = [], []
    for cache, dout in zip(caches, douts):
        darr, du, dv = sample_plane_vjp(cache, dout)
        ds = np.stack([du, dv, np.zeros_like(du)], axis=2)
        dlevels.append(darr)
        dshifts.append(ds)
    return dlevels, dshifts


def _corr_coords(h_out: int, w_out: int, ratio: float):
    u = (np.arange(h_out, dtype=np.float64)[:, None] + 0.5) * ratio - 0.5
    v = (np.arange(w_out, dtype=np.float64)[None, :] + 0.5) * ratio - 0.5
    return np.broadcast_to(u, (h_out, w_out)).copy(), np.broadcast_to(v, (h_out, w_out)).copy()


def remap_cross_arrays(levels, shifts, strides):
    """Blend each level between the two levels bracketing o + s2.

    Output(o) = (1 - frac)·sample(level lo) + frac·sample(level lo+1), where
    lo = o + floor(s2), frac = s2 - floor(s2), and sampling uses stride-ratio
    coordinate correspondence with half-pixel centers. s2 == 0 reads the level
    itself exactly.
    """
    n = len(levels)
    outs, caches = [], []
    for o in range(n):
        arr = np.asarray(levels[o], dtype=np.float64)
        h, w = arr.shape[0], arr.shape[1]
        s2 = shifts[o][:, :, 2]
        floor = np.floor(s2)
        frac = s2 - floor
        lo = (o + floor).astype(np.int64)
        if np.any(lo < 0) or np.any(lo > n - 1):
            raise InvalidInputError("level shift leaves the pyramid range")
        out = np.zeros_like(arr)
        samples = []
        for t in range(n):
            w_t = (1.0 - frac) * (lo == t) + frac * (lo + 1 == t)
            if not np.any((lo == t) | (lo + 1 == t)):
                samples.append(None)
                continue
            ratio = strides[o] / strides[t]
            u, v = _corr_coords(h, w, ratio)
            val, cache_t = sample_plane(np.asarray(levels[t], dtype=np.float64), u, v)
            samples.append((val, cache_t, w_t))
            out += w_t[:, :, None] * val
        outs.append(out)
        caches.append((samples, lo, frac))
    return outs, caches


def remap_cross_vjp(caches, douts, level_shapes):
    """Backward -> (d_levels, d_shifts with only the level channel non-zero)."""
    n = len(level_shapes)
    dlevels = [np.zeros(shape, dtype=np.float64) for shape in level_shapes]
    dshifts = []
    for o in range(n):
        samples, lo, frac = caches[o]
        dout = np.asarray(douts[o], dtype=np.float64)
        ds2 = np.zeros(lo.shape, dtype=np.float64)
        for t in range(n):
            entry = samples[t]
            if entry is None:
                continue
            val, cache_t, w_t = entry
            darr, _, _ = sample_plane_vjp(cache_t, w_t[:, :, None] * dout)
            dlevels[t] += darr
            # d out / d frac: -sample(lo) + sample(lo+1)
            sgn = -1.0 * (lo == t) + 1.0 * (lo + 1 == t)
            ds2 += sgn * np.sum(val * dout, axis=2)
        ds = np.zeros((lo.shape[0], lo.shape[1], 3), dtype=np.float64)
        ds[:, :, 2] = ds2
        dshifts.append(ds)
    return dlevels, dshifts


def _pyr_arrays(p: Pyramid):
    return [lvl.data.astype(np.float64) for lvl in p.levels]


def head_spec_for(channels: int, params) -> ShiftHeadSpec:
    """Recover the head spec from the channel count and flat parameter length.

    n_params = hidden*(6*channels + 1 + 27) + 3 is invertible in hidden.
    """
    n = np.asarray(params).reshape(-1).shape[0]
    denom = 6 * channels + 28
    hidden, rem = divmod(n - 3, denom)
    if rem != 0 or hidden < 1:
        raise InvalidInputError(
            f"cannot infer shift-head layout from {n} params with {channels} channels"
        )
    return ShiftHeadSpec(channels=channels, hidden=hidden)


def predict_shift(cls_feat: Pyramid, reg_feat: Pyramid, head_params) -> ShiftField:
    """Predict the per-location shift field from aligned feature pyramids."""
    if reg_feat.levels[0].channels != cls_feat.levels[0].channels:
        raise InvalidInputError("cls/reg pyramids must share a channel count")
    spec = head_spec_for(cls_feat.levels[0].channels, head_params)
    shifts, _ = shift_head_forward(_pyr_arrays(cls_feat), _pyr_arrays(reg_feat), spec, head_params)
    return ShiftField(shifts)


def remap_within(feat: Pyramid, shifts: ShiftField) -> Pyramid:
    """Resample every level at its own (s0, s1)-shifted coordinates."""
    outs, _ = remap_within_arrays(_pyr_arrays(feat), shifts.shifts)
    return Pyramid([FeatureMap(o) for o in outs], feat.strides)


def remap_cross(feat: Pyramid, shifts: ShiftField) -> Pyramid:
    """Blend every level across the bracketing levels of o + s2."""
    outs, _ = remap_cross_arrays(_pyr_arrays(feat), shifts.shifts, feat.strides)
    return Pyramid([FeatureMap(o) for o in outs], feat.strides)


def remap(feat: Pyramid, cls_feat: Pyramid, head_params) -> Pyramid:
    """Full pipeline: predict shifts, remap within scale, then across scales."""
    field = predict_shift(cls_feat, feat, head_params)
    return remap_cross(remap_within(feat, field), field)


def remap_vjp(feat_levels, cls_levels, spec: ShiftHeadSpec, head_params, douts, strides):
    """End-to-end VJP of the array-level remap pipeline.

    feat plays the regression-feature role in the shift head. Returns
    (outs, d_feat, d_cls, d_params) so callers get the forward for free.
    """
    shifts, head_cache = shift_head_forward(cls_levels, feat_levels, spec, head_params)
    within, within_cache = remap_within_arrays(feat_levels, shifts)
    outs, cross_cache = remap_cross_arrays(within, shifts, strides)

    dwithin, dshift_cross = remap_cross_vjp(cross_cache, douts, [w.shape for w in within])
    dfeat, dshift_within = remap_within_vjp(within_cache, dwithin)
    dshifts = [a + b for a, b in zip(dshift_cross, dshift_within)]
    dcls, dreg, dparams = shift_head_vjp(head_cache, dshifts)
    dfeat = [a + b for a, b in zip(dfeat, dreg)]
    return outs, dfeat, dcls, dparams
