"""Feature grids and differentiable bilinear sampling/resizing.

Coordinates are in cell units: (u, v) = (row, col), with (0, 0) at the center
of the top-left cell and (h-1, w-1) at the center of the bottom-right cell.
Out-of-range coordinates clamp to the nearest edge cell; the coordinate
gradient is zero there. Grid data is stored float32; all arithmetic runs in
float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError

__all__ = [
    "FeatureMap",
    "Pyramid",
    "bilinear_sample",
    "sample_grad",
    "resize",
    "sample_plane",
    "sample_plane_vjp",
    "resize_plane",
    "resize_plane_vjp",
]


@dataclass
class FeatureMap:
    """A dense [h][w][channels] float32 grid."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3:
            raise InvalidInputError(f"feature map must be [h][w][c], got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1 or arr.shape[2] < 1:
            raise InvalidInputError(f"feature map dims must be >= 1, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise InvalidInputError("feature map contains non-finite values")
        self.data = np.ascontiguousarray(arr, dtype=np.float32)

    @property
    def h(self) -> int:
        return self.data.shape[0]

    @property
    def w(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


@dataclass
class Pyramid:
    """Multi-level feature stack: strides double, dims halve (ceil), channels match."""

    levels: list[FeatureMap] = field(default_factory=list)
    strides: tuple[int, ...] = ()

    def __post_init__(self):
        self.strides = tuple(int(s) for s in self.strides)
        if len(self.levels) != len(self.strides):
            raise InvalidInputError("pyramid needs one stride per level")
        if not self.levels:
            raise InvalidInputError("pyramid must have at least one level")
        for i, s in enumerate(self.strides):
            if s < 1:
                raise InvalidInputError(f"stride must be positive, got {s}")
            if i > 0 and s != 2 * self.strides[i - 1]:
                raise InvalidInputError(
                    f"strides must double per level, got {self.strides[i - 1]} -> {s}"
                )
        c0 = self.levels[0].channels
        for i in range(1, len(self.levels)):
            prev, cur = self.levels[i - 1], self.levels[i]
            if cur.h != -(-prev.h // 2) or cur.w != -(-prev.w // 2):
                raise InvalidInputError(
                    f"level {i} dims {cur.h}x{cur.w} must be ceil-half of {prev.h}x{prev.w}"
                )
            if cur.channels != c0:
                raise InvalidInputError("all pyramid levels must share a channel count")

    @property
    def num_levels(self) -> int:
        return len(self.levels)


def _cell_indices(coords: np.ndarray, size: int):
    """Clamped floor/neighbor indices plus fraction and interior mask."""
    clamped = np.clip(coords, 0.0, size - 1.0)
    if size == 1:
        i0 = np.zeros(clamped.shape, dtype=np.intp)
        frac = np.zeros_like(clamped)
    else:
        i0 = np.minimum(np.floor(clamped), size - 2).astype(np.intp)
        frac = clamped - i0
    i1 = np.minimum(i0 + 1, size - 1)
    interior = (coords >= 0.0) & (coords <= size - 1.0)
    return i0, i1, frac, interior


def sample_plane(data: np.ndarray, u, v):
    """Vectorized bilinear sample of [h][w][C] data at coordinate arrays u, v.

    Returns (values [*u.shape][C], cache for the VJP). Arithmetic is float64.
    """
    arr = np.asarray(data, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
        raise InvalidInputError("sample coordinates must be finite")
    h, w = arr.shape[0], arr.shape[1]
    i0, i1, fu, mu = _cell_indices(u, h)
    j0, j1, fv, mv = _cell_indices(v, w)
    fu_ = fu[..., None]
    fv_ = fv[..., None]
    m00 = arr[i0, j0]
    m01 = arr[i0, j1]
    m10 = arr[i1, j0]
    m11 = arr[i1, j1]
    out = (
        (1.0 - fu_) * (1.0 - fv_) * m00
        + (1.0 - fu_) * fv_ * m01
        + fu_ * (1.0 - fv_) * m10
        + fu_ * fv_ * m11
    )
    cache = (arr.shape, i0, i1, j0, j1, fu, fv, mu, mv, m00, m01, m10, m11)
    return out, cache


def sample_plane_vjp(cache, dout: np.ndarray):
    """Backward of sample_plane: returns (d_data [h][w][C], d_u, d_v)."""
    shape, i0, i1, j0, j1, fu, fv, mu, mv, m00, m01, m10, m11 = cache
    dout = np.asarray(dout, dtype=np.float64)
    fu_ = fu[..., None]
    fv_ = fv[..., None]
    ddata = np.zeros(shape, dtype=np.float64)
    np.add.at(ddata, (i0, j0), (1.0 - fu_) * (1.0 - fv_) * dout)
    np.add.at(ddata, (i0, j1), (1.0 - fu_) * fv_ * dout)
    np.add.at(ddata, (i1, j0), fu_ * (1.0 - fv_) * dout)
    np.add.at(ddata, (i1, j1), fu_ * fv_ * dout)
    slope_u = (1.0 - fv_) * (m10 - m00) + fv_ * (m11 - m01)
    slope_v = (1.0 - fu_) * (m01 - m00) + fu_ * (m11 - m10)
    du = mu * np.sum(dout * slope_u, axis=-1)
    dv = mv * np.sum(dout * slope_v, axis=-1)
    return ddata, du, dv


def bilinear_sample(fmap: FeatureMap, u: float, v: float, c: int) -> float:
    """Edge-clamped bilinear read of channel c at cell coordinates (u, v)."""
    if not (np.isfinite(u) and np.isfinite(v)):
        raise InvalidInputError("sample coordinates must be finite")
    if not 0 <= c < fmap.channels:
        raise InvalidInputError(f"channel {c} out of range [0, {fmap.channels})")
    out, _ = sample_plane(fmap.data[:, :, c : c + 1], np.float64(u), np.float64(v))
    return float(out[0])


def sample_grad(fmap: FeatureMap, u: float, v: float, c: int):
    """Gradients of bilinear_sample at (u, v, c).

    Returns (weights, d_du, d_dv) where weights are the partials w.r.t. the
    four fetched cells in order ((i0,j0), (i0,j1), (i1,j0), (i1,j1)).
    Coordinate gradients are zero where the coordinate was clamped.
    """
    if not (np.isfinite(u) and np.isfinite(v)):
        raise InvalidInputError("sample coordinates must be finite")
    if not 0 <= c < fmap.channels:
        raise InvalidInputError(f"channel {c} out of range [0, {fmap.channels})")
    _, cache = sample_plane(fmap.data[:, :, c : c + 1], np.float64(u), np.float64(v))
    _, i0, i1, j0, j1, fu, fv, mu, mv, m00, m01, m10, m11 = cache
    fu = float(fu)
    fv = float(fv)
    weights = (
        (1.0 - fu) * (1.0 - fv),
        (1.0 - fu) * fv,
        fu * (1.0 - fv),
        fu * fv,
    )
    d_du = float(mu) * ((1.0 - fv) * float(m10[0] - m00[0]) + fv * float(m11[0] - m01[0]))
    d_dv = float(mv) * ((1.0 - fu) * float(m01[0] - m00[0]) + fu * float(m11[0] - m10[0]))
    return weights, d_du, d_dv


def _resize_coords(n_in: int, n_out: int) -> np.ndarray:
    # Half-pixel centers: output cell k reads input coordinate (k+.5)*n_in/n_out-.5
    return (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5


def resize_plane(data: np.ndarray, h2: int, w2: int):
    """Bilinear resize of [h][w][C] data to [h2][w2][C] (float64). Returns (out, cache)."""
    if h2 < 1 or w2 < 1:
        raise InvalidInputError(f"resize dims must be >= 1, got {h2}x{w2}")
    arr = np.asarray(data, dtype=np.float64)
    u = _resize_coords(arr.shape[0], h2)[:, None] * np.ones((1, w2))
    v = _resize_coords(arr.shape[1], w2)[None, :] * np.ones((h2, 1))
    return sample_plane(arr, u, v)


def resize_plane_vjp(cache, dout: np.ndarray) -> np.ndarray:
    """Backward of resize_plane w.r.t. the input data (coords are fixed)."""
    ddata, _, _ = sample_plane_vjp(cache, dout)
    return ddata


def resize(fmap: FeatureMap, h2: int, w2: int) -> FeatureMap:
    """Bilinear resize with half-pixel-center alignment and edge clamping."""
    out, _ = resize_plane(fmap.data, h2, w2)
    return FeatureMap(out)
