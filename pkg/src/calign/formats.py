"""File formats: packed array files, scene JSONL, config, and CSV tables.

Packed array files ("dprd") are a single file holding one compact JSON
manifest line (sorted keys, no spaces), a newline, then a little-endian raw
array blob. Offsets in the manifest count elements, not bytes, and the listed
blocks must tile the blob exactly: no gaps, no overlap. Predictions, targets,
and pyramids store float32; detector parameters store float64 so that a
round trip is bit-exact.

Structural problems raise FormatError; non-finite or out-of-domain values
raise DataError naming the first offending element.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from typing import Any

import numpy as np

from .boxes import Box
from .errors import ConfigError, DataError, FormatError
from .grid import FeatureMap, Pyramid
from .metrics import Detection, GroundTruth
from .pseudo import AnchorLayout, DensePred, PseudoTarget
from .toysim import DetectorSpec, ToyDetectorParams, ToyScene
from .util import fmt

__all__ = [
    "RunConfig",
    "parse_mode",
    "load_config",
    "write_dense_pred",
    "read_dense_pred",
    "write_targets",
    "read_targets",
    "write_pyramid",
    "read_pyramid",
    "write_params",
    "read_params",
    "save_scenes",
    "load_scenes",
    "history_csv",
    "ap_csv",
    "pr_conf_csv",
    "conf_iou_csv",
    "breakdown_csv",
    "loss_report_json",
    "write_detections",
    "load_detections",
    "write_ground_truths",
    "load_ground_truths",
]

_MODES = ("source_only", "fca", "fca+cca", "fca+tca", "mgcamt")


def parse_mode(mode: str) -> tuple[str, float | None]:
    """Split a mode string into (kind, assign threshold)."""
    if not isinstance(mode, str):
        raise ConfigError(f"mode must be a string, got {type(mode).__name__}")
    if mode in _MODES:
        return mode, None
    if mode.startswith("assign@"):
        try:
            tau = float(mode[len("assign@") :])
        except ValueError:
            raise ConfigError(f"bad assign threshold in mode {mode!r}") from None
        if not 0.0 < tau < 1.0:
            raise ConfigError(f"assign threshold must be in (0, 1), got {tau}")
        return "assign", tau
    raise ConfigError(f"unknown mode {mode!r}; expected one of {_MODES} or assign@TAU")


@dataclass
class RunConfig:
    """Training-run configuration; unknown keys and bad ranges are rejected."""

    seed: int = 0
    mode: str = "mgcamt"
    omega: float = 2.0
    gamma: float = 2.0
    k_percent: float = 1.0
    tau_u: float = 0.12
    ema_decay: float = 0.9995
    burn_in: int = 100
    iterations: int = 300
    eval_interval: int = 20
    lr: float = 0.08
    tca_enabled: bool = True
    cca_enabled: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("seed", "burn_in", "iterations", "eval_interval"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, int):
                raise ConfigError(f"{name} must be an integer, got {v!r}")
        for name in ("omega", "gamma", "k_percent", "tau_u", "ema_decay", "lr"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise ConfigError(f"{name} must be a number, got {v!r}")
            setattr(self, name, float(v))
        for name in ("tca_enabled", "cca_enabled"):
            if not isinstance(getattr(self, name), bool):
                raise ConfigError(f"{name} must be a boolean")
        parse_mode(self.mode)
        if self.omega < 0:
            raise ConfigError(f"omega must be >= 0, got {self.omega}")
        if self.gamma < 0:
            raise ConfigError(f"gamma must be >= 0, got {self.gamma}")
        if not 0.0 < self.k_percent <= 100.0:
            raise ConfigError(f"k_percent must be in (0, 100], got {self.k_percent}")
        if not 0.0 < self.tau_u <= 0.25:
            raise ConfigError(f"tau_u must be in (0, 0.25], got {self.tau_u}")
        if not 0.0 <= self.ema_decay <= 1.0:
            raise ConfigError(f"ema_decay must be in [0, 1], got {self.ema_decay}")
        if self.burn_in < 0 or self.iterations < 0:
            raise ConfigError("burn_in and iterations must be >= 0")
        if self.eval_interval < 1:
            raise ConfigError(f"eval_interval must be >= 1, got {self.eval_interval}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def load_config(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as f:
        try:
            raw = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}") from None
    return RunConfig.from_dict(raw)


# ---------------------------------------------------------------------------
# Packed array files


def _write_packed(path, manifest: dict, blob: np.ndarray, dtype: str) -> None:
    manifest = dict(manifest)
    manifest["version"] = 1
    manifest["dtype"] = dtype
    manifest["total"] = int(blob.size)
    line = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(line + b"\n" + np.ascontiguousarray(blob.reshape(-1), dtype=dtype).tobytes())


def _read_packed(path, expect_kind: str) -> tuple[dict, np.ndarray]:
    with open(path, "rb") as f:
        raw = f.read()
    nl = raw.find(b"\n")
    if nl < 0:
        raise FormatError("missing manifest line")
    try:
        manifest = json.loads(raw[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"manifest is not valid JSON: {e}") from None
    if not isinstance(manifest, dict):
        raise FormatError("manifest must be a JSON object")
    if manifest.get("version") != 1:
        raise FormatError(f"unsupported version {manifest.get('version')!r}")
    if manifest.get("kind") != expect_kind:
        raise FormatError(f"expected kind {expect_kind!r}, got {manifest.get('kind')!r}")
    dtype = manifest.get("dtype")
    if dtype not in ("<f4", "<f8"):
        raise FormatError(f"unsupported dtype {dtype!r}")
    total = manifest.get("total")
    if not isinstance(total, int) or total < 0:
        raise FormatError("total must be a non-negative integer")
    blob = raw[nl + 1 :]
    itemsize = np.dtype(dtype).itemsize
    if len(blob) != total * itemsize:
        raise FormatError(
            f"blob holds {len(blob)} bytes, manifest implies {total * itemsize}"
        )
    return manifest, np.frombuffer(blob, dtype=dtype)


def _check_tiling(blocks: list[tuple[str, int, int]], total: int) -> None:
    """Blocks (name, offset, size) must cover [0, total) exactly once."""
    for name, offset, size in blocks:
        if not isinstance(offset, int) or not isinstance(size, int) or offset < 0 or size < 0:
            raise FormatError(f"block {name!r} has invalid offset/size")
    ordered = sorted(blocks, key=lambda b: b[1])
    cursor = 0
    for name, offset, size in ordered:
        if offset != cursor:
            what = "overlaps previous block" if offset < cursor else "leaves a gap"
            raise FormatError(f"block {name!r} at offset {offset} {what} (expected {cursor})")
        cursor = offset + size
    if cursor != total:
        raise FormatError(f"blocks cover {cursor} elements, blob has {total}")


def _check_finite(arr: np.ndarray, what: str) -> None:
    bad = ~np.isfinite(arr)
    if np.any(bad):
        raise DataError(f"{what}: non-finite value at element {int(np.argmax(bad))}")


def _layout_dict(lay: AnchorLayout) -> dict:
    return {
        "canvas": [lay.canvas_h, lay.canvas_w],
        "strides": list(lay.strides),
        "ratios": list(lay.ratios),
        "scales": list(lay.scales),
        "base_scale": lay.base_scale,
    }


def _layout_from(d: Any) -> AnchorLayout:
    if not isinstance(d, dict):
        raise FormatError("layout must be an object")
    try:
        return AnchorLayout(
            canvas_h=int(d["canvas"][0]),
            canvas_w=int(d["canvas"][1]),
            strides=tuple(int(s) for s in d["strides"]),
            ratios=tuple(float(r) for r in d["ratios"]),
            scales=tuple(float(s) for s in d["scales"]),
            base_scale=float(d["base_scale"]),
        )
    except (KeyError, TypeError, ValueError, IndexError) as e:
        raise FormatError(f"bad layout: {e}") from None


def write_dense_pred(pred: DensePred, path) -> None:
    lay = pred.layout
    levels, chunks, offset = [], [], 0
    for l in range(lay.num_levels):
        h, w = lay.level_dims(l)
        a, k = lay.anchors_per_cell, pred.num_classes
        entry = {"level": l, "h": h, "w": w}
        for name, arr in (
            ("cls", pred.cls_logits[l]),
            ("reg", pred.reg_deltas[l]),
            ("ev", pred.evidence_logits[l]),
        ):
            entry[f"{name}_offset"] = offset
            chunks.append(arr.reshape(-1))
            offset += arr.size
        levels.append(entry)
    manifest = {
        "kind": "pred",
        "num_classes": pred.num_classes,
        "image_id": pred.image_id,
        "layout": _layout_dict(lay),
        "levels": levels,
    }
    _write_packed(path, manifest, np.concatenate(chunks), "<f4")


def read_dense_pred(path) -> DensePred:
    manifest, flat = _read_packed(path, "pred")
    lay = _layout_from(manifest.get("layout"))
    k = manifest.get("num_classes")
    if not isinstance(k, int) or k < 1:
        raise FormatError("num_classes must be a positive integer")
    levels = manifest.get("levels")
    if not isinstance(levels, list) or len(levels) != lay.num_levels:
        raise FormatError("levels must list one entry per pyramid level")
    a = lay.anchors_per_cell
    blocks, slabs = [], []
    for l, entry in enumerate(levels):
        if not isinstance(entry, dict) or entry.get("level") != l:
            raise FormatError(f"level entry {l} malformed")
        h, w = lay.level_dims(l)
        if entry.get("h") != h or entry.get("w") != w:
            raise FormatError(
                f"level {l} dims {entry.get('h')}x{entry.get('w')} conflict with layout {h}x{w}"
            )
        sizes = {"cls": h * w * a * k, "reg": h * w * a * 4, "ev": h * w * a}
        shapes = {"cls": (h, w, a, k), "reg": (h, w, a, 4), "ev": (h, w, a)}
        row = {}
        for name in ("cls", "reg", "ev"):
            off = entry.get(f"{name}_offset")
            blocks.append((f"level{l}/{name}", off, sizes[name]))
            row[name] = (off, sizes[name], shapes[name])
        slabs.append(row)
    _check_tiling(blocks, flat.shape[0])
    _check_finite(flat, "pred blob")
    cls, reg, ev = [], [], []
    for row in slabs:
        for name, dest in (("cls", cls), ("reg", reg), ("ev", ev)):
            off, size, shape = row[name]
            dest.append(flat[off : off + size].reshape(shape).copy())
    return DensePred(lay, k, cls, reg, ev, image_id=str(manifest.get("image_id", "")))


def write_targets(t: PseudoTarget, path) -> None:
    m = t.layout.total_anchors
    k = t.num_classes
    manifest = {
        "kind": "targets",
        "num_classes": k,
        "layout": _layout_dict(t.layout),
        "blocks": {
            "roles_offset": 0,
            "scores_offset": m,
            "boxes_offset": m + m * k,
            "weights_offset": m + m * k + m * 4,
        },
    }
    blob = np.concatenate(
        [
            t.roles.astype(np.float64),
            t.scores.reshape(-1),
            t.boxes.reshape(-1),
            t.weights,
        ]
    )
    _write_packed(path, manifest, blob, "<f4")


def read_targets(path) -> PseudoTarget:
    manifest, flat = _read_packed(path, "targets")
    lay = _layout_from(manifest.get("layout"))
    k = manifest.get("num_classes")
    if not isinstance(k, int) or k < 1:
        raise FormatError("num_classes must be a positive integer")
    m = lay.total_anchors
    b = manifest.get("blocks")
    if not isinstance(b, dict):
        raise FormatError("blocks must be an object")
    blocks = [
        ("roles", b.get("roles_offset"), m),
        ("scores", b.get("scores_offset"), m * k),
        ("boxes", b.get("boxes_offset"), m * 4),
        ("weights", b.get("weights_offset"), m),
    ]
    _check_tiling(blocks, flat.shape[0])
    _check_finite(flat, "targets blob")
    view = {name: flat[off : off + size] for name, off, size in blocks}
    roles = view["roles"]
    if np.any(roles != np.round(roles)) or np.any((roles < 0) | (roles > 2)):
        bad = int(np.argmax((roles != np.round(roles)) | (roles < 0) | (roles > 2)))
        raise DataError(f"roles must be integers in 0..2; element {bad} is {roles[bad]}")
    return PseudoTarget(
        lay,
        k,
        roles.astype(np.int8),
        view["scores"].astype(np.float64).reshape(m, k),
        view["boxes"].astype(np.float64).reshape(m, 4),
        view["weights"].astype(np.float64),
    )


def write_pyramid(p: Pyramid, path) -> None:
    levels, chunks, offset = [], [], 0
    for lvl in p.levels:
        levels.append({"h": lvl.h, "w": lvl.w, "c": lvl.channels, "offset": offset})
        chunks.append(lvl.data.reshape(-1))
        offset += lvl.data.size
    manifest = {"kind": "pyramid", "strides": list(p.strides), "levels": levels}
    _write_packed(path, manifest, np.concatenate(chunks), "<f4")


def read_pyramid(path) -> Pyramid:
    manifest, flat = _read_packed(path, "pyramid")
    entries = manifest.get("levels")
    strides = manifest.get("strides")
    if not isinstance(entries, list) or not entries:
        raise FormatError("levels must be a non-empty list")
    if not isinstance(strides, list) or len(strides) != len(entries):
        raise FormatError("strides must list one value per level")
    blocks = []
    for i, e in enumerate(entries):
        if not isinstance(e, dict):
            raise FormatError(f"level entry {i} malformed")
        try:
            h, w, c, off = int(e["h"]), int(e["w"]), int(e["c"]), e["offset"]
        except (KeyError, TypeError, ValueError):
            raise FormatError(f"level entry {i} malformed") from None
        blocks.append((f"level{i}", off, h * w * c))
    _check_tiling(blocks, flat.shape[0])
    _check_finite(flat, "pyramid blob")
    maps = []
    for e, (_, off, size) in zip(entries, blocks):
        maps.append(FeatureMap(flat[off : off + size].reshape(int(e["h"]), int(e["w"]), int(e["c"])).copy()))
    return Pyramid(maps, tuple(int(s) for s in strides))


def write_params(p: ToyDetectorParams, path) -> None:
    spec = p.spec
    manifest = {
        "kind": "params",
        "spec": {
            "layout": _layout_dict(spec.layout),
            "num_classes": spec.num_classes,
            "in_channels": spec.in_channels,
            "hidden": spec.hidden,
            "shift_hidden": spec.shift_hidden,
            "tca_enabled": spec.tca_enabled,
        },
        "sections": spec.manifest(),
    }
    _write_packed(path, manifest, p.values, "<f8")


def read_params(path) -> ToyDetectorParams:
    manifest, flat = _read_packed(path, "params")
    sd = manifest.get("spec")
    if not isinstance(sd, dict):
        raise FormatError("spec must be an object")
    try:
        spec = DetectorSpec(
            layout=_layout_from(sd.get("layout")),
            num_classes=int(sd["num_classes"]),
            in_channels=int(sd["in_channels"]),
            hidden=int(sd["hidden"]),
            shift_hidden=int(sd["shift_hidden"]),
            tca_enabled=bool(sd["tca_enabled"]),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"bad detector spec: {e}") from None
    if manifest.get("sections") != spec.manifest():
        raise FormatError("sections do not match the detector spec layout")
    _check_tiling(
        [(s["name"], s["offset"], s["size"]) for s in spec.manifest()], flat.shape[0]
    )
    _check_finite(flat, "params blob")
    return ToyDetectorParams(spec, flat.astype(np.float64))


# ---------------------------------------------------------------------------
# Scenes, detections, tables


def save_scenes(scenes: list[ToyScene], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for s in scenes:
            f.write(json.dumps(s.to_dict(), sort_keys=True, separators=(",", ":")) + "\n")


def load_scenes(path) -> list[ToyScene]:
    out = []
    with open(path, "r", encoding="utf-8") as f:
        for i, line in enumerate(f):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                out.append(ToyScene.from_dict(d))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise FormatError(f"scene line {i + 1}: {e}") from None
    return out


def write_detections(dets: list[Detection], path) -> None:
    rows = [
        {"image_id": d.image_id, "class": d.class_id, "box": [d.box.x1, d.box.y1, d.box.x2, d.box.y2], "score": d.score}
        for d in dets
    ]
    with open(path, "w", encoding="utf-8") as f:
        json.dump({"detections": rows}, f, sort_keys=True)
        f.write("\n")


def load_detections(path) -> list[Detection]:
    with open(path, "r", encoding="utf-8") as f:
        try:
            raw = json.load(f)
        except json.JSONDecodeError as e:
            raise FormatError(f"detections file is not valid JSON: {e}") from None
    rows = raw.get("detections") if isinstance(raw, dict) else None
    if not isinstance(rows, list):
        raise FormatError('detections file must hold {"detections": [...]}')
    out = []
    for i, r in enumerate(rows):
        try:
            out.append(
                Detection(str(r["image_id"]), int(r["class"]), Box(*[float(v) for v in r["box"]]), float(r["score"]))
            )
        except (KeyError, TypeError, ValueError) as e:
            raise FormatError(f"detection {i}: {e}") from None
    return out


def write_ground_truths(gts: list[GroundTruth], path) -> None:
    rows = [
        {"image_id": g.image_id, "class": g.class_id, "box": [g.box.x1, g.box.y1, g.box.x2, g.box.y2]}
        for g in gts
    ]
    with open(path, "w", encoding="utf-8") as f:
        json.dump({"ground_truths": rows}, f, sort_keys=True)
        f.write("\n")


def load_ground_truths(path) -> list[GroundTruth]:
    with open(path, "r", encoding="utf-8") as f:
        try:
            raw = json.load(f)
        except json.JSONDecodeError as e:
            raise FormatError(f"ground-truth file is not valid JSON: {e}") from None
    rows = raw.get("ground_truths") if isinstance(raw, dict) else None
    if not isinstance(rows, list):
        raise FormatError('ground-truth file must hold {"ground_truths": [...]}')
    out = []
    for i, r in enumerate(rows):
        try:
            out.append(GroundTruth(str(r["image_id"]), int(r["class"]), Box(*[float(v) for v in r["box"]])))
        except (KeyError, TypeError, ValueError) as e:
            raise FormatError(f"ground truth {i}: {e}") from None
    return out


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return fmt(v)
    return str(v)


def history_csv(history) -> str:
    lines = ["iteration,l_s,l_t,l_regu,map"]
    for row in history:
        lines.append(
            ",".join(_cell(v) for v in (row.iteration, row.l_s, row.l_t, row.l_regu, row.map))
        )
    return "\n".join(lines) + "\n"


def ap_csv(per_class: dict[int, float], mean: float) -> str:
    lines = ["class,ap"]
    for c in sorted(per_class):
        lines.append(f"{c},{fmt(per_class[c])}")
    lines.append(f"mean,{fmt(mean)}")
    return "\n".join(lines) + "\n"


def pr_conf_csv(rows) -> str:
    lines = ["threshold,precision,recall,n_kept"]
    for t, p, r, n in rows:
        lines.append(f"{fmt(t)},{fmt(p)},{fmt(r)},{n}")
    return "\n".join(lines) + "\n"


def conf_iou_csv(pairs) -> str:
    lines = ["score,iou"]
    for s, v in pairs:
        lines.append(f"{fmt(s)},{fmt(v)}")
    return "\n".join(lines) + "\n"


def breakdown_csv(d: dict) -> str:
    cols = ("tp", "cls", "loc", "fp", "miss", "n_dets", "n_gts")
    return ",".join(cols) + "\n" + ",".join(str(d[c]) for c in cols) + "\n"


def loss_report_json(cls_loss: float, reg_loss: float, regu_loss: float) -> str:
    total = cls_loss + reg_loss + regu_loss
    report = {
        "cls_loss": cls_loss,
        "reg_loss": reg_loss,
        "regu_loss": regu_loss,
        "total": total,
    }
    return json.dumps(report, sort_keys=True) + "\n"
