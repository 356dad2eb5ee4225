"""Scene data model, annotation parsing/serialization and validation.

Coordinates are image pixels with the origin at the top-left corner, x to the
right and y downward. Boxes are ``(x, y, w, h)`` with ``(x, y)`` the top-left
corner.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Any, Iterable, Sequence

from .errors import GeometryError, RangeError, SchemaError

ACTOR_CLASSES = ("vehicle", "pedestrian", "cyclist")
MASK_CLASSES = ("ego_lane", "other_lane", "sidewalk", "curb", "hard_object", "crosswalk")
BOUNDARY_STYLES = ("solid", "dashed", "double_solid")
# hard_object subtypes the lane and summary code understands
MASK_SUBTYPES = ("crosswalk", "arrow", "signal", "cone", "barrier", "pole")

Point = tuple[float, float]


@dataclass(frozen=True)
class VideoMeta:
    video_id: str
    width: int
    height: int
    fps: float
    num_frames: int


@dataclass(frozen=True)
class Detection:
    frame: int
    x: float
    y: float
    w: float
    h: float
    cls: str
    conf: float = 1.0

    @property
    def bottom_center(self) -> Point:
        return (self.x + self.w / 2.0, self.y + self.h)

    @property
    def area(self) -> float:
        return self.w * self.h


@dataclass(frozen=True)
class Tracklet:
    track_id: int
    cls: str
    boxes: tuple[Detection, ...]

    def box_at(self, frame: int) -> Detection | None:
        for box in self.boxes:
            if box.frame == frame:
                return box
        return None

    def frames(self) -> tuple[int, ...]:
        return tuple(b.frame for b in self.boxes)

    def within(self, start: int, end: int) -> "Tracklet":
        return Tracklet(self.track_id, self.cls, tuple(b for b in self.boxes if start <= b.frame < end))


@dataclass(frozen=True)
class MaskFrame:
    frame: int
    polygon: tuple[Point, ...]
    conf: float = 1.0


@dataclass(frozen=True)
class MaskInstance:
    instance_id: int
    cls: str
    frames: tuple[MaskFrame, ...]
    subtype: str | None = None

    @property
    def is_crosswalk(self) -> bool:
        return self.cls == "crosswalk" or (self.cls == "hard_object" and self.subtype == "crosswalk")

    def polygon_at(self, frame: int) -> tuple[Point, ...] | None:
        for mf in self.frames:
            if mf.frame == frame:
                return mf.polygon
        return None


@dataclass(frozen=True)
class BoundaryFrame:
    frame: int
    polyline: tuple[Point, ...]


@dataclass(frozen=True)
class LaneBoundary:
    boundary_id: int
    style: str
    frames: tuple[BoundaryFrame, ...]

    def polyline_at(self, frame: int) -> tuple[Point, ...] | None:
        """Polyline declared for ``frame``, else the latest earlier one, else the earliest."""
        best = None
        for bf in self.frames:
            if bf.frame == frame:
                return bf.polyline
            if bf.frame < frame:
                best = bf.polyline
        if best is None and self.frames:
            best = self.frames[0].polyline
        return best


@dataclass(frozen=True)
class ScenePriors:
    meta: VideoMeta
    tracklets: tuple[Tracklet, ...] = ()
    masks: tuple[MaskInstance, ...] = ()
    boundaries: tuple[LaneBoundary, ...] = ()
    ego_track: Tracklet | None = None
    human_score: float | None = None

    def tracks_of(self, *classes: str) -> list[Tracklet]:
        return [t for t in self.tracklets if t.cls in classes]

    def masks_of(self, *classes: str) -> list[MaskInstance]:
        return [m for m in self.masks if m.cls in classes]

    def crosswalks(self) -> list[MaskInstance]:
        return [m for m in self.masks if m.is_crosswalk]


@dataclass
class ValidationReport:
    warnings: list[str] = field(default_factory=list)
    errors: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.errors


# --------------------------------------------------------------------------
# parsing


def _require(obj: dict, key: str, path: str) -> Any:
    if not isinstance(obj, dict):
        raise SchemaError(path, "expected an object")
    if key not in obj:
        raise SchemaError(f"{path}.{key}" if path else key, "missing required field")
    return obj[key]


def _int(value: Any, path: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise SchemaError(path, f"expected integer, got {type(value).__name__}")
    return value


def _num(value: Any, path: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise SchemaError(path, f"expected number, got {type(value).__name__}")
    value = float(value)
    if not math.isfinite(value):
        raise RangeError(path, "non-finite number")
    return value


def _str(value: Any, path: str) -> str:
    if not isinstance(value, str):
        raise SchemaError(path, f"expected string, got {type(value).__name__}")
    return value


def _list(value: Any, path: str) -> list:
    if not isinstance(value, list):
        raise SchemaError(path, f"expected list, got {type(value).__name__}")
    return value


def _choice(value: Any, choices: Sequence[str], path: str) -> str:
    value = _str(value, path)
    if value not in choices:
        raise SchemaError(path, f"unknown value {value!r}; expected one of {', '.join(choices)}")
    return value


def _conf(obj: dict, path: str) -> float:
    if "conf" not in obj:
        return 1.0
    conf = _num(obj["conf"], f"{path}.conf")
    if not 0.0 <= conf <= 1.0:
        raise RangeError(f"{path}.conf", f"confidence {conf} outside [0, 1]")
    return conf


def _frame(obj: dict, path: str, num_frames: int) -> int:
    frame = _int(_require(obj, "frame", path), f"{path}.frame")
    if not 0 <= frame < num_frames:
        raise RangeError(f"{path}.frame", f"frame {frame} outside [0, {num_frames})")
    return frame


def _points(value: Any, path: str, minimum: int) -> tuple[Point, ...]:
    pts = []
    for i, p in enumerate(_list(value, path)):
        p_path = f"{path}[{i}]"
        if not isinstance(p, list) or len(p) != 2:
            raise SchemaError(p_path, "expected [x, y]")
        pts.append((_num(p[0], f"{p_path}[0]"), _num(p[1], f"{p_path}[1]")))
    if len(pts) < minimum:
        raise GeometryError(path, f"need at least {minimum} points, got {len(pts)}")
    return tuple(pts)


def _segments_cross(p1: Point, p2: Point, q1: Point, q2: Point) -> bool:
    def orient(a, b, c):
        v = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        return int(v > 0) - int(v < 0)

    def on_seg(a, b, c):
        return min(a[0], b[0]) <= c[0] <= max(a[0], b[0]) and min(a[1], b[1]) <= c[1] <= max(a[1], b[1])

    o1, o2 = orient(p1, p2, q1), orient(p1, p2, q2)
    o3, o4 = orient(q1, q2, p1), orient(q1, q2, p2)
    if o1 != o2 and o3 != o4:
        return True
    return (
        (o1 == 0 and on_seg(p1, p2, q1))
        or (o2 == 0 and on_seg(p1, p2, q2))
        or (o3 == 0 and on_seg(q1, q2, p1))
        or (o4 == 0 and on_seg(q1, q2, p2))
    )


def polygon_is_simple(polygon: Sequence[Point]) -> bool:
    return _simple_cached(tuple(tuple(p) for p in polygon))


@lru_cache(maxsize=4096)
def _simple_cached(polygon: tuple[Point, ...]) -> bool:
    n = len(polygon)
    edges = [(polygon[i], polygon[(i + 1) % n]) for i in range(n)]
    for i in range(n):
        for j in range(i + 1, n):
            if j == i + 1 or (i == 0 and j == n - 1):
                continue
            if _segments_cross(*edges[i], *edges[j]):
                return False
    return True


def _box_hits_image(x: float, y: float, w: float, h: float, width: int, height: int) -> bool:
    return x < width and x + w > 0 and y < height and y + h > 0


def _parse_track(obj: dict, path: str, meta: VideoMeta) -> Tracklet:
    track_id = _int(_require(obj, "track_id", path), f"{path}.track_id")
    cls = _choice(_require(obj, "class", path), ACTOR_CLASSES, f"{path}.class")
    raw_boxes = _list(_require(obj, "boxes", path), f"{path}.boxes")
    boxes = []
    for i, b in enumerate(raw_boxes):
        b_path = f"{path}.boxes[{i}]"
        frame = _frame(b, b_path, meta.num_frames)
        x, y, w, h = (_num(_require(b, k, b_path), f"{b_path}.{k}") for k in "xywh")
        if w <= 0 or h <= 0:
            raise RangeError(b_path, "box extent must be positive")
        if not _box_hits_image(x, y, w, h, meta.width, meta.height):
            raise RangeError(b_path, "box does not intersect the image")
        boxes.append(Detection(frame, x, y, w, h, cls, _conf(b, b_path)))
    if not boxes:
        raise SchemaError(f"{path}.boxes", "tracklet needs at least one box")
    boxes.sort(key=lambda d: d.frame)
    for a, b in zip(boxes, boxes[1:]):
        if a.frame == b.frame:
            raise RangeError(f"{path}.boxes", f"duplicate frame {a.frame}")
    return Tracklet(track_id, cls, tuple(boxes))


def _parse_mask(obj: dict, path: str, meta: VideoMeta) -> MaskInstance:
    instance_id = _int(_require(obj, "instance_id", path), f"{path}.instance_id")
    cls = _choice(_require(obj, "class", path), MASK_CLASSES, f"{path}.class")
    subtype = None
    if obj.get("subtype") is not None:
        subtype = _choice(obj["subtype"], MASK_SUBTYPES, f"{path}.subtype")
    frames = []
    lo_x, hi_x = -0.5 * meta.width, 1.5 * meta.width
    lo_y, hi_y = -0.5 * meta.height, 1.5 * meta.height
    for i, f in enumerate(_list(_require(obj, "frames", path), f"{path}.frames")):
        f_path = f"{path}.frames[{i}]"
        frame = _frame(f, f_path, meta.num_frames)
        polygon = _points(_require(f, "polygon", f_path), f"{f_path}.polygon", 3)
        for j, (px, py) in enumerate(polygon):
            if not (lo_x <= px <= hi_x and lo_y <= py <= hi_y):
                raise RangeError(f"{f_path}.polygon[{j}]", "vertex outside the allowed canvas")
        if not polygon_is_simple(polygon):
            raise GeometryError(f"{f_path}.polygon", "polygon self-intersects")
        frames.append(MaskFrame(frame, polygon, _conf(f, f_path)))
    frames.sort(key=lambda m: m.frame)
    for a, b in zip(frames, frames[1:]):
        if a.frame == b.frame:
            raise RangeError(f"{path}.frames", f"duplicate frame {a.frame}")
    return MaskInstance(instance_id, cls, tuple(frames), subtype)


def _parse_boundary(obj: dict, path: str, meta: VideoMeta) -> LaneBoundary:
    boundary_id = _int(_require(obj, "boundary_id", path), f"{path}.boundary_id")
    style = _choice(_require(obj, "style", path), BOUNDARY_STYLES, f"{path}.style")
    frames = []
    for i, f in enumerate(_list(_require(obj, "frames", path), f"{path}.frames")):
        f_path = f"{path}.frames[{i}]"
        frame = _frame(f, f_path, meta.num_frames)
        frames.append(BoundaryFrame(frame, _points(_require(f, "polyline", f_path), f"{f_path}.polyline", 2)))
    frames.sort(key=lambda b: b.frame)
    for a, b in zip(frames, frames[1:]):
        if a.frame == b.frame:
            raise RangeError(f"{path}.frames", f"duplicate frame {a.frame}")
    return LaneBoundary(boundary_id, style, tuple(frames))


def priors_from_dict(doc: dict) -> ScenePriors:
    if not isinstance(doc, dict):
        raise SchemaError("", "top level must be an object")
    video_id = _str(_require(doc, "video_id", ""), "video_id")
    if not video_id:
        raise SchemaError("video_id", "must be non-empty")
    width = _int(_require(doc, "width", ""), "width")
    height = _int(_require(doc, "height", ""), "height")
    fps = _num(_require(doc, "fps", ""), "fps")
    num_frames = _int(_require(doc, "num_frames", ""), "num_frames")
    for name, value in (("width", width), ("height", height), ("fps", fps), ("num_frames", num_frames)):
        if value <= 0:
            raise RangeError(name, "must be positive")
    meta = VideoMeta(video_id, width, height, fps, num_frames)

    tracks = tuple(
        _parse_track(t, f"tracks[{i}]", meta) for i, t in enumerate(_list(_require(doc, "tracks", ""), "tracks"))
    )
    masks = tuple(
        _parse_mask(m, f"masks[{i}]", meta) for i, m in enumerate(_list(_require(doc, "masks", ""), "masks"))
    )
    boundaries = tuple(
        _parse_boundary(b, f"lane_boundaries[{i}]", meta)
        for i, b in enumerate(_list(_require(doc, "lane_boundaries", ""), "lane_boundaries"))
    )
    ego = None
    if doc.get("ego_track") is not None:
        ego = _parse_track(doc["ego_track"], "ego_track", meta)
    human = None
    if doc.get("quality_score") is not None:
        human = _num(doc["quality_score"], "quality_score")
        if not 0.0 <= human <= 1.0:
            raise RangeError("quality_score", "must lie in [0, 1]")

    _check_unique([t.track_id for t in tracks], "tracks", "track id")
    _check_unique([m.instance_id for m in masks], "masks", "instance id")
    _check_unique([b.boundary_id for b in boundaries], "lane_boundaries", "boundary id")
    return ScenePriors(meta, tracks, masks, boundaries, ego, human)


def _check_unique(ids: list[int], path: str, what: str) -> None:
    seen = set()
    for i in ids:
        if i in seen:
            raise SchemaError(path, f"duplicate {what} {i}")
        seen.add(i)


def parse_annotation(data: bytes | str) -> ScenePriors:
    """Parse one annotation document into validated :class:`ScenePriors`."""
    if isinstance(data, bytes):
        try:
            data = data.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise SchemaError("", f"not UTF-8: {exc}") from exc
    try:
        doc = json.loads(data)
    except json.JSONDecodeError as exc:
        raise SchemaError("", f"malformed document: {exc}") from exc
    return priors_from_dict(doc)


def load_annotation(path: str | Path) -> ScenePriors:
    return parse_annotation(Path(path).read_bytes())


# --------------------------------------------------------------------------
# serialization


def _pts(points) -> list[list[float]]:
    # floats throughout so that a parsed document re-serializes byte-identically
    return [[float(x), float(y)] for x, y in points]


def _track_dict(t: Tracklet) -> dict:
    return {
        "track_id": t.track_id,
        "class": t.cls,
        "boxes": [
            {"frame": b.frame, "x": float(b.x), "y": float(b.y), "w": float(b.w), "h": float(b.h), "conf": float(b.conf)}
            for b in t.boxes
        ],
    }


def priors_to_dict(priors: ScenePriors) -> dict:
    m = priors.meta
    doc: dict[str, Any] = {
        "video_id": m.video_id,
        "width": m.width,
        "height": m.height,
        "fps": float(m.fps),
        "num_frames": m.num_frames,
        "tracks": [_track_dict(t) for t in priors.tracklets],
        "masks": [],
        "lane_boundaries": [],
    }
    for mask in priors.masks:
        md: dict[str, Any] = {
            "instance_id": mask.instance_id,
            "class": mask.cls,
            "frames": [
                {"frame": f.frame, "polygon": _pts(f.polygon), "conf": float(f.conf)} for f in mask.frames
            ],
        }
        if mask.subtype is not None:
            md["subtype"] = mask.subtype
        doc["masks"].append(md)
    for b in priors.boundaries:
        doc["lane_boundaries"].append(
            {
                "boundary_id": b.boundary_id,
                "style": b.style,
                "frames": [{"frame": f.frame, "polyline": _pts(f.polyline)} for f in b.frames],
            }
        )
    if priors.ego_track is not None:
        doc["ego_track"] = _track_dict(priors.ego_track)
    if priors.human_score is not None:
        doc["quality_score"] = float(priors.human_score)
    return doc


def serialize(priors: ScenePriors) -> bytes:
    """Canonical encoding: sorted keys, compact separators, repr-exact floats."""
    return json.dumps(priors_to_dict(priors), sort_keys=True, separators=(",", ":")).encode("utf-8")


def read_manifest(path: str | Path) -> list[Path]:
    """Annotation paths listed in a manifest, resolved relative to the manifest."""
    path = Path(path)
    out = []
    for line in path.read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            out.append((path.parent / line).resolve() if not Path(line).is_absolute() else Path(line))
    return out


# --------------------------------------------------------------------------
# validation of programmatically built priors


def validate_priors(priors: ScenePriors) -> ValidationReport:
    report = ValidationReport()
    meta = priors.meta
    if not meta.video_id:
        report.errors.append("empty video id")
    for name in ("width", "height", "fps", "num_frames"):
        if not getattr(meta, name) > 0:
            report.errors.append(f"{name} must be positive")

    seen_tracks: set[int] = set()
    all_tracks = list(priors.tracklets) + ([priors.ego_track] if priors.ego_track else [])
    for t in priors.tracklets:
        if t.track_id in seen_tracks:
            report.errors.append(f"duplicate track id {t.track_id}")
        seen_tracks.add(t.track_id)
    for t in all_tracks:
        label = "ego track" if t is priors.ego_track else f"track {t.track_id}"
        if t.cls not in ACTOR_CLASSES:
            report.errors.append(f"{label}: unknown class {t.cls!r}")
        if not t.boxes:
            report.errors.append(f"{label}: no boxes")
            continue
        if len(t.boxes) == 1:
            report.warnings.append(f"{label}: single-frame tracklet")
        frames = [b.frame for b in t.boxes]
        if any(b <= a for a, b in zip(frames, frames[1:])):
            report.errors.append(f"{label}: frames not strictly increasing")
        for b in t.boxes:
            if b.cls != t.cls:
                report.errors.append(f"{label}: box class {b.cls!r} differs from track class")
            if not 0 <= b.frame < meta.num_frames:
                report.errors.append(f"{label}: frame {b.frame} out of range")
            if not (b.w > 0 and b.h > 0):
                report.errors.append(f"{label}: non-positive box extent at frame {b.frame}")
            elif not _box_hits_image(b.x, b.y, b.w, b.h, meta.width, meta.height):
                report.errors.append(f"{label}: box outside image at frame {b.frame}")
            if not 0.0 <= b.conf <= 1.0:
                report.errors.append(f"{label}: confidence out of range at frame {b.frame}")

    seen_masks: set[int] = set()
    for m in priors.masks:
        if m.instance_id in seen_masks:
            report.errors.append(f"duplicate instance id {m.instance_id}")
        seen_masks.add(m.instance_id)
        if m.cls not in MASK_CLASSES:
            report.errors.append(f"mask {m.instance_id}: unknown class {m.cls!r}")
        if not m.frames:
            report.warnings.append(f"mask {m.instance_id}: no frames")
        for f in m.frames:
            if not 0 <= f.frame < meta.num_frames:
                report.errors.append(f"mask {m.instance_id}: frame {f.frame} out of range")
            if len(f.polygon) < 3:
                report.errors.append(f"mask {m.instance_id}: degenerate polygon at frame {f.frame}")
            elif not polygon_is_simple(f.polygon):
                report.errors.append(f"mask {m.instance_id}: self-intersecting polygon at frame {f.frame}")
            if not 0.0 <= f.conf <= 1.0:
                report.errors.append(f"mask {m.instance_id}: confidence out of range at frame {f.frame}")

    seen_bounds: set[int] = set()
    for b in priors.boundaries:
        if b.boundary_id in seen_bounds:
            report.errors.append(f"duplicate boundary id {b.boundary_id}")
        seen_bounds.add(b.boundary_id)
        if b.style not in BOUNDARY_STYLES:
            report.errors.append(f"boundary {b.boundary_id}: unknown style {b.style!r}")
        for f in b.frames:
            if not 0 <= f.frame < meta.num_frames:
                report.errors.append(f"boundary {b.boundary_id}: frame {f.frame} out of range")
            if len(f.polyline) < 2 or not all(math.isfinite(c) for p in f.polyline for c in p):
                report.errors.append(f"boundary {b.boundary_id}: invalid polyline at frame {f.frame}")

    if not priors.masks:
        report.warnings.append("no masks")
    if priors.ego_track is None:
        report.warnings.append("ego scores use camera-footprint proxy")
    if priors.human_score is not None and not 0.0 <= priors.human_score <= 1.0:
        report.errors.append("quality score outside [0, 1]")
    return report


def iter_boxes(tracks: Iterable[Tracklet], frame: int) -> list[Detection]:
    out = []
    for t in tracks:
        b = t.box_at(frame)
        if b is not None:
            out.append(b)
    return out
