"""Integer-only raster rendering of the visual evidence sent with each check.

Without decoded video every frame is a schematic drawn from the masks: a
flat background, gray road surfaces, white boundary markings. All compositing
is integer arithmetic, so output bytes are identical on every platform.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Mapping, Sequence

import numpy as np

from .clips import ClipRange
from .errors import GeometryError
from .geometry import rasterize_polygon
from .scene import Detection, ScenePriors, Tracklet

Color = tuple[int, int, int]
Box = tuple[float, float, float, float]

BOX_STROKE = 2
MASK_ALPHA_TENTHS = 4  # 0.4 blend for mask fills
MIN_FADE_PERMILLE = 200


@dataclass(frozen=True)
class RasterImage:
    width: int
    height: int
    pixels: np.ndarray  # (height, width, 3) uint8

    @classmethod
    def blank(cls, width: int, height: int, color: Color = (0, 0, 0)) -> "RasterImage":
        px = np.empty((height, width, 3), dtype=np.uint8)
        px[:] = color
        return cls(width, height, px)

    def copy(self) -> "RasterImage":
        return RasterImage(self.width, self.height, self.pixels.copy())

    def to_ppm(self) -> bytes:
        return b"P6\n%d %d\n255\n" % (self.width, self.height) + self.pixels.tobytes()

    @classmethod
    def from_ppm(cls, data: bytes) -> "RasterImage":
        parts = data.split(b"\n", 3)
        if parts[0] != b"P6" or parts[2] != b"255":
            raise ValueError("not a binary 8-bit PPM")
        width, height = (int(v) for v in parts[1].split())
        px = np.frombuffer(parts[3], dtype=np.uint8).reshape(height, width, 3).copy()
        return cls(width, height, px)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, RasterImage)
            and self.width == other.width
            and self.height == other.height
            and np.array_equal(self.pixels, other.pixels)
        )


# --------------------------------------------------------------------------
# primitives


def blend(dst: np.ndarray, mask: np.ndarray, color: Color, permille: int) -> None:
    """In place: ``dst = round((dst*(1000-a) + color*a) / 1000)`` where ``mask`` is set."""
    if permille >= 1000:
        dst[mask] = color
        return
    src = dst[mask].astype(np.int32)
    col = np.asarray(color, dtype=np.int32)
    dst[mask] = ((src * (1000 - permille) + col * permille + 500) // 1000).astype(np.uint8)


def box_pixels(box: Box, width: int, height: int) -> tuple[int, int, int, int]:
    """Pixel span ``[x0, x1) x [y0, y1)`` covered by a float box, clipped to the image."""
    x, y, w, h = box
    x0 = max(0, int(math.floor(x)))
    y0 = max(0, int(math.floor(y)))
    x1 = min(width, int(math.ceil(x + w)))
    y1 = min(height, int(math.ceil(y + h)))
    return x0, y0, x1, y1


def stroke_mask(box: Box, width: int, height: int, stroke: int = BOX_STROKE) -> np.ndarray:
    """Border pixels of the box outline, ``stroke`` px thick and drawn inward."""
    mask = np.zeros((height, width), dtype=bool)
    x, y, w, h = box
    ox0, oy0 = int(math.floor(x)), int(math.floor(y))
    ox1, oy1 = int(math.ceil(x + w)), int(math.ceil(y + h))
    inner = np.zeros_like(mask)
    mask[max(0, oy0) : max(0, min(height, oy1)), max(0, ox0) : max(0, min(width, ox1))] = True
    ix0, iy0, ix1, iy1 = ox0 + stroke, oy0 + stroke, ox1 - stroke, oy1 - stroke
    if ix1 > ix0 and iy1 > iy0:
        inner[max(0, iy0) : max(0, min(height, iy1)), max(0, ix0) : max(0, min(width, ix1))] = True
    return mask & ~inner


def line_pixels(p: tuple[float, float], q: tuple[float, float]) -> list[tuple[int, int]]:
    """Bresenham cells (x, y) from the pixel containing ``p`` to the one containing ``q``."""
    x0, y0 = int(math.floor(p[0])), int(math.floor(p[1]))
    x1, y1 = int(math.floor(q[0])), int(math.floor(q[1]))
    dx, dy = abs(x1 - x0), -abs(y1 - y0)
    sx, sy = (1 if x0 < x1 else -1), (1 if y0 < y1 else -1)
    err = dx + dy
    out = []
    while True:
        out.append((x0, y0))
        if x0 == x1 and y0 == y1:
            return out
        e2 = 2 * err
        if e2 >= dy:
            err += dy
            x0 += sx
        if e2 <= dx:
            err += dx
            y0 += sy


def draw_polyline(img: RasterImage, points: Sequence, color: Color, permille: int = 1000, dash: int = 0) -> None:
    mask = np.zeros((img.height, img.width), dtype=bool)
    count = 0
    for a, b in zip(points, points[1:]):
        for x, y in line_pixels(a, b):
            count += 1
            if dash and (count // dash) % 2:
                continue
            if 0 <= x < img.width and 0 <= y < img.height:
                mask[y, x] = True
    blend(img.pixels, mask, color, permille)


def draw_dot(img: RasterImage, p, color: Color, permille: int = 1000, radius: int = 1) -> None:
    cx, cy = int(math.floor(p[0])), int(math.floor(p[1]))
    mask = np.zeros((img.height, img.width), dtype=bool)
    mask[max(0, cy - radius) : max(0, min(img.height, cy + radius + 1)), max(0, cx - radius) : max(0, min(img.width, cx + radius + 1))] = True
    blend(img.pixels, mask, color, permille)


@lru_cache(maxsize=512)
def _poly_mask(polygon: tuple, width: int, height: int) -> np.ndarray:
    grid = rasterize_polygon(polygon, width, height)
    grid.setflags(write=False)
    return grid


def polygon_mask(polygon, width: int, height: int) -> np.ndarray:
    return _poly_mask(tuple(tuple(p) for p in polygon), width, height)


# --------------------------------------------------------------------------
# frames and overlays


def _colors(catalog=None) -> Mapping[str, Color]:
    if catalog is None:
        from .prompts import load_catalog

        catalog = load_catalog()
    return catalog.colors


SCHEMATIC_FILL = {
    "ego_lane": "road",
    "other_lane": "road",
    "crosswalk": "marking",
    "sidewalk": "sidewalk_fill",
    "curb": "curb_fill",
    "hard_object": "hard_object_fill",
}
# painter's order: surfaces first, markings on top
SCHEMATIC_ORDER = ("sidewalk", "curb", "ego_lane", "other_lane", "hard_object", "crosswalk")


def schematic_frame(priors: ScenePriors, frame: int, catalog=None) -> RasterImage:
    colors = _colors(catalog)
    meta = priors.meta
    img = RasterImage.blank(meta.width, meta.height, colors["background"])
    for cls in SCHEMATIC_ORDER:
        for m in priors.masks:
            if m.cls != cls:
                continue
            poly = m.polygon_at(frame)
            if poly is not None:
                blend(img.pixels, polygon_mask(poly, meta.width, meta.height), colors[SCHEMATIC_FILL[cls]], 1000)
    for b in priors.boundaries:
        line = b.polyline_at(frame)
        if line is not None:
            draw_polyline(img, line, colors["marking"], dash=6 if b.style == "dashed" else 0)
    return img


def render_keyframe_triplet(
    priors: ScenePriors, frame: int, raw: RasterImage | None = None, catalog=None
) -> tuple[RasterImage, RasterImage, RasterImage]:
    """(raw, boxed, masked) images for one key frame."""
    colors = _colors(catalog)
    raw = raw if raw is not None else schematic_frame(priors, frame, catalog)
    boxed = raw.copy()
    for t in sorted(priors.tracklets, key=lambda t: t.track_id):
        box = t.box_at(frame)
        if box is not None:
            mask = stroke_mask((box.x, box.y, box.w, box.h), raw.width, raw.height)
            blend(boxed.pixels, mask, colors[t.cls], 1000)
    masked = raw.copy()
    for m in sorted(priors.masks, key=lambda m: m.instance_id):
        poly = m.polygon_at(frame)
        if poly is not None:
            blend(masked.pixels, polygon_mask(poly, raw.width, raw.height), colors[m.cls], MASK_ALPHA_TENTHS * 100)
    return raw, boxed, masked


def tint_masks(img: RasterImage, priors: ScenePriors, frame: int, classes: Sequence[str], color: Color) -> RasterImage:
    out = img.copy()
    for m in priors.masks:
        if m.cls in classes:
            poly = m.polygon_at(frame)
            if poly is not None:
                blend(out.pixels, polygon_mask(poly, img.width, img.height), color, MASK_ALPHA_TENTHS * 100)
    return out


def fade_permille(age: int, window: int) -> int:
    """Opacity for a track point ``age`` frames old: 1000 now, 200 at the window's far end."""
    if window <= 1:
        return 1000
    return 1000 - (1000 - MIN_FADE_PERMILLE) * age // (window - 1)


def render_clip_pair(
    priors: ScenePriors,
    frames: Sequence[int],
    tracks: Sequence[Tracklet] | None = None,
    fade_window: int = 16,
    raw_frames: Mapping[int, RasterImage] | None = None,
    catalog=None,
) -> tuple[list[RasterImage], list[RasterImage]]:
    """Raw clip and a copy with each track's bottom-center path drawn up to the current frame.

    Each segment takes the opacity of its newer endpoint; a track with a single
    visible point is drawn as a dot.
    """
    colors = _colors(catalog)
    tracks = sorted(priors.tracklets if tracks is None else tracks, key=lambda t: t.track_id)
    raws, overlays = [], []
    for f in frames:
        raw = raw_frames[f] if raw_frames and f in raw_frames else schematic_frame(priors, f, catalog)
        over = raw.copy()
        for t in tracks:
            pts = [(b.frame, b.bottom_center) for b in t.boxes if f - fade_window < b.frame <= f]
            color = colors.get(t.cls, colors["vehicle"])
            if len(pts) == 1:
                draw_dot(over, pts[0][1], color)
                continue
            for (fa, pa), (fb, pb) in zip(pts, pts[1:]):
                draw_polyline(over, [pa, pb], color, fade_permille(f - fb, fade_window))
        raws.append(raw)
        overlays.append(over)
    return raws, overlays


def sub_clips(clip: ClipRange) -> list[list[int]]:
    """Full clip at stride 2 plus its two halves at stride 1; short clips stay whole."""
    frames = list(clip.frames())
    if len(frames) < 4:
        return [frames]
    half = len(frames) // 2
    return [frames[::2], frames[:half], frames[half:]]


# --------------------------------------------------------------------------
# ROI crops


def expand_box(box: Box, margin: float) -> Box:
    x, y, w, h = box
    return (x - margin * w, y - margin * h, w * (1 + 2 * margin), h * (1 + 2 * margin))


def clip_box(box: Box, width: int, height: int) -> Box:
    x, y, w, h = box
    x0, y0 = max(0.0, x), max(0.0, y)
    x1, y1 = min(float(width), x + w), min(float(height), y + h)
    return (x0, y0, x1 - x0, y1 - y0)


@dataclass(frozen=True)
class Crop:
    image: RasterImage
    region: tuple[int, int, int, int]  # pixel span x0, y0, x1, y1 taken from the frame
    scale: float
    offset: tuple[int, int]  # placement of the resampled region inside the target


def crop_roi_detail(frame: RasterImage, box: Box, margin: float, target: tuple[int, int]) -> Crop:
    if margin < 0 or target[0] <= 0 or target[1] <= 0:
        raise GeometryError("", "margin must be >= 0 and target positive")
    cx, cy, cw, ch = clip_box(expand_box(box, margin), frame.width, frame.height)
    if cw <= 0 or ch <= 0:
        raise GeometryError("", "region of interest is empty after clipping")
    x0, y0, x1, y1 = box_pixels((cx, cy, cw, ch), frame.width, frame.height)
    rw, rh = x1 - x0, y1 - y0
    tw, th = target
    scale = min(tw / rw, th / rh)
    nw = min(tw, max(1, int(round(rw * scale))))
    nh = min(th, max(1, int(round(rh * scale))))
    xs = np.minimum(((np.arange(nw) + 0.5) / scale).astype(np.int64), rw - 1) + x0
    ys = np.minimum(((np.arange(nh) + 0.5) / scale).astype(np.int64), rh - 1) + y0
    out = RasterImage.blank(tw, th)
    ox, oy = (tw - nw) // 2, (th - nh) // 2
    out.pixels[oy : oy + nh, ox : ox + nw] = frame.pixels[np.ix_(ys, xs)]
    return Crop(out, (x0, y0, x1, y1), scale, (ox, oy))


def crop_roi(frame: RasterImage, box: Box, margin: float = 0.25, target: tuple[int, int] = (448, 448)) -> RasterImage:
    """Grow ``box`` by ``margin`` per side, clip, resample with one scale for both axes, letterbox."""
    return crop_roi_detail(frame, box, margin, target).image


# --------------------------------------------------------------------------
# evidence bundle


@dataclass
class EvidenceItem:
    ref: str
    kind: str  # "image" or "clip"
    frames: tuple[int, ...]
    context: tuple[int, ...]
    summary_key: str
    render: Callable[[], list[bytes]] | None = field(default=None, repr=False)


@dataclass
class VisualBundle:
    key_frames: list[EvidenceItem]
    sub_clips: list[list[EvidenceItem]]
    rois: dict[str, list[EvidenceItem]]


def _bbox(points) -> Box:
    xs = [p[0] for p in points]
    ys = [p[1] for p in points]
    return (min(xs), min(ys), max(xs) - min(xs) or 1.0, max(ys) - min(ys) or 1.0)


def _visible(box: Box, width: int, height: int) -> bool:
    x, y, w, h = clip_box(box, width, height)
    return w > 0 and h > 0


FORBIDDEN_CLASSES = {
    "vehicle": ("sidewalk", "curb", "hard_object"),
    "person": ("ego_lane",),
    "lane": (),
    "signal": (),
    "crosswalk": ("crosswalk",),
    "solid_boundary": (),
    "stopped_vehicle": ("ego_lane", "other_lane"),
}


def _roi_candidates(source: str, priors: ScenePriors, clips: Sequence[ClipRange], kin_by_clip, stationary_mps: float):
    """(sort key, clip, box, kind) tuples for one ROI source; smaller keys are preferred."""
    meta = priors.meta
    out = []
    if source in ("vehicle", "person", "stopped_vehicle"):
        classes = ("vehicle",) if source != "person" else ("pedestrian", "cyclist")
        for t in priors.tracks_of(*classes):
            hits = [(abs(c.index - (len(clips) - 1) / 2), c) for c in clips if t.box_at(c.key_frame) is not None]
            for _, c in sorted(hits, key=lambda h: (h[0], h[1].index)):
                if source == "stopped_vehicle":
                    k = kin_by_clip[c.index].get(t.track_id)
                    if k is None or k.single_sample or k.mean_speed >= stationary_mps:
                        continue
                b = t.box_at(c.key_frame)
                out.append(((-b.area, t.track_id), c, (b.x, b.y, b.w, b.h), "image"))
                break
    elif source in ("lane", "signal"):
        for m in sorted(priors.masks, key=lambda m: m.instance_id):
            if source == "lane" and not (m.subtype == "arrow" or m.cls == "ego_lane"):
                continue
            if source == "signal" and m.subtype != "signal":
                continue
            c = clips[len(clips) // 2]
            poly = m.polygon_at(c.key_frame)
            if poly is None:
                continue
            box = _bbox(poly)
            if _visible(box, meta.width, meta.height):
                rank = 0 if m.subtype == "arrow" or m.subtype == "signal" else 1
                out.append(((rank, m.instance_id), c, clip_box(box, meta.width, meta.height), "image"))
    elif source == "crosswalk":
        from .geometry import point_in_polygon

        peds = priors.tracks_of("pedestrian")
        for m in priors.crosswalks():
            for c in clips:
                occupied = 0
                for f in c.frames():
                    poly = m.polygon_at(f)
                    if poly is None:
                        continue
                    occupied += sum(
                        1 for t in peds if (b := t.box_at(f)) is not None and point_in_polygon(b.bottom_center, poly)
                    )
                poly = m.polygon_at(c.key_frame)
                if poly is None:
                    continue
                box = _bbox(poly)
                if _visible(box, meta.width, meta.height):
                    out.append(((-occupied, m.instance_id, c.index), c, clip_box(box, meta.width, meta.height), "clip"))
    elif source == "solid_boundary":
        from .geometry import point_polyline_distance

        vehicles = priors.tracks_of("vehicle") + ([priors.ego_track] if priors.ego_track else [])
        for c in clips:
            lines = [b.polyline_at(c.key_frame) for b in priors.boundaries if b.style != "dashed"]
            lines = [ln for ln in lines if ln is not None]
            if not lines:
                continue
            closest = math.inf
            for t in vehicles:
                for b in t.boxes:
                    if c.start <= b.frame < c.end:
                        closest = min(closest, min(point_polyline_distance(b.bottom_center, ln) for ln in lines))
            pts = [p for ln in lines for p in ln]
            box = clip_box(_bbox(pts), meta.width, meta.height)
            if box[2] > 0 and box[3] > 0:
                out.append(((closest, c.index), c, box, "clip"))
    return sorted(out, key=lambda o: o[0])


def build_bundle(
    priors: ScenePriors,
    clips: Sequence[ClipRange],
    cfg: Mapping,
    kin_by_clip: Sequence[Mapping[int, object]] | None = None,
    catalog=None,
) -> VisualBundle:
    """Evidence items for every check; pixels are rendered only if a backend asks for them."""
    if catalog is None:
        from .prompts import load_catalog

        catalog = load_catalog()
    colors = catalog.colors
    vid = priors.meta.video_id
    target = (int(cfg["render.target_w"]), int(cfg["render.target_h"]))
    margin = float(cfg["render.roi_margin"])
    fade = int(cfg["render.fade_window"])
    kin_by_clip = kin_by_clip or [{} for _ in clips]

    def triplet(frame):
        return lambda: [img.to_ppm() for img in render_keyframe_triplet(priors, frame, catalog=catalog)]

    def overlaid(frames):
        def run():
            _, over = render_clip_pair(priors, frames, fade_window=fade, catalog=catalog)
            return [tint_masks(img, priors, f, ("ego_lane",), colors["ego_lane"]).to_ppm() for img, f in zip(over, frames)]

        return run

    def roi(frames, box, classes):
        def run():
            images = []
            for f in frames:
                img = tint_masks(schematic_frame(priors, f, catalog), priors, f, classes, colors["forbidden"])
                images.append(crop_roi(img, box, margin, target).to_ppm())
            return images

        return run

    key_items = [
        EvidenceItem(f"{vid}:k{c.index}", "image", (c.key_frame,), (c.key_frame,), f"frame:{c.index}", triplet(c.key_frame))
        for c in clips
    ]
    sub_items = []
    for c in clips:
        items = []
        for j, frames in enumerate(sub_clips(c)):
            items.append(
                EvidenceItem(f"{vid}:c{c.index}s{j}", "clip", tuple(frames), tuple(frames), f"clip:{c.index}", overlaid(frames))
            )
        sub_items.append(items)

    rois: dict[str, list[EvidenceItem]] = {}
    max_rois = int(cfg["vlm.max_rois"])
    stationary = float(cfg["bins.speed_stationary"])
    for spec in catalog.group("roi"):
        found = _roi_candidates(spec.roi_source, priors, clips, kin_by_clip, stationary)[:max_rois]
        items = []
        for j, (_, c, box, kind) in enumerate(found):
            frames = tuple(c.frames()) if kind == "clip" else (c.key_frame,)
            items.append(
                EvidenceItem(
                    f"{vid}:{spec.check_id}r{j}",
                    kind,
                    frames,
                    tuple(c.frames()),
                    f"clip:{c.index}",
                    roi(frames, box, FORBIDDEN_CLASSES.get(spec.roi_source, ())),
                )
            )
        rois[spec.check_id] = items
    return VisualBundle(key_items, sub_items, rois)
