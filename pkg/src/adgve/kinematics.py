"""Per-track kinematics, semantic motion bins and the textual scene summary."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .clips import ClipRange
from .geometry import LaneGeometry, Polyline
from .scene import Point, ScenePriors, Tracklet

SUMMARY_TEMPLATE = "Scene: {nv} vehicles, {np} pedestrians, {nc} cyclists. Layout: {cells}. Lanes: {attrs}. Motion: {tokens}."
ROWS = ("far", "mid", "near")
COLS = ("left", "center", "right")
MIN_DISPLACEMENT_PX = 0.5


@dataclass(frozen=True)
class Kinematics:
    track_id: int
    mean_speed: float  # m/s
    max_heading_change: float  # rad/frame
    lateral_drift: float  # lane widths per second, signed
    smoothness: float  # mean |acceleration|, m/s^2
    direction: str = "static"
    single_sample: bool = False


@dataclass(frozen=True)
class MotionTokens:
    direction: str
    speed: str
    drift: str
    smoothness: str

    def text(self) -> str:
        return f"{self.direction} {self.speed} {self.drift}-drift {self.smoothness}"


@dataclass
class SceneSummary:
    counts: dict[str, int]
    layout: list[list[int]]  # [row][col], row 0 = far
    size_bins: list[str] = field(default_factory=list)
    lane_attributes: list[str] = field(default_factory=list)
    motion_descriptors: list[str] = field(default_factory=list)
    rendered_text: str = ""


# --------------------------------------------------------------------------
# kinematics


def signed_distance(p: Point, line: Polyline) -> float:
    """Distance to ``line`` with the sign of the side ``p`` lies on (positive = left of travel order)."""
    best = math.inf
    sign = 1.0
    px, py = p
    for (ax, ay), (bx, by) in zip(line, line[1:]):
        dx, dy = bx - ax, by - ay
        seg2 = dx * dx + dy * dy
        t = 0.0 if seg2 == 0 else min(1.0, max(0.0, ((px - ax) * dx + (py - ay) * dy) / seg2))
        d = math.hypot(px - (ax + t * dx), py - (ay + t * dy))
        if d < best:
            best = d
            cross = dx * (py - ay) - dy * (px - ax)
            sign = -1.0 if cross < 0 else 1.0
    return sign * best


def _lateral_offset(p: Point, geom: LaneGeometry | None, lane_width_px: float) -> float:
    if geom is None or not geom.centerlines:
        return p[0] / lane_width_px
    candidates = [signed_distance(p, line) for line in geom.centerlines]
    return min(candidates, key=abs) / lane_width_px


def _direction(dx: float, dy: float) -> str:
    if math.hypot(dx, dy) < MIN_DISPLACEMENT_PX:
        return "static"
    if abs(dy) >= abs(dx):
        return "away" if dy < 0 else "toward"
    return "leftward" if dx < 0 else "rightward"


def tracklet_kinematics(
    track: Tracklet,
    fps: float,
    px_per_meter: float,
    geom: LaneGeometry | None = None,
    nominal_width_m: float = 3.5,
) -> Kinematics:
    """Speed, heading change, lateral drift and roughness of one track.

    Frame gaps are honoured: displacements are divided by the number of
    frames they span. Lateral drift is the least-squares slope of the signed
    offset from the nearest centerline (lane widths) against time (s).
    """
    boxes = track.boxes
    if len(boxes) < 2:
        return Kinematics(track.track_id, 0.0, 0.0, 0.0, 0.0, "static", True)
    pts = np.array([b.bottom_center for b in boxes], dtype=float)
    frames = np.array([b.frame for b in boxes], dtype=float)
    disp = np.diff(pts, axis=0)
    gaps = np.diff(frames)
    vel = disp / gaps[:, None]  # px/frame
    speeds = np.hypot(vel[:, 0], vel[:, 1]) * fps / px_per_meter
    mean_speed = float(speeds.mean())

    heading = 0.0
    for i in range(len(disp) - 1):
        a, b = disp[i], disp[i + 1]
        if math.hypot(*a) < MIN_DISPLACEMENT_PX or math.hypot(*b) < MIN_DISPLACEMENT_PX:
            continue
        angle = abs(math.atan2(a[0] * b[1] - a[1] * b[0], a[0] * b[0] + a[1] * b[1]))
        span = (frames[i + 2] - frames[i]) / 2.0
        heading = max(heading, angle / span)

    lane_px = px_per_meter * nominal_width_m
    offsets = np.array([_lateral_offset(tuple(p), geom, lane_px) for p in pts])
    times = frames / fps
    tc = times - times.mean()
    denom = float(np.dot(tc, tc))
    drift = float(np.dot(tc, offsets - offsets.mean()) / denom) if denom > 0 else 0.0

    if len(vel) >= 2:
        mid_gaps = (gaps[1:] + gaps[:-1]) / 2.0
        acc = np.diff(vel, axis=0) / mid_gaps[:, None]  # px/frame^2
        smooth = float(np.hypot(acc[:, 0], acc[:, 1]).mean() * fps * fps / px_per_meter)
    else:
        smooth = 0.0
    net = pts[-1] - pts[0]
    return Kinematics(track.track_id, mean_speed, heading, drift, smooth, _direction(net[0], net[1]))


def _bin(value: float, edges: Sequence[float], labels: Sequence[str]) -> str:
    # half-open bins [lo, hi): a value on an edge belongs to the bin starting there
    for edge, label in zip(edges, labels):
        if value < edge:
            return label
    return labels[-1]


def discretize(k: Kinematics, cfg: Mapping) -> MotionTokens:
    speed = _bin(
        k.mean_speed,
        (cfg["bins.speed_stationary"], cfg["bins.speed_slow"], cfg["bins.speed_moderate"]),
        ("stationary", "slow", "moderate", "fast"),
    )
    drift = _bin(abs(k.lateral_drift), (cfg["bins.drift_none"], cfg["bins.drift_slight"]), ("none", "slight", "strong"))
    smooth = "jerky" if k.smoothness > cfg["bins.jerk_mps2"] else "smooth"
    return MotionTokens(k.direction, speed, drift, smooth)


# --------------------------------------------------------------------------
# summaries


def grid_cell(p: Point, width: int, height: int) -> tuple[int, int]:
    """(row, col) with row 0 = far (top third) and col 0 = left third; off-image points clamp."""
    col = min(2, max(0, int(math.floor(3.0 * p[0] / width))))
    row = min(2, max(0, int(math.floor(3.0 * p[1] / height))))
    return row, col


def size_bin(area: float, image_area: float, cfg: Mapping) -> str:
    return _bin(area / image_area, (cfg["bins.size_small"], cfg["bins.size_medium"]), ("small", "medium", "large"))


def _scope_boxes(priors: ScenePriors, scope) -> list:
    """(track, box) for every track visible in ``scope`` (a frame index or a ClipRange)."""
    out = []
    for t in sorted(priors.tracklets, key=lambda t: t.track_id):
        if isinstance(scope, ClipRange):
            box = t.box_at(scope.key_frame)
            if box is None:
                inside = [b for b in t.boxes if scope.start <= b.frame < scope.end]
                box = inside[0] if inside else None
        else:
            box = t.box_at(int(scope))
        if box is not None:
            out.append((t, box))
    return out


def _scope_frames(scope) -> range:
    return scope.frames() if isinstance(scope, ClipRange) else range(int(scope), int(scope) + 1)


def lane_attributes(priors: ScenePriors, geom: LaneGeometry | None, scope) -> list[str]:
    attrs = []
    if geom is not None and geom.boundaries:
        styles: dict[str, int] = {}
        for _, style in geom.boundaries:
            styles[style] = styles.get(style, 0) + 1
        for style in ("solid", "double_solid", "dashed"):
            if style in styles:
                n = styles[style]
                attrs.append(f"{n} {style.replace('_', '-')} boundar{'y' if n == 1 else 'ies'}")
    frames = _scope_frames(scope)
    present = set()
    for m in priors.masks:
        if not any(m.polygon_at(f) is not None for f in frames):
            continue
        if m.is_crosswalk:
            present.add("crosswalk")
        if m.subtype in ("arrow", "signal"):
            present.add(m.subtype)
    attrs += [name for name in ("crosswalk", "arrow", "signal") if name in present]
    return attrs


def build_summary(
    priors: ScenePriors,
    geom: LaneGeometry | None,
    kin: Sequence[Kinematics],
    scope,
    cfg: Mapping,
) -> SceneSummary:
    meta = priors.meta
    visible = _scope_boxes(priors, scope)
    counts = {"vehicle": 0, "pedestrian": 0, "cyclist": 0}
    layout = [[0, 0, 0] for _ in range(3)]
    sizes = []
    for t, box in visible:
        counts[t.cls] += 1
        r, c = grid_cell(box.bottom_center, meta.width, meta.height)
        layout[r][c] += 1
        sizes.append(size_bin(box.area, meta.width * meta.height, cfg))

    cells = []
    for r in (2, 1, 0):  # near first
        for c in range(3):
            if layout[r][c]:
                cells.append(f"{ROWS[r]}-{COLS[c]} {layout[r][c]}")
    attrs = lane_attributes(priors, geom, scope)

    by_id = {k.track_id: k for k in kin}
    visible_ids = {t.track_id: t.cls for t, _ in visible}
    motion = []
    for track_id in sorted(by_id):
        if track_id in visible_ids:
            label = f"{visible_ids[track_id]} {track_id}"
        elif track_id < 0:
            label = "ego"
        else:
            continue
        motion.append(f"{label}: {discretize(by_id[track_id], cfg).text()}")

    text = SUMMARY_TEMPLATE.format(
        nv=counts["vehicle"],
        np=counts["pedestrian"],
        nc=counts["cyclist"],
        cells=", ".join(cells) if cells else "empty",
        attrs=", ".join(attrs) if attrs else "no lane markings detected",
        tokens="; ".join(motion) if motion else "none",
    )
    return SceneSummary(counts, layout, sizes, attrs, motion, text)
