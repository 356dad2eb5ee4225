"""Rule-based lane-obedience scoring: centering, solid-line crossings, crosswalk yielding.

Every trajectory is reduced to the bottom-center of its boxes, the usual
road-contact proxy for image-plane boxes.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import NoEvidence, WeightError
from .geometry import (
    LaneGeometry,
    Polyline,
    lane_geometry,
    point_in_polygon,
    point_polyline_distance,
    segments_intersect,
)
from .scene import Detection, MaskInstance, Point, ScenePriors, Tracklet

SOLID_STYLES = ("solid", "double_solid")
EGO_PROXY_ID = -1
ROAD_CLASSES = ("ego_lane", "other_lane", "crosswalk")


@dataclass
class Component:
    value: float
    no_evidence: bool = False
    violations: list[tuple[str, int, int]] = field(default_factory=list)
    encounters: int = 0
    segments: int = 0


@dataclass
class LaneScores:
    d_norm: float | None
    s_center: float
    s_solid: float
    s_cross: float
    s_lane: float
    no_evidence: dict[str, bool]
    violations: list[tuple[str, int, int]]
    ego_proxy: bool
    derived_boundaries: bool
    samples: int = 0


# --------------------------------------------------------------------------
# helpers


def ego_proxy(width: int, height: int, num_frames: int, lane_width_px: float) -> Tracklet:
    """Fixed camera-footprint box anchored at the bottom-center of every frame."""
    w = 0.6 * lane_width_px
    h = 0.25 * height
    x = width / 2.0 - w / 2.0
    y = height - h
    boxes = tuple(Detection(f, x, y, w, h, "vehicle", 1.0) for f in range(num_frames))
    return Tracklet(EGO_PROXY_ID, "vehicle", boxes)


def _boxes_speed(boxes: Sequence[Detection], index: int, fps: float, ppm: float) -> float:
    """Speed in m/s at ``boxes[index]`` by backward difference (forward at the first box)."""
    if len(boxes) < 2:
        return 0.0
    j = index - 1 if index > 0 else 1
    a, b = boxes[j], boxes[index]
    (ax, ay), (bx, by) = a.bottom_center, b.bottom_center
    gap = abs(b.frame - a.frame)
    return math.hypot(bx - ax, by - ay) * fps / (gap * ppm)


# --------------------------------------------------------------------------
# components


def lane_centering_score(
    tracks: Sequence[Tracklet],
    geoms: Mapping[int, LaneGeometry],
    alpha: float = 1.0,
    road_polygons: Mapping[int, Sequence[Sequence[Point]]] | None = None,
) -> tuple[float, float]:
    """Mean lane-width-normalized distance to the nearest centerline and ``exp(-alpha d)``.

    Samples are (track, key frame) bottom-centers; a sample whose point lies
    outside every road polygon of that frame is skipped as off-road.
    """
    ratios = []
    for frame in sorted(geoms):
        geom = geoms[frame]
        if geom is None or not geom.centerlines:
            continue
        polys = None if road_polygons is None else road_polygons.get(frame, ())
        for track in tracks:
            box = track.box_at(frame)
            if box is None:
                continue
            p = box.bottom_center
            if polys is not None and not any(point_in_polygon(p, poly) for poly in polys):
                continue
            d = min(point_polyline_distance(p, line) for line in geom.centerlines)
            ratios.append(d / geom.lane_width_px)
    if not ratios:
        raise NoEvidence("no on-road track samples on key frames with lane geometry")
    d_norm = math.fsum(ratios) / len(ratios)
    return d_norm, math.exp(-alpha * d_norm)


BoundarySource = Sequence[tuple[Polyline, str]] | Callable[[int], Sequence[tuple[Polyline, str]]]


def solid_line_score(tracks: Sequence[Tracklet], boundaries: BoundarySource) -> Component:
    """``1 - (segments crossing a solid boundary) / (valid segments)``, clipped to [0, 1].

    ``boundaries`` is either a static list of ``(polyline, style)`` or a
    callable returning the list in force at a given frame (the segment's start).
    """
    lookup = boundaries if callable(boundaries) else (lambda _frame, _b=boundaries: _b)
    total = 0
    crossing = 0
    violations = []
    for track in tracks:
        for a, b in zip(track.boxes, track.boxes[1:]):
            total += 1
            p, q = a.bottom_center, b.bottom_center
            for line, style in lookup(a.frame):
                if style not in SOLID_STYLES:
                    continue
                if any(segments_intersect(p, q, line[i], line[i + 1]) for i in range(len(line) - 1)):
                    crossing += 1
                    violations.append(("solid_cross", a.frame, track.track_id))
                    break
    if total == 0:
        return Component(1.0, no_evidence=True)
    value = min(1.0, max(0.0, 1.0 - crossing / total))
    return Component(value, violations=violations, segments=total)


def in_approach_region(p: Point, polygon: Sequence[Point], reach_px: float) -> bool:
    """Is ``p`` inside ``polygon`` swept by ``reach_px`` toward larger y?"""
    top = (p[0], p[1] - reach_px)
    if point_in_polygon(p, polygon) or point_in_polygon(top, polygon):
        return True
    n = len(polygon)
    return any(segments_intersect(top, p, polygon[i], polygon[(i + 1) % n]) for i in range(n))


def crosswalk_score(
    ego: Tracklet | None,
    pedestrians: Sequence[Tracklet],
    crosswalks: Sequence[MaskInstance],
    px_per_meter: float,
    fps: float,
    num_frames: int,
    approach_m: float = 5.25,
    yield_speed_mps: float = 1.0,
    ego_lanes: Mapping[int, Sequence[Sequence[Point]]] | None = None,
) -> Component:
    """``1 - violating / total`` ego encounters with occupied crosswalks.

    An encounter is a maximal run of frames with the ego point inside the
    upstream approach region of a crosswalk that holds a pedestrian; it is a
    violation if the ego speed exceeds ``yield_speed_mps`` on any of its frames.
    """
    if ego is None or not crosswalks or not ego.boxes:
        return Component(1.0, no_evidence=True)
    reach = approach_m * px_per_meter
    index = {b.frame: i for i, b in enumerate(ego.boxes)}
    flags: list[bool] = []
    for frame in range(num_frames):
        i = index.get(frame)
        if i is None:
            flags.append(False)
            continue
        p = ego.boxes[i].bottom_center
        lanes = ego_lanes.get(frame, ()) if ego_lanes is not None else ()
        if lanes and not any(point_in_polygon(p, poly) for poly in lanes):
            flags.append(False)
            continue
        hit = False
        for cw in crosswalks:
            poly = cw.polygon_at(frame)
            if poly is None or not in_approach_region(p, poly, reach):
                continue
            peds = (t.box_at(frame) for t in pedestrians)
            if any(b is not None and point_in_polygon(b.bottom_center, poly) for b in peds):
                hit = True
                break
        flags.append(hit)

    encounters = 0
    violating = 0
    violations = []
    frame = 0
    while frame < num_frames:
        if not flags[frame]:
            frame += 1
            continue
        start = frame
        while frame < num_frames and flags[frame]:
            frame += 1
        encounters += 1
        fast = [f for f in range(start, frame) if _boxes_speed(ego.boxes, index[f], fps, px_per_meter) > yield_speed_mps]
        if fast:
            violating += 1
            violations.append(("non_yield", fast[0], ego.track_id))
    if encounters == 0:
        return Component(1.0, no_evidence=True)
    value = min(1.0, max(0.0, 1.0 - violating / encounters))
    return Component(value, violations=violations, encounters=encounters)


def lane_obedience(components: Sequence[float], weights: Sequence[float] = (0.4, 0.3, 0.3)) -> float:
    """Weighted sum of (centering, solid-line, crosswalk) components."""
    if len(components) != 3 or len(weights) != 3:
        raise WeightError("need exactly three components and three weights")
    if any(w < 0 for w in weights) or abs(math.fsum(weights) - 1.0) > 1e-9:
        raise WeightError(f"weights must be nonnegative and sum to 1, got {tuple(weights)}")
    for c in components:
        if not 0.0 <= c <= 1.0:
            raise WeightError(f"component {c} outside [0, 1]")
    return math.fsum(w * c for w, c in zip(weights, components))


# --------------------------------------------------------------------------
# whole-video scoring


def road_polygons(priors: ScenePriors, frames, classes=ROAD_CLASSES) -> dict[int, list]:
    out: dict[int, list] = {}
    for f in frames:
        polys = []
        for m in priors.masks:
            if m.cls in classes or ("crosswalk" in classes and m.is_crosswalk):
                poly = m.polygon_at(f)
                if poly is not None:
                    polys.append(poly)
        out[f] = polys
    return out


def key_frame_geometry(priors: ScenePriors, key_frames: Sequence[int], cfg) -> dict[int, LaneGeometry | None]:
    return {f: lane_geometry(priors, f, cfg) for f in key_frames}


def video_px_per_meter(geoms: Mapping[int, LaneGeometry | None], priors: ScenePriors, cfg) -> tuple[float, float]:
    """(lane_width_px, px_per_meter) as medians over key frames, with an image-width fallback."""
    widths = [g.lane_width_px for g in geoms.values() if g is not None]
    lane_w = float(np.median(widths)) if widths else priors.meta.width / 4.0
    return lane_w, lane_w / float(cfg["lane.nominal_width_m"])


def score_lanes(priors: ScenePriors, key_frames: Sequence[int], cfg, geoms=None) -> LaneScores:
    meta = priors.meta
    if geoms is None:
        geoms = key_frame_geometry(priors, key_frames, cfg)
    lane_w, ppm = video_px_per_meter(geoms, priors, cfg)
    ego = priors.ego_track
    proxy = ego is None
    if proxy:
        ego = ego_proxy(meta.width, meta.height, meta.num_frames, lane_w)

    no_ev = {"center": False, "solid": False, "cross": False}
    violations: list[tuple[str, int, int]] = []

    vehicles = priors.tracks_of("vehicle")
    valid_geoms = {f: g for f, g in geoms.items() if g is not None}
    try:
        d_norm, s_center = lane_centering_score(
            vehicles + [ego], valid_geoms, float(cfg["lane.alpha"]), road_polygons(priors, valid_geoms)
        )
    except NoEvidence:
        d_norm, s_center = None, 1.0
        no_ev["center"] = True

    derived = not priors.boundaries
    if derived:
        by_key = {f: g.boundaries for f, g in valid_geoms.items()}
        keys = sorted(by_key)

        def boundaries_at(frame: int):
            if not keys:
                return ()
            earlier = [k for k in keys if k <= frame]
            return by_key[earlier[-1] if earlier else keys[0]]
    else:

        def boundaries_at(frame: int):
            out = []
            for b in priors.boundaries:
                line = b.polyline_at(frame)
                if line is not None:
                    out.append((line, b.style))
            return out

    solid_tracks = vehicles + ([] if proxy else [ego])
    solid = solid_line_score(solid_tracks, boundaries_at)
    no_ev["solid"] = solid.no_evidence
    violations += solid.violations

    lanes_by_frame = road_polygons(priors, range(meta.num_frames), ("ego_lane",))
    cross = crosswalk_score(
        ego,
        priors.tracks_of("pedestrian"),
        priors.crosswalks(),
        ppm,
        meta.fps,
        meta.num_frames,
        float(cfg["lane.cross_approach_m"]),
        float(cfg["lane.yield_speed_mps"]),
        lanes_by_frame,
    )
    no_ev["cross"] = cross.no_evidence
    violations += cross.violations

    weights = (float(cfg["lane.w_center"]), float(cfg["lane.w_solid"]), float(cfg["lane.w_cross"]))
    s_lane = lane_obedience((s_center, solid.value, cross.value), weights)
    return LaneScores(
        d_norm=d_norm,
        s_center=s_center,
        s_solid=solid.value,
        s_cross=cross.value,
        s_lane=s_lane,
        no_evidence=no_ev,
        violations=violations,
        ego_proxy=proxy,
        derived_boundaries=derived,
    )
