"""Synthetic driving scenes with planted, exactly-known rule violations.

The scenes are schematic: lanes are vertical (or gently curved) bands in the
image plane, agents drive up the image, and the ego vehicle is either an
explicit track or the bottom-center camera proxy. Every violation is an
additive perturbation whose effect on the lane scores is known in closed
form, so the generator also reports the expected component values.

Also home to the structured video-generation instruction sampler.
"""
from __future__ import annotations

import json
import math
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .clips import split_clips
from .errors import SpecError
from .scene import (
    BoundaryFrame,
    Detection,
    LaneBoundary,
    MaskFrame,
    MaskInstance,
    ScenePriors,
    Tracklet,
    VideoMeta,
    serialize,
)

LAYOUTS = ("straight", "curve", "crosswalk", "two_lane")
VIOLATION_KINDS = (
    "flicker",
    "teleport",
    "solid_cross",
    "off_center_drift",
    "non_yield",
    "sidewalk_drive",
    "jerky_ego",
)

# taxonomy label of each injectable violation
TAXONOMY = {
    "flicker": "1.1 Temporal Instability",
    "teleport": "2.1 Agent Behavior Violation",
    "solid_cross": "2.1 Agent Behavior Violation",
    "off_center_drift": "2.3 Ego Vehicle Impossibility",
    "non_yield": "2.1 Agent Behavior Violation",
    "sidewalk_drive": "2.1 Agent Behavior Violation",
    "jerky_ego": "2.3 Ego Vehicle Impossibility",
}

# check and worst-matching candidate the oracle stub answers for each violation
VIOLATION_CHECKS = {
    "flicker": ("B1", "strong-flicker"),
    "teleport": ("B6", "highly-unnatural-or-teleporting"),
    "solid_cross": ("C6", "clear-or-prolonged-crossing"),
    "off_center_drift": ("B5", "frequently-out-of-lane"),
    "non_yield": ("C5", "vehicles-not-yielding"),
    "sidewalk_drive": ("C1", "partly-on-sidewalk"),
    "jerky_ego": ("B3", "strongly-shaky"),
}

WIDTH, HEIGHT, FPS = 320, 240, 24.0
LANE_W = 61  # odd, so the skeleton of a straight lane is its exact center column
EGO_L = 130
CANVAS_TOP, CANVAS_BOTTOM = -120.0, 360.0
CROSSWALK_Y = (60.0, 90.0)
VEHICLE_W, VEHICLE_H = 30.0, 20.0
PED_W, PED_H = 8.0, 16.0
EGO_STOP_FRAME = 10


@dataclass
class Violation:
    kind: str
    magnitude: float | None = None
    start: int | None = None
    end: int | None = None
    segments: tuple[int, ...] = ()
    encounters: int = 1
    violating: tuple[int, ...] | None = None

    @classmethod
    def from_dict(cls, d: dict) -> "Violation":
        d = dict(d)
        if "segments" in d:
            d["segments"] = tuple(d["segments"])
        if d.get("violating") is not None:
            d["violating"] = tuple(d["violating"])
        return cls(**d)


@dataclass
class ScenarioSpec:
    seed: int
    layout: str = "straight"
    T: int = 48
    violations: tuple[Violation, ...] = ()
    num_vehicles: int | None = None
    num_pedestrians: int | None = None
    video_id: str | None = None
    human_score: bool = True

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioSpec":
        d = dict(d)
        d["violations"] = tuple(
            v if isinstance(v, Violation) else Violation.from_dict(v) for v in d.get("violations", ())
        )
        return cls(**d)

    def kinds(self) -> set[str]:
        return {v.kind for v in self.violations}


@dataclass
class GroundTruth:
    video_id: str
    layout: str
    violations: list[dict] = field(default_factory=list)
    expected: dict[str, Any] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "GroundTruth":
        return cls(**json.loads(text))

    def kinds(self) -> set[str]:
        return {v["kind"] for v in self.violations}


# --------------------------------------------------------------------------
# layout geometry


def _curve_center(y: float) -> float:
    return 160.5 + 60.0 * ((CANVAS_BOTTOM - y) / 480.0) ** 2


class _Layout:
    """Lane centers and polygons as functions of image y."""

    def __init__(self, name: str):
        self.name = name
        self.two_lanes = name != "straight"
        self.curved = name == "curve"

    def offset(self, y: float) -> float:
        return _curve_center(y) - (EGO_L + LANE_W / 2.0) if self.curved else 0.0

    def lane_center(self, lane: int, y: float) -> float:
        return EGO_L + LANE_W / 2.0 + lane * LANE_W + self.offset(y)

    def band(self, x_left: float, x_right: float) -> tuple[tuple[float, float], ...]:
        if not self.curved:
            return ((x_left, CANVAS_TOP), (x_right, CANVAS_TOP), (x_right, CANVAS_BOTTOM), (x_left, CANVAS_BOTTOM))
        ys = np.arange(CANVAS_TOP, CANVAS_BOTTOM + 1e-9, 20.0)
        right = [(round(x_right + self.offset(y), 4), float(y)) for y in ys]
        left = [(round(x_left + self.offset(y), 4), float(y)) for y in ys[::-1]]
        return tuple(right + left)

    def line(self, x: float) -> tuple[tuple[float, float], ...]:
        if not self.curved:
            return ((x, CANVAS_TOP), (x, CANVAS_BOTTOM))
        ys = np.arange(CANVAS_TOP, CANVAS_BOTTOM + 1e-9, 20.0)
        return tuple((round(x + self.offset(y), 4), float(y)) for y in ys)

    @property
    def road_right(self) -> int:
        return EGO_L + LANE_W * (2 if self.two_lanes else 1)

    def sidewalk_center(self, y: float) -> float:
        return self.road_right + 30.0 + self.offset(y)


def _r(x: float) -> float:
    return round(float(x), 4)


# --------------------------------------------------------------------------
# generation


def _validate(spec: ScenarioSpec) -> None:
    if spec.layout not in LAYOUTS:
        raise SpecError(f"unknown layout {spec.layout!r}")
    if not 8 <= spec.T <= 400:
        raise SpecError(f"T={spec.T} outside [8, 400]")
    kinds = [v.kind for v in spec.violations]
    if len(set(kinds)) != len(kinds):
        raise SpecError("each violation kind may appear at most once")
    for v in spec.violations:
        if v.kind not in VIOLATION_KINDS:
            raise SpecError(f"unknown violation kind {v.kind!r}")
        if v.start is not None and not 0 <= v.start < spec.T:
            raise SpecError(f"{v.kind}: start outside [0, T)")
        if v.end is not None and not (v.start or 0) < v.end <= spec.T:
            raise SpecError(f"{v.kind}: end must lie in (start, T]")
        if v.kind == "solid_cross":
            if spec.layout == "straight":
                raise SpecError("solid_cross needs a two-lane layout")
            if any(not 0 <= s < spec.T - 1 for s in v.segments):
                raise SpecError("solid_cross segments must lie in [0, T-1)")
        if v.kind == "non_yield":
            if spec.layout != "crosswalk":
                raise SpecError("non_yield needs the crosswalk layout")
            if not 1 <= v.encounters <= 8:
                raise SpecError("non_yield encounters must lie in [1, 8]")
            if v.violating is not None and any(not 0 <= i < v.encounters for i in v.violating):
                raise SpecError("non_yield violating indices out of range")
        if v.kind == "off_center_drift" and v.magnitude is not None and not 0.05 <= v.magnitude <= 0.45:
            raise SpecError("off_center_drift magnitude must lie in [0.05, 0.45] lane widths")
        if v.kind == "jerky_ego" and v.magnitude is not None and not 0.5 <= v.magnitude <= 2.0:
            raise SpecError("jerky_ego magnitude must lie in [0.5, 2.0] px/frame")
        if v.kind == "teleport" and v.magnitude is not None and not 10 <= v.magnitude <= 60:
            raise SpecError("teleport magnitude must lie in [10, 60] px")
    if spec.layout == "crosswalk":
        enc = next((v.encounters for v in spec.violations if v.kind == "non_yield"), 1)
        if spec.T < 12 + 6 * enc + 1:
            raise SpecError(f"crosswalk layout with {enc} encounters needs T >= {12 + 6 * enc + 1}")
    if spec.num_vehicles is not None and not 0 <= spec.num_vehicles <= 6:
        raise SpecError("num_vehicles must lie in [0, 6]")


def _window(v: Violation | None, T: int, rng, default_len: int) -> tuple[int, int]:
    if v is not None and v.start is not None:
        start = v.start
    else:
        start = int(rng.integers(0, max(1, T - default_len)))
    end = v.end if v is not None and v.end is not None else min(T, start + default_len)
    return start, end


def _box(cx: float, bottom: float, w: float, h: float, frame: int, cls: str, conf: float = 1.0) -> Detection:
    return Detection(frame, _r(cx - w / 2.0), _r(bottom - h), w, h, cls, conf)


def gen_scenario(spec: ScenarioSpec) -> tuple[ScenePriors, GroundTruth]:
    """Build one scene and its ground truth from ``spec``; output is a pure function of it."""
    _validate(spec)
    rng = np.random.default_rng(spec.seed)
    T = spec.T
    lay = _Layout(spec.layout)
    vio = {v.kind: v for v in spec.violations}
    video_id = spec.video_id or f"synth-{spec.layout}-{spec.seed:06d}"
    gt_violations: list[dict] = []

    # ---- static infrastructure
    masks: list[MaskInstance] = []

    def add_mask(cls: str, polygon, subtype=None):
        frames = tuple(MaskFrame(f, polygon, 1.0) for f in range(T))
        masks.append(MaskInstance(len(masks), cls, frames, subtype))

    add_mask("ego_lane", lay.band(EGO_L, EGO_L + LANE_W))
    if lay.two_lanes:
        add_mask("other_lane", lay.band(EGO_L + LANE_W, EGO_L + 2 * LANE_W))
    add_mask("sidewalk", lay.band(EGO_L - 60, EGO_L - 4))
    add_mask("curb", lay.band(EGO_L - 4, EGO_L))
    add_mask("curb", lay.band(lay.road_right, lay.road_right + 4))
    add_mask("sidewalk", lay.band(lay.road_right + 4, lay.road_right + 60))
    if spec.layout == "crosswalk":
        y0, y1 = CROSSWALK_Y
        add_mask("crosswalk", ((EGO_L, y0), (lay.road_right, y0), (lay.road_right, y1), (EGO_L, y1)))

    middle_style = "solid" if "solid_cross" in vio else ("dashed" if lay.two_lanes else None)
    boundaries = [LaneBoundary(0, "solid", (BoundaryFrame(0, lay.line(EGO_L)),))]
    if middle_style is not None:
        boundaries.append(LaneBoundary(1, middle_style, (BoundaryFrame(0, lay.line(EGO_L + LANE_W)),)))
    boundaries.append(LaneBoundary(len(boundaries), "solid", (BoundaryFrame(0, lay.line(lay.road_right)),)))

    # ---- vehicles
    n_veh = spec.num_vehicles if spec.num_vehicles is not None else int(rng.integers(1, 4))
    v_max = (230.0 - 25.0) / (T - 1)
    tracks: list[Tracklet] = []
    teleport = vio.get("teleport")
    tele_mag = float(teleport.magnitude) if teleport and teleport.magnitude else 40.0
    tele_frame = None
    if teleport:
        tele_frame = teleport.start if teleport.start is not None else int(rng.integers(1, T - 1))
        tele_frame = max(1, tele_frame)
        gt_violations.append({"kind": "teleport", "start": tele_frame - 1, "end": tele_frame + 1, "track_id": 0})
    cross = vio.get("solid_cross")
    cross_segments: tuple[int, ...] = ()
    if cross:
        cross_segments = tuple(sorted(set(cross.segments))) or tuple(
            sorted(set(int(s) for s in rng.choice(T - 1, size=min(2, T - 1), replace=False)))
        )
    flicker = vio.get("flicker")
    flick = _window(flicker, T, rng, max(8, T // 3)) if flicker else None
    if flick:
        gt_violations.append({"kind": "flicker", "start": flick[0], "end": flick[1], "track_id": None})

    n_veh_total = max(n_veh, 1 if (teleport or cross) else 0)
    for k in range(n_veh_total):
        reserve = tele_mag if (teleport and k == 0) else 0.0
        speed = _r(min(float(rng.choice([0.5, 1.0, 1.5, 2.0])), (230.0 - 25.0 - reserve) / (T - 1)))
        lo = 25.0 + speed * (T - 1) + reserve
        y0 = _r(lo + float(rng.uniform(0.0, max(0.0, 230.0 - lo))))
        lane = int(rng.integers(0, 2)) if lay.two_lanes else 0
        if cross and k == 0:
            lane = 0
        lateral = float(rng.integers(-2, 3))
        boxes = []
        for f in range(T):
            bottom = y0 - speed * f
            if teleport and k == 0 and f >= tele_frame:
                bottom -= tele_mag
            cur_lane = lane
            if cross and k == 0:
                cur_lane = sum(1 for s in cross_segments if s < f) % 2
            cx = lay.lane_center(cur_lane, bottom) + lateral
            conf = 1.0
            if flick and flick[0] <= f < flick[1] and f % 2:
                conf = 0.4
            boxes.append(_box(cx, _r(bottom), VEHICLE_W, VEHICLE_H, f, "vehicle", conf))
        tracks.append(Tracklet(k, "vehicle", tuple(boxes)))
    if cross:
        gt_violations.append(
            {"kind": "solid_cross", "start": cross_segments[0], "end": cross_segments[-1] + 2,
             "track_id": 0, "segments": list(cross_segments)}
        )

    sidewalk = vio.get("sidewalk_drive")
    sidewalk_id = None
    if sidewalk:
        sidewalk_id = len(tracks)
        speed = _r(min(1.0, v_max))
        y0 = 25.0 + speed * (T - 1)
        boxes = tuple(
            _box(lay.sidewalk_center(y0 - speed * f), _r(y0 - speed * f), VEHICLE_W, VEHICLE_H, f, "vehicle")
            for f in range(T)
        )
        tracks.append(Tracklet(sidewalk_id, "vehicle", boxes))
        gt_violations.append({"kind": "sidewalk_drive", "start": 0, "end": T, "track_id": sidewalk_id})

    # ---- pedestrians / cyclists
    next_id = len(tracks)
    ped_windows: list[int] = []
    non_yield = vio.get("non_yield")
    if spec.layout == "crosswalk":
        n_enc = non_yield.encounters if non_yield else 1
        ped_windows = [12 + 6 * k for k in range(n_enc)]
        for s in ped_windows:
            boxes = tuple(
                _box(125.0 + 31.0 * (f - s + 1), 75.0, PED_W, PED_H, f, "pedestrian") for f in range(s - 1, s + 5)
            )
            tracks.append(Tracklet(next_id, "pedestrian", boxes))
            next_id += 1
    n_ped = spec.num_pedestrians if spec.num_pedestrians is not None else int(rng.integers(0, 3))
    for _ in range(n_ped):
        side = int(rng.integers(0, 2))
        speed = _r(float(rng.choice([0.25, 0.5])))
        y0 = _r(float(rng.uniform(30.0 + speed * (T - 1), 235.0)))
        boxes = []
        for f in range(T):
            bottom = y0 - speed * f
            cx = (EGO_L - 32.0 + lay.offset(bottom)) if side == 0 else lay.sidewalk_center(bottom) + 12.0
            boxes.append(_box(cx, _r(bottom), PED_W, PED_H, f, "pedestrian"))
        tracks.append(Tracklet(next_id, "pedestrian", tuple(boxes)))
        next_id += 1
    if rng.random() < 0.5:
        speed = _r(min(1.0, v_max))
        y0 = 25.0 + speed * (T - 1)
        boxes = tuple(
            _box(EGO_L - 20.0 + lay.offset(y0 - speed * f), _r(y0 - speed * f), 10.0, 18.0, f, "cyclist")
            for f in range(T)
        )
        tracks.append(Tracklet(next_id, "cyclist", boxes))
        next_id += 1

    # ---- ego
    drift = vio.get("off_center_drift")
    jerky = vio.get("jerky_ego")
    explicit_ego = spec.layout == "crosswalk" or bool(drift or jerky or non_yield)
    ego = None
    enc_expected = None
    if explicit_ego:
        ego, enc_expected = _ego_track(spec, lay, rng, drift, jerky, non_yield, ped_windows, gt_violations)

    human = None
    if spec.human_score:
        if spec.violations:
            base = max(0.02, 0.12 - 0.03 * (len(spec.violations) - 1))
            human = _r(min(1.0, max(0.0, base + float(rng.uniform(-0.02, 0.02)))))
        else:
            human = _r(0.8 + float(rng.uniform(-0.05, 0.05)))

    meta = VideoMeta(video_id, WIDTH, HEIGHT, FPS, T)
    priors = ScenePriors(meta, tuple(tracks), tuple(masks), tuple(boundaries), ego, human)
    expected = _expected_scores(priors, lay, sidewalk_id, cross_segments, enc_expected)
    gt = GroundTruth(video_id, spec.layout, sorted(gt_violations, key=lambda d: d["kind"]), expected)
    return priors, gt


def _ego_track(spec, lay, rng, drift, jerky, non_yield, ped_windows, gt_violations):
    T = spec.T
    ego_w, ego_h = 0.6 * LANE_W, 0.25 * HEIGHT
    crosswalk = spec.layout == "crosswalk"
    # longitudinal steps (px moved up between frame f-1 and f)
    steps = [0.0] * T
    if crosswalk:
        for f in range(1, min(EGO_STOP_FRAME, T - 1) + 1):
            steps[f] = 2.0
        last_end = ped_windows[-1] + 4
        violating = set()
        if non_yield:
            violating = set(non_yield.violating) if non_yield.violating is not None else set(range(len(ped_windows)))
        for k, s in enumerate(ped_windows):
            if k in violating:
                for f in (s + 1, s + 2, s + 3):
                    steps[f] = 1.0
        resume = min(2.0, 100.0 / max(1, T - last_end - 1))
        for f in range(last_end + 1, T):
            steps[f] = resume
        start_y = 190.0
    else:
        speed = min(2.0, (230.0 - 80.0) / (T - 1))
        for f in range(1, T):
            steps[f] = speed
        start_y = 230.0
    if jerky:
        mag = float(jerky.magnitude) if jerky.magnitude else 1.0
        if crosswalk:
            j0, j1 = 1, EGO_STOP_FRAME + 1
        else:
            j0, j1 = _window(jerky, T, rng, 16)
            j0 = max(1, j0)
        if j1 - j0 < 2:
            raise SpecError("jerky_ego window needs at least two frames after frame 0")
        # never reverse: the perturbation is bounded by the nominal step
        mag = min(mag, min(steps[f] for f in range(j0, j1)))
        count = (j1 - j0) - (j1 - j0) % 2
        for i, f in enumerate(range(j0, j0 + count)):
            steps[f] += -mag if i % 2 == 0 else mag
        gt_violations.append({"kind": "jerky_ego", "start": j0, "end": j0 + count, "track_id": -2})

    lateral = [0.0] * T
    if drift:
        mag = float(drift.magnitude) if drift.magnitude else 0.35
        w0, w1 = (0, EGO_STOP_FRAME + 1) if crosswalk else _window(drift, T, rng, 12)
        target = mag * LANE_W
        for f in range(T):
            if f >= w1:
                lateral[f] = target
            elif f > w0:
                lateral[f] = target * (f - w0) / (w1 - w0)
        gt_violations.append({"kind": "off_center_drift", "start": w0, "end": T, "track_id": -2})

    boxes = []
    y = start_y
    for f in range(T):
        y -= steps[f]
        y = _r(y)
        cx = lay.lane_center(0, y) + _r(lateral[f])
        boxes.append(Detection(f, _r(cx - ego_w / 2.0), _r(y - ego_h), _r(ego_w), ego_h, "vehicle", 1.0))
    ego = Tracklet(-2, "vehicle", tuple(boxes))

    enc = None
    if crosswalk:
        n = len(ped_windows)
        bad = 0
        if non_yield:
            bad = len(set(non_yield.violating) if non_yield.violating is not None else set(range(n)))
            gt_violations.append(
                {"kind": "non_yield", "start": ped_windows[0], "end": ped_windows[-1] + 4, "track_id": -2}
            )
        enc = (n, bad)
    return ego, enc


def _expected_scores(priors: ScenePriors, lay: _Layout, sidewalk_id, cross_segments, enc) -> dict:
    """Lane component values implied by construction (exact for straight lanes)."""
    T = priors.meta.num_frames
    vehicles = priors.tracks_of("vehicle")
    segs = sum(len(t.boxes) - 1 for t in vehicles)
    if priors.ego_track is not None:
        segs += len(priors.ego_track.boxes) - 1
    crossings = len(cross_segments)
    out: dict[str, Any] = {
        "segments": segs,
        "solid_crossings": crossings,
        "s_solid": 1.0 if segs == 0 else 1.0 - crossings / segs,
        "s_cross": 1.0 if not enc or enc[0] == 0 else 1.0 - enc[1] / enc[0],
        "encounters": enc[0] if enc else 0,
        "violating_encounters": enc[1] if enc else 0,
        "s_center": None,
        "d_norm": None,
    }
    if lay.curved:
        return out
    centers = [lay.lane_center(i, 0.0) for i in range(2 if lay.two_lanes else 1)]
    ratios = []
    ego = priors.ego_track
    if ego is None:
        proxy_x = priors.meta.width / 2.0
    for clip in split_clips(T, 8):
        f = clip.key_frame
        pts = [t.box_at(f).bottom_center for t in vehicles if t.track_id != sidewalk_id and t.box_at(f)]
        pts.append(ego.box_at(f).bottom_center if ego is not None else (proxy_x, float(priors.meta.height)))
        for x, _ in pts:
            ratios.append(min(abs(x - c) for c in centers) / LANE_W)
    d_norm = math.fsum(ratios) / len(ratios)
    out["d_norm"] = d_norm
    out["s_center"] = math.exp(-d_norm)
    return out


def write_scenario(priors: ScenePriors, gt: GroundTruth, out_dir: str | Path) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"{priors.meta.video_id}.json"
    path.write_bytes(serialize(priors))
    truth_path(path).write_text(gt.to_json(), encoding="utf-8")
    return path


def truth_path(annotation_path: str | Path) -> Path:
    p = Path(annotation_path)
    return p.with_name(p.stem + ".truth")


def load_truth(annotation_path: str | Path) -> GroundTruth | None:
    p = truth_path(annotation_path)
    if not p.exists():
        return None
    return GroundTruth.from_json(p.read_text(encoding="utf-8"))


def random_spec(seed: int, violated: bool | None = None, T: int = 48) -> ScenarioSpec:
    """A spec with a seed-chosen layout and (optionally) one or two violations."""
    rng = np.random.default_rng(10_000 + seed)
    layout = LAYOUTS[int(rng.integers(0, len(LAYOUTS)))]
    if violated is None:
        violated = bool(rng.random() < 0.6)
    kinds: list[str] = []
    if violated:
        allowed = [
            k for k in VIOLATION_KINDS
            if not (k == "solid_cross" and layout == "straight") and not (k == "non_yield" and layout != "crosswalk")
        ]
        n = 1 + int(rng.random() < 0.3)
        kinds = [allowed[i] for i in sorted(rng.choice(len(allowed), size=n, replace=False))]
        # the crosswalk layout exists to exercise yielding; favour it there
        if layout == "crosswalk" and "non_yield" not in kinds and rng.random() < 0.5:
            kinds[0] = "non_yield"
    violations = []
    for k in kinds:
        if k == "non_yield":
            enc = int(rng.integers(1, 5))
            bad = tuple(sorted(set(int(i) for i in rng.choice(enc, size=int(rng.integers(1, enc + 1)), replace=False))))
            violations.append(Violation(k, encounters=enc, violating=bad))
        elif k == "off_center_drift":
            violations.append(Violation(k, magnitude=_r(float(rng.uniform(0.2, 0.45)))))
        else:
            violations.append(Violation(k))
    return ScenarioSpec(seed=seed, layout=layout, T=T, violations=tuple(violations))


# --------------------------------------------------------------------------
# structured instruction generation

PRIOR_WEIGHTS = {"high": 3, "medium": 2, "low": 1}

VOCABULARY: dict[str, dict[str, tuple[str, ...]]] = {
    "E": {
        "high": ("urban", "residential", "highway"),
        "medium": ("suburban", "rural"),
        "low": ("mountain", "tunnel", "bridge", "roundabout", "parking lot"),
    },
    "W": {
        "high": ("sunny", "overcast"),
        "medium": ("rainy", "night"),
        "low": ("snowy", "foggy", "heavy rain/snow"),
    },
    "B": {
        "high": ("cruising straight", "lane keeping"),
        "medium": (
            "braking", "overtaking", "merging", "navigating traffic",
            "stop-and-go traffic", "approaching traffic light",
        ),
        "low": ("U-turn", "emergency braking", "exiting highway"),
    },
    "D": {
        "high": ("sparse traffic", "heavy traffic", "parked cars"),
        "medium": (
            "roadwork cones", "temporary barriers", "glare", "strong headlights", "smoke",
            "pedestrians at crosswalk", "bus stopping", "truck blocking lane",
        ),
        "low": ("emergency vehicle", "jaywalker", "cyclist in ego lane", "animal presence", "small obstacle on road"),
    },
}

SURFACE = {
    "E": {
        "urban": "urban street", "residential": "residential street", "highway": "highway",
        "suburban": "suburban road", "rural": "rural road", "mountain": "mountain road",
        "tunnel": "tunnel", "bridge": "bridge", "roundabout": "roundabout", "parking lot": "parking lot",
    },
    "W": {
        "sunny": "sunny skies", "overcast": "overcast skies", "rainy": "steady rain", "night": "a dark night sky",
        "snowy": "falling snow", "foggy": "dense fog", "heavy rain/snow": "heavy rain and snow",
    },
    "B": {
        "cruising straight": "cruises straight", "lane keeping": "keeps its lane", "braking": "brakes",
        "overtaking": "overtakes a slower vehicle", "merging": "merges into traffic",
        "navigating traffic": "navigates through traffic", "stop-and-go traffic": "creeps through stop-and-go traffic",
        "approaching traffic light": "approaches a traffic light", "U-turn": "makes a U-turn",
        "emergency braking": "brakes hard in an emergency", "exiting highway": "exits the highway",
    },
    "D": {
        "sparse traffic": "sparse traffic", "heavy traffic": "heavy traffic", "parked cars": "parked cars",
        "roadwork cones": "roadwork cones", "temporary barriers": "temporary barriers", "glare": "sun glare",
        "strong headlights": "strong oncoming headlights", "smoke": "drifting smoke",
        "pedestrians at crosswalk": "pedestrians at a crosswalk", "bus stopping": "a bus stopping",
        "truck blocking lane": "a truck blocking the lane", "emergency vehicle": "an emergency vehicle",
        "jaywalker": "a jaywalker", "cyclist in ego lane": "a cyclist in the ego lane",
        "animal presence": "an animal near the road", "small obstacle on road": "a small obstacle on the road",
    },
}

TEMPLATES = (
    "In the driver’s front–camera view of a {E} under {W}, the ego vehicle {B} while the scene shows {D}.",
    "Under {W} in a {E} scene, the ego car {B} as {D} unfolds.",
    "{D} occurs in a {E} setting; with {W} conditions, the ego vehicle {B}.",
)

# factor pairs that cannot co-occur physically or legally
CONFLICTS = frozenset(
    {
        frozenset({("W", "night"), ("D", "glare")}),
        frozenset({("E", "parking lot"), ("B", "exiting highway")}),
        frozenset({("E", "parking lot"), ("B", "overtaking")}),
        frozenset({("E", "parking lot"), ("B", "merging")}),
        frozenset({("E", "residential"), ("B", "exiting highway")}),
        frozenset({("E", "highway"), ("B", "U-turn")}),
        frozenset({("E", "tunnel"), ("B", "U-turn")}),
        frozenset({("E", "bridge"), ("B", "U-turn")}),
        frozenset({("E", "highway"), ("D", "pedestrians at crosswalk")}),
        frozenset({("E", "tunnel"), ("D", "glare")}),
        frozenset({("D", "sparse traffic"), ("B", "stop-and-go traffic")}),
    }
)


@dataclass(frozen=True)
class Instruction:
    text: str
    E: str
    W: str
    B: str
    D: str
    template: int


def factor_distribution(factor: str) -> tuple[list[str], np.ndarray]:
    values, weights = [], []
    for level, items in VOCABULARY[factor].items():
        for item in items:
            values.append(item)
            weights.append(PRIOR_WEIGHTS[level])
    w = np.asarray(weights, dtype=float)
    return values, w / w.sum()


def is_conflicting(factors: dict[str, str]) -> bool:
    items = list(factors.items())
    for i in range(len(items)):
        for j in range(i + 1, len(items)):
            if frozenset({items[i], items[j]}) in CONFLICTS:
                return True
    return False


def _with_article(text: str) -> str:
    return re.sub(r"\ba ([aeiouAEIOU])", r"an \1", text)


def fill_template(index: int, factors: dict[str, str], surface: bool = True) -> str:
    slots = {k: (SURFACE[k][v] if surface else v) for k, v in factors.items()}
    text = TEMPLATES[index].format(**slots)
    if surface:
        text = _with_article(text)
    return text[0].upper() + text[1:]


def _normalize(text: str) -> str:
    return " ".join(re.sub(r"[^\w\s]", " ", text.lower()).split())


def gen_instructions(
    n: int, seed: int = 0, surface: bool = True, dedupe: bool = True, max_tries: int | None = None
) -> list[Instruction]:
    """Sample ``n`` structured instructions from the factor vocabularies.

    Conflicting factor combinations are rejected; with ``dedupe`` so are
    instructions whose normalized text was already produced.
    """
    if n < 1:
        raise SpecError("n must be at least 1")
    rng = np.random.default_rng(seed)
    dists = {k: factor_distribution(k) for k in "EWBD"}
    out: list[Instruction] = []
    seen: set[str] = set()
    tries = 0
    limit = max_tries if max_tries is not None else 200 * n
    while len(out) < n:
        tries += 1
        if tries > limit:
            raise SpecError(f"could only produce {len(out)} of {n} distinct instructions")
        factors = {}
        for k in "EWBD":
            values, p = dists[k]
            factors[k] = values[int(rng.choice(len(values), p=p))]
        template = int(rng.integers(0, len(TEMPLATES)))
        if is_conflicting(factors):
            continue
        text = fill_template(template, factors, surface)
        key = _normalize(text)
        if dedupe and key in seen:
            continue
        seen.add(key)
        out.append(Instruction(text, factors["E"], factors["W"], factors["B"], factors["D"], template))
    return out
