import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adgve.clips import ClipRange
from adgve.errors import GeometryError
from adgve.render import (
    RasterImage,
    clip_box,
    crop_roi,
    crop_roi_detail,
    draw_polyline,
    expand_box,
    fade_permille,
    render_clip_pair,
    render_keyframe_triplet,
    stroke_mask,
    sub_clips,
)
from adgve.scene import parse_annotation
from conftest import doc_bytes, minimal_doc


def _priors(tracks, num_frames=1, masks=()):
    return parse_annotation(doc_bytes(minimal_doc(tracks=tracks, num_frames=num_frames, masks=list(masks))))


def _track(tid, boxes, cls="vehicle"):
    return {"track_id": tid, "class": cls, "boxes": [{"frame": f, "x": x, "y": y, "w": w, "h": h} for f, x, y, w, h in boxes]}


# --------------------------------------------------------------------------
# key-frame triplet


def test_triplet_without_priors_is_raw():
    raw, boxed, masked = render_keyframe_triplet(_priors([]), 0)
    assert boxed == raw and masked == raw


def test_triplet_with_supplied_frame():
    rng = np.random.default_rng(0)
    frame = RasterImage(100, 80, rng.integers(0, 256, (80, 100, 3), dtype=np.uint8))
    raw, boxed, masked = render_keyframe_triplet(_priors([]), 0, raw=frame)
    assert raw == frame and boxed == frame and masked == frame


def test_box_changes_only_its_border(catalog):
    priors = _priors([_track(1, [(0, 10, 10, 20, 20)])])
    raw, boxed, masked = render_keyframe_triplet(priors, 0, catalog=catalog)
    assert tuple(raw.pixels[0, 0]) != catalog.colors["vehicle"]
    changed = (boxed.pixels != raw.pixels).any(axis=2)
    expected = np.zeros((80, 100), dtype=bool)
    expected[10:30, 10:30] = True
    expected[12:28, 12:28] = False
    np.testing.assert_array_equal(changed, expected)
    assert masked == raw


def test_mask_fill_blends_at_forty_percent(catalog):
    poly = [[0, 0], [40, 0], [40, 40], [0, 40]]
    masks = [{"instance_id": 1, "class": "sidewalk", "frames": [{"frame": 0, "polygon": poly}]}]
    raw, _, masked = render_keyframe_triplet(_priors([], masks=masks), 0, catalog=catalog)
    color = np.asarray(catalog.colors["sidewalk"], dtype=int)
    inside = raw.pixels[20, 20].astype(int)
    expected = (inside * 600 + color * 400 + 500) // 1000
    np.testing.assert_array_equal(masked.pixels[20, 20], expected)
    np.testing.assert_array_equal(masked.pixels[70, 90], raw.pixels[70, 90])


# --------------------------------------------------------------------------
# ROI crops


def test_expand_and_clip_examples():
    assert expand_box((10, 10, 20, 20), 0.25) == (5.0, 5.0, 30.0, 30.0)
    assert clip_box(expand_box((0, 0, 10, 10), 0.25), 100, 100) == (0.0, 0.0, 12.5, 12.5)


def test_square_crop_into_wide_target_has_equal_bars():
    frame = RasterImage.blank(100, 100, (255, 255, 255))
    crop = crop_roi_detail(frame, (20, 20, 40, 40), 0.0, (200, 100))
    img = crop.image
    assert (img.width, img.height) == (200, 100)
    lit = np.flatnonzero(img.pixels.any(axis=2).any(axis=0))
    left, right = lit[0], 200 - 1 - lit[-1]
    assert abs(left - right) <= 1 and left == 50
    assert img.pixels[:, lit[0] : lit[-1] + 1].min() == 255


def test_crop_samples_the_right_region():
    frame = RasterImage.blank(64, 64)
    frame.pixels[:, :, 0] = np.arange(64, dtype=np.uint8)[None, :]
    frame.pixels[:, :, 1] = np.arange(64, dtype=np.uint8)[:, None]
    img = crop_roi(frame, (16, 8, 16, 16), 0.0, (32, 32))
    # 2x nearest-neighbour upsampling of columns 16..31 and rows 8..23
    np.testing.assert_array_equal(img.pixels[0, ::2, 0], np.arange(16, 32))
    np.testing.assert_array_equal(img.pixels[::2, 0, 1], np.arange(8, 24))


def test_empty_roi_raises():
    frame = RasterImage.blank(50, 50)
    with pytest.raises(GeometryError):
        crop_roi(frame, (60, 60, 10, 10))
    with pytest.raises(GeometryError):
        crop_roi(frame, (10, 10, 5, 5), -0.1)


@settings(max_examples=150, deadline=None)
@given(
    st.floats(-20, 90), st.floats(-20, 70), st.floats(1, 60), st.floats(1, 60),
    st.floats(0, 1), st.integers(8, 120), st.integers(8, 120),
)
def test_crop_preserves_aspect(x, y, w, h, margin, tw, th):
    frame = RasterImage.blank(100, 80, (9, 9, 9))
    box = (x, y, w, h)
    cx, cy, cw, ch = clip_box(expand_box(box, margin), 100, 80)
    if cw <= 0 or ch <= 0:
        with pytest.raises(GeometryError):
            crop_roi_detail(frame, box, margin, (tw, th))
        return
    crop = crop_roi_detail(frame, box, margin, (tw, th))
    x0, y0, x1, y1 = crop.region
    rw, rh = x1 - x0, y1 - y0
    assert crop.scale == min(tw / rw, th / rh)
    assert (crop.image.width, crop.image.height) == (tw, th)
    nw = min(tw, max(1, round(rw * crop.scale)))
    nh = min(th, max(1, round(rh * crop.scale)))
    ox, oy = crop.offset
    assert ox == (tw - nw) // 2 and oy == (th - nh) // 2
    lit = crop.image.pixels.any(axis=2)
    assert lit.sum() == nw * nh


# --------------------------------------------------------------------------
# clip pairs


def test_single_frame_track_is_a_dot(catalog):
    priors = _priors([_track(1, [(3, 40, 20, 10, 20)])], num_frames=6)
    raws, overs = render_clip_pair(priors, [3, 4, 5], catalog=catalog)
    for raw, over in zip(raws, overs):
        changed = (over.pixels != raw.pixels).any(axis=2)
        ys, xs = np.nonzero(changed)
        # bottom center (45, 40) -> 3x3 block around pixel (45, 40)
        assert set(zip(xs.tolist(), ys.tolist())) == {(45 + dx, 40 + dy) for dx in (-1, 0, 1) for dy in (-1, 0, 1)}


def test_straight_track_polyline_is_collinear(catalog):
    boxes = [(f, 10 + 3 * f, 10 + 2 * f, 8, 8) for f in range(12)]
    priors = _priors([_track(1, boxes)], num_frames=12)
    raws, overs = render_clip_pair(priors, [11], catalog=catalog)
    changed = (overs[0].pixels != raws[0].pixels).any(axis=2)
    ys, xs = np.nonzero(changed)
    assert len(xs) > 20
    # bottom centers lie on (14 + 3f, 18 + 2f); pixel centers must be within 1 px of that line
    px, py = xs + 0.5, ys + 0.5
    dist = np.abs(2 * (px - 14) - 3 * (py - 18)) / math.hypot(2, 3)
    assert dist.max() <= 1.0


def test_fade_endpoints():
    assert fade_permille(0, 16) == 1000
    assert fade_permille(15, 16) == 200
    assert all(fade_permille(a, 16) >= fade_permille(a + 1, 16) for a in range(15))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(-200, 300), st.floats(-200, 300)), min_size=2, max_size=6))
def test_polylines_stay_in_bounds(points):
    img = RasterImage.blank(40, 30)
    draw_polyline(img, points, (255, 0, 0))
    assert img.pixels.shape == (30, 40, 3)


@settings(max_examples=100, deadline=None)
@given(st.floats(-50, 80), st.floats(-50, 80), st.floats(0.5, 80), st.floats(0.5, 80))
def test_stroke_mask_in_bounds(x, y, w, h):
    mask = stroke_mask((x, y, w, h), 40, 30)
    assert mask.shape == (30, 40)
    full = np.zeros_like(mask)
    full[max(0, math.floor(y)) : max(0, min(30, math.ceil(y + h))), max(0, math.floor(x)) : max(0, min(40, math.ceil(x + w)))] = True
    assert not (mask & ~full).any()


def test_ppm_roundtrip():
    rng = np.random.default_rng(1)
    img = RasterImage(7, 5, rng.integers(0, 256, (5, 7, 3), dtype=np.uint8))
    data = img.to_ppm()
    assert data.startswith(b"P6\n7 5\n255\n") and len(data) == len(b"P6\n7 5\n255\n") + 105
    assert RasterImage.from_ppm(data) == img


# --------------------------------------------------------------------------
# sub-clips


def test_sub_clip_examples():
    assert sub_clips(ClipRange(0, 0, 10, 5)) == [[0, 2, 4, 6, 8], [0, 1, 2, 3, 4], [5, 6, 7, 8, 9]]
    assert sub_clips(ClipRange(0, 0, 2, 1)) == [[0, 1]]


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 500), st.integers(2, 60))
def test_sub_clips_within_parent(start, length):
    clip = ClipRange(0, start, start + length, start)
    parts = sub_clips(clip)
    frames = set(clip.frames())
    assert all(set(p) <= frames and p == sorted(p) and p for p in parts)
    assert len(parts) == (1 if length < 4 else 3)
