"""Lane geometry: polygon rasterization, skeleton centerlines, lane width, boundaries.

Grids are boolean numpy arrays indexed ``[row, col]``. Cell ``(r, c)`` of a grid
whose top-left cell sits at pixel ``(x0, y0)`` has its center at
``(x0 + c + 0.5, y0 + r + 0.5)``; every polyline returned here is expressed in
those pixel coordinates.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np

from .errors import DegenerateLane, GeometryError
from .scene import LaneBoundary, MaskInstance, Point, ScenePriors

Polyline = tuple[Point, ...]


@dataclass(frozen=True)
class LaneGeometry:
    frame: int
    centerlines: tuple[Polyline, ...]
    boundaries: tuple[tuple[Polyline, str], ...]
    lane_width_px: float
    px_per_meter: float
    derived_boundaries: bool = False


# --------------------------------------------------------------------------
# rasterization


def rasterize_region(polygon: Sequence[Point], x0: int, y0: int, width: int, height: int) -> np.ndarray:
    """Even-odd fill of ``polygon`` on a ``height x width`` grid anchored at ``(x0, y0)``.

    A cell is set iff its center is inside. Scanline crossings use the
    half-open rule ``min(y_i, y_j) <= y < max(y_i, y_j)``.
    """
    if len(polygon) < 3:
        raise GeometryError("polygon", "need at least 3 vertices")
    pts = np.asarray(polygon, dtype=float)
    grid = np.zeros((height, width), dtype=bool)
    if width <= 0 or height <= 0:
        return grid
    xa, ya = pts[:, 0], pts[:, 1]
    xb, yb = np.roll(xa, -1), np.roll(ya, -1)
    ylo, yhi = np.minimum(ya, yb), np.maximum(ya, yb)
    r_first = max(0, int(math.floor(ylo.min() - y0 - 0.5)))
    r_last = min(height - 1, int(math.ceil(yhi.max() - y0 - 0.5)))
    for r in range(r_first, r_last + 1):
        yc = y0 + r + 0.5
        active = (ylo <= yc) & (yc < yhi)
        if not active.any():
            continue
        t = (yc - ya[active]) / (yb[active] - ya[active])
        xs = np.sort(xa[active] + t * (xb[active] - xa[active]))
        for left, right in zip(xs[0::2], xs[1::2]):
            # cell centers with left <= x0 + c + 0.5 < right
            c0 = max(0, int(math.ceil(left - x0 - 0.5)))
            c1 = min(width - 1, int(math.ceil(right - x0 - 0.5)) - 1)
            if c1 >= c0:
                grid[r, c0 : c1 + 1] ^= True
    return grid


def rasterize_polygon(polygon: Sequence[Point], width: int, height: int) -> np.ndarray:
    """Binary image-sized grid of the cells whose centers lie inside ``polygon``."""
    return rasterize_region(polygon, 0, 0, width, height)


# --------------------------------------------------------------------------
# skeletonization


def _neighbours(img: np.ndarray):
    p = np.pad(img, 1).astype(np.uint8)
    # P2..P9 clockwise starting north
    return (
        p[:-2, 1:-1], p[:-2, 2:], p[1:-1, 2:], p[2:, 2:],
        p[2:, 1:-1], p[2:, :-2], p[1:-1, :-2], p[:-2, :-2],
    )


def thin(grid: np.ndarray) -> np.ndarray:
    """Two-subiteration neighbourhood thinning (Zhang and Suen) to a 1-px skeleton."""
    img = np.asarray(grid, dtype=bool).copy()
    while True:
        changed = False
        for step in (0, 1):
            n = _neighbours(img)
            b = sum(x.astype(np.int16) for x in n)
            seq = n + (n[0],)
            a = sum(((seq[i] == 0) & (seq[i + 1] == 1)).astype(np.int16) for i in range(8))
            p2, p3, p4, p5, p6, p7, p8, p9 = n
            if step == 0:
                c1 = (p2 * p4 * p6) == 0
                c2 = (p4 * p6 * p8) == 0
            else:
                c1 = (p2 * p4 * p8) == 0
                c2 = (p2 * p6 * p8) == 0
            remove = img & (b >= 2) & (b <= 6) & (a == 1) & c1 & c2
            if remove.any():
                img &= ~remove
                changed = True
        if not changed:
            return img


_OFFSETS = ((-1, 0), (0, 1), (1, 0), (0, -1), (-1, 1), (1, 1), (1, -1), (-1, -1))


def trace_paths(skeleton: np.ndarray) -> list[list[tuple[int, int]]]:
    """Split an 8-connected skeleton into simple paths between endpoints/junctions.

    Returns lists of ``(row, col)`` cells. Isolated loops come back as one
    closed path starting at their smallest cell.
    """
    cells = set(zip(*np.nonzero(skeleton)))
    cells = {(int(r), int(c)) for r, c in cells}

    def nbrs(cell):
        r, c = cell
        return [(r + dr, c + dc) for dr, dc in _OFFSETS if (r + dr, c + dc) in cells]

    degree = {cell: len(nbrs(cell)) for cell in cells}
    nodes = {cell for cell, d in degree.items() if d != 2}
    visited_edges: set[frozenset] = set()
    paths: list[list[tuple[int, int]]] = []

    def walk(start, nxt):
        path = [start, nxt]
        visited_edges.add(frozenset((start, nxt)))
        prev, cur = start, nxt
        while cur not in nodes:
            options = [n for n in nbrs(cur) if n != prev and frozenset((cur, n)) not in visited_edges]
            if not options:
                break
            # prefer 4-connected continuation for stable traces
            options.sort(key=lambda n: (abs(n[0] - cur[0]) + abs(n[1] - cur[1]), n))
            prev, cur = cur, options[0]
            visited_edges.add(frozenset((prev, cur)))
            path.append(cur)
            if cur == start:
                break
        return path

    for node in sorted(nodes):
        for n in sorted(nbrs(node)):
            if frozenset((node, n)) not in visited_edges:
                paths.append(walk(node, n))
    # remaining pure cycles
    for cell in sorted(cells):
        if degree[cell] == 0:
            paths.append([cell])
            continue
        for n in sorted(nbrs(cell)):
            if frozenset((cell, n)) not in visited_edges:
                paths.append(walk(cell, n))
    return paths


def simplify(points: Sequence[Point], eps: float) -> list[Point]:
    """Recursive farthest-point (Ramer-Douglas-Peucker) simplification."""
    pts = [tuple(map(float, p)) for p in points]
    if len(pts) < 3:
        return pts
    keep = [False] * len(pts)
    keep[0] = keep[-1] = True
    stack = [(0, len(pts) - 1)]
    while stack:
        first, last = stack.pop()
        best, index = -1.0, -1
        for i in range(first + 1, last):
            d = point_segment_distance(pts[i], pts[first], pts[last])
            if d > best:
                best, index = d, i
        if index >= 0 and best > eps:
            keep[index] = True
            stack.append((first, index))
            stack.append((index, last))
    return [p for p, k in zip(pts, keep) if k]


def point_segment_distance(p: Point, a: Point, b: Point) -> float:
    dx, dy = b[0] - a[0], b[1] - a[1]
    seg2 = dx * dx + dy * dy
    if seg2 == 0.0:
        return math.hypot(p[0] - a[0], p[1] - a[1])
    t = ((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / seg2
    t = min(1.0, max(0.0, t))
    return math.hypot(p[0] - (a[0] + t * dx), p[1] - (a[1] + t * dy))


def point_polyline_distance(p: Point, line: Sequence[Point]) -> float:
    if len(line) == 1:
        return math.hypot(p[0] - line[0][0], p[1] - line[0][1])
    return min(point_segment_distance(p, line[i], line[i + 1]) for i in range(len(line) - 1))


def _crop(grid: np.ndarray):
    rows = np.flatnonzero(grid.any(axis=1))
    cols = np.flatnonzero(grid.any(axis=0))
    r0, r1, c0, c1 = rows[0], rows[-1] + 1, cols[0], cols[-1] + 1
    return grid[r0:r1, c0:c1], int(r0), int(c0)


def extract_centerline(
    mask_grid: np.ndarray, eps: float = 2.0, origin: tuple[float, float] = (0.0, 0.0)
) -> list[Polyline]:
    """Skeletonize a binary lane mask and return simplified centerline polylines."""
    grid = np.asarray(mask_grid, dtype=bool)
    if not grid.any():
        return []
    sub, r0, c0 = _crop(grid)
    skel = thin(sub)
    ox, oy = origin
    lines = []
    for path in trace_paths(skel):
        pts = [(ox + c0 + c + 0.5, oy + r0 + r + 0.5) for r, c in path]
        if len(pts) == 1:
            pts = pts * 2
        lines.append(tuple(simplify(pts, eps)))
    return lines


# --------------------------------------------------------------------------
# lane width


def _perpendicular_extent(grid: np.ndarray, cx: float, cy: float, nx: float, ny: float) -> int:
    """Cells covered walking from a cell-center coordinate along +/- the unit normal."""
    h, w = grid.shape

    def inside(s: int) -> bool:
        c = int(math.floor(cx + s * nx))
        r = int(math.floor(cy + s * ny))
        return 0 <= r < h and 0 <= c < w and bool(grid[r, c])

    if not inside(0):
        return 0
    up = 0
    while inside(up + 1):
        up += 1
    down = 0
    while inside(-(down + 1)):
        down += 1
    return up + down + 1


def lane_width_samples(grid: np.ndarray, centerlines: Sequence[Polyline]) -> list[int]:
    """Perpendicular extents at unit-spaced samples along grid-coordinate centerlines."""
    samples = []
    for line in centerlines:
        for (ax, ay), (bx, by) in zip(line, line[1:]):
            length = math.hypot(bx - ax, by - ay)
            if length == 0.0:
                continue
            nx, ny = -(by - ay) / length, (bx - ax) / length
            steps = max(1, int(math.floor(length)))
            for k in range(steps):
                t = k / steps
                extent = _perpendicular_extent(grid, ax + t * (bx - ax), ay + t * (by - ay), nx, ny)
                if extent:
                    samples.append(extent)
    return samples


def estimate_lane_width(ego_lane_grid: np.ndarray, eps: float = 2.0) -> float:
    """Median perpendicular extent of a lane mask around its own centerline."""
    grid = np.asarray(ego_lane_grid, dtype=bool)
    if int(grid.sum()) < 10:
        raise DegenerateLane(f"lane mask has {int(grid.sum())} cells; need at least 10")
    lines = extract_centerline(grid, eps)
    samples = lane_width_samples(grid, lines)
    if not samples:
        raise DegenerateLane("no perpendicular samples along the lane centerline")
    return float(np.median(samples))


# --------------------------------------------------------------------------
# boundaries


def _order_points(points: np.ndarray) -> np.ndarray:
    center = points.mean(axis=0)
    centered = points - center
    if len(points) > 1:
        _, _, vt = np.linalg.svd(centered, full_matrices=False)
        axis = vt[0]
    else:
        axis = np.array([1.0, 0.0])
    order = np.lexsort((points[:, 1], points[:, 0], centered @ axis))
    return points[order]


def shared_edge(ego: np.ndarray, other: np.ndarray, x0: float = 0.0, y0: float = 0.0, eps: float = 2.0):
    """Polyline through midpoints of 4-adjacent (ego, other) cell pairs, or None."""
    mids = []
    for dr, dc in ((0, 1), (1, 0)):
        h, w = ego.shape
        a = ego[: h - dr, : w - dc]
        b = other[dr:, dc:]
        for aa, bb in ((a, b), (other[: h - dr, : w - dc], ego[dr:, dc:])):
            rr, cc = np.nonzero(aa & bb)
            for r, c in zip(rr, cc):
                mids.append((x0 + c + 0.5 + dc / 2.0, y0 + r + 0.5 + dr / 2.0))
    if not mids:
        return None
    pts = np.unique(np.asarray(mids), axis=0)
    ordered = _order_points(pts)
    return tuple(simplify([tuple(p) for p in ordered], eps))


def derive_boundaries(
    masks: Sequence[MaskInstance],
    declared: Sequence[LaneBoundary],
    frame: int,
    width: int,
    height: int,
    eps: float = 2.0,
) -> list[tuple[Polyline, str]]:
    """Declared boundaries verbatim; otherwise solid shared edges of ego/other lanes."""
    out = []
    for b in declared:
        line = b.polyline_at(frame)
        if line is not None:
            out.append((tuple(line), b.style))
    if declared:
        return out
    egos = [m.polygon_at(frame) for m in masks if m.cls == "ego_lane"]
    others = [m.polygon_at(frame) for m in masks if m.cls == "other_lane"]
    x0, y0, w, h = canvas(width, height)
    for ego in egos:
        if ego is None:
            continue
        eg = _raster_cached(tuple(ego), x0, y0, w, h)
        for other in others:
            if other is None:
                continue
            og = _raster_cached(tuple(other), x0, y0, w, h)
            line = shared_edge(eg, og, x0, y0, eps)
            if line is not None:
                out.append((line, "solid"))
    return out


# --------------------------------------------------------------------------
# per-frame geometry from priors


def canvas(width: int, height: int) -> tuple[int, int, int, int]:
    """Extended canvas covering the allowed overshoot band around the image."""
    x0 = -int(math.ceil(0.5 * width))
    y0 = -int(math.ceil(0.5 * height))
    return x0, y0, width - 2 * x0, height - 2 * y0


@lru_cache(maxsize=4096)
def _raster_cached(polygon: tuple, x0: int, y0: int, w: int, h: int) -> np.ndarray:
    grid = rasterize_region(polygon, x0, y0, w, h)
    grid.setflags(write=False)
    return grid


@lru_cache(maxsize=4096)
def _lane_lines_cached(polygon: tuple, x0: int, y0: int, w: int, h: int, eps: float):
    grid = _raster_cached(polygon, x0, y0, w, h)
    if not grid.any():
        return (), None
    sub, r0, c0 = _crop(grid)
    lines_local = extract_centerline(sub, eps)
    width = None
    if int(sub.sum()) >= 10:
        samples = lane_width_samples(sub, [tuple((x, y) for x, y in ln) for ln in lines_local])
        if samples:
            width = float(np.median(samples))
    lines = tuple(tuple((x0 + c0 + x, y0 + r0 + y) for x, y in ln) for ln in lines_local)
    return lines, width


def lane_geometry(priors: ScenePriors, frame: int, cfg) -> LaneGeometry | None:
    """Centerlines, boundaries and width for one frame; None without usable lane masks.

    Lane masks are rasterized on the extended canvas so polygons that overshoot
    the image keep their skeleton ends off-screen.
    """
    meta = priors.meta
    eps = float(cfg["lane.simplify_eps"])
    x0, y0, w, h = canvas(meta.width, meta.height)
    centerlines: list[Polyline] = []
    ego_width = None
    other_width = None
    for mask in priors.masks:
        if mask.cls not in ("ego_lane", "other_lane"):
            continue
        poly = mask.polygon_at(frame)
        if poly is None:
            continue
        lines, width = _lane_lines_cached(tuple(poly), x0, y0, w, h, eps)
        centerlines.extend(lines)
        if width is not None:
            if mask.cls == "ego_lane" and ego_width is None:
                ego_width = width
            elif mask.cls == "other_lane" and other_width is None:
                other_width = width
    lane_width = ego_width if ego_width is not None else other_width
    if not centerlines or lane_width is None:
        return None
    boundaries = derive_boundaries(priors.masks, priors.boundaries, frame, meta.width, meta.height, eps)
    return LaneGeometry(
        frame=frame,
        centerlines=tuple(centerlines),
        boundaries=tuple(boundaries),
        lane_width_px=lane_width,
        px_per_meter=lane_width / float(cfg["lane.nominal_width_m"]),
        derived_boundaries=not priors.boundaries,
    )


def point_in_polygon(p: Point, polygon: Sequence[Point], closed: bool = True) -> bool:
    """Even-odd containment; with ``closed`` the boundary counts as inside."""
    x, y = p
    n = len(polygon)
    if closed:
        for i in range(n):
            a, b = polygon[i], polygon[(i + 1) % n]
            if point_segment_distance(p, a, b) <= 1e-9:
                return True
    inside = False
    for i in range(n):
        (xa, ya), (xb, yb) = polygon[i], polygon[(i + 1) % n]
        if (ya <= y < yb) or (yb <= y < ya):
            xc = xa + (y - ya) * (xb - xa) / (yb - ya)
            if x < xc:
                inside = not inside
    return inside


def segments_intersect(p1: Point, p2: Point, q1: Point, q2: Point) -> bool:
    from .scene import _segments_cross

    return _segments_cross(p1, p2, q1, q2)


def polyline_length(line: Sequence[Point]) -> float:
    return sum(math.hypot(b[0] - a[0], b[1] - a[1]) for a, b in zip(line, line[1:]))
