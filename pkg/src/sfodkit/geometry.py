"""Oriented-box geometry: corner extraction, horizontal conversion, rotated IoU, rotated NMS."""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass

import numpy as np

HALF_PI = math.pi / 2.0


def normalize_angle(theta: float) -> float:
    """Wrap an angle to [-pi/2, pi/2); a rectangle is invariant under theta -> theta + pi."""
    t = math.remainder(theta, math.pi)
    if t >= HALF_PI:
        t -= math.pi
    return t


@dataclass(frozen=True)
class OrientedBox:
    """Rotated rectangle {cx, cy, w, h, theta}, theta in radians.

    theta is the rotation of the box's local x-axis (the w edge) from the
    image x-axis and is normalized to [-pi/2, pi/2) on construction.
    """

    cx: float
    cy: float
    w: float
    h: float
    theta: float = 0.0

    def __post_init__(self):
        if not (self.w > 0.0 and self.h > 0.0):
            raise ValueError(f"box sides must be positive, got w={self.w}, h={self.h}")
        object.__setattr__(self, "theta", normalize_angle(float(self.theta)))

    @property
    def area(self) -> float:
        return self.w * self.h


@dataclass(frozen=True)
class HorizontalBox:
    """Axis-aligned rectangle {cx, cy, w, h}."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0.0 and self.h > 0.0):
            raise ValueError(f"box sides must be positive, got w={self.w}, h={self.h}")

    @property
    def x0(self) -> float:
        return self.cx - self.w / 2.0

    @property
    def x1(self) -> float:
        return self.cx + self.w / 2.0

    @property
    def y0(self) -> float:
        return self.cy - self.h / 2.0

    @property
    def y1(self) -> float:
        return self.cy + self.h / 2.0


class Detection:
    """A candidate object: oriented box plus a per-class score vector in [0,1]."""

    __slots__ = ("box", "scores")

    def __init__(self, box: OrientedBox, scores):
        scores = np.asarray(scores, dtype=np.float64)
        if scores.ndim != 1 or scores.size == 0:
            raise ValueError("scores must be a nonempty 1-D vector")
        if scores.min() < -1e-9 or scores.max() > 1.0 + 1e-9:
            raise ValueError("scores must lie in [0,1]")
        self.box = box
        self.scores = scores

    @property
    def top_class(self) -> int:
        return int(np.argmax(self.scores))

    @property
    def top_score(self) -> float:
        return float(self.scores[self.top_class])

    def __repr__(self):
        return f"Detection(box={self.box}, top={self.top_class}:{self.top_score:.3f})"


def corners(box: OrientedBox) -> np.ndarray:
    """Counterclockwise corner points (4,2), starting at the (-w/2,-h/2) local corner."""
    c, s = math.cos(box.theta), math.sin(box.theta)
    hw, hh = box.w / 2.0, box.h / 2.0
    local = np.array([[-hw, -hh], [hw, -hh], [hw, hh], [-hw, hh]])
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.array([box.cx, box.cy])


def to_horizontal(box: OrientedBox) -> HorizontalBox:
    """Tight axis-aligned bounding box: w' = w|cos t| + h|sin t|, h' = w|sin t| + h|cos t|."""
    ac, asn = abs(math.cos(box.theta)), abs(math.sin(box.theta))
    return HorizontalBox(box.cx, box.cy, box.w * ac + box.h * asn, box.w * asn + box.h * ac)


def _polygon_area(pts) -> float:
    """Shoelace area of a polygon given as a sequence of (x,y)."""
    n = len(pts)
    if n < 3:
        return 0.0
    acc = 0.0
    for i in range(n):
        x0, y0 = pts[i]
        x1, y1 = pts[(i + 1) % n]
        acc += x0 * y1 - x1 * y0
    return abs(acc) / 2.0

def _clip_polygon(subject, clip, eps: float):
    """Sutherland-Hodgman clip of polygon `subject` by convex CCW polygon `clip`.

    Points within eps of a clip edge count as inside, so clipping a polygon
    against itself returns it unchanged.
    """
    output = list(subject)
    cx1, cy1 = clip[-1]
    for cx2, cy2 in clip:
        if not output:
            return []
        ex, ey = cx2 - cx1, cy2 - cy1
        inp = output
        output = []
        sx, sy = inp[-1]
        s_in = ex * (sy - cy1) - ey * (sx - cx1) >= -eps
        for px, py in inp:
            p_in = ex * (py - cy1) - ey * (px - cx1) >= -eps
            if p_in != s_in:
                dcx, dcy = cx1 - cx2, cy1 - cy2
                dpx, dpy = sx - px, sy - py
                n1 = cx1 * cy2 - cy1 * cx2
                n2 = sx * py - sy * px
                den = dcx * dpy - dcy * dpx
                output.append(((n1 * dpx - n2 * dcx) / den, (n1 * dpy - n2 * dcy) / den))
            if p_in:
                output.append((px, py))
            sx, sy, s_in = px, py, p_in
        cx1, cy1 = cx2, cy2
    return output


def rotated_iou(a: OrientedBox, b: OrientedBox) -> float:
    """Intersection-over-union of two oriented boxes via exact convex polygon clipping."""
    pa = [tuple(p) for p in corners(a)]
    pb = [tuple(p) for p in corners(b)]
    scale = max(1.0, max(abs(v) for pt in pa + pb for v in pt))
    eps = 1e-12 * scale * scale
    inter_poly = _clip_polygon(pa, pb, eps)
    inter = _polygon_area(inter_poly)
    if inter <= eps:
        return 0.0
    area_a = _polygon_area(pa)
    area_b = _polygon_area(pb)
    union = area_a + area_b - inter
    if union <= 0.0:
        return 0.0
    return min(inter / union, 1.0)


def nms_rotated(dets: list[Detection], iou_thr: float = 0.1) -> list[Detection]:
    """Class-wise greedy NMS over oriented boxes.

    Detections are grouped by their argmax class; within each group they are
    visited in descending order of that class's score (ties by lower input
    index) and a box is suppressed if its rotated IoU with any kept box of the
    group exceeds iou_thr. Output is sorted by descending max score, ties by
    lower input index.
    """
    if not (0.0 < iou_thr <= 1.0):
        raise ValueError(f"iou_thr must be in (0,1], got {iou_thr}")
    if not dets:
        return []
    by_class: dict[int, list[int]] = defaultdict(list)
    for i, det in enumerate(dets):
        by_class[det.top_class].append(i)
    keep: list[int] = []
    for cls, idxs in by_class.items():
        order = sorted(idxs, key=lambda i: (-float(dets[i].scores[cls]), i))
        kept_cls: list[int] = []
        for i in order:
            if all(rotated_iou(dets[i].box, dets[j].box) <= iou_thr for j in kept_cls):
                kept_cls.append(i)
        keep.extend(kept_cls)
    keep.sort(key=lambda i: (-dets[i].top_score, i))
    return [dets[i] for i in keep]


def clip_to_image(box: HorizontalBox, width: float, height: float) -> HorizontalBox | None:
    """Intersect an axis-aligned box with [0,width] x [0,height]; None if empty."""
    x0 = max(0.0, box.x0)
    y0 = max(0.0, box.y0)
    x1 = min(float(width), box.x1)
    y1 = min(float(height), box.y1)
    if x1 <= x0 or y1 <= y0:
        return None
    return HorizontalBox((x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0)
