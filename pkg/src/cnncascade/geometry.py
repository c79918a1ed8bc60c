"""Axis-aligned rectangles as (x, y, w, h) tuples."""

from __future__ import annotations


def area(r) -> float:
    return max(r[2], 0) * max(r[3], 0)


def intersection(a, b) -> float:
    iw = min(a[0] + a[2], b[0] + b[2]) - max(a[0], b[0])
    ih = min(a[1] + a[3], b[1] + b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    return iw * ih


def iou_rect(a, b) -> float:
    inter = intersection(a, b)
    if inter == 0:
        return 0.0
    union = area(a) + area(b) - inter
    return inter / union if union > 0 else 0.0


def scale_about_center(r, factor: float):
    x, y, w, h = r
    cx, cy = x + w / 2, y + h / 2
    nw, nh = w * factor, h * factor
    return (cx - nw / 2, cy - nh / 2, nw, nh)


def contains(outer, inner) -> bool:
    return (inner[0] >= outer[0] and inner[1] >= outer[1]
            and inner[0] + inner[2] <= outer[0] + outer[2]
            and inner[1] + inner[3] <= outer[1] + outer[3])
