"""Grayscale conversion, image pyramids and floor-ceiling strip packing."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

LUMA = (0.299, 0.587, 0.114)


class PackingError(ValueError):
    pass


def to_grayscale(raster: np.ndarray) -> np.ndarray:
    """8-bit raster (H, W) or (H, W, 1|3) -> float32 plane of integral intensities."""
    a = np.asarray(raster)
    if a.ndim == 2:
        return a.astype(np.float32)
    if a.ndim != 3 or a.shape[2] not in (1, 3):
        raise ValueError(f"unsupported channel layout {a.shape}")
    if a.shape[2] == 1:
        return a[:, :, 0].astype(np.float32)
    rgb = a.astype(np.float64)
    y = LUMA[0] * rgb[..., 0] + LUMA[1] * rgb[..., 1] + LUMA[2] * rgb[..., 2]
    return np.floor(y + 0.5).astype(np.float32)


def _axis_taps(n_out: int, n_src: int, inv_scale: float, offset: float = 0.0):
    # pixel-centre mapping, clamped to the source (edge replication)
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * inv_scale - 0.5 + offset
    src = np.clip(src, 0.0, n_src - 1)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_src - 1)
    return i0, i1, (src - i0).astype(np.float32)


def _blend(img, xtaps, ytaps) -> np.ndarray:
    x0, x1, fx = xtaps
    y0, y1, fy = ytaps
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return (top * (1 - fy)[:, None] + bot * fy[:, None]).astype(np.float32)


def resize_bilinear(image: np.ndarray, out_w: int, out_h: int,
                    inv_scale_x: float | None = None, inv_scale_y: float | None = None) -> np.ndarray:
    """Bilinear resampling with pixel-centre alignment and clamped borders.

    ``inv_scale_*`` is source pixels per output pixel; by default the ratio of
    the two sizes.  A unit scale returns the source bit-for-bit.
    """
    img = np.asarray(image, np.float32)
    h, w = img.shape
    sx = w / out_w if inv_scale_x is None else inv_scale_x
    sy = h / out_h if inv_scale_y is None else inv_scale_y
    return _blend(img, _axis_taps(out_w, w, sx), _axis_taps(out_h, h, sy))


def sample_rect(image: np.ndarray, rect, out_w: int, out_h: int) -> np.ndarray:
    """Bilinear samples of a real-valued rect (x, y, w, h); clamped outside the image."""
    img = np.asarray(image, np.float32)
    x, y, w, h = rect
    return _blend(img, _axis_taps(out_w, img.shape[1], w / out_w, x),
                  _axis_taps(out_h, img.shape[0], h / out_h, y))


@dataclass
class PyramidLevel:
    index: int
    scale: float
    image: np.ndarray

    @property
    def width(self) -> int:
        return self.image.shape[1]

    @property
    def height(self) -> int:
        return self.image.shape[0]


def pyramid_scales(width: int, height: int, window: tuple[int, int],
                   min_size: float, scale_factor: float) -> list[tuple[float, int, int]]:
    """(scale, level_w, level_h) for every level, largest first."""
    if scale_factor <= 1:
        raise ValueError("scale_factor must exceed 1")
    if min_size < 1:
        raise ValueError("min_size must be at least 1")
    ww, wh = window
    out = []
    sigma = ww / min_size
    while True:
        lw, lh = math.floor(width * sigma), math.floor(height * sigma)
        if lw < ww or lh < wh:
            break
        out.append((sigma, lw, lh))
        sigma = sigma / scale_factor
    return out


def build_pyramid(image: np.ndarray, window: tuple[int, int], min_size: float,
                  scale_factor: float) -> list[PyramidLevel]:
    img = np.asarray(image, np.float32)
    h, w = img.shape
    levels = []
    for k, (sigma, lw, lh) in enumerate(pyramid_scales(w, h, window, min_size, scale_factor)):
        levels.append(PyramidLevel(k, sigma, resize_bilinear(img, lw, lh, 1 / sigma, 1 / sigma)))
    return levels


# ------------------------------------------------------------------ packing


@dataclass
class PackedStrip:
    strip: np.ndarray
    placements: list[tuple[int, int, int, int]]
    ownership: np.ndarray
    levels: list[PyramidLevel] = field(default_factory=list)

    @property
    def width(self) -> int:
        return self.strip.shape[1]

    @property
    def height(self) -> int:
        return self.strip.shape[0]


@dataclass
class _Shelf:
    y: int
    height: int
    floor_x: int = 0
    ceil_x: int = 0
    rects: list = field(default_factory=list)


def _overlaps(a, b) -> bool:
    return a[0] < b[0] + b[2] and b[0] < a[0] + a[2] and a[1] < b[1] + b[3] and b[1] < a[1] + a[3]


def fcnr_layout(sizes: list[tuple[int, int]], strip_width: int) -> list[tuple[int, int]]:
    """Floor-ceiling, no rotation: (x, y) for each (w, h), in input order.

    Rectangles are visited by non-increasing height (stable).  The first
    rectangle of a shelf fixes its height.  Each rectangle goes to the first
    shelf whose floor (filled left to right) can take it, else to the first
    shelf whose ceiling (filled right to left, top edge flush with the
    ceiling) can take it without touching anything already on the shelf,
    else it opens a new shelf.
    """
    for w, h in sizes:
        if w > strip_width:
            raise PackingError(f"rectangle width {w} exceeds strip width {strip_width}")
        if w < 1 or h < 1:
            raise PackingError(f"degenerate rectangle {w}x{h}")
    order = sorted(range(len(sizes)), key=lambda i: -sizes[i][1])
    shelves: list[_Shelf] = []
    pos: list[tuple[int, int] | None] = [None] * len(sizes)
    for i in order:
        w, h = sizes[i]
        placed = None
        for shelf in shelves:
            if shelf.floor_x + w <= strip_width and h <= shelf.height:
                cand = (shelf.floor_x, shelf.y, w, h)
                if not any(_overlaps(cand, r) for r in shelf.rects):
                    shelf.floor_x += w
                    placed = cand
                    break
        if placed is None:
            for shelf in shelves:
                x = strip_width - shelf.ceil_x - w
                if x < 0 or h > shelf.height:
                    continue
                cand = (x, shelf.y + shelf.height - h, w, h)
                if not any(_overlaps(cand, r) for r in shelf.rects):
                    shelf.ceil_x += w
                    placed = cand
                    break
        if placed is None:
            y = shelves[-1].y + shelves[-1].height if shelves else 0
            shelf = _Shelf(y, h, floor_x=w)
            shelves.append(shelf)
            placed = (0, y, w, h)
        shelf.rects.append(placed)
        pos[i] = placed[:2]
    return pos


def _round_up(v: int, align: int) -> int:
    return -(-v // align) * align


def pack_fcnr(levels: list[PyramidLevel], strip_width: int | None = None,
              align: int = 1, fill: float = 0.0) -> PackedStrip:
    """Pack pyramid levels into one strip image with an ownership map.

    With ``align > 1`` every footprint is rounded up to a multiple of
    ``align`` so placements start on that grid; a network with output stride
    ``align`` then sees each level on the same window grid as when scanned
    alone.  Ownership is -1 outside every level.
    """
    sizes = [(_round_up(l.width, align), _round_up(l.height, align)) for l in levels]
    if strip_width is None:
        strip_width = max((s[0] for s in sizes), default=align)
    if not levels:
        return PackedStrip(np.zeros((0, strip_width), np.float32), [],
                           np.full((0, strip_width), -1, np.int32), [])
    xy = fcnr_layout(sizes, strip_width)
    placements = [(x, y, l.width, l.height) for (x, y), l in zip(xy, levels)]
    height = max(y + h for _, y, _, h in placements)
    strip = np.full((height, strip_width), fill, np.float32)
    owner = np.full((height, strip_width), -1, np.int32)
    for k, ((x, y, w, h), lvl) in enumerate(zip(placements, levels)):
        strip[y:y + h, x:x + w] = lvl.image
        owner[y:y + h, x:x + w] = k
    return PackedStrip(strip, placements, owner, list(levels))
