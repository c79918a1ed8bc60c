"""Seeded synthetic faces, backgrounds, scenes and training samples.

A "face" is a bright oval carrying two dark eye blobs, brows, a nose shadow
and a mouth bar, drawn with random contrast, shading and jitter over a
textured noise background that also holds face-like distractors.  Face boxes
have the stage-1 window's 27:31 aspect.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .cascade import extract_patch_rect, normalize_pixels, preprocess_patch
from .geometry import iou_rect
from .pyramid import resize_bilinear, sample_rect

ASPECT = 31 / 27

# (cx, cy, rx, ry, tone) in face-box units; tone < 0 darkens relative to skin
_FEATURES = (
    (0.31, 0.40, 0.105, 0.060, -1.00),   # eyes
    (0.69, 0.40, 0.105, 0.060, -1.00),
    (0.31, 0.295, 0.12, 0.028, -0.55),   # brows
    (0.69, 0.295, 0.12, 0.028, -0.55),
    (0.50, 0.58, 0.045, 0.085, -0.30),   # nose shadow
    (0.50, 0.755, 0.16, 0.042, -0.85),   # mouth
)


def _soft_ellipse(u, v, cx, cy, rx, ry, px_w, px_h):
    """Anti-aliased ellipse coverage on a grid of box-unit coordinates."""
    d = np.sqrt(((u - cx) / rx) ** 2 + ((v - cy) / ry) ** 2)
    edge = max(min(rx * px_w, ry * px_h), 0.5)
    return np.clip((1 - d) * edge + 0.5, 0, 1)


def render_face(canvas: np.ndarray, box, rng: np.random.Generator, contrast: float | None = None) -> None:
    """Composite one face into ``canvas`` (float, 0..255) inside ``box`` = (x, y, w, h)."""
    x, y, w, h = box
    H, W = canvas.shape
    x0, x1 = max(int(np.floor(x)), 0), min(int(np.ceil(x + w)), W)
    y0, y1 = max(int(np.floor(y)), 0), min(int(np.ceil(y + h)), H)
    if x1 <= x0 or y1 <= y0:
        return
    u = (np.arange(x0, x1) + 0.5 - x) / w
    v = (np.arange(y0, y1) + 0.5 - y) / h
    u, v = np.meshgrid(u, v)
    region = canvas[y0:y1, x0:x1]

    local = float(np.median(region))
    if contrast is None:
        contrast = rng.uniform(45, 110)
    skin = np.clip(local + rng.choice([-1, 1]) * rng.uniform(0.3, 0.8) * contrast + rng.uniform(-20, 20), 40, 235)
    dark = skin - contrast
    if dark < 5:
        skin, dark = skin + (5 - dark), 5.0

    jx, jy = rng.normal(0, 0.012, 2)
    head = _soft_ellipse(u, v, 0.5 + jx, 0.5 + jy, 0.46, 0.49, w, h)
    face = np.full_like(u, skin)
    for cx, cy, rx, ry, tone in _FEATURES:
        m = _soft_ellipse(u, v, cx + jx + rng.normal(0, 0.01), cy + jy + rng.normal(0, 0.01),
                          rx * rng.uniform(0.85, 1.15), ry * rng.uniform(0.85, 1.2), w, h)
        face = face + m * tone * (skin - dark) * rng.uniform(0.8, 1.0)
    shade = rng.uniform(-0.35, 0.35) * contrast
    face = face + shade * (u - 0.5) + rng.uniform(-0.15, 0.15) * contrast * (v - 0.5)
    region[...] = head * face + (1 - head) * region


def background(height: int, width: int, rng: np.random.Generator, distractors: float = 1.0) -> np.ndarray:
    """Textured noise with gradients and face-like distractor shapes, float 0..255."""
    img = np.full((height, width), rng.uniform(50, 200))
    for sigma, amp in ((rng.uniform(6, 20), rng.uniform(10, 40)),
                       (rng.uniform(1.5, 4), rng.uniform(4, 20)),
                       (rng.uniform(0.4, 1.0), rng.uniform(0, 10))):
        n = gaussian_filter(rng.normal(size=(height, width)), sigma)
        img += amp * n / (n.std() + 1e-9)
    yy, xx = np.mgrid[0:height, 0:width]
    ang = rng.uniform(0, 2 * np.pi)
    img += rng.uniform(0, 50) * ((xx * np.cos(ang) + yy * np.sin(ang)) / max(height, width))

    n_shapes = rng.poisson(distractors * height * width / 2500)
    for _ in range(n_shapes):
        s = rng.uniform(6, 0.5 * min(height, width) + 6)
        cx, cy = rng.uniform(0, width), rng.uniform(0, height)
        kind = rng.integers(0, 5)
        tone = rng.uniform(-90, 90)
        if kind == 0:      # blank oval
            m = ((xx - cx) / (0.5 * s)) ** 2 + ((yy - cy) / (0.55 * s)) ** 2 <= 1
        elif kind == 1:    # bar
            m = (np.abs(xx - cx) < s * rng.uniform(0.05, 0.6)) & (np.abs(yy - cy) < s * rng.uniform(0.05, 0.6))
        elif kind == 2:    # pair of blobs
            d = s * 0.2
            m = (((xx - cx - d) ** 2 + (yy - cy) ** 2) < (0.08 * s) ** 2) | \
                (((xx - cx + d) ** 2 + (yy - cy) ** 2) < (0.08 * s) ** 2)
            tone = -abs(tone)
        elif kind == 3:    # line
            a = rng.uniform(0, np.pi)
            dist = np.abs((xx - cx) * np.sin(a) - (yy - cy) * np.cos(a))
            m = (dist < rng.uniform(0.7, 3)) & ((xx - cx) ** 2 + (yy - cy) ** 2 < s ** 2)
        else:              # oval with a single dark bar
            m = ((xx - cx) / (0.45 * s)) ** 2 + ((yy - cy) / (0.5 * s)) ** 2 <= 1
            img[m] += tone
            m = (np.abs(xx - cx) < 0.2 * s) & (np.abs(yy - cy - 0.2 * s) < 0.05 * s)
            tone = -abs(tone)
        img[m] += tone
    return np.clip(img, 0, 255)


def _finish(img: np.ndarray, rng: np.random.Generator, noise: float) -> np.ndarray:
    img = img + rng.normal(0, noise, img.shape)
    return np.clip(np.floor(img + 0.5), 0, 255).astype(np.uint8)


@dataclass
class Scene:
    image: np.ndarray                       # uint8 (H, W)
    boxes: list[tuple[float, float, float, float]]


def _place_boxes(width, height, n, size_range, rng, max_tries=4000):
    boxes = []
    tries = 0
    while len(boxes) < n and tries < max_tries:
        tries += 1
        w = rng.uniform(*size_range)
        h = w * ASPECT
        if w >= width or h >= height:
            continue
        b = (rng.uniform(0, width - w), rng.uniform(0, height - h), w, h)
        grown = (b[0] - 0.15 * w, b[1] - 0.15 * h, 1.3 * w, 1.3 * h)
        if all(iou_rect(grown, (o[0] - 0.15 * o[2], o[1] - 0.15 * o[3], 1.3 * o[2], 1.3 * o[3])) == 0
               for o in boxes):
            boxes.append(b)
    return boxes


def _grid_boxes(width, height, n, size_range, rng):
    cols = int(np.ceil(np.sqrt(n * width / height * ASPECT)))
    rows = int(np.ceil(n / cols))
    cw, ch = width / cols, height / rows
    w_max = min(size_range[1], 0.8 * cw, 0.8 * ch / ASPECT)
    if w_max < size_range[0]:
        raise ValueError(f"{n} faces of width >= {size_range[0]} do not fit in {width}x{height}")
    boxes = []
    for k in range(n):
        r, c = divmod(k, cols)
        w = rng.uniform(size_range[0], w_max)
        h = w * ASPECT
        x = c * cw + rng.uniform(0, cw - w)
        y = r * ch + rng.uniform(0, ch - h)
        boxes.append((x, y, w, h))
    return boxes


def make_scene(width: int, height: int, n_faces: int, size_range=(24, 48), seed=None,
               rng: np.random.Generator | None = None, noise: float | None = None,
               distractors: float = 1.0) -> Scene:
    """A grayscale frame with ``n_faces`` planted faces and their ground-truth boxes."""
    rng = rng if rng is not None else np.random.default_rng(seed)
    img = background(height, width, rng, distractors)
    boxes = _place_boxes(width, height, n_faces, size_range, rng)
    if len(boxes) < n_faces:
        boxes = _grid_boxes(width, height, n_faces, size_range, rng)
    for b in boxes:
        render_face(img, b, rng)
    return Scene(_finish(img, rng, rng.uniform(0, 6) if noise is None else noise), boxes)


# ------------------------------------------------------------- sampling


def window_label(face, rect, pos_shift=0.1, pos_scale=(0.83, 1.2), neg_shift=0.35,
                 neg_scale=(0.55, 1.8)) -> int:
    """+1 if ``rect`` frames ``face`` tightly, -1 if clearly not, 0 if ambiguous."""
    if face is None:
        return -1
    dx = abs((face[0] + face[2] / 2) - (rect[0] + rect[2] / 2)) / rect[2]
    dy = abs((face[1] + face[3] / 2) - (rect[1] + rect[3] / 2)) / rect[3]
    ratio = face[2] / rect[2]
    if dx <= pos_shift and dy <= pos_shift and pos_scale[0] <= ratio <= pos_scale[1]:
        return 1
    if max(dx, dy) >= neg_shift or ratio <= neg_scale[0] or ratio >= neg_scale[1]:
        return -1
    return 0


def scene_label(boxes, rect, **kw) -> int:
    labels = [window_label(b, rect, **kw) for b in boxes] or [-1]
    if 1 in labels:
        return 1
    return -1 if all(l == -1 for l in labels) else 0


class SampleFactory:
    """Labelled training windows cut from freshly generated synthetic scenes.

    ``stage1`` samples are raw windows resampled to CNN1's receptive field.
    ``selective`` samples mimic the selective unit: a 51x55 patch is read
    around a simulated stage-1 window, equalized, normalized, and one
    receptive-field crop on the stride-4 response grid is returned.
    """

    def __init__(self, seed: int, window=(27, 31), patch_size=(51, 55), selective_rf=(35, 39),
                 scene_size=(112, 112), face_range=(26, 60)):
        self.rng = np.random.default_rng(seed)
        self.window = window
        self.patch_size = patch_size
        self.selective_rf = selective_rf
        self.scene_size = scene_size
        self.face_range = face_range

    def scene(self, n_faces=1) -> Scene:
        w, h = self.scene_size
        return make_scene(w, h, n_faces, self.face_range, rng=self.rng)

    def _jittered(self, face, positive: bool):
        rng = self.rng
        fw, fh = face[2], face[3]
        cx, cy = face[0] + fw / 2, face[1] + fh / 2
        if positive:
            ratio = np.exp(rng.uniform(np.log(0.83), np.log(1.2)))
            rw = fw / ratio
            cx += rng.uniform(-0.1, 0.1) * rw
            cy += rng.uniform(-0.1, 0.1) * rw * ASPECT
        else:
            if rng.random() < 0.5:
                ratio = np.exp(rng.uniform(np.log(0.55), np.log(1.0)))
                rw = fw / ratio
                ang = rng.uniform(0, 2 * np.pi)
                d = rng.uniform(0.35, 0.9)
                cx += d * rw * np.cos(ang)
                cy += d * rw * ASPECT * np.sin(ang)
            else:
                ratio = rng.choice([rng.uniform(0.3, 0.55), rng.uniform(1.8, 3.0)])
                rw = fw / ratio
                cx += rng.uniform(-0.15, 0.15) * rw
                cy += rng.uniform(-0.15, 0.15) * rw
        rh = rw * ASPECT
        return (cx - rw / 2, cy - rh / 2, rw, rh)

    def _random_rect(self, scene: Scene):
        h, w = scene.image.shape
        rw = self.rng.uniform(self.window[0], min(w, h / ASPECT))
        rh = rw * ASPECT
        return (self.rng.uniform(-0.1 * rw, w - 0.9 * rw), self.rng.uniform(-0.1 * rh, h - 0.9 * rh), rw, rh)

    def _windows(self, want_pos=lambda: True):
        """Endless (scene, rect) stream mixing tight, offset and random windows."""
        while True:
            sc = self.scene(n_faces=int(self.rng.integers(0, 3)))
            for _ in range(8):
                r = self.rng.random()
                if sc.boxes and r < 0.5 and want_pos():
                    rect = self._jittered(sc.boxes[int(self.rng.integers(len(sc.boxes)))], True)
                elif sc.boxes and r < 0.75:
                    rect = self._jittered(sc.boxes[int(self.rng.integers(len(sc.boxes)))], False)
                else:
                    rect = self._random_rect(sc)
                yield sc, rect

    def stage1(self, n_pos: int, n_neg: int):
        """(samples (N, h, w) normalized to [-1, 1], labels (N,))."""
        ww, wh = self.window
        xs, ys = [], []
        pos = neg = 0
        for sc, rect in self._windows(lambda: pos < n_pos):
            label = scene_label(sc.boxes, rect)
            if label == 1 and pos < n_pos:
                pos += 1
            elif label == -1 and neg < n_neg:
                neg += 1
            else:
                continue
            xs.append(normalize_pixels(sample_rect(sc.image, rect, ww, wh)))
            ys.append(label)
            if pos >= n_pos and neg >= n_neg:
                break
        return np.stack(xs), np.array(ys, np.float64)

    def selective_patch(self, image, rect) -> np.ndarray:
        pw, ph = self.patch_size
        expand = (pw / self.selective_rf[0], ph / self.selective_rf[1])
        return preprocess_patch(extract_patch_rect(image, rect, self.patch_size, expand))

    def selective_crops(self, scene: Scene, rect, k: int, stride: int = 4):
        """Up to ``k`` random receptive-field crops of the patch around ``rect``.

        Each crop sits on the stride grid of the patch's response map and is
        labelled against the scene's faces; ambiguous crops are dropped.
        """
        pw, ph = self.patch_size
        rw, rh = self.selective_rf
        cells_y = (ph - rh) // stride + 1
        n_cells = ((pw - rw) // stride + 1) * cells_y
        patch = self.selective_patch(scene.image, rect)
        ex, ey = pw / rw, ph / rh
        bx = rect[0] + rect[2] / 2 - rect[2] * ex / 2
        by = rect[1] + rect[3] / 2 - rect[3] * ey / 2
        sx, sy = rect[2] * ex / pw, rect[3] * ey / ph
        out = []
        for cell in self.rng.permutation(n_cells)[:k]:
            j, i = divmod(int(cell), cells_y)
            ox, oy = j * stride, i * stride
            lab = scene_label(scene.boxes, (bx + ox * sx, by + oy * sy, rw * sx, rh * sy))
            if lab != 0:
                out.append((patch[oy:oy + rh, ox:ox + rw], lab))
        return out

    def selective(self, n_pos: int, n_neg: int, stride: int = 4):
        """(samples (N, rf_h, rf_w) from preprocessed patches, labels (N,))."""
        xs, ys = [], []
        pos = neg = 0
        for sc, rect in self._windows(lambda: pos < n_pos):
            for crop, lab in self.selective_crops(sc, rect, 3, stride):
                if lab == 1 and pos < n_pos:
                    pos += 1
                elif lab == -1 and neg < n_neg:
                    neg += 1
                else:
                    continue
                xs.append(crop)
                ys.append(lab)
            if pos >= n_pos and neg >= n_neg:
                break
        return np.stack(xs), np.array(ys, np.float64)


def resize_to(sample: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    return resize_bilinear(sample, *size)
