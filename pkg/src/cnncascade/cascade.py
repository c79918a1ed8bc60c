"""The three-stage detector: dense stage-1 scan, selective unit, grouping."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .modelspec import CascadeModel, Network, receptive_field
from .nnkernel import SCALE, DimensionError, response_map
from .pyramid import PyramidLevel, build_pyramid, resize_bilinear, to_grayscale

RULES = ("strict", "weak")
MODES = ("sync", "async", "patchwork", "partitioned")


class ParamsError(ValueError):
    pass


@dataclass(frozen=True)
class DetectorParams:
    min_size: float = 15
    scale_factor: float = 1.05
    t1: float = 0.0
    t2: float = 0.0
    tm: int = 1
    min_neighbors: int = 1
    rule: str = "strict"
    mode: str = "sync"
    group_iou: float = 0.3

    def validate(self) -> "DetectorParams":
        if not self.scale_factor > 1:
            raise ParamsError("scale_factor must be > 1")
        if not self.min_size >= 1:
            raise ParamsError("min_size must be >= 1")
        for name in ("t1", "t2"):
            v = getattr(self, name)
            if not -SCALE < v < SCALE:
                raise ParamsError(f"{name}={v} outside the activation range (-{SCALE}, {SCALE})")
        if int(self.tm) != self.tm or self.tm < 1:
            raise ParamsError("tm must be an integer >= 1")
        if int(self.min_neighbors) != self.min_neighbors or self.min_neighbors < 1:
            raise ParamsError("min_neighbors must be an integer >= 1")
        if self.rule not in RULES:
            raise ParamsError(f"rule must be one of {RULES}")
        if self.mode not in MODES:
            raise ParamsError(f"mode must be one of {MODES}")
        if not 0 < self.group_iou <= 1:
            raise ParamsError("group_iou must be in (0, 1]")
        return self


@dataclass(frozen=True, order=True)
class CandidateRegion:
    level: int
    y: int
    x: int
    score: float = field(compare=False)


@dataclass(frozen=True)
class Detection:
    x: float
    y: float
    w: float
    h: float
    score: float
    neighbors: int

    @property
    def rect(self) -> tuple[float, float, float, float]:
        return (self.x, self.y, self.w, self.h)

    def to_record(self, image: str) -> dict:
        return {"image": image, "x": self.x, "y": self.y, "w": self.w, "h": self.h,
                "score": self.score, "neighbors": self.neighbors}


@dataclass(frozen=True)
class RegionVerdict:
    accepted: bool
    k2: int
    k3: int
    score: float
    ran_cnn3: bool
    passed_cnn2: bool


STAGES = ("sliding", "stage1", "stage2", "stage3", "nms")


@dataclass
class RunStats:
    """Per-frame window counts per cascade stage plus wall times (seconds)."""

    mode: str = "sync"
    workers: int = 1
    sliding: int = 0
    stage1: int = 0
    stage2: int = 0
    stage3: int = 0
    nms: int = 0
    scan_s: float = 0.0
    select_s: float = 0.0
    group_s: float = 0.0
    total_s: float = 0.0
    extra: dict = field(default_factory=dict)

    @property
    def counts(self) -> tuple[int, ...]:
        return tuple(getattr(self, s) for s in STAGES)

    def rejected_pct(self) -> dict[str, float]:
        out = {}
        prev = self.sliding
        for s in STAGES[1:4]:
            cur = getattr(self, s)
            out[s] = 100.0 * (1 - cur / prev) if prev else 0.0
            prev = cur
        return out

    TABLE_HEADER = ("image", "sliding_window", "stage1", "stage2", "stage3", "nms",
                    "stage1_rejected_pct", "stage2_rejected_pct", "stage3_rejected_pct")

    def table_row(self, image: str) -> list:
        rej = self.rejected_pct()
        return [image, *self.counts,
                f"{rej['stage1']:.4f}", f"{rej['stage2']:.4f}", f"{rej['stage3']:.4f}"]

    def as_dict(self) -> dict:
        return asdict(self)


# ----------------------------------------------------------------- stage 1


def normalize_pixels(plane: np.ndarray) -> np.ndarray:
    """Affine map of the 8-bit range [0, 255] onto [-1, 1]."""
    return np.asarray(plane, np.float32) * np.float32(2 / 255) - np.float32(1)


def window_count(width: int, height: int, window: tuple[int, int], stride: int) -> int:
    ww, wh = window
    if width < ww or height < wh:
        return 0
    return ((width - ww) // stride + 1) * ((height - wh) // stride + 1)


def candidates_from_response(resp: np.ndarray, level: int, stride: int, t1: float) -> list[CandidateRegion]:
    rows, cols = np.nonzero(resp > t1)
    return [CandidateRegion(level, int(i) * stride, int(j) * stride, float(resp[i, j]))
            for i, j in zip(rows, cols)]


def scan_stage1(level: PyramidLevel, cnn1: Network, t1: float) -> list[CandidateRegion]:
    """Dense CNN1 pass over a whole level; one candidate per response cell above ``t1``."""
    rw, rh = receptive_field(cnn1.spec)
    if level.width < rw or level.height < rh:
        return []
    resp = response_map(normalize_pixels(level.image), cnn1.spec, cnn1.weights)
    return candidates_from_response(resp, level.index, cnn1.stride, t1)


# ---------------------------------------------------------- selective unit


def window_in_image(cand: CandidateRegion, scale: float, window: tuple[int, int]):
    """The stage-1 window of ``cand`` mapped back to original-image pixels."""
    return (cand.x / scale, cand.y / scale, window[0] / scale, window[1] / scale)


def crop_replicate(image: np.ndarray, x: int, y: int, w: int, h: int) -> np.ndarray:
    """Crop [x, x+w) x [y, y+h); pixels outside the image repeat the nearest edge."""
    img = np.asarray(image, np.float32)
    rows = np.clip(np.arange(y, y + h), 0, img.shape[0] - 1)
    cols = np.clip(np.arange(x, x + w), 0, img.shape[1] - 1)
    return img[rows][:, cols]


def expanded_box(rect, expand: tuple[float, float]) -> tuple[int, int, int, int]:
    """Integer crop box: ``rect`` grown about its centre by ``expand``."""
    x, y, w, h = rect
    cx, cy = x + w / 2, y + h / 2
    bw, bh = max(1, int(round(w * expand[0]))), max(1, int(round(h * expand[1])))
    return int(np.floor(cx - bw / 2 + 0.5)), int(np.floor(cy - bh / 2 + 0.5)), bw, bh


def extract_patch_rect(image: np.ndarray, rect, patch_size: tuple[int, int] = (51, 55),
                       expand: tuple[float, float] = (51 / 35, 55 / 39)) -> np.ndarray:
    bx, by, bw, bh = expanded_box(rect, expand)
    return resize_bilinear(crop_replicate(image, bx, by, bw, bh), *patch_size)


def extract_patch(image: np.ndarray, cand: CandidateRegion, scale: float,
                  window: tuple[int, int] = (27, 31), patch_size: tuple[int, int] = (51, 55),
                  expand: tuple[float, float] = (51 / 35, 55 / 39)) -> np.ndarray:
    """Read the candidate plus its neighbourhood from the original image at ``patch_size``.

    The stage-1 window is mapped back to the original image, grown about its
    centre by ``expand`` (patch size over the selective receptive field, so
    the face core lands on the centre cell), cropped with edge replication
    and resampled.
    """
    return extract_patch_rect(image, window_in_image(cand, scale, window), patch_size, expand)


def quantize(plane: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(np.asarray(plane, np.float64) + 0.5), 0, 255)


def equalize_histogram(patch: np.ndarray) -> np.ndarray:
    """256-bin CDF remap; single-valued inputs are returned unchanged."""
    p = np.asarray(patch)
    vals = quantize(p).astype(np.intp)
    hist = np.bincount(vals.ravel(), minlength=256)
    cdf = np.cumsum(hist)
    n = vals.size
    cdf_min = cdf[hist > 0][0]
    if cdf_min == n:
        return p.astype(np.float32)
    lut = np.floor(255.0 * (cdf - cdf_min) / (n - cdf_min) + 0.5)
    return lut[vals].astype(np.float32)


def mirror_horizontal(patch: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(patch)[..., ::-1])


def preprocess_patch(patch: np.ndarray) -> np.ndarray:
    """Quantize, equalize and map to [-1, 1]."""
    return normalize_pixels(equalize_histogram(quantize(patch)))


def strict_rule(k2: int, k3: int, tm: int) -> bool:
    return (k2 >= tm and k3 > 0) or (k2 > 0 and k3 >= tm)


def weak_rule(k2: int, k3: int, tm: int) -> bool:
    return k2 >= tm or k3 >= tm


def decide(k2: int, k3: int, tm: int, rule: str = "strict") -> bool:
    return strict_rule(k2, k3, tm) if rule == "strict" else weak_rule(k2, k3, tm)


def _pooled_responses(net: Network, patches: np.ndarray) -> np.ndarray:
    n = len(patches)
    both = np.concatenate([patches, mirror_horizontal(patches)])
    r = response_map(both, net.spec, net.weights).reshape(2, n, -1)
    return np.concatenate([r[0], r[1]], axis=1)


def classify_regions(patches: np.ndarray, cnn2: Network, cnn3: Network, t2: float,
                     tm: int, rule: str = "strict",
                     patch_size: tuple[int, int] = (51, 55)) -> list[RegionVerdict]:
    """Selective decision for a batch of preprocessed patches, shape (n, H, W).

    Each network sees the patch and its mirror image; K counts the cells of
    both response maps above ``t2``.  CNN3 is skipped when its answer cannot
    change the outcome: K2 == 0 under the strict rule, K2 >= tm under the
    weak rule.
    """
    p = np.asarray(patches, np.float32)
    if p.ndim == 2:
        p = p[None]
    if p.shape[1:] != (patch_size[1], patch_size[0]):
        raise DimensionError(f"patches must be {patch_size[0]}x{patch_size[1]}, got {p.shape[1:]}")
    if len(p) == 0:
        return []
    r2 = _pooled_responses(cnn2, p)
    k2 = (r2 > t2).sum(axis=1)
    best2 = r2.max(axis=1)
    need3 = k2 > 0 if rule == "strict" else k2 < tm
    k3 = np.zeros(len(p), np.intp)
    best3 = np.full(len(p), np.nan, np.float32)
    idx = np.flatnonzero(need3)
    if len(idx):
        r3 = _pooled_responses(cnn3, p[idx])
        k3[idx] = (r3 > t2).sum(axis=1)
        best3[idx] = r3.max(axis=1)
    out = []
    for i in range(len(p)):
        ran3 = bool(need3[i])
        out.append(RegionVerdict(
            accepted=decide(int(k2[i]), int(k3[i]), tm, rule),
            k2=int(k2[i]), k3=int(k3[i]),
            score=float(best3[i] if ran3 else best2[i]),
            ran_cnn3=ran3,
            passed_cnn2=bool(k2[i] > 0) if rule == "strict" else True,
        ))
    return out


def classify_region(patch, cnn2, cnn3, t2, tm, rule="strict") -> RegionVerdict:
    return classify_regions(np.asarray(patch)[None], cnn2, cnn3, t2, tm, rule)[0]


def select_candidates(image: np.ndarray, candidates: list[CandidateRegion], scales: dict[int, float],
                      model: CascadeModel, params: DetectorParams,
                      batch: int = 64) -> list[RegionVerdict]:
    """Run the selective unit on a list of stage-1 candidates from one frame."""
    window = model.window
    rf2 = receptive_field(model.cnn2.spec)
    expand = (model.patch_size[0] / rf2[0], model.patch_size[1] / rf2[1])
    out: list[RegionVerdict] = []
    for s in range(0, len(candidates), batch):
        chunk = candidates[s:s + batch]
        patches = np.stack([
            preprocess_patch(extract_patch(image, c, scales[c.level], window, model.patch_size, expand))
            for c in chunk
        ])
        out.extend(classify_regions(patches, model.cnn2, model.cnn3, params.t2, params.tm,
                                    params.rule, model.patch_size))
    return out


# ---------------------------------------------------------------- grouping


def group_detections(raw: list[tuple[tuple[float, float, float, float], float]],
                     min_neighbors: int = 1, iou_threshold: float = 0.3) -> list[Detection]:
    """Transitive clustering of (rect, score) pairs whose IoU >= ``iou_threshold``.

    Clusters smaller than ``min_neighbors`` are dropped; the rest yield their
    mean rectangle, best score and size.
    """
    n = len(raw)
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    if n > 1:
        r = np.array([rect for rect, _ in raw], np.float64)
        x0, y0, x1, y1 = r[:, 0], r[:, 1], r[:, 0] + r[:, 2], r[:, 1] + r[:, 3]
        iw = np.clip(np.minimum(x1[:, None], x1) - np.maximum(x0[:, None], x0), 0, None)
        ih = np.clip(np.minimum(y1[:, None], y1) - np.maximum(y0[:, None], y0), 0, None)
        inter = iw * ih
        union = (r[:, 2] * r[:, 3])[:, None] + r[:, 2] * r[:, 3] - inter
        iou = np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)
        for i, j in zip(*np.nonzero(np.triu(iou >= iou_threshold, 1))):
            ri, rj = find(int(i)), find(int(j))
            if ri != rj:
                parent[max(ri, rj)] = min(ri, rj)
    clusters: dict[int, list[int]] = {}
    for i in range(n):
        clusters.setdefault(find(i), []).append(i)
    out = []
    for members in clusters.values():
        if len(members) < min_neighbors:
            continue
        rects = np.array([raw[i][0] for i in members], np.float64)
        x, y, w, h = (float(v) for v in rects.mean(axis=0))
        out.append(Detection(x, y, w, h, max(float(raw[i][1]) for i in members), len(members)))
    return out


def finalize(candidates: list[CandidateRegion], verdicts: list[RegionVerdict],
             scales: dict[int, float], window: tuple[int, int],
             params: DetectorParams) -> list[Detection]:
    """Group the accepted regions; input order does not affect the result."""
    accepted = sorted((c, v) for c, v in zip(candidates, verdicts) if v.accepted)
    raw = [(window_in_image(c, scales[c.level], window), v.score) for c, v in accepted]
    return group_detections(raw, params.min_neighbors, params.group_iou)


def sort_key(det: Detection):
    return (det.x, det.y, det.w, det.h, -det.score, det.neighbors)


def prepare_image(image) -> np.ndarray:
    a = np.asarray(image)
    plane = to_grayscale(a) if a.ndim == 3 else a.astype(np.float32)
    if not np.all(np.isfinite(plane)):
        raise ValueError("image contains non-finite values")
    return plane


def fill_counts(stats: RunStats, levels: list[PyramidLevel], window, stride,
                candidates, verdicts, detections) -> None:
    stats.sliding = sum(window_count(l.width, l.height, window, stride) for l in levels)
    stats.stage1 = len(candidates)
    stats.stage2 = sum(v.passed_cnn2 for v in verdicts)
    stats.stage3 = sum(v.accepted for v in verdicts)
    stats.nms = len(detections)


def detect(image, model: CascadeModel, params: DetectorParams = DetectorParams()):
    """Synchronous reference pipeline; returns ``(detections, RunStats)``."""
    params.validate()
    t_start = time.perf_counter()
    plane = prepare_image(image)
    stats = RunStats(mode="sync", workers=1)
    window = model.window

    t0 = time.perf_counter()
    levels = build_pyramid(plane, window, params.min_size, params.scale_factor)
    scales = {l.index: l.scale for l in levels}
    candidates: list[CandidateRegion] = []
    verdicts: list[RegionVerdict] = []
    scan = select = 0.0
    for level in levels:
        found = scan_stage1(level, model.cnn1, params.t1)
        t1 = time.perf_counter()
        scan += t1 - t0
        verdicts.extend(select_candidates(plane, found, scales, model, params))
        candidates.extend(found)
        t0 = time.perf_counter()
        select += t0 - t1
    detections = finalize(candidates, verdicts, scales, window, params)
    t_end = time.perf_counter()
    stats.scan_s, stats.select_s, stats.group_s = scan, select, t_end - t0
    stats.total_s = t_end - t_start
    fill_counts(stats, levels, window, model.cnn1.stride, candidates, verdicts, detections)
    return detections, stats
