"""Benchmark scoring: IoU matching, FDDB-style ROC and continuous score, multi-scale rectangle F1."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import intersection, iou_rect, scale_about_center

SHAPES = ("rect", "ellipse")


class AnnotationError(ValueError):
    pass


@dataclass(frozen=True)
class Annotation:
    """A ground-truth face.

    ``rect`` params are (x, y, w, h); ``ellipse`` params follow the FDDB
    order (major radius, minor radius, angle in radians, cx, cy).
    """

    image: str
    kind: str
    params: tuple

    def __post_init__(self):
        if self.kind not in SHAPES:
            raise AnnotationError(f"unknown shape {self.kind!r}")
        if len(self.params) != (4 if self.kind == "rect" else 5):
            raise AnnotationError(f"{self.kind} needs {4 if self.kind == 'rect' else 5} numbers")
        extents = self.params[2:4] if self.kind == "rect" else self.params[:2]
        if not all(v > 0 for v in extents):
            raise AnnotationError(f"non-positive extent in {self.params}")

    @classmethod
    def rect(cls, image, x, y, w, h) -> "Annotation":
        return cls(image, "rect", (float(x), float(y), float(w), float(h)))

    @classmethod
    def ellipse(cls, image, major, minor, angle, cx, cy) -> "Annotation":
        return cls(image, "ellipse", (float(major), float(minor), float(angle), float(cx), float(cy)))

    def bbox(self):
        if self.kind == "rect":
            return self.params
        a, b, t, cx, cy = self.params
        hx = math.hypot(a * math.cos(t), b * math.sin(t))
        hy = math.hypot(a * math.sin(t), b * math.cos(t))
        return (cx - hx, cy - hy, 2 * hx, 2 * hy)


@dataclass
class MatchResult:
    matched: list[tuple[int, int, float]] = field(default_factory=list)
    unmatched_annotations: list[int] = field(default_factory=list)
    unmatched_detections: list[int] = field(default_factory=list)

    @property
    def tp(self) -> int:
        return len(self.matched)

    @property
    def fp(self) -> int:
        return len(self.unmatched_detections)

    @property
    def fn(self) -> int:
        return len(self.unmatched_annotations)


def _rect_of(det):
    return tuple(det.rect) if hasattr(det, "rect") else tuple(det)


# -------------------------------------------------------------------- IoU


def _inside_ellipse(px, py, e):
    a, b, t, cx, cy = e
    dx, dy = px - cx, py - cy
    u = dx * math.cos(t) + dy * math.sin(t)
    v = -dx * math.sin(t) + dy * math.cos(t)
    return (u / a) ** 2 + (v / b) ** 2 <= 1


def iou_ellipse_rect(ellipse, rect, subdiv: int = 1) -> float:
    """Rasterized IoU: both shapes sampled at ``subdiv``² points per unit pixel
    over their joint bounding box."""
    eb = Annotation("", "ellipse", tuple(ellipse)).bbox()
    if intersection(eb, rect) == 0:
        return 0.0
    x0 = math.floor(min(eb[0], rect[0]))
    y0 = math.floor(min(eb[1], rect[1]))
    x1 = math.ceil(max(eb[0] + eb[2], rect[0] + rect[2]))
    y1 = math.ceil(max(eb[1] + eb[3], rect[1] + rect[3]))
    step = 1.0 / subdiv
    xs = x0 + (np.arange((x1 - x0) * subdiv) + 0.5) * step
    ys = y0 + (np.arange((y1 - y0) * subdiv) + 0.5) * step
    px, py = np.meshgrid(xs, ys)
    in_e = _inside_ellipse(px, py, ellipse)
    in_r = (px >= rect[0]) & (px < rect[0] + rect[2]) & (py >= rect[1]) & (py < rect[1] + rect[3])
    union = np.count_nonzero(in_e | in_r)
    return float(np.count_nonzero(in_e & in_r) / union) if union else 0.0


def annotation_iou(ann: Annotation, rect, subdiv: int = 1) -> float:
    if ann.kind == "rect":
        return iou_rect(ann.params, rect)
    return iou_ellipse_rect(ann.params, rect, subdiv)


def iou_matrix(annotations, detections, subdiv: int = 1) -> np.ndarray:
    m = np.zeros((len(annotations), len(detections)))
    for i, a in enumerate(annotations):
        for j, d in enumerate(detections):
            rect = _rect_of(d)
            m[i, j] = annotation_iou(a, rect, subdiv) if isinstance(a, Annotation) else iou_rect(a, rect)
    return m


# --------------------------------------------------------------- matching


def greedy_match(iou: np.ndarray, threshold: float = 0.5) -> MatchResult:
    """One-to-one matching by descending IoU; ties go to the lower
    (annotation, detection) index pair.  Pairs below ``threshold`` never match."""
    n_a, n_d = iou.shape
    pairs = sorted(((-iou[i, j], i, j) for i in range(n_a) for j in range(n_d) if iou[i, j] >= threshold))
    used_a, used_d = set(), set()
    res = MatchResult()
    for neg, i, j in pairs:
        if i in used_a or j in used_d:
            continue
        used_a.add(i)
        used_d.add(j)
        res.matched.append((i, j, float(-neg)))
    res.unmatched_annotations = [i for i in range(n_a) if i not in used_a]
    res.unmatched_detections = [j for j in range(n_d) if j not in used_d]
    return res


def match_discrete(annotations, detections, threshold: float = 0.5, subdiv: int = 1) -> MatchResult:
    return greedy_match(iou_matrix(annotations, detections, subdiv), threshold)


# ------------------------------------------------------------------- FDDB


def score_fddb(per_image: dict, thresholds=None, iou_threshold: float = 0.5, subdiv: int = 1):
    """ROC over score thresholds plus the continuous score.

    ``per_image`` maps image id to ``(annotations, detections)`` where each
    detection is ``(rect, score)``.  A threshold keeps detections with
    score >= threshold.  Returns ``(rows, continuous)`` with rows
    ``(threshold, fp, tpr, continuous_at_threshold)``; ``continuous`` is
    the value with every detection kept.
    """
    prepared = []
    scores = []
    n_ann = 0
    for anns, dets in per_image.values():
        sc = np.array([float(s) for _, s in dets])
        prepared.append((iou_matrix(anns, [r for r, _ in dets], subdiv), sc))
        scores.extend(sc.tolist())
        n_ann += len(anns)
    if thresholds is None:
        thresholds = sorted(set(scores), reverse=True) or [0.0]
    rows = []
    for t in thresholds:
        fp = tp = 0
        iou_sum = 0.0
        for m, sc in prepared:
            keep = np.flatnonzero(sc >= t)
            res = greedy_match(m[:, keep], iou_threshold)
            tp += res.tp
            fp += res.fp
            iou_sum += sum(v for _, _, v in res.matched)
        rows.append((float(t), fp, tp / n_ann if n_ann else 0.0, iou_sum / n_ann if n_ann else 0.0))
    iou_sum = 0.0
    for m, _ in prepared:
        iou_sum += sum(v for _, _, v in greedy_match(m, iou_threshold).matched)
    return rows, (iou_sum / n_ann if n_ann else 0.0)


# ------------------------------------------------------ multi-scale / F1


def multiscale_factors(variants: int = 44, lo: float = 0.9, hi: float = 1.2) -> list[float]:
    if variants == 1:
        return [lo]
    return [lo + i * (hi - lo) / (variants - 1) for i in range(variants)]


def best_variant_iou(annotation, detection, variants: int = 44, lo: float = 0.9, hi: float = 1.2) -> float:
    ann = annotation.params if isinstance(annotation, Annotation) else tuple(annotation)
    det = _rect_of(detection)
    best = iou_rect(ann, det)
    for f in multiscale_factors(variants, lo, hi):
        best = max(best, iou_rect(scale_about_center(ann, f), det))
    return best


def match_multiscale(annotation, detection, variants: int = 44, lo: float = 0.9, hi: float = 1.2,
                     threshold: float = 0.5) -> bool:
    return best_variant_iou(annotation, detection, variants, lo, hi) >= threshold


def match_rect_multiscale(annotations, detections, threshold: float = 0.5, variants: int = 44) -> MatchResult:
    m = np.array([[best_variant_iou(a, d, variants) for d in detections] for a in annotations])
    return greedy_match(m.reshape(len(annotations), len(detections)), threshold)


def prf1(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    """Precision and recall are reported as 0 when undefined."""
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f


def score_prf1(annotations, detections, matcher=match_rect_multiscale) -> tuple[float, float, float]:
    res = matcher(annotations, detections)
    return prf1(res.tp, res.fp, res.fn)


def score_prf1_images(per_image: dict, matcher=match_rect_multiscale) -> tuple[float, float, float]:
    tp = fp = fn = 0
    for anns, dets in per_image.values():
        res = matcher(anns, dets)
        tp, fp, fn = tp + res.tp, fp + res.fp, fn + res.fn
    return prf1(tp, fp, fn)


def sweep_min_neighbors(per_image: dict, values=(1, 2, 3), matcher=match_rect_multiscale):
    """F1 per minNeighbors value and their mean.

    ``per_image`` maps image id to ``(annotations, records)`` where records
    carry ``neighbors``; a cluster survives minNeighbors m iff its size is at
    least m, so filtering the m=1 output reproduces a detector rerun.
    """
    rows = []
    for m in values:
        sub = {k: (a, [_record_rect(r) for r in recs if r["neighbors"] >= m])
               for k, (a, recs) in per_image.items()}
        rows.append((m, *score_prf1_images(sub, matcher)))
    return rows, (sum(r[3] for r in rows) / len(rows) if rows else 0.0)


def _record_rect(r: dict):
    return (float(r["x"]), float(r["y"]), float(r["w"]), float(r["h"]))


# ---------------------------------------------------------------- parsers


def parse_fddb(text: str) -> dict[str, list[Annotation]]:
    """FDDB ellipse list: path line, count line, then one
    ``major minor angle cx cy 1`` line per face."""
    lines = [l.strip() for l in text.splitlines() if l.strip()]
    out: dict[str, list[Annotation]] = {}
    k = 0
    while k < len(lines):
        image = lines[k]
        try:
            n = int(lines[k + 1])
        except (IndexError, ValueError) as exc:
            raise AnnotationError(f"bad face count after {image!r}") from exc
        if k + 2 + n > len(lines):
            raise AnnotationError(f"{image!r}: expected {n} faces, file ends early")
        faces = []
        for line in lines[k + 2:k + 2 + n]:
            parts = line.split()
            if len(parts) < 5:
                raise AnnotationError(f"bad ellipse line {line!r}")
            faces.append(Annotation.ellipse(image, *map(float, parts[:5])))
        out.setdefault(image, []).extend(faces)
        k += 2 + n
    return out


def parse_rect_csv(text: str) -> dict[str, list[Annotation]]:
    """Rows ``image,x,y,w,h``; a header row is skipped."""
    out: dict[str, list[Annotation]] = {}
    for row in csv.reader(io.StringIO(text)):
        if not row or row[0] == "image":
            continue
        if len(row) < 5:
            raise AnnotationError(f"bad rectangle row {row!r}")
        out.setdefault(row[0], []).append(Annotation.rect(row[0], *map(float, row[1:5])))
    return out


def parse_detections_jsonl(text: str) -> dict[str, list[dict]]:
    out: dict[str, list[dict]] = {}
    for n, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            out.setdefault(rec["image"], []).append(rec)
        except (ValueError, KeyError) as exc:
            raise AnnotationError(f"line {n}: bad detection record") from exc
    return out


def join_by_image(annotations: dict, detections: dict):
    """Pair both sides by image id.

    Annotated images without detection records have no detections (a JSONL
    file cannot list an empty result).  Detection ids with no annotation
    entry are returned separately so the caller can warn and exclude them.
    """
    joined = {k: (annotations[k], detections.get(k, [])) for k in sorted(annotations)}
    return joined, sorted(set(detections) - set(annotations))


def write_csv(rows, header) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


ROC_HEADER = ("threshold", "fp", "tpr", "continuous")
SUMMARY_HEADER = ("protocol", "precision", "recall", "f1", "continuous")
