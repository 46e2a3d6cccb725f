"""Proposal generation and score-guided proposal selection.

Boxes are half-open pixel rectangles ``[x1, x2) x [y1, y2)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple

import cv2
import numpy as np

from .base import check_image, check_score_map

# Box means closer than this count as equal, so boxes whose exact means tie do
# not get ordered by summation round-off.
SCORE_TOL = 1e-9


class Box(NamedTuple):
    x1: int
    y1: int
    x2: int
    y2: int

    @property
    def area(self):
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def is_valid(self, width=None, height=None):
        if not (0 <= self.x1 < self.x2 and 0 <= self.y1 < self.y2):
            return False
        if width is not None and self.x2 > width:
            return False
        if height is not None and self.y2 > height:
            return False
        return True

    def to_list(self):
        return [int(v) for v in self]


@dataclass
class SelectionParams:
    score_threshold: float = 0.4
    iou_threshold: float = 0.5
    inter_threshold: float = 0.8
    max_area_fraction: float = 0.5

    def __post_init__(self):
        for name, v in vars(self).items():
            if not 0.0 < v <= 1.0:
                raise ValueError(f"{name} must lie in (0, 1], got {v}")


def as_box(b):
    return b if isinstance(b, Box) else Box(*(int(v) for v in b))


def _check_box(b, shape):
    b = as_box(b)
    if not b.is_valid(shape[1], shape[0]):
        raise ValueError(f"box {tuple(b)} is not valid inside a {shape[1]}x{shape[0]} image")
    return b


def avg_score(scores, box):
    """Mean score over the pixels of ``box``."""
    s = np.asarray(scores)
    b = _check_box(box, s.shape)
    return float(s[b.y1:b.y2, b.x1:b.x2].mean())


def intersection_area(a, b):
    a, b = as_box(a), as_box(b)
    w = min(a.x2, b.x2) - max(a.x1, b.x1)
    h = min(a.y2, b.y2) - max(a.y1, b.y1)
    return w * h if w > 0 and h > 0 else 0


def iou(a, b):
    a, b = as_box(a), as_box(b)
    inter = intersection_area(a, b)
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


def merge_boxes(a, b):
    """Smallest box covering both inputs."""
    a, b = as_box(a), as_box(b)
    return Box(min(a.x1, b.x1), min(a.y1, b.y1), max(a.x2, b.x2), max(a.y2, b.y2))


class _Scorer:
    """Box averages from a summed-area table."""

    def __init__(self, scores):
        s = np.asarray(scores, dtype=np.float64)
        self.shape = s.shape
        self.table = np.zeros((s.shape[0] + 1, s.shape[1] + 1))
        self.table[1:, 1:] = s.cumsum(0).cumsum(1)

    def __call__(self, b):
        t = self.table
        total = t[b.y2, b.x2] - t[b.y1, b.x2] - t[b.y2, b.x1] + t[b.y1, b.x1]
        return total / b.area


def select_proposals(scores, proposals, params=None, return_sweeps=False):
    """Filter, deduplicate and merge proposals guided by a score map.

    Phase 1 visits proposals in order. A proposal whose mean score exceeds
    the threshold either replaces the first kept box it overlaps with IoU
    above ``iou_threshold`` while scoring higher, or is merged into the first
    kept box whose intersection covers more than ``inter_threshold`` of
    either box (when the merged box still scores above threshold), or is
    appended. Phase 2 repeatedly merges kept pairs with high intersection
    rate until the list length stops changing; a pair whose merge fails the
    score (or area) test keeps the member with the higher intersection rate.
    Boxes must cover less than ``max_area_fraction`` of the image.
    """
    params = params if params is not None else SelectionParams()
    s = check_score_map(scores)
    h, w = s.shape
    max_area = params.max_area_fraction * h * w
    score = _Scorer(s)

    def above(a, b):
        return a > b + SCORE_TOL

    def passes(box):
        return box.area < max_area and above(score(box), params.score_threshold)

    kept = []
    for p in proposals:
        p = _check_box(p, s.shape)
        if p.area >= max_area:
            continue
        sp = score(p)
        if not above(sp, params.score_threshold):
            continue
        placed = False
        for i, q in enumerate(kept):
            if iou(q, p) > params.iou_threshold and above(sp, score(q)):
                kept[i] = p
                placed = True
                break
            inter = intersection_area(q, p)
            if inter / p.area > params.inter_threshold or inter / q.area > params.inter_threshold:
                m = merge_boxes(p, q)
                if passes(m):
                    kept[i] = m
                    placed = True
                    break
        if not placed:
            kept.append(p)

    sweeps = 0
    while kept:
        merged = _merge_sweep(kept, passes, params.inter_threshold)
        sweeps += 1
        if len(merged) == len(kept):
            kept = merged
            break
        kept = merged
    return (kept, sweeps) if return_sweeps else kept


def _merge_sweep(boxes, passes, inter_t):
    """One pass of pairwise merging; each box joins at most one pair."""
    used = [False] * len(boxes)
    out = []
    for i, a in enumerate(boxes):
        if used[i]:
            continue
        used[i] = True
        result = a
        for j in range(i + 1, len(boxes)):
            if used[j]:
                continue
            b = boxes[j]
            inter = intersection_area(a, b)
            ra, rb = inter / a.area, inter / b.area
            if ra > inter_t or rb > inter_t:
                used[j] = True
                m = merge_boxes(a, b)
                if passes(m):
                    result = m
                else:
                    result = a if ra >= rb else b
                break
        out.append(result)
    return out


# -- proposal generators -----------------------------------------------------

GENERATORS: dict[str, Callable] = {}


def register_generator(name, factory):
    """Register ``factory(**kwargs) -> callable(image) -> list[Box]``."""
    GENERATORS[name] = factory


def get_generator(name, **kwargs):
    try:
        factory = GENERATORS[name]
    except KeyError:
        raise ValueError(f"unknown proposal generator {name!r}; known: {sorted(GENERATORS)}") from None
    return factory(**kwargs)


class EdgeProposals:
    """Multi-scale sliding boxes ranked by edge density.

    Edge maps come from Canny; a box's score is the density of edge pixels
    in a band around its border relative to its interior, which favours
    boxes that hug object contours. The top ``max_boxes`` after greedy
    non-maximum suppression are returned.
    """

    def __init__(self, max_boxes=200, scales=(0.08, 0.12, 0.18, 0.26, 0.36, 0.5),
                 aspects=(0.5, 1.0, 2.0), step_fraction=0.25, nms_iou=0.7):
        self.max_boxes = max_boxes
        self.scales = scales
        self.aspects = aspects
        self.step_fraction = step_fraction
        self.nms_iou = nms_iou

    def __call__(self, image):
        img = check_image(image)
        h, w = img.shape[:2]
        gray = cv2.cvtColor(img, cv2.COLOR_RGB2GRAY)
        gray = cv2.GaussianBlur(gray, (5, 5), 1.2)
        edges = (cv2.Canny(gray, 50, 150) > 0).astype(np.float64)
        table = np.zeros((h + 1, w + 1))
        table[1:, 1:] = edges.cumsum(0).cumsum(1)

        def total(x1, y1, x2, y2):
            return table[y2, x2] - table[y1, x2] - table[y2, x1] + table[y1, x1]

        side = min(h, w)
        cands = []
        for sc in self.scales:
            for ar in self.aspects:
                bw = int(round(side * sc * np.sqrt(ar)))
                bh = int(round(side * sc / np.sqrt(ar)))
                if bw < 8 or bh < 8 or bw > w or bh > h:
                    continue
                step = max(2, int(min(bw, bh) * self.step_fraction))
                band = max(2, min(bw, bh) // 8)
                for y1 in range(0, h - bh + 1, step):
                    for x1 in range(0, w - bw + 1, step):
                        x2, y2 = x1 + bw, y1 + bh
                        outer = total(x1, y1, x2, y2)
                        inner = total(x1 + band, y1 + band, x2 - band, y2 - band)
                        score = outer / (bw * bh) + (outer - inner) / (2 * band * (bw + bh))
                        cands.append((score, Box(x1, y1, x2, y2)))
        if not cands:
            return []
        scores = np.array([c[0] for c in cands])
        boxes = np.array([c[1] for c in cands], dtype=np.int64)
        order = np.argsort(-scores, kind="stable")
        areas = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
        keep = []
        for i in order:
            if keep:
                k = np.array(keep)
                iw = np.minimum(boxes[k, 2], boxes[i, 2]) - np.maximum(boxes[k, 0], boxes[i, 0])
                ih = np.minimum(boxes[k, 3], boxes[i, 3]) - np.maximum(boxes[k, 1], boxes[i, 1])
                inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
                if np.any(inter / (areas[k] + areas[i] - inter) > self.nms_iou):
                    continue
            keep.append(i)
            if len(keep) >= self.max_boxes:
                break
        return [Box(*(int(v) for v in boxes[i])) for i in keep]


register_generator("edges", EdgeProposals)


class SegmentProposals:
    """Bounding boxes of colour segments and of adjacent segment pairs.

    Felzenszwalb graph segmentation runs at several scales; every segment
    and every union of two touching segments yields a box, padded by
    ``margin`` pixels. Boxes are ranked by area (largest first) after
    deduplication, so object-sized boxes survive the ``max_boxes`` cut.
    """

    def __init__(self, max_boxes=300, scales=(100, 300, 800), sigma=0.8, min_size_fraction=0.002,
                 margin=2):
        self.max_boxes = max_boxes
        self.scales = scales
        self.sigma = sigma
        self.min_size_fraction = min_size_fraction
        self.margin = margin

    def __call__(self, image):
        from scipy import ndimage
        from skimage.segmentation import felzenszwalb

        img = check_image(image)
        h, w = img.shape[:2]
        min_size = max(8, int(self.min_size_fraction * h * w))
        found = set()
        for sc in self.scales:
            seg = felzenszwalb(img, scale=sc, sigma=self.sigma, min_size=min_size)
            n = int(seg.max()) + 1
            slices = ndimage.find_objects(seg + 1)
            ext = np.array([[s[1].start, s[0].start, s[1].stop, s[0].stop] for s in slices])
            pairs = set()
            for a, b in ((seg[:, :-1], seg[:, 1:]), (seg[:-1, :], seg[1:, :])):
                d = a != b
                lo = np.minimum(a[d], b[d])
                hi = np.maximum(a[d], b[d])
                pairs.update(zip(lo.tolist(), hi.tolist()))
            groups = [(i,) for i in range(n)] + sorted(pairs)
            for g in groups:
                e = ext[list(g)]
                found.add((max(0, int(e[:, 0].min()) - self.margin), max(0, int(e[:, 1].min()) - self.margin),
                           min(w, int(e[:, 2].max()) + self.margin), min(h, int(e[:, 3].max()) + self.margin)))
        boxes = [Box(*b) for b in sorted(found) if b[2] - b[0] >= 4 and b[3] - b[1] >= 4]
        boxes.sort(key=lambda b: -b.area)
        boxes = [b for b in boxes if b.area < h * w]
        return boxes[: self.max_boxes]


class CombinedProposals:
    """Concatenation of several generators' outputs, duplicates dropped."""

    def __init__(self, names=("segments", "edges")):
        self.names = names

    def __call__(self, image):
        out, seen = [], set()
        for name in self.names:
            for b in get_generator(name)(image):
                if tuple(b) not in seen:
                    seen.add(tuple(b))
                    out.append(b)
        return out


register_generator("segments", SegmentProposals)
register_generator("hybrid", CombinedProposals)
